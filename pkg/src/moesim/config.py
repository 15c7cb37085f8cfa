"""Layered flat-key run configuration.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment, keys are dotted paths. A run resolves in layers: the hardware
preset named by ``preset``, then the bundled model card named by
``model.preset``, then the file's own keys, then CLI overrides. Later
layers win key by key, so a sweep config is usually a preset name plus a
handful of overrides.

Recognized keys:

    id                        run label used in reports (default derived)
    preset                    hardware preset: a3d1 a3d2 duplex-like neupim-like
    policy                    hrofs | conventional (default from hardware)
    seed                      master seed for routing and the predictor
    cooling                   on | off
    hardware.<field>          numeric override of a preset field
    model.preset              bundled model card: olmoe dsv2lite qwen15moe
    model.name model.d_model model.n_heads model.n_layers model.n_experts
    model.top_k model.d_ffn model.attn model.gqa_groups model.mla_latent
    model.shared_experts model.weight_bits
    workload.requests workload.prefill_len workload.decode_len
    workload.chunk_budget workload.concurrency
    workload.popularity       plateau | zipf
    workload.plateau_top workload.plateau_share workload.zipf_s
    workload.score_alpha      Dirichlet concentration for gate scores
    codec.enabled codec.threshold
    predictor.accuracy
    engine.duration_mode      max | sum
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ConfigurationError
from .hardware import HardwareConfig, get_preset
from .run import RunMetrics, run_serving
from .workload import (
    ModelConfig,
    Request,
    attach_routing,
    plateau_popularity,
    zipf_popularity,
)

_MODEL_KEYS = {
    "name": str, "d_model": int, "n_heads": int, "n_layers": int,
    "n_experts": int, "top_k": int, "d_ffn": int, "attn": str,
    "gqa_groups": int, "mla_latent": int, "shared_experts": int,
    "weight_bits": int,
}

_HW_FLOAT_KEYS = {
    "freq_hz", "hbm_bw_bytes_per_s", "power_cap_cooled_w",
    "power_cap_uncooled_w",
}
_HW_INT_KEYS = {"hbm_bytes", "weight_sram_bytes", "vcache_bytes",
                "hbm_stacks", "simd_units", "simd_macs_per_unit"}

_WORKLOAD_DEFAULTS = {
    "requests": 8, "prefill_len": 64, "decode_len": 64,
    "chunk_budget": 256, "concurrency": 8, "popularity": "plateau",
    "plateau_top": 8, "plateau_share": 0.12, "zipf_s": 1.0,
    "score_alpha": 0.3,
}


def parse_config_text(text: str, origin: str = "<string>") -> dict[str, str]:
    """Flat dotted keys; overriding belongs to layering, not to one file."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigurationError(
                f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read(), origin=path)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def merge_configs(*layers: dict[str, str]) -> dict[str, str]:
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update(layer)
    return merged


def _bundled(section: str, name: str) -> dict[str, str]:
    ref = resources.files("moesim").joinpath(f"data/{section}/{name}.cfg")
    if not ref.is_file():
        raise ConfigurationError(f"no bundled {section[:-1]} named {name!r}")
    return parse_config_text(ref.read_text(encoding="utf-8"),
                             origin=f"{section}/{name}.cfg")


def bundled_model(name: str) -> dict[str, str]:
    return _bundled("models", name)


def bundled_workload(name: str) -> dict[str, str]:
    """Full run config shipped with the package (w1, w2)."""
    return _bundled("workloads", name)


def _to_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


def _to_num(key: str, value: str, kind):
    try:
        return kind(float(value)) if kind is int else kind(value)
    except ValueError:
        raise ConfigurationError(
            f"{key}: expected {kind.__name__}, got {value!r}") from None


def model_from_config(cfg: dict[str, str]) -> ModelConfig:
    layers = {}
    if "model.preset" in cfg:
        card = bundled_model(cfg["model.preset"])
        layers.update({k: v for k, v in card.items() if k.startswith("model.")})
    layers.update({k: v for k, v in cfg.items()
                   if k.startswith("model.") and k != "model.preset"})
    kwargs = {}
    for key, value in layers.items():
        field = key[len("model."):]
        if field not in _MODEL_KEYS:
            raise ConfigurationError(f"unknown model key {key!r}")
        kind = _MODEL_KEYS[field]
        kwargs[field] = value if kind is str else _to_num(key, value, kind)
    if "name" not in kwargs:
        raise ConfigurationError("config does not define a model "
                                 "(set model.preset or model.* keys)")
    return ModelConfig(**kwargs)


def hardware_from_config(cfg: dict[str, str]) -> HardwareConfig:
    hw = get_preset(cfg.get("preset", "a3d1"))
    overrides = {}
    for key, value in cfg.items():
        if not key.startswith("hardware."):
            continue
        field = key[len("hardware."):]
        if field in _HW_FLOAT_KEYS:
            overrides[field] = _to_num(key, value, float)
        elif field in _HW_INT_KEYS:
            overrides[field] = _to_num(key, value, int)
        else:
            raise ConfigurationError(f"unknown hardware key {key!r}")
    return dataclasses.replace(hw, **overrides) if overrides else hw


_KNOWN_PREFIXES = ("model.", "hardware.", "workload.")
_KNOWN_SCALARS = {
    "id", "preset", "policy", "seed", "cooling", "codec.enabled",
    "codec.threshold", "predictor.accuracy", "engine.duration_mode",
}


def _check_keys(cfg: dict[str, str]) -> None:
    for key in cfg:
        if key in _KNOWN_SCALARS or key.startswith(_KNOWN_PREFIXES):
            continue
        raise ConfigurationError(f"unknown config key {key!r}")


@dataclass
class RunSpec:
    """A fully resolved run: hardware, model, workload and knobs."""

    config_id: str
    hardware: HardwareConfig
    model: ModelConfig
    policy: str
    master_seed: int
    cooling: bool
    n_requests: int
    prefill_len: int
    decode_len: int
    chunk_budget: int
    concurrency: int
    popularity: np.ndarray
    score_alpha: float
    codec_enabled: bool
    score_threshold: float
    predictor_accuracy: float
    duration_mode: str

    def build_requests(self) -> list[Request]:
        """Fresh request objects with routing drawn from the master seed."""
        reqs = [Request(rid, self.prefill_len, self.decode_len)
                for rid in range(self.n_requests)]
        attach_routing(reqs, self.popularity, self.model, self.score_alpha,
                       master_seed=self.master_seed)
        return reqs

    def execute(self, requests: list[Request] | None = None) -> RunMetrics:
        return run_serving(
            self.model, requests if requests is not None else self.build_requests(),
            self.hardware, policy=self.policy, master_seed=self.master_seed,
            chunk_budget=self.chunk_budget, concurrency=self.concurrency,
            codec_enabled=self.codec_enabled,
            score_threshold=self.score_threshold,
            predictor_accuracy=self.predictor_accuracy, cooling=self.cooling,
            duration_mode=self.duration_mode, config_id=self.config_id)


def resolve(cfg: dict[str, str]) -> RunSpec:
    """Validate a merged config and materialize every run ingredient."""
    _check_keys(cfg)
    hardware = hardware_from_config(cfg)
    model = model_from_config(cfg)

    w = dict(_WORKLOAD_DEFAULTS)
    for key, value in cfg.items():
        if not key.startswith("workload."):
            continue
        field = key[len("workload."):]
        if field not in w:
            raise ConfigurationError(f"unknown workload key {key!r}")
        kind = type(w[field])
        w[field] = value if kind is str else _to_num(key, value, kind)

    if w["popularity"] == "plateau":
        top = int(w["plateau_top"])
        if not 0 < top < model.n_experts:
            raise ConfigurationError(
                f"workload.plateau_top: {top} does not fit a model with "
                f"{model.n_experts} experts (need 1..{model.n_experts - 1})")
        popularity = plateau_popularity(model.n_experts, top,
                                        float(w["plateau_share"]))
    elif w["popularity"] == "zipf":
        popularity = zipf_popularity(model.n_experts, float(w["zipf_s"]))
    else:
        raise ConfigurationError(
            f"workload.popularity: unknown kind {w['popularity']!r}")

    policy = cfg.get("policy", "hrofs" if hardware.a3d else "conventional")
    if policy not in ("hrofs", "conventional"):
        raise ConfigurationError(f"policy: unknown policy {policy!r}")
    duration_mode = cfg.get("engine.duration_mode", "max")
    if duration_mode not in ("max", "sum"):
        raise ConfigurationError(
            f"engine.duration_mode: expected max or sum, got {duration_mode!r}")

    seed = _to_num("seed", cfg.get("seed", "0"), int)
    config_id = cfg.get("id", f"{hardware.name}-{model.name}-{policy}")
    return RunSpec(
        config_id=config_id,
        hardware=hardware,
        model=model,
        policy=policy,
        master_seed=seed,
        cooling=_to_bool("cooling", cfg.get("cooling", "on")),
        n_requests=int(w["requests"]),
        prefill_len=int(w["prefill_len"]),
        decode_len=int(w["decode_len"]),
        chunk_budget=int(w["chunk_budget"]),
        concurrency=int(w["concurrency"]),
        popularity=popularity,
        score_alpha=float(w["score_alpha"]),
        codec_enabled=_to_bool("codec.enabled", cfg.get("codec.enabled", "true")),
        score_threshold=_to_num("codec.threshold",
                                cfg.get("codec.threshold", "0.45"), float),
        predictor_accuracy=_to_num("predictor.accuracy",
                                   cfg.get("predictor.accuracy", "0.9"), float),
        duration_mode=duration_mode,
    )
