"""Command line: single runs, comparative sweeps, codec utilities.

Exit codes: 0 success, 2 configuration problems, 3 capacity or placement
problems, 1 internal errors. All outputs are UTF-8 and CSV values use a
``.`` decimal separator regardless of locale.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import codec
from .config import (
    RunSpec,
    bundled_workload,
    load_config,
    merge_configs,
    resolve,
)
from .errors import CapacityError, ConfigurationError, SimError
from .run import CSV_COLUMNS, write_csv, write_json

log = logging.getLogger("moesim")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_CAPACITY = 3

COMPARE_METRICS = ["tbt_p99_ms", "throughput_tps", "energy_mj", "dram_accesses"]


def _load_spec_source(ref: str) -> dict[str, str]:
    """A config reference is a path, or failing that a bundled workload."""
    if os.path.exists(ref):
        return load_config(ref)
    if os.sep not in ref and "." not in ref:
        try:
            return bundled_workload(ref)
        except ConfigurationError:
            pass
    raise ConfigurationError(f"config not found: {ref}")


def _cli_overrides(args) -> dict[str, str]:
    over: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        over[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        over["seed"] = str(args.seed)
    if getattr(args, "policy", None):
        over["policy"] = args.policy
    cooling = getattr(args, "cooling", None)
    if cooling in ("on", "off"):
        over["cooling"] = cooling
    return over


def cmd_run(args) -> int:
    cfg = merge_configs(_load_spec_source(args.config), _cli_overrides(args))
    spec = resolve(cfg)
    metrics = spec.execute()
    out = args.out
    write_json(metrics, out, timestamp=not args.no_timestamp)
    stem = out[:-5] if out.endswith(".json") else out
    write_csv([metrics.csv_row()], stem + ".csv", CSV_COLUMNS)
    print(f"{metrics.config_id}: {metrics.iterations} iterations, "
          f"tbt_p99={metrics.tbt_p99_ms:.3f} ms, "
          f"throughput={metrics.throughput_tps:.1f} tok/s, "
          f"energy={metrics.energy_mj:.2f} mJ, throttle={metrics.throttle:.3f}")
    return EXIT_OK


def _compare_specs(args) -> list[RunSpec]:
    base = _load_spec_source(args.workload)
    shared = {k: v for k, v in base.items()
              if k not in ("preset", "policy", "id")}
    if args.seed is not None:
        shared["seed"] = str(args.seed)
    specs: list[RunSpec] = []
    for preset in args.preset or []:
        # each preset runs its native policy on the shared trace
        spec = resolve(merge_configs(shared, {"preset": preset}))
        specs.append(dataclasses.replace(spec, config_id=preset))
    for path in args.config or []:
        cfg = merge_configs(_load_spec_source(path), {})
        cfg.update({k: v for k, v in shared.items()
                    if k.startswith(("model.", "workload.")) or k == "seed"})
        specs.append(resolve(cfg))
    if len(specs) < 2:
        raise ConfigurationError("compare needs at least two specs "
                                 "(--preset and/or --config)")
    seen: dict[str, int] = {}
    for i, spec in enumerate(specs):
        n = seen.get(spec.config_id, 0) + 1
        seen[spec.config_id] = n
        if n > 1:  # keep repeated specs distinguishable in rows and files
            specs[i] = dataclasses.replace(spec,
                                           config_id=f"{spec.config_id}-{n}")
    return specs


def _ratio_row(row: dict, base: dict) -> dict:
    out = dict(row)
    for metric in COMPARE_METRICS:
        denom = base[metric]
        out[f"ratio_{metric}"] = row[metric] / denom if denom else 0.0
    return out


def _render_compare_figures(rows: list[dict], outdir: str) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    cooling_states = sorted({r["cooling"] for r in rows})
    for metric in COMPARE_METRICS:
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        labels = []
        seen = []
        for r in rows:
            if r["config_id"] not in seen:
                seen.append(r["config_id"])
        width = 0.8 / len(cooling_states)
        for i, state in enumerate(cooling_states):
            xs, ys = [], []
            for j, cid in enumerate(seen):
                match = [r for r in rows
                         if r["config_id"] == cid and r["cooling"] == state]
                if match:
                    xs.append(j + i * width)
                    ys.append(match[0][f"ratio_{metric}"])
            label = "cooled" if state else "uncooled"
            ax.bar(xs, ys, width=width * 0.9, label=label)
            for x, y in zip(xs, ys):
                ax.text(x, y, f"{y:.2f}", ha="center", va="bottom", fontsize=7)
        labels = seen
        ax.set_xticks([j + (len(cooling_states) - 1) * width / 2
                       for j in range(len(labels))])
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylabel(f"{metric} (vs {rows[0]['config_id']})")
        ax.axhline(1.0, color="gray", lw=0.8, ls="--")
        if len(cooling_states) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(outdir, f"compare_{metric}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_compare(args) -> int:
    specs = _compare_specs(args)
    os.makedirs(args.out, exist_ok=True)
    cooling_states = {"on": [True], "off": [False],
                      "both": [True, False]}[args.cooling]
    rows: list[dict] = []
    base_by_state: dict[bool, dict] = {}
    for spec in specs:
        for state in cooling_states:
            run_spec = dataclasses.replace(spec, cooling=state)
            metrics = run_spec.execute()
            row = metrics.csv_row()
            row["cooling"] = state
            if state not in base_by_state:
                base_by_state[state] = row
            row = _ratio_row(row, base_by_state[state])
            rows.append(row)
            suffix = "cooled" if state else "uncooled"
            write_json(metrics,
                       os.path.join(args.out, f"{metrics.config_id}-{suffix}.json"),
                       timestamp=not args.no_timestamp)
    columns = (CSV_COLUMNS[:2] + ["cooling"] + CSV_COLUMNS[2:]
               + [f"ratio_{m}" for m in COMPARE_METRICS])
    csv_path = os.path.join(args.out, "compare.csv")
    write_csv(rows, csv_path, columns)
    figures = _render_compare_figures(rows, args.out)
    print(f"wrote {csv_path} and {len(figures)} figures")
    return EXIT_OK


def _synthetic_weights(kind: str, sigma: float, samples: int,
                       seed: int) -> np.ndarray:
    if kind != "gaussian":
        raise ConfigurationError(f"unknown synthetic weight kind {kind!r}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, sigma, samples).astype(np.float32)


def cmd_codec(args) -> int:
    if args.codec_cmd == "roundtrip":
        u = np.arange(1 << 16, dtype=np.uint16)
        low, residual = codec.encode(u)
        exact = int(np.count_nonzero(codec.combine(low, residual) == u))
        ok = exact == u.size
        print(f"roundtrip: {'pass' if ok else 'FAIL'} "
              f"({exact}/{u.size} exact reassemblies)")
        return EXIT_OK if ok else EXIT_INTERNAL
    # profile
    if args.weights:
        try:
            values = np.load(args.weights)
        except OSError as exc:
            raise ConfigurationError(
                f"cannot read weights {args.weights}: {exc}") from exc
        values = np.asarray(values, dtype=np.float32).ravel()
        if values.size == 0:
            raise ConfigurationError(f"weights file {args.weights} is empty")
    else:
        values = _synthetic_weights(args.synthetic, args.sigma, args.samples,
                                    args.seed or 0)
    patterns = codec.bf16_from_float(values)
    rmap, outliers, coverage = codec.build_map(patterns)
    codec.write_map_file(args.out, [(rmap, outliers)])
    print(f"profile: window starts at exponent {rmap.exp_min}, "
          f"coverage {coverage:.6f}, {len(outliers)} outlier exponents, "
          f"map written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moesim",
                                description="MoE accelerator serving simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="execute one serving run")
    run.add_argument("--config", required=True,
                     help="config file path or bundled workload name (w1, w2)")
    run.add_argument("--seed", type=int)
    run.add_argument("--policy", choices=["hrofs", "conventional"])
    run.add_argument("--cooling", choices=["on", "off"])
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config key")
    run.add_argument("--out", required=True, help="JSON output path")
    run.add_argument("--no-timestamp", action="store_true",
                     help="omit the generation timestamp for byte-stable output")
    run.set_defaults(func=cmd_run)

    comp = sub.add_parser("compare", help="run several specs on one workload")
    comp.add_argument("--preset", action="append",
                      help="hardware preset to include (repeatable)")
    comp.add_argument("--config", action="append",
                      help="full config file to include (repeatable)")
    comp.add_argument("--workload", required=True,
                      help="shared workload config path or bundled name")
    comp.add_argument("--seed", type=int)
    comp.add_argument("--cooling", choices=["on", "off", "both"], default="on")
    comp.add_argument("--out", required=True, help="output directory")
    comp.add_argument("--no-timestamp", action="store_true")
    comp.set_defaults(func=cmd_compare)

    cod = sub.add_parser("codec", help="weight codec utilities")
    codsub = cod.add_subparsers(dest="codec_cmd", required=True)
    rt = codsub.add_parser("roundtrip",
                           help="exhaustive 16-bit split/reassemble sweep")
    rt.set_defaults(func=cmd_codec)
    prof = codsub.add_parser("profile", help="build an exponent map file")
    prof.add_argument("--weights", help="npy file of weight values")
    prof.add_argument("--synthetic", default=None,
                      help="synthetic distribution (gaussian)")
    prof.add_argument("--sigma", type=float, default=0.02)
    prof.add_argument("--samples", type=int, default=1_000_000)
    prof.add_argument("--seed", type=int)
    prof.add_argument("--out", required=True, help="map file path")
    prof.set_defaults(func=cmd_codec)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MOESIM_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "codec" and args.codec_cmd == "profile" \
            and not args.weights and not args.synthetic:
        parser.error("codec profile needs --weights or --synthetic")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except SimError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
