"""End-to-end serving runs and their metric rollup.

A run drives the closed-loop batcher to a fixed iteration sequence, builds
one operation graph per iteration under the chosen policy, executes each on
the engine, and accumulates latency, traffic and energy. The iteration
sequence depends only on the request set, so both policies see the exact
same trace and per-iteration spans are directly comparable.

Latency bookkeeping uses an emission clock: a token's timestamp is the end
of the iteration that produced it. Time-between-tokens samples are the gaps
between a request's consecutive tokens, starting at the first decoded token
(the one the last prefill chunk emits). Time-to-first-token is that first
token's timestamp.

Power capping is a one-step closed form: if the run's average power exceeds
the cap, the clock is scaled down just enough to meet it, which stretches
every latency by the same factor and leaves energy untouched.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field

from .engine import Engine
from .errors import ConfigurationError, MetricsError
from .hardware import HardwareConfig
from .memory import AccessLedger, EnergyLedger, place_experts
from .scheduler import build_plan
from .workload import ModelConfig, Request, plan_closed_loop

CSV_COLUMNS = ["config_id", "policy", "tbt_p99_ms", "throughput_tps",
               "energy_mj", "dram_accesses", "throttle"]


def nearest_rank(samples: list[float], q: float) -> float:
    """Nearest-rank quantile: smallest sample whose rank covers q."""
    if not samples:
        raise MetricsError("quantile of an empty sample set")
    if not 0.0 < q <= 1.0:
        raise MetricsError(f"quantile {q} outside (0, 1]")
    ordered = sorted(samples)
    rank = math.ceil(q * len(ordered))  # 1-based
    return ordered[min(rank, len(ordered)) - 1]


def tbt_p99(samples: list[float]) -> float:
    return nearest_rank(samples, 0.99)


def apply_throttle(energy_pj: float, walltime_s: float,
                   cap_w: float) -> tuple[float, float]:
    """Clamp average power to the cap by slowing the clock.

    Returns (walltime, frequency factor). Under the cap nothing changes and
    the factor is 1.0. Over it, walltime grows by power/cap so the run draws
    exactly the cap; total energy is the same either way, it just spreads
    over a longer window.
    """
    if walltime_s <= 0.0:
        raise MetricsError("throttle needs a positive walltime")
    if cap_w <= 0.0:
        raise ConfigurationError("power cap must be positive")
    power = energy_pj * 1e-12 / walltime_s
    if power <= cap_w:
        return walltime_s, 1.0
    factor = cap_w / power
    return walltime_s / factor, factor


@dataclass
class RunMetrics:
    """Everything a finished serving run reports."""

    config_id: str
    policy: str
    hardware: str
    model: str
    master_seed: int
    cooling: bool
    duration_mode: str
    iterations: int
    completed_requests: int
    completed_tokens: int
    makespan_cycles: float
    makespan_s: float
    throughput_tps: float
    ttft_s: dict[int, float]
    tbt_samples_s: list[float]
    tbt_p99_ms: float
    energy_pj: dict[str, float]
    energy_total_pj: float
    access_bytes: dict[str, int]
    access_rows: dict[str, int]
    access_events: dict[str, int]
    dram_accesses: int
    avg_power_w: float
    power_cap_w: float
    throttle: float
    iteration_cycles: list[float] = field(default_factory=list)

    @property
    def energy_mj(self) -> float:
        return self.energy_total_pj * 1e-9

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "policy": self.policy,
            "hardware": self.hardware,
            "model": self.model,
            "master_seed": self.master_seed,
            "cooling": self.cooling,
            "duration_mode": self.duration_mode,
            "iterations": self.iterations,
            "completed_requests": self.completed_requests,
            "completed_tokens": self.completed_tokens,
            "makespan_cycles": self.makespan_cycles,
            "makespan_s": self.makespan_s,
            "throughput_tps": self.throughput_tps,
            "ttft_s": {str(k): v for k, v in sorted(self.ttft_s.items())},
            "tbt_samples_s": self.tbt_samples_s,
            "tbt_p99_ms": self.tbt_p99_ms,
            "energy_pj": dict(sorted(self.energy_pj.items())),
            "energy_total_pj": self.energy_total_pj,
            "energy_mj": self.energy_mj,
            "access_bytes": dict(sorted(self.access_bytes.items())),
            "access_rows": dict(sorted(self.access_rows.items())),
            "access_events": dict(sorted(self.access_events.items())),
            "dram_accesses": self.dram_accesses,
            "avg_power_w": self.avg_power_w,
            "power_cap_w": self.power_cap_w,
            "throttle": self.throttle,
            "iteration_cycles": self.iteration_cycles,
        }

    def csv_row(self) -> dict:
        return {
            "config_id": self.config_id,
            "policy": self.policy,
            "tbt_p99_ms": self.tbt_p99_ms,
            "throughput_tps": self.throughput_tps,
            "energy_mj": self.energy_mj,
            "dram_accesses": self.dram_accesses,
            "throttle": self.throttle,
        }


def iterate_serving(model: ModelConfig, requests: list[Request],
                    hardware: HardwareConfig, *, policy: str,
                    master_seed: int = 0, chunk_budget: int = 256,
                    concurrency: int = 32, codec_enabled: bool = True,
                    score_threshold: float = 0.45,
                    predictor_accuracy: float = 0.9,
                    duration_mode: str = "max"):
    """Yield (batch, plan, result) per iteration; the run's ground truth.

    Raises CapacityError before the first iteration when the expert weights
    do not fit the configured memory.
    """
    for r in requests:
        if r.routing is None:
            raise ConfigurationError(
                f"request {r.rid} has no routing trace attached")
    reqs = {r.rid: r for r in requests}
    placements = place_experts(
        model.n_layers, model.n_experts + model.shared_experts,
        model.expert_bytes, hardware.hbm_bytes)
    batches = plan_closed_loop(requests, chunk_budget, concurrency)
    engine = Engine(hardware, duration_mode)
    for batch in batches:
        plan = build_plan(policy, batch, reqs, model, hardware, placements,
                          codec_enabled, score_threshold, predictor_accuracy,
                          master_seed)
        yield batch, plan, engine.run_plan(plan)


def run_serving(model: ModelConfig, requests: list[Request],
                hardware: HardwareConfig, *, policy: str,
                master_seed: int = 0, chunk_budget: int = 256,
                concurrency: int = 32, codec_enabled: bool = True,
                score_threshold: float = 0.45,
                predictor_accuracy: float = 0.9, cooling: bool = True,
                duration_mode: str = "max",
                config_id: str | None = None) -> RunMetrics:
    """Run the full closed loop and fold the iterations into RunMetrics."""
    access = AccessLedger()
    energy = EnergyLedger()
    clock = 0.0
    emit: dict[tuple[int, int], float] = {}
    spans: list[float] = []
    completed: list[int] = []
    for batch, _plan, result in iterate_serving(
            model, requests, hardware, policy=policy, master_seed=master_seed,
            chunk_budget=chunk_budget, concurrency=concurrency,
            codec_enabled=codec_enabled, score_threshold=score_threshold,
            predictor_accuracy=predictor_accuracy,
            duration_mode=duration_mode):
        clock += result.cycles
        spans.append(result.cycles)
        access.merge(result.access)
        energy.merge(result.energy)
        for rid, token in batch.emissions:
            emit[(rid, token)] = clock
        completed.extend(batch.finishes)

    freq = hardware.freq_hz
    by_id = {r.rid: r for r in requests}
    ttft = {rid: emit[(rid, 1)] / freq for rid in completed}
    tbt: list[float] = []
    for rid in completed:
        for token in range(2, by_id[rid].decode_len + 1):
            tbt.append((emit[(rid, token)] - emit[(rid, token - 1)]) / freq)

    total_pj = energy.total_pj()
    cap_w = hardware.power_cap_w(cooling)
    makespan_s, factor = apply_throttle(total_pj, clock / freq, cap_w)
    if factor < 1.0:
        # the whole clock slows down, so every latency stretches alike
        stretch = 1.0 / factor
        ttft = {rid: v * stretch for rid, v in ttft.items()}
        tbt = [v * stretch for v in tbt]

    tokens_out = sum(by_id[rid].decode_len for rid in completed)
    return RunMetrics(
        config_id=config_id or f"{hardware.name}-{model.name}-{policy}",
        policy=policy,
        hardware=hardware.name,
        model=model.name,
        master_seed=master_seed,
        cooling=cooling,
        duration_mode=duration_mode,
        iterations=len(spans),
        completed_requests=len(completed),
        completed_tokens=tokens_out,
        makespan_cycles=clock,
        makespan_s=makespan_s,
        throughput_tps=tokens_out / makespan_s if makespan_s else 0.0,
        ttft_s=ttft,
        tbt_samples_s=tbt,
        tbt_p99_ms=tbt_p99(tbt) * 1e3 if tbt else 0.0,
        energy_pj=dict(sorted(energy.pj.items())),
        energy_total_pj=total_pj,
        access_bytes={c: access.bytes(c) for c in access.categories()},
        access_rows={c: access.rows(c) for c in access.categories()},
        access_events={c: access.events(c) for c in access.categories()},
        dram_accesses=access.rows(),
        avg_power_w=total_pj * 1e-12 / makespan_s if makespan_s else 0.0,
        power_cap_w=cap_w,
        throttle=factor,
        iteration_cycles=spans,
    )


def _atomic_write(path: str, payload: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(metrics: RunMetrics, path: str, timestamp: bool = True) -> None:
    """Dump the full metric set; stable key order, atomic replace."""
    doc = metrics.to_dict()
    if timestamp:
        doc["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv(rows: list[dict], path: str,
              columns: list[str] | None = None) -> None:
    """One flat row per run; `.` decimal separator comes with repr floats."""
    if not rows:
        raise MetricsError("no rows to write")
    cols = columns or list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    _atomic_write(path, buf.getvalue())
