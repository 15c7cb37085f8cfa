"""Systolic array dataflow models.

Two array families are modeled. The stacked array ("a3d") loads operands
through dense vertical vias, so a full tile of inputs lands in one cycle and
a full tile of spatially interleaved weights in the next; ring-connected row
and column buffers then rotate operands so every processing element works on
every compute cycle. The planar array ("nsa") is a classic weight-stationary
grid: weights shift in over R cycles and inputs stream through with the usual
diagonal skew.

All functional simulations operate PE by PE, cycle by cycle, on integer
matrices so equality with a reference matrix product can be asserted exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UnsupportedModeError

GEMM_WS = "gemm_ws"
GEMM_IS = "gemm_is"
GEMM_OS = "gemm_os"
GEMV = "gemv"
GEMV_VCACHE = "gemv_vcache"

GEMM_KINDS = (GEMM_WS, GEMM_IS, GEMM_OS)
GEMV_KINDS = (GEMV, GEMV_VCACHE)
ALL_KINDS = GEMM_KINDS + GEMV_KINDS

KIND_NSA = "nsa"
KIND_A3D = "a3d"


@dataclass(frozen=True)
class ArrayShape:
    """One physical array variant: `count` square instances of size rows x rows."""

    kind: str
    rows: int
    count: int

    def __post_init__(self):
        if self.kind not in (KIND_NSA, KIND_A3D):
            raise ShapeError(f"unknown array kind {self.kind!r}")
        if self.rows < 1 or self.count < 0:
            raise ShapeError("array rows must be >= 1 and count >= 0")

    @property
    def pes_per_instance(self) -> int:
        return self.rows * self.rows

    @property
    def macs_per_cycle(self) -> int:
        """Peak multiply-accumulates per cycle across all instances."""
        return self.pes_per_instance * self.count


@dataclass(frozen=True)
class TileJob:
    """A single-tile workload: (m x k) times (k x n), dims within one array."""

    kind: str
    m: int
    k: int
    n: int

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ShapeError(f"unknown tile kind {self.kind!r}")
        if min(self.m, self.k, self.n) < 1:
            raise ShapeError("tile dims must be positive")
        if self.kind in GEMV_KINDS and self.m != 1:
            raise ShapeError("vector tiles carry exactly one input row")


@dataclass
class CycleTrace:
    """Per-cycle activity record: phase label plus a boolean busy grid."""

    rows: int
    phases: list[str] = field(default_factory=list)
    busy: list[np.ndarray] = field(default_factory=list)

    def append(self, phase: str, busy_grid: np.ndarray) -> None:
        self.phases.append(phase)
        self.busy.append(busy_grid.astype(bool))

    def cycles(self, phase: str | None = None) -> int:
        if phase is None:
            return len(self.phases)
        return sum(1 for p in self.phases if p == phase)

    def busy_counts(self, phase: str | None = None) -> list[int]:
        return [
            int(grid.sum())
            for p, grid in zip(self.phases, self.busy)
            if phase is None or p == phase
        ]

    def to_csv(self, fh) -> None:
        fh.write("cycle,pe_row,pe_col,busy\n")
        for cycle, grid in enumerate(self.busy):
            for r in range(self.rows):
                for c in range(self.rows):
                    fh.write(f"{cycle},{r},{c},{int(grid[r, c])}\n")


@dataclass
class SimResult:
    """Raw drained output grid (still in bus order) plus the cycle trace."""

    raw: np.ndarray
    trace: CycleTrace
    job: TileJob


def interleave(w: np.ndarray) -> np.ndarray:
    """Spatial weight rotation: out[r][c] = w[(r + c) mod n][c].

    Rotating column c upward by c positions lets ring-connected buffers feed
    every row with a distinct reduction index on each cycle.
    """
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError("interleave expects a square matrix")
    n = w.shape[0]
    r = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    return w[(r + c) % n, c]


def deinterleave(w: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`interleave`: out[r][c] = w[(r - c) mod n][c]."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError("deinterleave expects a square matrix")
    n = w.shape[0]
    r = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    return w[(r - c) % n, c]


def _pad_square(x: np.ndarray, rows: int) -> np.ndarray:
    out = np.zeros((rows, rows), dtype=np.int64)
    out[: x.shape[0], : x.shape[1]] = x
    return out


def _check_tile_fit(job: TileJob, array: ArrayShape, x: np.ndarray, w: np.ndarray) -> None:
    if x.shape != (job.m, job.k) or w.shape != (job.k, job.n):
        raise ShapeError("operand shapes do not match the tile job")
    if max(job.m, job.k, job.n) > array.rows:
        raise ShapeError("tile overflows the array")


def _sim_a3d(job: TileJob, x: np.ndarray, w: np.ndarray, rows: int) -> SimResult:
    """Cycle-stepped model of the stacked array for all five tile kinds.

    Load phase is two cycles for any array size: inputs arrive in parallel on
    cycle one, interleaved weights on cycle two. Compute runs exactly `rows`
    cycles with operands riding the ring buffers; the drain bus shares the
    interleaved wiring, so the raw grid always reads back as
    interleave(result) and one de-interleaving circuit serves every mode.
    """
    r_idx = np.arange(rows)[:, None]
    c_idx = np.arange(rows)[None, :]
    xp = _pad_square(x, rows)
    wp = _pad_square(w, rows)
    trace = CycleTrace(rows)
    idle = np.zeros((rows, rows), dtype=bool)
    trace.append("load", idle)  # inputs via vertical vias
    trace.append("load", idle)  # interleaved weights via vertical vias

    in_m = r_idx < job.m
    in_n = c_idx < job.n

    if job.kind == GEMM_OS:
        # Outputs stay in place; inputs rotate right, weights rotate down.
        a = xp[r_idx, (r_idx + c_idx) % rows]
        b = wp[(r_idx + c_idx) % rows, c_idx]
        acc = np.zeros((rows, rows), dtype=np.int64)
        for t in range(rows):
            k_here = (r_idx + c_idx - t) % rows
            trace.append("compute", in_m & in_n & (k_here < job.k))
            acc += a * b
            a = np.roll(a, 1, axis=1)
            b = np.roll(b, 1, axis=0)
        raw = interleave(acc)
    elif job.kind == GEMM_WS:
        # Weights stay; inputs rotate right, partial sums rotate down.
        mov = xp[(r_idx + c_idx) % rows, r_idx]
        ps = np.zeros((rows, rows), dtype=np.int64)
        for t in range(rows):
            row_here = (r_idx + c_idx - t) % rows
            trace.append("compute", (row_here < job.m) & (r_idx < job.k) & in_n)
            ps += mov * wp
            ps = np.roll(ps, 1, axis=0)
            mov = np.roll(mov, 1, axis=1)
        raw = ps
    elif job.kind == GEMM_IS:
        # Inputs stay; weights rotate right, partial sums rotate down.
        sta = xp.T
        mov = wp[r_idx, (r_idx + c_idx) % rows]
        ps = np.zeros((rows, rows), dtype=np.int64)
        for t in range(rows):
            col_here = (r_idx + c_idx - t) % rows
            trace.append("compute", (c_idx < job.m) & (r_idx < job.k) & (col_here < job.n))
            ps += sta * mov
            ps = np.roll(ps, 1, axis=0)
            mov = np.roll(mov, 1, axis=1)
        # Drain wiring for this mode crosses the grid transposed.
        raw = ps[(-r_idx) % rows, (r_idx + c_idx) % rows]
    else:  # GEMV / GEMV_VCACHE share the dataflow; only the weight source differs.
        vec = xp[0]
        k_here = (r_idx + c_idx) % rows
        prod = vec[k_here] * wp[k_here, c_idx]
        busy = (k_here < job.k) & in_n
        acc = prod.copy()
        trace.append("compute", busy)
        for _ in range(rows - 1):
            acc = np.roll(acc, 1, axis=0) + prod
            trace.append("compute", busy)
        raw = acc

    trace.append("drain", idle)
    return SimResult(raw=raw, trace=trace, job=job)


def _sim_nsa(job: TileJob, x: np.ndarray, w: np.ndarray, rows: int) -> SimResult:
    if job.kind == GEMV_VCACHE:
        raise UnsupportedModeError("vector-cache mode exists only on the stacked array")
    if job.kind in (GEMM_IS, GEMM_OS):
        raise UnsupportedModeError("planar array models the weight-stationary flow only")

    trace = CycleTrace(rows)
    idle = np.zeros((rows, rows), dtype=bool)
    for _ in range(rows):  # weights shift in row by row
        trace.append("load", idle)

    k_idx = np.arange(rows)[:, None]
    c_idx = np.arange(rows)[None, :]
    wp = _pad_square(w, rows)

    if job.kind == GEMV:
        # One vector cannot fill the skewed pipeline, so work advances one
        # column of PEs per cycle: utilization is rows/rows^2 = 1/rows.
        y = np.zeros((1, rows), dtype=np.int64)
        compute_cycles = job.n
        for t in range(compute_cycles):
            busy = (c_idx == t) & (k_idx < job.k)
            trace.append("compute", busy)
            y[0, t] = int(np.dot(x[0].astype(np.int64), wp[: job.k, t]))
        total = tile_cycles(job, ArrayShape(KIND_NSA, rows, 1))
        for _ in range(total - rows - compute_cycles):
            trace.append("drain", idle)
        raw = np.repeat(y, rows, axis=0)
        return SimResult(raw=raw, trace=trace, job=job)

    # Weight-stationary stream: input row r enters row k of the grid at cycle
    # r + k and partial sums trickle down, one grid row per cycle.
    xp = np.zeros((job.m, rows), dtype=np.int64)
    xp[:, : job.k] = x
    ps = np.zeros((rows, rows), dtype=np.int64)
    out = np.zeros((job.m, rows), dtype=np.int64)
    stream = job.m + 2 * rows - 2
    for t in range(stream):
        r_here = t - k_idx - c_idx
        busy = (r_here >= 0) & (r_here < job.m) & (k_idx < job.k) & (c_idx < job.n)
        trace.append("compute" if busy.any() else "drain", busy)
        inj = np.where(busy, xp[np.clip(r_here, 0, job.m - 1), k_idx] * wp, 0)
        ps = np.roll(ps, 1, axis=0)
        ps[0, :] = 0
        ps += inj
        done_r = t - (rows - 1) - c_idx[0]
        sel = (done_r >= 0) & (done_r < job.m)
        out[done_r[sel], np.arange(rows)[sel]] = ps[rows - 1, sel]
    # Bottom-row values exit one cycle after their final accumulate.
    raw = out
    return SimResult(raw=raw, trace=trace, job=job)


def functional_sim(job: TileJob, x, w, array: ArrayShape) -> SimResult:
    """Run one tile through the chosen dataflow and return the drained grid.

    For the stacked array the drained grid is still in interleaved bus order:
    apply :func:`deinterleave` and crop to (m, n) to recover the product.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    _check_tile_fit(job, array, x, w)
    if array.kind == KIND_A3D:
        return _sim_a3d(job, x, w, array.rows)
    return _sim_nsa(job, x, w, array.rows)


def sim_matmul(job: TileJob, x, w, array: ArrayShape) -> np.ndarray:
    """Convenience wrapper: functional_sim plus de-interleave plus crop."""
    res = functional_sim(job, x, w, array)
    if array.kind == KIND_A3D:
        full = deinterleave(res.raw)
    else:
        full = res.raw
    return full[: job.m, : job.n]


def tile_cycles(job: TileJob, array: ArrayShape) -> int:
    """Latency in cycles for one tile, including load and drain phases.

    Stacked array: 2 (parallel loads) + rows (compute) + 1 (drain) for every
    kind. Planar array: rows (weight preload) + m + 2*rows - 2 (skewed
    stream-in/out).
    """
    if max(job.m, job.k, job.n) > array.rows:
        raise ShapeError("tile overflows the array")
    if array.kind == KIND_A3D:
        return array.rows + 3
    if job.kind == GEMV_VCACHE:
        raise UnsupportedModeError("vector-cache mode exists only on the stacked array")
    return array.rows + job.m + 2 * array.rows - 2


def schedule_gemm(m: int, k: int, n: int, array: ArrayShape, mode: str = "gemm") -> tuple[int, int]:
    """Tile an (m x k x n) product and return (total_cycles, tile_count).

    Tiles run back to back with no inter-tile overlap, and partial edge tiles
    cost a full tile, so low utilization of a big array shows up honestly.
    """
    if min(m, k, n) < 1:
        raise ShapeError("matmul dims must be positive")
    r = array.rows
    if mode == "gemm":
        tiles = math.ceil(m / r) * math.ceil(k / r) * math.ceil(n / r)
        # edge tiles cost a full tile: stacked latency is m-independent,
        # the planar array pays the full m_t = rows stream anyway
        per_tile = tile_cycles(TileJob(GEMM_WS, r, r, r), array)
        return tiles * per_tile, tiles
    if mode == "gemv":
        tiles = m * math.ceil(k / r) * math.ceil(n / r)
        per_tile = tile_cycles(TileJob(GEMV, 1, min(k, r), min(n, r)), array)
        return tiles * per_tile, tiles
    raise UnsupportedModeError(f"unknown schedule mode {mode!r}")


def stream_gemv_cycles(m: int, k: int, n: int, rows: int) -> int:
    """Cycles for m vectors streamed through one weight panel session.

    Successive vectors of the same panel pipeline through the ring at one
    vector per cycle once the pipeline is full, so a session costs
    panels*m + rows + 2 cycles. A single vector on a single panel degenerates
    to the plain tile latency rows + 3.
    """
    if min(m, k, n) < 1:
        raise ShapeError("stream dims must be positive")
    panels = math.ceil(k / rows) * math.ceil(n / rows)
    return panels * m + rows + 2


@dataclass(frozen=True)
class GemvJob:
    """One vector pass of a decomposed low-reuse product."""

    vector: int
    col_start: int
    col_end: int
    weight_source: str  # "hbm" on first touch of a panel, "vcache" after
    panel_bytes: int


def decompose_low_ai(m: int, k: int, n: int, vcache_bytes: int, element_bytes: int) -> list[GemvJob]:
    """Split an (m x k x n) product into per-vector jobs with panel reuse.

    The k x n weight panel is fetched from backing memory once per panel that
    fits the vector cache and reused by the remaining vectors. Panels wider
    than the cache split column-wise; if even one column exceeds the cache,
    every vector refetches from backing memory and no reuse happens.
    """
    if element_bytes <= 0:
        raise ShapeError("element_bytes must be positive")
    if min(m, k, n) < 1:
        raise ShapeError("matmul dims must be positive")
    col_bytes = k * element_bytes
    jobs: list[GemvJob] = []
    if col_bytes > vcache_bytes:
        panel = k * n * element_bytes
        for v in range(m):
            jobs.append(GemvJob(v, 0, n, "hbm", panel))
        return jobs
    cols_per_panel = min(n, vcache_bytes // col_bytes)
    start = 0
    while start < n:
        end = min(n, start + cols_per_panel)
        panel = k * (end - start) * element_bytes
        for v in range(m):
            source = "hbm" if v == 0 else "vcache"
            jobs.append(GemvJob(v, start, end, source, panel))
        start = end
    return jobs
