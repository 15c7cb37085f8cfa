"""Per-iteration operation graphs.

Two builders produce the DAG one serving iteration executes, layer by layer.
The conventional builder funnels every token through shared attention and
gating nodes, so expert work starts only after the whole batch finishes its
attention. The fused builder splits tokens into readiness groups (prefill,
decode routed to heavyweight experts, remaining decode), gives each group
its own projection and gating chain, and carves heavyweight expert work into
tile-row groups that start as soon as their own tokens are ready. Prefill
token groups therefore fill the stacked arrays while decode attention is
still streaming keys, which is where the fused schedule wins its time back.

Expert jobs are banded by per-iteration token count against the hardware
ridge point: at or above it the expert runs as a matrix job, at two tokens
or fewer it streams weights per vector, in between it stages weights once in
the vector cache and streams tokens through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import gate_precision
from .errors import CapacityError, SchedulingError
from .hardware import HardwareConfig
from .memory import ROW_BYTES, ExpertPlacement, expert_fetch
from .workload import IterationBatch, ModelConfig, Request

CLASS_HIGH = "high"
CLASS_MID = "mid"
CLASS_LOW = "low"

LOW_TOKEN_LIMIT = 2

POLICY_CONV = "conventional"
POLICY_FUSED = "hrofs"

FUSED_START_LAYER = 3  # first three layers always run the conventional graph

# memory pipe lanes, high priority first
LANE_DEMAND = 0
LANE_PREFETCH = 1
LANE_STREAM = 2


@dataclass
class OpNode:
    """One schedulable operation with a piecewise cost model.

    Granted n array instances, compute takes units * cycles_per_unit / n
    + overhead cycles (instances drain a shared unit queue, so work splits
    exactly). hbm_bytes go through the shared memory pipe in one of three
    lanes: demand traffic is served FIFO, speculative weight prefetches
    drain whenever the demand lane is idle, and bulk context streams rank
    below both. Nodes with pool None are pure memory transfers.
    """

    op_id: int
    name: str
    layer: int
    pool: str | None
    units: int
    cycles_per_unit: float
    overhead_cycles: float
    hbm_bytes: int
    rows: int
    category: str
    macs: float
    deps: list[int] = field(default_factory=list)
    in_dram: bool = False
    vcache_open: int = 0  # bytes reserved in the vector cache at start
    vcache_close: bool = False  # releases its expert's reservation at end
    lane: int = LANE_DEMAND

    def compute_cycles(self, granted: int) -> float:
        if self.pool is None or self.units == 0:
            return self.overhead_cycles
        if granted < 1:
            raise SchedulingError("compute node scheduled with zero instances")
        return self.units * self.cycles_per_unit / granted + self.overhead_cycles


@dataclass
class IterationPlan:
    nodes: list[OpNode]
    bottleneck: str
    policy: str

    def dump(self, fh) -> None:
        for n in self.nodes:
            fh.write(
                f"{n.op_id:5d} L{n.layer:<2d} {n.name:<28s} pool={n.pool or '-':<5s} "
                f"units={n.units} cpu={n.cycles_per_unit:g} bytes={n.hbm_bytes} "
                f"deps={n.deps}\n")


def classify_expert(tokens: int, hardware: HardwareConfig) -> str:
    """Band an expert by this iteration's token count.

    Full-width expert arithmetic intensity equals its token count, so the
    ridge point is directly a token threshold.
    """
    if tokens >= hardware.ridge_flops_per_byte:
        return CLASS_HIGH
    if tokens <= LOW_TOKEN_LIMIT:
        return CLASS_LOW
    return CLASS_MID


def detect_bottleneck(batch: IterationBatch, requests: dict[int, Request],
                      model: ModelConfig, hardware: HardwareConfig) -> str:
    """Which side of the batch dominates this iteration's critical resource."""
    if not batch.has_prefill:
        return "decode_only"
    if not batch.has_decode:
        return "prefill_only"
    kv_bytes = sum(model.kv_bytes_per_token(d.ctx) for d in batch.decode)
    decode_s = kv_bytes / hardware.hbm_bw_bytes_per_s
    attn_flops = sum(model.attn_flops(p.length, p.ctx_end) for p in batch.prefill)
    prefill_s = attn_flops / hardware.peak_flops
    return "decode_bound" if decode_s >= prefill_s else "prefill_bound"


def _tiles(m: int, k: int, n: int, rows: int) -> int:
    return math.ceil(m / rows) * math.ceil(k / rows) * math.ceil(n / rows)


def _proportional_split(total: int, weights: list[int]) -> list[int]:
    """Integer shares of `total` proportional to `weights`, summing exactly.

    Token groups share tile rows when fused, so a group's cost is its token
    share of the merged tile count, not an independently rounded-up count.
    """
    wsum = sum(weights)
    if wsum == 0:
        return [0] * len(weights)
    raw = [total * w / wsum for w in weights]
    shares = [int(r) for r in raw]
    rema = sorted(range(len(raw)), key=lambda i: (raw[i] - shares[i], -i),
                  reverse=True)
    for i in rema[:total - sum(shares)]:
        shares[i] += 1
    return shares


class _PlanBuilder:
    """Shared machinery for both policies over one iteration."""

    def __init__(self, batch: IterationBatch, requests: dict[int, Request],
                 model: ModelConfig, hardware: HardwareConfig,
                 placements: dict[tuple[int, int], ExpertPlacement],
                 codec_enabled: bool, score_threshold: float,
                 predictor_accuracy: float, master_seed: int):
        self.batch = batch
        self.requests = requests
        self.model = model
        self.hw = hardware
        self.placements = placements
        self.codec_enabled = codec_enabled and hardware.a3d is not None
        self.score_threshold = score_threshold
        self.predictor_accuracy = predictor_accuracy
        self.master_seed = master_seed
        self.nodes: list[OpNode] = []
        self.last_decode_attn: int | None = None
        self.nsa_rows = hardware.nsa.rows if hardware.nsa else 0
        self.nsa_tile_cycles = 4 * self.nsa_rows - 2 if hardware.nsa else 0
        self.a3d_rows = hardware.a3d.rows if hardware.a3d else 0
        self.gemv_rows = self.a3d_rows or 16

    # -- node factory ------------------------------------------------------

    def add(self, name: str, layer: int, pool: str | None, units: int,
            cpu: float, deps: list[int], overhead: float = 0.0,
            hbm_bytes: int = 0, rows: int = 0, category: str = "",
            macs: float = 0.0, in_dram: bool = False,
            vcache_open: int = 0, vcache_close: bool = False,
            lane: int = LANE_DEMAND) -> int:
        op_id = len(self.nodes)
        self.nodes.append(OpNode(
            op_id, name, layer, pool, units, cpu, overhead, hbm_bytes, rows,
            category, macs, list(deps), in_dram, vcache_open, vcache_close,
            lane))
        return op_id

    # -- dense ops ---------------------------------------------------------

    def gemm_pool(self) -> str:
        return "nsa" if self.hw.nsa else "simd"

    def dense_gemm(self, name: str, layer: int, m: int, k: int, n: int,
                   deps: list[int], weight_bytes: int, category: str,
                   units_override: int | None = None) -> int:
        macs = m * k * n
        if self.hw.nsa:
            units = _tiles(m, k, n, self.nsa_rows) \
                if units_override is None else units_override
            cpu = self.nsa_tile_cycles
            pool = "nsa"
        else:
            units = self.hw.simd_units
            cpu = macs / self.hw.simd_units / self.hw.simd_macs_per_unit
            pool = "simd"
        return self.add(name, layer, pool, units, cpu, deps,
                        hbm_bytes=weight_bytes,
                        rows=math.ceil(weight_bytes / ROW_BYTES),
                        category=category, macs=macs)

    def qkv(self, layer: int, tokens: int, deps: list[int],
            name: str = "qkv_proj", charge_weights: bool = True,
            units_override: int | None = None) -> int:
        m = self.model
        wbytes = m.d_model * (m.d_model + 2 * m.d_kv) * m.element_bytes \
            if charge_weights else 0
        return self.dense_gemm(name, layer, tokens, m.d_model,
                               m.d_model + 2 * m.d_kv, deps, wbytes,
                               "dense_weights", units_override)

    def out_proj(self, name: str, layer: int, tokens: int, deps: list[int],
                 charge_weights: bool, units_override: int | None = None) -> int:
        m = self.model
        wbytes = m.d_model * m.d_model * m.element_bytes if charge_weights else 0
        return self.dense_gemm(name, layer, tokens, m.d_model, m.d_model,
                               deps, wbytes, "dense_weights", units_override)

    def gating(self, name: str, layer: int, tokens: int, deps: list[int],
               charge_weights: bool, units_override: int | None = None) -> int:
        m = self.model
        wbytes = m.d_model * m.n_experts * m.element_bytes if charge_weights else 0
        return self.dense_gemm(name, layer, tokens, m.d_model, m.n_experts,
                               deps, wbytes, "dense_weights", units_override)

    def dense_shares(self, counts: list[int], n_out: int) -> list[int]:
        """Tile shares of one merged projection over fused token groups."""
        m = self.model
        if not self.hw.nsa:
            return [0] * len(counts)
        merged = _tiles(sum(counts), m.d_model, n_out, self.nsa_rows)
        return _proportional_split(merged, counts)

    def prefill_attention(self, layer: int, deps: list[int]) -> int | None:
        if not self.batch.has_prefill:
            return None
        m = self.model
        units = 0
        macs = 0
        kv_bytes = 0
        for piece in self.batch.prefill:
            ctx = piece.ctx_end
            units += _tiles(piece.length, m.d_model, ctx, self.nsa_rows or 32)
            units += _tiles(piece.length, ctx, m.d_model, self.nsa_rows or 32)
            macs += piece.length * ctx * m.d_model * 2
            kv_bytes += (ctx * 2 * m.d_kv + piece.length * 2 * m.d_kv) * m.element_bytes
        if self.hw.nsa:
            pool, cpu = "nsa", self.nsa_tile_cycles
        else:
            pool = "simd"
            units = self.hw.simd_units
            cpu = macs / units / self.hw.simd_macs_per_unit
        return self.add("attn_prefill", layer, pool, units, cpu, deps,
                        hbm_bytes=kv_bytes, rows=math.ceil(kv_bytes / ROW_BYTES),
                        category="kv_cache", macs=macs)

    def decode_kv_bytes(self, pieces) -> int:
        m = self.model
        return sum(m.kv_bytes_per_token(d.ctx) + 2 * m.d_kv * m.element_bytes
                   for d in pieces)

    def kv_stream_node(self, name: str, layer: int, pieces,
                       deps: list[int]) -> int:
        """Bank-side context stream detached from its attention kernel.

        The cached keys and values are static within the iteration, so the
        transfer only needs pipe bandwidth, not upstream compute. It rides
        the lowest pipe lane and is anchored one layer ahead at most.
        """
        kv_bytes = self.decode_kv_bytes(pieces)
        return self.add(name, layer, None, 0, 0.0, deps, hbm_bytes=kv_bytes,
                        rows=math.ceil(kv_bytes / ROW_BYTES),
                        category="kv_cache", lane=LANE_STREAM)

    def decode_attention(self, name: str, layer: int, pieces, deps: list[int],
                         external_kv: bool = False) -> int | None:
        if not pieces:
            return None
        m = self.model
        macs = sum(2 * d.ctx * m.d_model for d in pieces) // 2
        kv_bytes = 0 if external_kv else self.decode_kv_bytes(pieces)
        units = 2 * m.n_heads * len(pieces)
        if self.hw.a3d:
            pool = "a3d"
            per_inst = self.hw.a3d.pes_per_instance
            in_dram = False
        else:
            pool = "simd"
            per_inst = self.hw.simd_macs_per_unit
            in_dram = self.hw.simd_in_dram
        cpu = macs / units / per_inst
        nid = self.add(name, layer, pool, units, cpu, deps,
                       hbm_bytes=kv_bytes, rows=math.ceil(kv_bytes / ROW_BYTES),
                       category="kv_cache", macs=macs, in_dram=in_dram)
        self.last_decode_attn = nid
        return nid

    # -- expert analysis ---------------------------------------------------

    def layer_expert_stats(self, layer: int):
        """Per-expert token counts split by group, plus the best score seen.

        Returns dict expert -> dict(prefill, decode_hd, decode_rd, score)
        and the set of decode pieces routed to at least one heavyweight
        expert. Shared experts take every token and the full score.
        """
        m = self.model
        totals: dict[int, int] = {}
        stats: dict[int, dict] = {}

        def bump(e: int, kind: str, score: float):
            s = stats.setdefault(e, {"prefill": 0, "decode_hd": 0, "decode_rd": 0,
                                     "score": 0.0})
            s[kind] += 1
            s["score"] = max(s["score"], score)

        selections = []  # (piece kind, experts, scores)
        for piece in self.batch.prefill:
            tr = self.requests[piece.rid].routing
            sel = tr.experts[piece.start:piece.start + piece.length, layer]
            sc = tr.scores[piece.start:piece.start + piece.length, layer]
            selections.append(("prefill", sel, sc))
            for e in sel.ravel().tolist():
                totals[e] = totals.get(e, 0) + 1
        decode_sel = []
        for piece in self.batch.decode:
            req = self.requests[piece.rid]
            slot = req.decode_slot(piece.token_number)
            sel = req.routing.experts[slot, layer]
            sc = req.routing.scores[slot, layer]
            decode_sel.append((piece, sel, sc))
            for e in sel.tolist():
                totals[e] = totals.get(e, 0) + 1
        n_tokens = self.batch.tokens
        for s in range(m.shared_experts):
            totals[m.n_experts + s] = n_tokens

        classes = {e: classify_expert(t, self.hw) for e, t in totals.items()}
        high = {e for e, c in classes.items() if c == CLASS_HIGH}

        for kind, sel, sc in selections:
            for row, score_row in zip(sel, sc):
                for e, s in zip(row.tolist(), score_row.tolist()):
                    bump(e, "prefill", float(s))
        hd_pieces = []
        for piece, sel, sc in decode_sel:
            is_hd = any(e in high for e in sel.tolist())
            if is_hd:
                hd_pieces.append(piece)
            for e, s in zip(sel.tolist(), sc.tolist()):
                bump(e, "decode_hd" if is_hd else "decode_rd", float(s))
        n_prefill = sum(p.length for p in self.batch.prefill)
        n_hd = len(hd_pieces)
        n_rd = len(self.batch.decode) - n_hd
        for s in range(m.shared_experts):
            e = m.n_experts + s
            stats[e] = {"prefill": n_prefill, "decode_hd": n_hd,
                        "decode_rd": n_rd, "score": 1.0}
        return stats, classes, hd_pieces

    def fetch_precision(self, expert: int, score: float) -> str:
        if not self.codec_enabled:
            return "bf16"
        shared = expert >= self.model.n_experts
        return gate_precision(score, self.score_threshold, shared=shared)

    def expert_fetch_node(self, layer: int, expert: int, precision: str,
                          deps: list[int], vcache_open: int = 0,
                          category: str = "expert_weights",
                          lane: int = LANE_DEMAND) -> int:
        f = expert_fetch(self.placements[(layer, expert)], precision)
        return self.add(f"fetch_e{expert}", layer, None, 0, 0.0, deps,
                        hbm_bytes=f.nbytes, rows=f.rows, category=category,
                        macs=0.0, vcache_open=vcache_open, lane=lane)

    def expert_row_tiles(self) -> int:
        """Array tiles to push one tile-row of tokens through one expert."""
        m = self.model
        r = self.a3d_rows or self.nsa_rows
        return (2 * math.ceil(m.d_model / r) * math.ceil(m.d_ffn / r)
                + math.ceil(m.d_ffn / r) * math.ceil(m.d_model / r))

    def gemv_panels(self) -> int:
        m = self.model
        r = self.gemv_rows
        return (2 * math.ceil(m.d_model / r) * math.ceil(m.d_ffn / r)
                + math.ceil(m.d_ffn / r) * math.ceil(m.d_model / r))

    def expert_gemm_node(self, name: str, layer: int, expert: int, tokens: int,
                         deps: list[int], array: str | None = None,
                         vcache_close: bool = False) -> int:
        m = self.model
        macs = 3 * tokens * m.d_model * m.d_ffn
        if self.hw.a3d and array != "nsa":
            rows = self.a3d_rows
            units = math.ceil(tokens / rows) * self.expert_row_tiles()
            return self.add(name, layer, "a3d", units, rows + 3, deps,
                            macs=macs, vcache_close=vcache_close)
        units = _tiles(tokens, m.d_model, m.d_ffn, self.nsa_rows) * 2 \
            + _tiles(tokens, m.d_ffn, m.d_model, self.nsa_rows)
        return self.add(name, layer, "nsa", units, self.nsa_tile_cycles, deps, macs=macs)

    def high_array_assign(self, layer: int, stats, classes) -> dict[int, str]:
        """Balance heavyweight experts over both GEMM-capable arrays.

        Longest-processing-time placement against the dense work already
        emitted for the layer. Both policies see the same assignment, so
        an expert costs the same under either schedule.
        """
        if self.hw.a3d is None or not self.hw.nsa:
            return {}
        m = self.model
        caps = self.hw.pools()
        # experts run once gating resolves, so the projection chain upstream
        # does not compete; only stacked-array attention shares their window
        load = {"nsa": 0.0, "a3d": 0.0}
        for n in self.nodes:
            if n.layer == layer and n.pool == "a3d":
                load["a3d"] += n.units * n.cycles_per_unit / caps["a3d"]

        def expert_tokens(e: int) -> int:
            s = stats[e]
            return s["prefill"] + s["decode_hd"] + s["decode_rd"]

        assign: dict[int, str] = {}
        highs = sorted((e for e in stats if classes[e] == CLASS_HIGH),
                       key=lambda e: (-expert_tokens(e), e))
        for e in highs:
            t = expert_tokens(e)
            nsa_units = _tiles(t, m.d_model, m.d_ffn, self.nsa_rows) * 2 \
                + _tiles(t, m.d_ffn, m.d_model, self.nsa_rows)
            cost = {
                "nsa": nsa_units * self.nsa_tile_cycles / caps["nsa"],
                "a3d": math.ceil(t / self.a3d_rows) * self.expert_row_tiles()
                       * (self.a3d_rows + 3) / caps["a3d"],
            }
            pick = min(("a3d", "nsa"), key=lambda p: (load[p] + cost[p], p))
            assign[e] = pick
            load[pick] += cost[pick]
        return assign

    def expert_gemv_node(self, name: str, layer: int, expert: int, tokens: int,
                         deps: list[int], hbm_bytes: int = 0, rows: int = 0,
                         category: str = "", vcache_open: int = 0,
                         vcache_close: bool = False) -> int:
        m = self.model
        macs = 3 * tokens * m.d_model * m.d_ffn
        units = self.gemv_panels()
        if self.hw.a3d:
            pool = "a3d"
            cpu = float(tokens)
            overhead = self.a3d_rows + 2
            in_dram = False
        else:
            pool = "simd"
            panel_macs = macs / units
            cpu = math.ceil(panel_macs / self.hw.simd_macs_per_unit)
            overhead = 0.0
            in_dram = self.hw.simd_in_dram
        return self.add(name, layer, pool, units, cpu, deps, overhead=overhead,
                        hbm_bytes=hbm_bytes, rows=rows, category=category,
                        macs=macs, in_dram=in_dram, vcache_open=vcache_open,
                        vcache_close=vcache_close)

    def moe_expert(self, layer: int, expert: int, cls: str, tokens: int,
                   precision: str, gate_dep: list[int], fetch_dep: list[int],
                   array: str | None = None):
        """Emit the transfer and compute for one expert under the banded
        policy. Streaming classes carry their weight traffic on the compute
        node itself, so the load pipelines under the reuse loop."""
        placement = self.placements[(layer, expert)]
        f = expert_fetch(placement, precision)
        deps = sorted(set(gate_dep) | set(fetch_dep))
        if cls == CLASS_HIGH:
            # heavyweights run as a reuse-friendly GEMM behind one fetch
            fid = self.expert_fetch_node(layer, expert, precision, fetch_dep)
            self.expert_gemm_node(f"moe_e{expert}", layer, expert, tokens,
                                  gate_dep + [fid], array=array)
        elif self.hw.a3d is not None and cls == CLASS_MID:
            if f.nbytes > self.hw.vcache_bytes:
                raise CapacityError("one expert exceeds the vector cache")
            self.expert_gemv_node(f"moe_e{expert}", layer, expert, tokens,
                                  deps, hbm_bytes=f.nbytes, rows=f.rows,
                                  category="expert_weights",
                                  vcache_open=f.nbytes, vcache_close=True)
        else:
            # no reuse: weights stream once per routed token
            self.expert_gemv_node(f"moe_e{expert}", layer, expert, tokens,
                                  deps, hbm_bytes=f.nbytes * tokens,
                                  rows=f.rows * tokens,
                                  category="expert_weights")


def build_conventional(batch, requests, model, hardware, placements,
                       codec_enabled=True, score_threshold=0.45,
                       predictor_accuracy=0.9, master_seed=0) -> IterationPlan:
    b = _PlanBuilder(batch, requests, model, hardware, placements,
                     codec_enabled, score_threshold, predictor_accuracy, master_seed)
    prev_sinks: list[int] = []
    n_tokens = batch.tokens
    for layer in range(model.n_layers):
        prev_sinks = _conventional_layer(b, layer, n_tokens, prev_sinks)
    bott = detect_bottleneck(batch, requests, model, hardware)
    return IterationPlan(b.nodes, bott, POLICY_CONV)


def _conventional_layer(b: _PlanBuilder, layer: int, n_tokens: int,
                        prev_sinks: list[int]) -> list[int]:
    """Phase-serial layer: projections, attention kernels back to back, a
    gating barrier, then every expert."""
    qkv = b.qkv(layer, n_tokens, prev_sinks)
    attns = []
    pa = b.prefill_attention(layer, [qkv])
    if pa is not None:
        attns.append(pa)
    # one kernel at a time: decode attention launches after the prefill one
    da = b.decode_attention("attn_decode", layer, b.batch.decode, [qkv] + attns)
    if da is not None:
        attns.append(da)
    out = b.out_proj("out_proj", layer, n_tokens, attns or [qkv], charge_weights=True)
    gate = b.gating("gating", layer, n_tokens, [out], charge_weights=True)
    stats, classes, _ = b.layer_expert_stats(layer)
    assign = b.high_array_assign(layer, stats, classes)
    sinks = []
    for expert in sorted(stats):
        s = stats[expert]
        tokens = s["prefill"] + s["decode_hd"] + s["decode_rd"]
        precision = b.fetch_precision(expert, s["score"])
        before = len(b.nodes)
        b.moe_expert(layer, expert, classes[expert], tokens, precision,
                     gate_dep=[gate], fetch_dep=[gate],
                     array=assign.get(expert))
        sinks.extend(range(before, len(b.nodes)))
    return [i for i in sinks if b.nodes[i].pool is not None] or [gate]


def _predictor_hits(master_seed: int, iteration: int, layer: int,
                    experts: list[int], accuracy: float) -> dict[int, bool]:
    seq = np.random.SeedSequence([master_seed, 0x9E37, iteration, layer])
    draws = np.random.default_rng(seq).random(len(experts))
    return {e: bool(d < accuracy) for e, d in zip(experts, draws)}


def build_fused(batch, requests, model, hardware, placements,
                codec_enabled=True, score_threshold=0.45,
                predictor_accuracy=0.9, master_seed=0) -> IterationPlan:
    """Readiness-grouped graph: same operation costs as the conventional
    policy, fewer ordering edges. Early layers keep the conventional shape."""
    b = _PlanBuilder(batch, requests, model, hardware, placements,
                     codec_enabled, score_threshold, predictor_accuracy, master_seed)
    bott = detect_bottleneck(batch, requests, model, hardware)
    decode_bound = bott == "decode_bound"
    prev_sinks: list[int] = []
    n_tokens = batch.tokens
    n_prefill = sum(p.length for p in batch.prefill)
    for layer in range(model.n_layers):
        fused = layer >= FUSED_START_LAYER and batch.has_prefill and batch.has_decode
        if not fused:
            prev_sinks = _conventional_layer(b, layer, n_tokens, prev_sinks)
            continue

        stats, classes, hd_pieces = b.layer_expert_stats(layer)
        hd_ids = {p.rid for p in hd_pieces}
        rd_pieces = [p for p in batch.decode if p.rid not in hd_ids]
        n_hd, n_rd = len(hd_pieces), len(rd_pieces)

        # split the projections by readiness group at the merged tile cost
        # (groups pack into shared tile rows); tokens headed for heavyweight
        # experts go through first when decode dominates
        n_hi = n_prefill + n_hd
        qkv_hi = qkv_lo = None
        if n_rd:
            sh_hi, sh_lo = b.dense_shares([n_hi, n_rd],
                                          model.d_model + 2 * model.d_kv)
            if decode_bound:
                qkv_hi = b.qkv(layer, n_hi, prev_sinks, name="qkv_proj_hi",
                               units_override=sh_hi)
                qkv_lo = b.qkv(layer, n_rd, prev_sinks, name="qkv_proj_lo",
                               charge_weights=False, units_override=sh_lo)
            else:
                qkv_lo = b.qkv(layer, n_rd, prev_sinks, name="qkv_proj_lo",
                               units_override=sh_lo)
                qkv_hi = b.qkv(layer, n_hi, prev_sinks, name="qkv_proj_hi",
                               charge_weights=False, units_override=sh_hi)
        else:
            qkv_hi = b.qkv(layer, n_tokens, prev_sinks)
        all_qkv = [q for q in (qkv_hi, qkv_lo) if q is not None]
        out_sh = b.dense_shares([n_prefill, n_hd, n_rd], model.d_model)
        gate_sh = b.dense_shares([n_prefill, n_hd, n_rd], model.n_experts)

        # cached context is static this iteration, so its stream only waits
        # on the previous layer's consumer, not on this layer's projections
        kv_anchor = [b.last_decode_attn] if b.last_decode_attn is not None \
            else list(prev_sinks)
        kv_hd = b.kv_stream_node("kv_stream_hd", layer, hd_pieces,
                                 kv_anchor) if hd_pieces else None
        kv_rd = b.kv_stream_node("kv_stream_rd", layer, rd_pieces,
                                 kv_anchor) if rd_pieces else None

        # per-group attention, projection and gating chains
        gate_p = gate_hd = gate_rd = None
        pa = b.prefill_attention(layer, all_qkv)
        if pa is not None:
            out_p = b.out_proj("out_proj_prefill", layer, n_prefill, [pa],
                               charge_weights=True, units_override=out_sh[0])
            gate_p = b.gating("gating_prefill", layer, n_prefill, [out_p],
                              charge_weights=True, units_override=gate_sh[0])
        da_hd = b.decode_attention("attn_decode_hd", layer, hd_pieces,
                                   [qkv_hi, kv_hd] if kv_hd is not None
                                   else [qkv_hi], external_kv=True)
        if da_hd is not None:
            out_hd = b.out_proj("out_proj_hd", layer, n_hd, [da_hd],
                                charge_weights=pa is None,
                                units_override=out_sh[1])
            gate_hd = b.gating("gating_hd", layer, n_hd, [out_hd],
                               charge_weights=pa is None,
                               units_override=gate_sh[1])
        rd_deps = [qkv_lo] if qkv_lo is not None else list(all_qkv)
        if kv_rd is not None:
            rd_deps.append(kv_rd)
        da_rd = b.decode_attention("attn_decode_rd", layer, rd_pieces,
                                   rd_deps, external_kv=True)
        if da_rd is not None:
            out_rd = b.out_proj("out_proj_rd", layer, n_rd, [da_rd],
                                charge_weights=False, units_override=out_sh[2])
            gate_rd = b.gating("gating_rd", layer, n_rd, [out_rd],
                               charge_weights=False, units_override=gate_sh[2])

        order = [g for g in (gate_p, gate_hd, gate_rd) if g is not None]
        decode_gates = [g for g in (gate_hd, gate_rd) if g is not None]
        assign = b.high_array_assign(layer, stats, classes)
        high_set = sorted(e for e in stats
                          if classes[e] == CLASS_HIGH and e < model.n_experts)
        hits = _predictor_hits(master_seed, batch.index, layer, high_set,
                               predictor_accuracy)

        sinks = []
        for expert in sorted(stats):
            s = stats[expert]
            tokens = s["prefill"] + s["decode_hd"] + s["decode_rd"]
            cls = classes[expert]
            precision = b.fetch_precision(expert, s["score"])
            gate_deps = []
            if s["prefill"] and gate_p is not None:
                gate_deps.append(gate_p)
            if s["decode_hd"] and gate_hd is not None:
                gate_deps.append(gate_hd)
            if s["decode_rd"] and gate_rd is not None:
                gate_deps.append(gate_rd)
            if cls == CLASS_LOW and decode_bound:
                # lightweight experts run after the whole decode side
                gate_deps = sorted(set(gate_deps) | set(decode_gates))
            elif cls == CLASS_HIGH and not decode_bound and gate_p is not None:
                gate_deps = sorted(set(gate_deps) | {gate_p})
            first_gate = [min(gate_deps)] if gate_deps else [order[0]]
            # shared experts are always resident; routed heavyweights are
            # prefetched one layer early when the predictor got them right
            hit = expert >= model.n_experts or hits.get(expert, False)
            before = len(b.nodes)
            if cls == CLASS_HIGH and b.hw.a3d is not None:
                if hit:
                    fid = b.expert_fetch_node(layer, expert, precision,
                                              list(prev_sinks),
                                              lane=LANE_PREFETCH)
                else:
                    fid = b.expert_fetch_node(layer, expert, precision, first_gate)
                b.expert_gemm_node(f"moe_e{expert}", layer, expert, tokens,
                                   gate_deps + [fid], array=assign.get(expert))
            else:
                b.moe_expert(layer, expert, cls, tokens, precision,
                             gate_dep=gate_deps or first_gate,
                             fetch_dep=first_gate, array=assign.get(expert))
            if cls == CLASS_HIGH and expert < model.n_experts and not hit:
                # mispredicted prefetch: the wrong expert streamed in and
                # gets evicted, then the right one reloads on demand
                f = expert_fetch(b.placements[(layer, expert)], precision)
                b.add(f"mispredict_e{expert}", layer, None, 0, 0.0,
                      list(prev_sinks), hbm_bytes=f.nbytes, rows=f.rows,
                      category="expert_weights_mispredict",
                      lane=LANE_PREFETCH)
            sinks.extend(range(before, len(b.nodes)))
        prev_sinks = [i for i in sinks if b.nodes[i].pool is not None] or order
    return IterationPlan(b.nodes, bott, POLICY_FUSED)


def build_plan(policy: str, *args, **kwargs) -> IterationPlan:
    if policy == POLICY_CONV:
        return build_conventional(*args, **kwargs)
    if policy == POLICY_FUSED:
        return build_fused(*args, **kwargs)
    raise SchedulingError(f"unknown policy {policy!r}")
