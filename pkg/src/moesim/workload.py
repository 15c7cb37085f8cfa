"""Serving workload generation: model geometry, request streams, expert
routing, and chunked-prefill batch planning.

Routing is drawn per request from a child seed of the master seed, so the
same workload produces identical token-to-expert assignments no matter which
scheduling policy or fetch codec runs on top of it. Closed-loop admission is
defined in iteration space (a freed slot admits the next request starting
with the following iteration), which keeps batch compositions identical
across policies as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SchedulingError, ShapeError

ATTN_MHA = "mha"
ATTN_GQA = "gqa"
ATTN_MLA = "mla"


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape parameters that drive cost formulas."""

    name: str
    d_model: int
    n_heads: int
    n_layers: int
    n_experts: int
    top_k: int
    d_ffn: int  # per-expert hidden width
    attn: str = ATTN_MHA
    gqa_groups: int = 1
    mla_latent: int = 0  # 0 picks d_model // 4
    shared_experts: int = 0
    weight_bits: int = 16

    def __post_init__(self):
        if self.attn not in (ATTN_MHA, ATTN_GQA, ATTN_MLA):
            raise ConfigurationError(f"unknown attention kind {self.attn!r}")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must divide evenly into heads")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigurationError("top_k out of range")
        if self.attn == ATTN_GQA and (
                self.gqa_groups < 1 or self.n_heads % self.gqa_groups):
            raise ConfigurationError("gqa_groups must divide n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_kv(self) -> int:
        """Per-token key-or-value width in elements."""
        if self.attn == ATTN_MHA:
            return self.d_model
        if self.attn == ATTN_GQA:
            return self.d_head * self.gqa_groups
        return self.mla_latent or self.d_model // 4

    @property
    def element_bytes(self) -> int:
        return self.weight_bits // 8

    @property
    def expert_bytes(self) -> int:
        """Weight bytes of one expert: three d_model x d_ffn projections."""
        return 3 * self.d_model * self.d_ffn * self.element_bytes

    def kv_bytes_per_token(self, ctx: int) -> int:
        return 2 * ctx * self.d_kv * self.element_bytes

    def qkv_flops(self, tokens: int) -> int:
        return 2 * tokens * self.d_model * (self.d_model + 2 * self.d_kv)

    def attn_flops(self, tokens: int, ctx: int) -> int:
        return 2 * tokens * ctx * self.d_model

    def out_proj_flops(self, tokens: int) -> int:
        return 2 * tokens * self.d_model * self.d_model

    def gating_flops(self, tokens: int) -> int:
        return tokens * self.d_model * self.n_experts

    def expert_flops(self, tokens: int) -> int:
        return 6 * tokens * self.d_model * self.d_ffn


def zipf_popularity(n: int, s: float = 1.0) -> np.ndarray:
    """Normalized rank-frequency profile p_i proportional to 1 / i**s."""
    if n < 1:
        raise ShapeError("need at least one expert")
    raw = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return raw / raw.sum()


def plateau_popularity(n: int, n_top: int, p_top: float) -> np.ndarray:
    """n_top experts at p_top each, the rest sharing the remainder evenly."""
    if not 0 < n_top < n:
        raise ShapeError("plateau size must be between 1 and n-1")
    rest = 1.0 - n_top * p_top
    if rest <= 0:
        raise ConfigurationError("plateau absorbs the whole distribution")
    pop = np.full(n, rest / (n - n_top), dtype=np.float64)
    pop[:n_top] = p_top
    return pop


def poisson_arrival_times(rate_per_s: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if rate_per_s <= 0:
        raise ConfigurationError("arrival rate must be positive")
    return rng.exponential(1.0 / rate_per_s, n).cumsum()


@dataclass
class RoutingTrace:
    """Expert choices and normalized scores for every token slot of a request.

    Token slots cover prefill positions then one slot per decode iteration.
    Arrays are (slots, layers, top_k).
    """

    experts: np.ndarray
    scores: np.ndarray

    def slot(self, token_slot: int, layer: int):
        return self.experts[token_slot, layer], self.scores[token_slot, layer]


def sample_routing(seed_seq: np.random.SeedSequence, n_slots: int,
                   popularity: np.ndarray, n_layers: int, top_k: int,
                   alpha: float) -> RoutingTrace:
    """Draw per-token expert choices with scores.

    Selection adds Gumbel noise to log popularity and keeps the top k, which
    samples experts without replacement in proportion to popularity. Raw
    gate scores come from a Dirichlet draw, sorted so the best-ranked expert
    gets the largest score, then min-max normalized within each token.
    """
    rng = np.random.default_rng(seed_seq)
    n_experts = len(popularity)
    if not 1 <= top_k <= n_experts:
        raise ConfigurationError("top_k out of range")
    logits = np.log(np.maximum(popularity, 1e-300))
    keys = logits[None, None, :] + rng.gumbel(size=(n_slots, n_layers, n_experts))
    part = np.argpartition(-keys, top_k - 1, axis=2)[:, :, :top_k]
    part_keys = np.take_along_axis(keys, part, axis=2)
    order = np.argsort(-part_keys, axis=2, kind="stable")
    experts = np.take_along_axis(part, order, axis=2).astype(np.int16)

    raw = rng.dirichlet(np.full(top_k, alpha), size=(n_slots, n_layers))
    raw = np.sort(raw, axis=2)[:, :, ::-1]  # rank-aligned: best expert, best score
    lo = raw.min(axis=2, keepdims=True)
    hi = raw.max(axis=2, keepdims=True)
    span = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(span > 0, (raw - lo) / span, 1.0)
    return RoutingTrace(experts=experts, scores=scores.astype(np.float32))


@dataclass
class Request:
    rid: int
    prefill_len: int
    decode_len: int
    arrival_time: float = 0.0
    routing: RoutingTrace | None = None
    # mutable serving state
    admit_iter: int = -1
    prefill_done: int = 0
    tokens_emitted: int = 0

    def __post_init__(self):
        if self.prefill_len < 1 or self.decode_len < 1:
            raise ConfigurationError("requests need at least one token each way")

    @property
    def n_slots(self) -> int:
        # prefill positions plus one slot per decode iteration
        return self.prefill_len + self.decode_len - 1

    def decode_slot(self, token_number: int) -> int:
        """Routing slot consumed while generating token_number (2-based)."""
        return self.prefill_len + token_number - 2


@dataclass
class PrefillPiece:
    rid: int
    start: int
    length: int

    @property
    def ctx_end(self) -> int:
        return self.start + self.length


@dataclass
class DecodePiece:
    rid: int
    token_number: int  # 2..decode_len; token 1 comes out of the last prefill piece
    ctx: int  # keys attended: prefill plus previously generated tokens


@dataclass
class IterationBatch:
    index: int
    decode: list[DecodePiece] = field(default_factory=list)
    prefill: list[PrefillPiece] = field(default_factory=list)
    emissions: list[tuple[int, int]] = field(default_factory=list)  # (rid, token_number)
    finishes: list[int] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return len(self.decode) + sum(p.length for p in self.prefill)

    @property
    def has_prefill(self) -> bool:
        return bool(self.prefill)

    @property
    def has_decode(self) -> bool:
        return bool(self.decode)


class Batcher:
    """Stall-free chunked-prefill continuous batching, FCFS.

    Every in-flight decode produces its token each iteration; leftover token
    budget goes to prefill in admission order, splitting the head request.
    """

    def __init__(self, requests: list[Request], chunk_budget: int,
                 concurrency: int, closed_loop: bool = True):
        if chunk_budget < 1 or concurrency < 1:
            raise ConfigurationError("chunk budget and concurrency must be >= 1")
        self.chunk_budget = chunk_budget
        self.concurrency = concurrency
        self.closed_loop = closed_loop
        self.queue: list[Request] = sorted(requests, key=lambda r: (r.arrival_time, r.rid))
        self.active: list[Request] = []
        self.iteration = 0

    def _admit(self, now: float) -> None:
        while self.queue and len(self.active) < self.concurrency:
            if not self.closed_loop and self.queue[0].arrival_time > now:
                break
            req = self.queue.pop(0)
            req.admit_iter = self.iteration
            self.active.append(req)

    def done(self) -> bool:
        return not self.active and not self.queue

    def next_batch(self, now: float = 0.0) -> IterationBatch | None:
        self._admit(now)
        if not self.active:
            if self.queue:
                # open loop only: idle until the next arrival
                return IterationBatch(index=self.iteration)
            return None
        batch = IterationBatch(index=self.iteration)
        for req in self.active:
            if req.prefill_done == req.prefill_len:
                token = req.tokens_emitted + 1
                ctx = req.prefill_len + token - 1
                batch.decode.append(DecodePiece(req.rid, token, ctx))
        budget = self.chunk_budget - len(batch.decode)
        for req in self.active:
            if budget <= 0:
                break
            remaining = req.prefill_len - req.prefill_done
            if remaining == 0:
                continue
            take = min(budget, remaining)
            batch.prefill.append(PrefillPiece(req.rid, req.prefill_done, take))
            budget -= take
        self._apply(batch)
        self.iteration += 1
        return batch

    def _apply(self, batch: IterationBatch) -> None:
        by_id = {r.rid: r for r in self.active}
        finished = []
        for piece in batch.prefill:
            req = by_id[piece.rid]
            req.prefill_done += piece.length
            if req.prefill_done == req.prefill_len:
                req.tokens_emitted = 1
                batch.emissions.append((req.rid, 1))
                if req.decode_len == 1:  # single-token request: no decode phase
                    finished.append(req.rid)
        for piece in batch.decode:
            req = by_id[piece.rid]
            req.tokens_emitted = piece.token_number
            batch.emissions.append((req.rid, piece.token_number))
            if piece.token_number == req.decode_len:
                finished.append(req.rid)
        for rid in finished:
            batch.finishes.append(rid)
            self.active = [r for r in self.active if r.rid != rid]


def plan_closed_loop(requests: list[Request], chunk_budget: int,
                     concurrency: int) -> list[IterationBatch]:
    """Precompute the full iteration sequence for a closed-loop run."""
    for r in requests:
        # rewind serving state so replanning the same requests is safe
        r.admit_iter = -1
        r.prefill_done = 0
        r.tokens_emitted = 0
    batcher = Batcher(requests, chunk_budget, concurrency, closed_loop=True)
    bound = sum(r.prefill_len + r.decode_len for r in requests) + len(requests) + 1
    batches = []
    while not batcher.done():
        batch = batcher.next_batch()
        if batch is None:
            break
        batches.append(batch)
        if len(batches) > bound:
            raise SchedulingError("batch planner failed to make progress")
    return batches


def attach_routing(requests: list[Request], popularity: np.ndarray,
                   model: ModelConfig, alpha: float, master_seed: int) -> None:
    """Draw each request's routing from a child stream of the master seed."""
    if len(popularity) != model.n_experts:
        raise ShapeError("popularity length must match the expert count")
    if not math.isclose(float(np.sum(popularity)), 1.0, rel_tol=1e-9):
        raise ConfigurationError("popularity must sum to one")
    for req in requests:
        seq = np.random.SeedSequence([master_seed, req.rid])
        req.routing = sample_routing(
            seq, req.n_slots, popularity, model.n_layers, model.top_k, alpha)


def expert_token_counts(batch: IterationBatch, requests: dict[int, Request],
                        layer: int, n_experts: int) -> np.ndarray:
    """Tokens per routed expert for one layer of one iteration."""
    counts = np.zeros(n_experts, dtype=np.int64)
    for piece in batch.prefill:
        tr = requests[piece.rid].routing
        sel = tr.experts[piece.start:piece.start + piece.length, layer]
        np.add.at(counts, sel.ravel().astype(np.int64), 1)
    for piece in batch.decode:
        tr = requests[piece.rid].routing
        slot = requests[piece.rid].decode_slot(piece.token_number)
        np.add.at(counts, tr.experts[slot, layer].astype(np.int64), 1)
    return counts
