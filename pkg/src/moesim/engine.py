"""Deterministic execution of one iteration's operation graph.

Array instances are pooled per array family. A pool is malleable: an
operation joins the pool queue when its inputs are ready, draws as many
instances as its remaining tile parallelism allows, and instances freed by
finishing operations rebalance to queued work in arrival order. Splitting
one operation into pieces therefore costs the same pool time as running it
merged, provided the pieces are ready.

All traffic to backing memory drains through one shared pipe, so aggregate
bandwidth is respected without modeling channels. The pipe serves three
lanes: demand transfers queue FIFO and always win, speculative weight
prefetches drain while the demand lane is idle, and bulk context streams
rank below both, resuming where they left off whenever higher traffic
preempts them. A node finishes when both its compute and its transfer are
done.

The same inputs always produce the same schedule: ties break on node id and
event sequence numbers, and no wall-clock or hash-order state is consulted.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
import heapq

from .errors import CapacityError, ConfigurationError, SchedulingError
from .hardware import HardwareConfig
from .memory import PATH_SRAM, AccessLedger, EnergyLedger
from .scheduler import IterationPlan, OpNode


@dataclass
class PlanResult:
    cycles: float
    op_end: dict[int, float]
    access: AccessLedger
    energy: EnergyLedger
    op_start: dict[int, float]


class _PoolOp:
    """One operation's share of a malleable instance pool."""

    __slots__ = ("op_id", "work", "overhead", "alloc", "cpu")

    def __init__(self, op_id: int, work: float, overhead: float, cpu: float):
        self.op_id = op_id
        self.work = work  # instance-cycles left
        self.overhead = overhead  # wall cycles after the work drains
        self.alloc = 0
        self.cpu = cpu


class _Pool:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.active: list[_PoolOp] = []  # arrival order
        self.asof = 0.0

    def advance(self, now: float) -> None:
        dt = now - self.asof
        if dt > 0:
            for op in self.active:
                if op.alloc == 0:
                    continue
                drain = op.work / op.alloc
                if dt < drain:
                    op.work -= op.alloc * dt
                else:
                    op.overhead = max(0.0, op.overhead - (dt - drain))
                    op.work = 0.0
        self.asof = now

    def realloc(self) -> None:
        free = self.capacity - sum(op.alloc for op in self.active)
        for op in self.active:
            if free == 0:
                break
            if op.work <= 0.0 or op.cpu <= 0.0:
                continue
            cap = math.ceil(op.work / op.cpu)  # tiles left bound parallelism
            extra = min(free, max(0, cap - op.alloc))
            op.alloc += extra
            free -= extra

    def finish_estimate(self, op: _PoolOp) -> float | None:
        if op.work > 0.0 and op.alloc == 0:
            return None
        if op.work > 0.0:
            return self.asof + op.work / op.alloc + op.overhead
        return self.asof + op.overhead


class Engine:
    """Runs one iteration plan.

    duration_mode picks how a node's transfer and compute combine: "max"
    overlaps them (the default everywhere), "sum" serializes the transfer
    before the compute, kept as a pessimistic sensitivity knob.
    """

    def __init__(self, hardware: HardwareConfig, duration_mode: str = "max"):
        if duration_mode not in ("max", "sum"):
            raise ConfigurationError(f"unknown duration mode {duration_mode!r}")
        self.hw = hardware
        self.bpc = hardware.bytes_per_cycle
        self.duration_mode = duration_mode

    def _transport_path(self, node: OpNode) -> str:
        # presets fix one transport path for all of their traffic; in-DRAM
        # compute shows up in MAC energy, not in a cheaper wire
        return self.hw.transport_path

    def _charge(self, node: OpNode, access: AccessLedger, energy: EnergyLedger) -> None:
        if node.hbm_bytes:
            if node.category:
                access.record(node.category, node.hbm_bytes, node.rows)
            energy.add_transport(self.hw.energy, self._transport_path(node),
                                 node.hbm_bytes)
            energy.add_transport(self.hw.energy, PATH_SRAM, node.hbm_bytes)
        if node.macs:
            energy.add_macs(self.hw.energy, node.macs, in_dram=node.in_dram)

    def run_plan(self, plan: IterationPlan) -> PlanResult:
        nodes = plan.nodes
        pools = {name: _Pool(cap) for name, cap in self.hw.pools().items()}
        for n in nodes:
            if n.pool is not None and n.pool not in pools:
                raise SchedulingError(f"node {n.name} wants missing pool {n.pool!r}")
            if n.vcache_open > self.hw.vcache_bytes:
                raise CapacityError("vector cache smaller than one reservation")

        succ: list[list[int]] = [[] for _ in nodes]
        indeg = [0] * len(nodes)
        for n in nodes:
            for d in n.deps:
                succ[d].append(n.op_id)
                indeg[n.op_id] += 1

        ready = [n.op_id for n in nodes if indeg[n.op_id] == 0]
        heapq.heapify(ready)
        wait_vcache: list[int] = []
        vcache_free = self.hw.vcache_bytes
        vcache_held: dict[int, int] = {}  # op_id of closing node -> bytes
        open_bytes: dict[int, int] = {}  # fetch op_id -> bytes it reserved

        events: list[tuple[float, int, str, int]] = []  # (t, seq, kind, op)
        seq = 0
        demand_free = 0.0  # demand lane cursor
        bg_levels: tuple[deque, deque] = (deque(), deque())  # [op_id, left]
        bg_cur: list | None = None  # entry draining since the last event
        bg_asof = 0.0  # background progress accounted through this time
        bg_est: dict[int, float] = {}  # head op_id -> live completion estimate
        pf_est: dict[int, float] = {}  # op_id -> live pool finish estimate
        pool_ops: dict[int, _PoolOp] = {}
        pipe_goal: dict[int, float] = {}  # op_id -> its demand transfer done
        access = AccessLedger()
        energy = EnergyLedger()
        op_end: dict[int, float] = {}
        op_start: dict[int, float] = {}
        started = [False] * len(nodes)
        finished = 0
        t = 0.0

        def push(when: float, kind: str, op: int):
            nonlocal seq
            heapq.heappush(events, (when, seq, kind, op))
            seq += 1

        def pool_refresh(pool: _Pool) -> None:
            # reallocate freed instances, then refresh finish estimates
            pool.realloc()
            for op in pool.active:
                est = pool.finish_estimate(op)
                if est is not None and pf_est.get(op.op_id) != est:
                    pf_est[op.op_id] = est
                    push(est, "pfinish", op.op_id)

        def bg_drain(now: float) -> None:
            # only the head entry moves; it gets the pipe when demand is clear
            nonlocal bg_asof
            if bg_cur is not None:
                start = max(bg_asof, demand_free)
                if start < now:
                    bg_cur[1] = max(0.0, bg_cur[1] - (now - start) * self.bpc)
            bg_asof = now

        def bg_refresh(now: float) -> None:
            # pick the head across lanes and refresh its completion estimate
            nonlocal bg_cur
            head = next((lv[0] for lv in bg_levels if lv), None)
            if bg_cur is not None and bg_cur is not head:
                bg_est.pop(bg_cur[0], None)  # preempted, estimate now void
            bg_cur = head
            if head is not None:
                est = max(now, demand_free) + head[1] / self.bpc
                if bg_est.get(head[0]) != est:
                    bg_est[head[0]] = est
                    push(est, "bgdone", head[0])

        def start_compute(op_id: int, now: float, pipe_done: float) -> None:
            node = nodes[op_id]
            if node.pool is not None and node.units > 0:
                pool = pools[node.pool]
                pool.advance(now)
                pop = _PoolOp(op_id, node.units * node.cycles_per_unit,
                              node.overhead_cycles, node.cycles_per_unit)
                pool.active.append(pop)
                pool_ops[op_id] = pop
                pipe_goal[op_id] = pipe_done
                pool_refresh(pool)
                return  # completion comes from the pool machinery
            end = max(now + node.compute_cycles(0), pipe_done)
            push(end, "done", op_id)

        def try_start(op_id: int) -> None:
            node = nodes[op_id]
            if node.vcache_open:
                nonlocal vcache_free
                if node.vcache_open > vcache_free:
                    wait_vcache.append(op_id)
                    return  # parked until a session closes
                vcache_free -= node.vcache_open
                open_bytes[op_id] = node.vcache_open
            started[op_id] = True
            op_start[op_id] = t
            self._charge(node, access, energy)
            if node.lane and node.hbm_bytes:
                if node.pool is not None:
                    raise SchedulingError("background transfers cannot hold compute")
                bg_drain(t)
                bg_levels[node.lane - 1].append([op_id, float(node.hbm_bytes)])
                bg_refresh(t)
                return  # completion comes from the background machinery
            if node.hbm_bytes:
                nonlocal demand_free
                bg_drain(t)
                demand_free = max(demand_free, t) + node.hbm_bytes / self.bpc
                pipe_done = demand_free
                bg_refresh(t)
            else:
                pipe_done = t
            if self.duration_mode == "sum" and pipe_done > t:
                push(pipe_done, "xfer", op_id)
                return  # compute begins only once the transfer lands
            start_compute(op_id, t, pipe_done)

        while finished < len(nodes):
            # start everything whose inputs are ready, in node id order
            batch = []
            while ready:
                batch.append(heapq.heappop(ready))
            for op_id in sorted(set(batch)):
                if not started[op_id]:
                    try_start(op_id)
            if not events:
                raise SchedulingError("deadlock: events drained with nodes pending")
            t_next = events[0][0]
            t = t_next
            while events and events[0][0] == t_next:
                _, _, kind, op_id = heapq.heappop(events)
                node = nodes[op_id]
                if kind == "pfinish":
                    if pf_est.get(op_id) != t_next:
                        continue  # superseded by a reallocation
                    pool = pools[node.pool]
                    pool.advance(t_next)
                    pf_est.pop(op_id)
                    pool.active.remove(pool_ops.pop(op_id))
                    pool_refresh(pool)
                    push(max(t_next, pipe_goal.pop(op_id)), "done", op_id)
                elif kind == "xfer":
                    start_compute(op_id, t_next, t_next)
                elif kind == "bgdone":
                    if bg_est.get(op_id) != t_next:
                        continue  # superseded by a later reschedule
                    bg_drain(t_next)
                    bg_est.pop(op_id)
                    bg_levels[node.lane - 1].popleft()
                    bg_cur = None
                    bg_refresh(t_next)
                    push(t_next, "done", op_id)
                elif kind == "done":
                    op_end[op_id] = t_next
                    finished += 1
                    if node.vcache_close:
                        # releases its own reservation or the one handed over
                        vcache_free += vcache_held.pop(op_id, 0)
                        vcache_free += open_bytes.pop(op_id, 0)
                        waiters = wait_vcache
                        wait_vcache = []
                        for w in sorted(waiters):
                            heapq.heappush(ready, w)
                    elif op_id in open_bytes:
                        # hand the session bytes to the closing compute node
                        for s in succ[op_id]:
                            if nodes[s].vcache_close:
                                bytes_open = open_bytes.pop(op_id)
                                vcache_held[s] = vcache_held.get(s, 0) + bytes_open
                                break
                    for s in succ[op_id]:
                        indeg[s] -= 1
                        if indeg[s] == 0:
                            heapq.heappush(ready, s)
        makespan = max(op_end.values(), default=0.0)
        return PlanResult(makespan, op_end, access, energy, op_start)


def longest_path_cycles(plan: IterationPlan, hardware: HardwareConfig) -> float:
    """Resource-oblivious critical path: a hard lower bound on the makespan."""
    pools = hardware.pools()
    bpc = hardware.bytes_per_cycle
    dist = [0.0] * len(plan.nodes)
    for n in plan.nodes:  # emission order is topological
        granted = min(n.units, pools[n.pool]) if n.pool is not None and n.units else 0
        cmp_cycles = n.compute_cycles(granted) if granted or n.pool is None else 0.0
        dur = max(cmp_cycles, n.hbm_bytes / bpc)
        base = max((dist[d] for d in n.deps), default=0.0)
        dist[n.op_id] = base + dur
    return max(dist, default=0.0)


def work_bound_cycles(plan: IterationPlan, hardware: HardwareConfig) -> float:
    """Pool-work and pipe lower bounds, whichever is larger."""
    pools = hardware.pools()
    work: dict[str, float] = {p: 0.0 for p in pools}
    pipe_cycles = 0.0
    for n in plan.nodes:
        if n.pool is not None and n.units:
            work[n.pool] += n.units * n.cycles_per_unit
        pipe_cycles += n.hbm_bytes / hardware.bytes_per_cycle
    pool_bound = max((w / pools[p] for p, w in work.items()), default=0.0)
    return max(pool_bound, pipe_cycles)
