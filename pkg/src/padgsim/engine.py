"""Deterministic discrete-event simulation kernel.

The engine owns the virtual clock, the event heap and the per-instance
execution mechanics (prefill batches, decode iterations, hybrid
iterations).  Routing and intra-instance decisions are delegated to a
strategy object; see :class:`Strategy` for the hooks.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import CapacityError
from .model import (
    InstanceConfig,
    Phase,
    decode_step_time,
    hybrid_step_time,
    kv_bytes_per_token,
    prefill_batch_time,
)
from .workload import Request, SloConfig

log = logging.getLogger(__name__)


class EventKind(enum.IntEnum):
    ARRIVAL = 0
    PREFILL_BATCH_DONE = 1
    DECODE_STEP_DONE = 2
    KV_TRANSFER_DONE = 3
    STATUS_UPDATE = 4
    SCALE_CHECK = 5
    MIGRATION_DONE = 6
    INSTANCE_READY = 7


class Event(NamedTuple):
    time: float
    seq: int
    kind: EventKind
    payload: Any


class Action(enum.Enum):
    START_PREFILL_WINDOW = "prefill"
    CONTINUE_DECODE = "decode"
    HYBRID_ITERATION = "hybrid"
    IDLE = "idle"


@dataclass(slots=True, eq=False)
class RequestRecord:
    id: int
    arrival_time: float
    input_len: int
    true_output_len: int
    app: str = ""
    routed_instance: int | None = None
    instance_arrival: float | None = None
    prefill_end_time: float | None = None
    decode_begin_time: float | None = None
    tokens_generated: int = 0
    completion_time: float | None = None
    deferred: bool = False
    preemptions: int = 0
    kv_transferred: int = 0
    # runtime bookkeeping
    prompt_len: int = 0
    prefilled: int = 0
    judged: bool = False

    @classmethod
    def from_request(cls, r: Request) -> "RequestRecord":
        return cls(r.id, r.arrival_time, r.input_len, r.output_len, r.app, prompt_len=r.input_len)

    @property
    def finished(self) -> bool:
        return self.completion_time is not None


@dataclass(eq=False)
class InstanceState:
    id: int
    cfg: InstanceConfig
    role: str = "mixed"
    phase: Phase = Phase.IDLE
    pending_prefills: deque = field(default_factory=deque)
    ready: list = field(default_factory=list)
    # rid -> offset; tokens generated = iter_count - offset
    active_decodes: dict = field(default_factory=dict)
    kv_tokens: int = 0
    decode_kv_tokens: int = 0
    t_switch: float = 0.0
    status_seq: int = 0
    busy: bool = False
    last_op: Phase | None = None
    iter_count: int = 0
    finish_heap: list = field(default_factory=list)
    new_joins: list = field(default_factory=list)
    accepting: bool = True
    alive: bool = True
    created_at: float = 0.0
    released_at: float | None = None
    busy_time: float = 0.0
    busy_prefill: float = 0.0
    busy_decode: float = 0.0
    stalls: int = 0

    def __post_init__(self) -> None:
        self.kvpt = kv_bytes_per_token(self.cfg.model)
        self.cap_tokens = self.cfg.kv_capacity_tokens

    @property
    def kv_used(self) -> int:
        return self.kv_tokens * self.kvpt

    def resident(self) -> list[int]:
        return [*self.pending_prefills, *self.ready, *self.active_decodes]

    def is_empty(self) -> bool:
        return not (self.pending_prefills or self.ready or self.active_decodes)


@dataclass
class SimulationResult:
    records: list[RequestRecord]
    instances: list[InstanceState]
    routing_log: list[tuple]
    scaling_log: list[tuple]
    end_time: float
    quiescent: bool
    aborted: bool
    slo: SloConfig
    stats: dict
    attainment_samples: list[tuple] = field(default_factory=list)

    @property
    def unfinished(self) -> list[RequestRecord]:
        return [r for r in self.records if not r.finished]


class Strategy:
    """Hook surface the engine calls into.  Subclasses override what they need."""

    name = "base"
    window_mode = False  # prefilled requests wait for the prefill window to close
    admission = "reserve"  # "reserve": check output reservation at batch formation

    def attach(self, sim: "Simulator") -> None:
        self.sim = sim

    def on_arrival(self, rec: RequestRecord) -> None:
        raise NotImplementedError

    def intra_policy(self, inst: InstanceState, now: float) -> Action:
        if inst.pending_prefills:
            return Action.START_PREFILL_WINDOW
        if inst.active_decodes or inst.ready:
            return Action.CONTINUE_DECODE
        return Action.IDLE

    def on_prefilled(self, inst: InstanceState, rids: list[int]) -> None:
        pass

    def on_phase_change(self, inst: InstanceState) -> None:
        pass

    def on_request_complete(self, inst: InstanceState, rid: int) -> None:
        pass

    def on_status_update(self, payload: Any) -> None:
        pass

    def on_transfer_event(self, payload: Any) -> None:
        pass

    def on_instance_released(self, inst: InstanceState) -> None:
        pass

    def hybrid_params(self) -> tuple[int, int]:
        raise NotImplementedError


class Simulator:
    def __init__(self, requests: Sequence[Request], instance_cfgs: Sequence[InstanceConfig],
                 strategy: Strategy, slo: SloConfig, *,
                 max_prefill_batch_tokens: int = 4096,
                 output_reservation: int = 0,
                 horizon: float = math.inf,
                 roles: Sequence[str] | None = None,
                 scaler: Any = None,
                 check_invariants: bool = False,
                 abort_after_violations: int | None = None,
                 watermark_fraction: float = 0.01):
        if max_prefill_batch_tokens < 1:
            raise ValueError("max_prefill_batch_tokens must be >= 1")
        if not requests:
            raise ValueError("workload is empty")
        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self.slo = slo
        self.max_batch = max_prefill_batch_tokens
        self.reserve = output_reservation
        self.horizon = horizon
        self.watermark_fraction = watermark_fraction
        self.check_invariants = check_invariants
        self.abort_after = abort_after_violations
        self.records: dict[int, RequestRecord] = {}
        self.instances: dict[int, InstanceState] = {}
        self.routing_log: list[tuple] = []
        self.scaling_log: list[tuple] = []
        self.attainment_samples: list[tuple] = []
        self.violations = 0
        self.verdicts: list[tuple[float, bool]] = []  # (time known, met both SLOs)
        self.stats = {"events": 0, "preemptions": 0, "prefill_batches": 0,
                      "decode_steps": 0, "deferrals": 0, "kv_bytes_transferred": 0}
        self._last_event_time = -math.inf
        self._aborted = False
        for r in sorted(requests, key=lambda r: (r.arrival_time, r.id)):
            if r.id in self.records:
                raise ValueError(f"duplicate request id {r.id}")
            self.records[r.id] = RequestRecord.from_request(r)
            self.schedule(r.arrival_time, EventKind.ARRIVAL, r.id)
        roles = roles or ["mixed"] * len(instance_cfgs)
        for cfg, role in zip(instance_cfgs, roles):
            self.add_instance(cfg, role)
        self.strategy = strategy
        self.scaler = scaler
        strategy.attach(self)
        if scaler is not None:
            scaler.attach(self)

    # -- event plumbing -------------------------------------------------
    def schedule(self, time: float, kind: EventKind, payload: Any = None) -> Event:
        ev = Event(time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def add_instance(self, cfg: InstanceConfig, role: str = "mixed") -> InstanceState:
        iid = len(self.instances)
        inst = InstanceState(iid, cfg, role=role, t_switch=self.now, created_at=self.now)
        self.instances[iid] = inst
        return inst

    def run(self) -> SimulationResult:
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.PREFILL_BATCH_DONE: self._on_prefill_done,
            EventKind.DECODE_STEP_DONE: self._on_decode_done,
            EventKind.KV_TRANSFER_DONE: self.strategy.on_transfer_event,
            EventKind.STATUS_UPDATE: self.strategy.on_status_update,
            EventKind.SCALE_CHECK: self._on_scale_check,
            EventKind.MIGRATION_DONE: self._on_scale_check,
            EventKind.INSTANCE_READY: self._on_scale_check,
        }
        heap = self._heap
        while heap:
            if heap[0].time > self.horizon:
                break
            ev = heapq.heappop(heap)
            if ev.time < self._last_event_time:
                raise AssertionError("clock moved backwards")
            self._last_event_time = ev.time
            self.now = ev.time
            self.stats["events"] += 1
            if ev.kind in (EventKind.SCALE_CHECK, EventKind.MIGRATION_DONE, EventKind.INSTANCE_READY):
                handlers[ev.kind](ev)
            else:
                handlers[ev.kind](ev.payload)
            if self.check_invariants:
                self.verify_invariants()
            if self._aborted:
                break
            if self._quiescent_requests() and self._only_housekeeping_left():
                break
        return self._result()

    def _quiescent_requests(self) -> bool:
        return self._done_count == len(self.records)

    def _only_housekeeping_left(self) -> bool:
        return all(e.kind in (EventKind.STATUS_UPDATE, EventKind.SCALE_CHECK) for e in self._heap)

    _done_count = 0

    def _result(self) -> SimulationResult:
        for inst in self.instances.values():
            for rid, off in inst.active_decodes.items():
                self.records[rid].tokens_generated = inst.iter_count - off
        recs = [self.records[k] for k in sorted(self.records)]
        quiescent = self._done_count == len(recs)
        if not quiescent:
            log.info("horizon reached with %d unfinished requests", len(recs) - self._done_count)
        return SimulationResult(recs, list(self.instances.values()), self.routing_log,
                                self.scaling_log, self.now, quiescent, self._aborted, self.slo,
                                dict(self.stats), self.attainment_samples)

    # -- request lifecycle ---------------------------------------------
    def _on_arrival(self, rid: int) -> None:
        self.strategy.on_arrival(self.records[rid])

    def assign(self, rec: RequestRecord, inst: InstanceState) -> None:
        """Route ``rec`` to ``inst``'s prefill queue and wake the instance."""
        if not inst.accepting:
            raise ValueError(f"instance {inst.id} is not accepting requests")
        rec.routed_instance = inst.id
        rec.instance_arrival = self.now
        inst.pending_prefills.append(rec.id)
        if self.strategy.window_mode and inst.phase is not Phase.PREFILL:
            self._set_phase(inst, Phase.PREFILL)
        self.kick(inst)

    def kick(self, inst: InstanceState) -> None:
        if inst.busy or not inst.alive:
            return
        act = self.strategy.intra_policy(inst, self.now)
        if act is Action.START_PREFILL_WINDOW:
            self.execute_prefill_window(inst)
        elif act is Action.CONTINUE_DECODE:
            self.execute_decode_iteration(inst)
        elif act is Action.HYBRID_ITERATION:
            self.execute_hybrid_iteration(inst)
        else:
            self._go_idle(inst)

    def _set_phase(self, inst: InstanceState, phase: Phase) -> None:
        if inst.phase is phase:
            return
        inst.phase = phase
        inst.t_switch = self.now
        inst.status_seq += 1
        self.strategy.on_phase_change(inst)

    def retire_instance(self, inst: InstanceState) -> None:
        """Stop routing to ``inst``; it is released once its residents finish."""
        inst.accepting = False
        if not inst.busy:
            self.kick(inst)

    def _go_idle(self, inst: InstanceState) -> None:
        if inst.is_empty():
            self._set_phase(inst, Phase.IDLE)
            if not inst.accepting and inst.alive:
                inst.alive = False
                inst.released_at = self.now
                self.strategy.on_instance_released(inst)
        else:
            inst.stalls += 1

    def _switch_cost(self, inst: InstanceState, op: Phase) -> float:
        prev = inst.last_op
        inst.last_op = op
        if prev is not None and prev is not op:
            return inst.cfg.switch_overhead
        return 0.0

    def _occupy(self, inst: InstanceState, dur: float, op: Phase) -> None:
        inst.busy = True
        inst.busy_time += dur
        if op is Phase.PREFILL:
            inst.busy_prefill += dur
        else:
            inst.busy_decode += dur

    def committed_tokens(self, inst: InstanceState, include_pending: bool = True) -> int:
        """KV tokens held or reserved: each resident counts max(actual, prompt + reservation)."""
        reserve = self.reserve
        recs = self.records
        total = 0
        if include_pending:
            for rid in inst.pending_prefills:
                total += recs[rid].prompt_len + reserve
        for rid in inst.ready:
            r = recs[rid]
            total += max(r.input_len + r.tokens_generated, r.prompt_len + reserve)
        it = inst.iter_count
        for rid, off in inst.active_decodes.items():
            r = recs[rid]
            total += max(r.input_len + it - off, r.prompt_len + reserve)
        return total

    def _headroom(self, inst: InstanceState) -> int:
        return len(inst.active_decodes) + len(inst.ready) + int(self.watermark_fraction * inst.cap_tokens)

    # -- prefill ----------------------------------------------------------
    def form_prefill_batch(self, inst: InstanceState, budget: int | None = None,
                           chunk_cap: int | None = None) -> list[tuple[int, int, int]]:
        """FIFO batch of ``(rid, chunk_len, prior_len)`` under the token budget and KV limits.

        Without ``chunk_cap`` a prompt larger than the remaining budget is
        split and closes the batch; with it every request contributes at
        most ``chunk_cap`` tokens and packing continues.
        """
        budget = self.max_batch if budget is None else budget
        batch = []
        recs = self.records
        free_phys = inst.cap_tokens - inst.kv_tokens - self._headroom(inst)
        reserve_mode = self.strategy.admission == "reserve"
        if reserve_mode:
            free_resv = inst.cap_tokens - self.committed_tokens(inst, include_pending=False)
            # partially prefilled requests already hold their reservation
            for rid in inst.pending_prefills:
                r = recs[rid]
                if r.prefilled:
                    free_resv -= r.prompt_len + self.reserve
        for rid in inst.pending_prefills:
            if budget <= 0:
                break
            r = recs[rid]
            remaining = r.prompt_len - r.prefilled
            chunk = min(remaining, budget)
            if chunk_cap is not None:
                chunk = min(chunk, chunk_cap)
            if chunk > free_phys:
                break
            if reserve_mode and r.prefilled == 0:
                need = r.prompt_len + self.reserve
                if need > free_resv:
                    break
                free_resv -= need
            batch.append((rid, chunk, r.prefilled))
            budget -= chunk
            free_phys -= chunk
            if chunk < remaining and chunk_cap is None:
                break
        return batch

    def execute_prefill_window(self, inst: InstanceState) -> None:
        if not inst.pending_prefills:
            raise ValueError("execute_prefill_window needs pending prefills")
        batch = self.form_prefill_batch(inst)
        if not batch:
            self._memory_fallback(inst)
            return
        self._set_phase(inst, Phase.PREFILL)
        overhead = self._switch_cost(inst, Phase.PREFILL)
        if all(p == 0 for _, _, p in batch):
            dur = prefill_batch_time(inst.cfg, [c for _, c, _ in batch])
        else:
            dur = hybrid_step_time(inst.cfg, 0, 0, [(c, p) for _, c, p in batch])
        dur += overhead
        self._occupy(inst, dur, Phase.PREFILL)
        self.stats["prefill_batches"] += 1
        self.schedule(self.now + dur, EventKind.PREFILL_BATCH_DONE, (inst.id, batch))

    def _memory_fallback(self, inst: InstanceState) -> None:
        """Head-of-queue prompt does not fit: let decodes drain memory instead."""
        if inst.active_decodes or (inst.ready and inst.role != "prefill"):
            if self.strategy.window_mode:
                self._close_window(inst)
            self.execute_decode_iteration(inst)
            return
        if inst.ready or self._holds_foreign_kv(inst):
            inst.stalls += 1  # wait for transfers to release memory
            return
        head = self.records[inst.pending_prefills[0]]
        raise CapacityError(
            f"instance {inst.id}: request {head.id} needs {head.prompt_len} KV tokens, "
            f"capacity {inst.cap_tokens}")

    def _holds_foreign_kv(self, inst: InstanceState) -> bool:
        return inst.kv_tokens > sum(self.records[r].prefilled for r in inst.pending_prefills)

    def _on_prefill_done(self, payload) -> None:
        iid, batch = payload
        inst = self.instances[iid]
        done = []
        recs = self.records
        for rid, chunk, _ in batch:
            r = recs[rid]
            r.prefilled += chunk
            inst.kv_tokens += chunk
            if r.prefilled == r.prompt_len:
                head = inst.pending_prefills.popleft()
                assert head == rid
                if r.prefill_end_time is None:
                    r.prefill_end_time = self.now
                inst.ready.append(rid)
                done.append(rid)
        if done:
            self.strategy.on_prefilled(inst, done)
        if self.strategy.window_mode and not inst.pending_prefills:
            self._close_window(inst)
        # busy stays set through the callbacks above so they cannot start work here
        inst.busy = False
        self.kick(inst)

    def _close_window(self, inst: InstanceState) -> None:
        if inst.phase is Phase.PREFILL:
            self._set_phase(inst, Phase.DECODE if (inst.ready or inst.active_decodes) else Phase.IDLE)

    # -- decode -----------------------------------------------------------
    def _join(self, inst: InstanceState, rid: int) -> None:
        r = self.records[rid]
        off = inst.iter_count - r.tokens_generated
        inst.active_decodes[rid] = off
        inst.decode_kv_tokens += r.input_len + r.tokens_generated
        heapq.heappush(inst.finish_heap, (off + r.true_output_len, rid))
        inst.new_joins.append(rid)

    def _join_ready(self, inst: InstanceState) -> None:
        if inst.ready:
            for rid in inst.ready:
                self._join(inst, rid)
            inst.ready.clear()

    def _preempt_newest(self, inst: InstanceState) -> None:
        rid = next(reversed(inst.active_decodes))
        off = inst.active_decodes.pop(rid)
        r = self.records[rid]
        r.tokens_generated = inst.iter_count - off
        ctx = r.input_len + r.tokens_generated
        inst.kv_tokens -= ctx
        inst.decode_kv_tokens -= ctx
        r.prompt_len = ctx
        r.prefilled = 0
        r.preemptions += 1
        r.instance_arrival = self.now
        if rid in inst.new_joins:
            inst.new_joins.remove(rid)
        inst.pending_prefills.appendleft(rid)
        self.stats["preemptions"] += 1
        log.debug("t=%.3f preempt request %d on instance %d", self.now, rid, inst.id)

    def _ensure_decode_capacity(self, inst: InstanceState) -> None:
        while inst.active_decodes and inst.kv_tokens + len(inst.active_decodes) > inst.cap_tokens:
            self._preempt_newest(inst)

    def _mark_decode_begin(self, inst: InstanceState, t: float) -> None:
        recs = self.records
        for rid in inst.new_joins:
            r = recs[rid]
            if r.decode_begin_time is None:
                r.decode_begin_time = t
                if t - r.arrival_time > self.slo.slo_ttft:
                    self._count_violation(r)
        inst.new_joins.clear()

    def execute_decode_iteration(self, inst: InstanceState) -> None:
        self._join_ready(inst)
        self._ensure_decode_capacity(inst)
        B = len(inst.active_decodes)
        if B == 0:
            self.kick(inst) if inst.pending_prefills else self._go_idle(inst)
            return
        self._set_phase(inst, Phase.DECODE)
        overhead = self._switch_cost(inst, Phase.DECODE)
        self._mark_decode_begin(inst, self.now + overhead)
        dur = overhead + decode_step_time(inst.cfg, B, inst.decode_kv_tokens + B)
        self._occupy(inst, dur, Phase.DECODE)
        self.stats["decode_steps"] += 1
        self.schedule(self.now + dur, EventKind.DECODE_STEP_DONE, (inst.id, B, None))

    def execute_hybrid_iteration(self, inst: InstanceState) -> None:
        chunk_size, token_budget = self.strategy.hybrid_params()
        self._join_ready(inst)
        self._ensure_decode_capacity(inst)
        B = len(inst.active_decodes)
        left = token_budget - B
        chunks = []
        if left > 0 and inst.pending_prefills:
            chunks = self.form_prefill_batch(inst, budget=left, chunk_cap=chunk_size)
        if B == 0 and not chunks:
            if inst.pending_prefills:
                self._memory_fallback(inst)
            else:
                self._go_idle(inst)
            return
        self._set_phase(inst, Phase.DECODE if B else Phase.PREFILL)
        self._mark_decode_begin(inst, self.now)
        dur = hybrid_step_time(inst.cfg, B, inst.decode_kv_tokens + B, [(c, p) for _, c, p in chunks])
        self._occupy(inst, dur, Phase.DECODE if B else Phase.PREFILL)
        self.stats["decode_steps"] += 1
        self.schedule(self.now + dur, EventKind.DECODE_STEP_DONE, (inst.id, B, chunks))

    def _on_decode_done(self, payload) -> None:
        iid, B, chunks = payload
        inst = self.instances[iid]
        if B:
            assert B == len(inst.active_decodes)
            inst.iter_count += 1
            inst.kv_tokens += B
            inst.decode_kv_tokens += B
            heap = inst.finish_heap
            it = inst.iter_count
            while heap and heap[0][0] <= it:
                fi, rid = heapq.heappop(heap)
                off = inst.active_decodes.get(rid)
                r = self.records[rid]
                if off is None or off + r.true_output_len != fi:
                    continue  # stale entry from a preemption
                del inst.active_decodes[rid]
                r.tokens_generated = r.true_output_len
                r.completion_time = self.now
                ctx = r.input_len + r.tokens_generated
                inst.kv_tokens -= ctx
                inst.decode_kv_tokens -= ctx
                self._done_count += 1
                self._judge_completion(r)
                self.strategy.on_request_complete(inst, rid)
        if chunks:
            recs = self.records
            for rid, c, _ in chunks:
                r = recs[rid]
                r.prefilled += c
                inst.kv_tokens += c
                if r.prefilled == r.prompt_len:
                    inst.pending_prefills.remove(rid)
                    if r.prefill_end_time is None:
                        r.prefill_end_time = self.now
                    inst.ready.append(rid)
        inst.busy = False
        self.kick(inst)

    # -- SLO bookkeeping ----------------------------------------------------
    def _count_violation(self, r: RequestRecord) -> None:
        if r.judged:
            return
        r.judged = True
        self.violations += 1
        self.verdicts.append((self.now, False))
        if self.abort_after is not None and self.violations > self.abort_after:
            self._aborted = True

    def _judge_completion(self, r: RequestRecord) -> None:
        if r.judged:
            return
        elapsed = r.completion_time - r.decode_begin_time
        if elapsed > r.tokens_generated * self.slo.slo_tpot:
            self._count_violation(r)
        else:
            r.judged = True
            self.verdicts.append((self.now, True))

    # -- scaling ------------------------------------------------------------
    def _on_scale_check(self, ev: Event) -> None:
        if self.scaler is not None:
            self.scaler.on_event(ev)

    # -- status ---------------------------------------------------------------
    def tokens_generated(self, inst: InstanceState, rid: int) -> int:
        off = inst.active_decodes.get(rid)
        if off is not None:
            return inst.iter_count - off
        return self.records[rid].tokens_generated

    def snapshot(self, inst: InstanceState) -> "InstanceStatus":
        from .padg import InstanceStatus

        recs = self.records
        rids = inst.resident()
        n = len(rids)
        arrival = np.empty(n)
        prompt = np.empty(n, dtype=np.int64)
        first = np.empty(n)
        tokens = np.empty(n, dtype=np.int64)
        active = inst.active_decodes
        it = inst.iter_count
        for i, rid in enumerate(rids):
            r = recs[rid]
            arrival[i] = r.instance_arrival
            prompt[i] = r.prompt_len
            first[i] = r.prefill_end_time if r.prefill_end_time is not None else math.nan
            off = active.get(rid)
            tokens[i] = it - off if off is not None else r.tokens_generated
        return InstanceStatus(
            instance_id=inst.id, snapshot_time=self.now, phase=inst.phase, t_switch=inst.t_switch,
            arrival_times=arrival, prompt_lens=prompt, first_token_times=first,
            tokens_generated=tokens,
            kv_used=self.committed_tokens(inst) * inst.kvpt,
            kv_capacity=inst.cap_tokens * inst.kvpt)

    # -- invariants -------------------------------------------------------------
    def verify_invariants(self) -> None:
        seen: dict[int, int] = {}
        for inst in self.instances.values():
            expect = 0
            for rid in inst.pending_prefills:
                expect += self.records[rid].prefilled
            for rid in inst.ready:
                r = self.records[rid]
                expect += r.input_len + r.tokens_generated
            for rid, off in inst.active_decodes.items():
                expect += self.records[rid].input_len + inst.iter_count - off
            if expect != inst.kv_tokens:
                raise AssertionError(f"KV conservation broken on instance {inst.id}: "
                                     f"{inst.kv_tokens} != {expect}")
            if inst.kv_tokens > inst.cap_tokens:
                raise AssertionError(f"instance {inst.id} over KV capacity")
            for rid in inst.resident():
                if rid in seen:
                    raise AssertionError(f"request {rid} on instances {seen[rid]} and {inst.id}")
                seen[rid] = inst.id
            if inst.phase is Phase.IDLE and not inst.is_empty() and not inst.busy:
                if not (inst.pending_prefills or inst.ready):
                    raise AssertionError(f"instance {inst.id} idle with work")


def run(requests: Iterable[Request], instance_cfgs, strategy: Strategy, slo: SloConfig, **kw) -> SimulationResult:
    return Simulator(list(requests), instance_cfgs, strategy, slo, **kw).run()
