"""Partially disaggregated scheduling.

Each instance alternates between prefill-only windows and decode-only
stretches.  A macro instance routes new requests to the instance it
used last and moves on to the next one only when the SLO/memory
admission check fails, which staggers prefill windows across members.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import Action, EventKind, InstanceState, RequestRecord, Simulator, Strategy
from .errors import CapacityError, StaleStatus
from .model import Phase, prefill_time
from .workload import Request, SloConfig

TTFT, TPOT, KV = "TTFT", "TPOT", "KV"


@dataclass
class InstanceStatus:
    """Snapshot of one instance as the macro scheduler sees it.

    Per-resident arrays are aligned: ``arrival_times`` is when the request
    reached this instance, ``first_token_times`` is NaN until its prefill
    is done.  ``kv_used`` counts committed bytes (held or reserved).
    """

    instance_id: int
    snapshot_time: float
    phase: Phase
    t_switch: float
    arrival_times: np.ndarray
    prompt_lens: np.ndarray
    first_token_times: np.ndarray
    tokens_generated: np.ndarray
    kv_used: int
    kv_capacity: int
    kv_per_token: int = 0

    def __post_init__(self) -> None:
        n = len(self.arrival_times)
        if not (len(self.prompt_lens) == len(self.first_token_times) == len(self.tokens_generated) == n):
            raise ValueError("per-request status arrays must have equal length")
        if n and self.tokens_generated.min() < 0:
            raise ValueError("tokens_generated must be >= 0")


@dataclass(frozen=True)
class ConstraintResult:
    failed: tuple[str, ...] = ()
    t_total: float = 0.0

    @property
    def satisfied(self) -> bool:
        return not self.failed

    def __str__(self) -> str:
        return "ok" if self.satisfied else "+".join(self.failed)


def check_constraints(status: InstanceStatus, req: Request, slo: SloConfig,
                      cost: Callable[[int], float], now: float, *,
                      reserve_tokens: int = 0,
                      staleness_bound: float = math.inf) -> ConstraintResult:
    """Evaluate the TTFT, TPOT and KV-capacity admission constraints.

    All three are evaluated so the routing log records every failure.
    """
    if now - status.snapshot_time > staleness_bound:
        raise StaleStatus(f"instance {status.instance_id}: snapshot age "
                          f"{now - status.snapshot_time:.3f}s > {staleness_bound:.3f}s")
    failed = []
    in_window = status.arrival_times >= status.t_switch
    t_total = cost(req.input_len)
    for n in status.prompt_lens[in_window]:
        t_total += cost(int(n))
    if t_total > slo.slo_ttft:
        failed.append(TTFT)

    decoding = ~in_window & ~np.isnan(status.first_token_times)
    if decoding.any():
        saved = (status.tokens_generated[decoding] * slo.slo_tpot
                 - (now - status.first_token_times[decoding]))
        # fsum: the mean must not depend on summation order
        if math.fsum(saved) / len(saved) < t_total:
            failed.append(TPOT)

    need = (req.input_len + reserve_tokens) * status.kv_per_token
    if need > status.kv_capacity - status.kv_used:
        failed.append(KV)
    return ConstraintResult(tuple(failed), t_total)


@dataclass
class MacroInstance:
    id: int
    instances: list[int]
    prev_idx: int = 0
    macro_queue: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if len(set(self.instances)) != len(self.instances):
            raise ValueError("duplicate instance ids in macro instance")

    def clamp(self) -> None:
        if self.prev_idx >= len(self.instances):
            self.prev_idx = 0


@dataclass(frozen=True)
class RoutingDecision:
    instance_id: int | None  # None means deferred
    outcomes: tuple[tuple[int, ConstraintResult], ...]

    @property
    def deferred(self) -> bool:
        return self.instance_id is None


def inter_schedule(macro: MacroInstance, req: Request, statuses: Mapping, now: float,
                   slo: SloConfig, cost: Callable[[int, int], float], *,
                   reserve_tokens: int = 0, staleness_bound: float = math.inf) -> RoutingDecision:
    """Try the last-routed instance first, then the others cyclically.

    ``cost(instance_id, tokens)`` predicts a prefill duration.
    """
    n = len(macro.instances)
    if n == 0:
        raise ValueError(f"macro instance {macro.id} is empty")
    macro.clamp()
    outcomes = []
    for k in range(n):
        idx = (macro.prev_idx + k) % n
        iid = macro.instances[idx]
        res = check_constraints(statuses[iid], req, slo, lambda t, i=iid: cost(i, t), now,
                                reserve_tokens=reserve_tokens, staleness_bound=staleness_bound)
        outcomes.append((iid, res))
        if res.satisfied:
            macro.prev_idx = idx
            return RoutingDecision(iid, tuple(outcomes))
    return RoutingDecision(None, tuple(outcomes))


def intra_policy(inst: InstanceState, now: float) -> Action:
    """Prefill has priority on arrival; otherwise keep decoding."""
    if inst.pending_prefills:
        return Action.START_PREFILL_WINDOW
    if inst.active_decodes or inst.ready:
        return Action.CONTINUE_DECODE
    return Action.IDLE


class _LiveStatuses(Mapping):
    """Statuses built on demand, so every decision sees a fresh snapshot."""

    def __init__(self, sim: Simulator, routable: set):
        self.sim, self.routable = sim, routable

    def __getitem__(self, iid):
        return self.sim.snapshot(self.sim.instances[iid])

    def __iter__(self):
        return iter(sorted(self.routable))

    def __len__(self):
        return len(self.routable)


def format_outcomes(outcomes) -> str:
    return ";".join(f"{iid}:{res}" for iid, res in outcomes)


class PadgStrategy(Strategy):
    name = "padg"
    window_mode = True
    admission = "physical"  # admission already happened at routing time

    def __init__(self, macro_sizes: Sequence[int], *, status_period: float = 0.05,
                 staleness_factor: float = 4.0, reserve_tokens: int | None = None):
        if not macro_sizes or min(macro_sizes) < 1:
            raise ValueError("macro_sizes must be a nonempty list of positive sizes")
        if status_period <= 0:
            raise ValueError("status_period must be > 0")
        self.macro_sizes = list(macro_sizes)
        self.status_period = status_period
        self.staleness_bound = staleness_factor * status_period
        self.reserve_override = reserve_tokens
        self.macros: list[MacroInstance] = []
        self.owner: dict[int, MacroInstance] = {}
        self._rr = 0
        self._draining = False
        self._update_pending = False
        self._next_macro_id = 0

    def attach(self, sim: Simulator) -> None:
        super().attach(sim)
        if sum(self.macro_sizes) != len(sim.instances):
            raise ValueError(f"macro sizes {self.macro_sizes} do not cover "
                             f"{len(sim.instances)} instances")
        if self.reserve_override is not None:
            sim.reserve = self.reserve_override
        ids = iter(sorted(sim.instances))
        for size in self.macro_sizes:
            self.new_macro([next(ids) for _ in range(size)])
        self.statuses = _LiveStatuses(sim, set(self.owner))

    # membership (used by mitosis scaling)
    def new_macro(self, ids: list[int]) -> MacroInstance:
        m = MacroInstance(self._next_macro_id, list(ids))
        self._next_macro_id += 1
        self.macros.append(m)
        for i in ids:
            self.owner[i] = m
        return m

    def add_member(self, macro: MacroInstance, iid: int) -> None:
        if iid in self.owner:
            raise ValueError(f"instance {iid} already belongs to macro {self.owner[iid].id}")
        macro.instances.append(iid)
        self.owner[iid] = macro
        self.statuses.routable.add(iid)
        self.drain(macro)

    def remove_member(self, macro: MacroInstance, iid: int) -> None:
        idx = macro.instances.index(iid)
        macro.instances.pop(idx)
        if idx < macro.prev_idx:
            macro.prev_idx -= 1
        macro.clamp()
        del self.owner[iid]
        self.statuses.routable.discard(iid)

    def drop_macro(self, macro: MacroInstance, into: MacroInstance | None = None) -> None:
        if macro.instances:
            raise ValueError("only empty macro instances can be dropped")
        self.macros.remove(macro)
        if macro.macro_queue:
            target = into or self.macros[0]
            target.macro_queue.extend(macro.macro_queue)
            macro.macro_queue.clear()
            self.drain(target)
        self._rr %= max(1, len(self.macros))

    # hooks
    def cost(self, iid: int, tokens: int) -> float:
        return prefill_time(self.sim.instances[iid].cfg, tokens)

    def on_arrival(self, rec: RequestRecord) -> None:
        live = [m for m in self.macros if m.instances]
        macro = live[self._rr % len(live)]
        self._rr = (self._rr + 1) % len(live)
        macro.macro_queue.append(rec.id)
        self.drain(macro)

    def drain(self, macro: MacroInstance) -> None:
        if self._draining or not macro.instances:
            return
        self._draining = True
        sim = self.sim
        try:
            while macro.macro_queue:
                rid = macro.macro_queue[0]
                rec = sim.records[rid]
                req = Request(rid, rec.arrival_time, rec.prompt_len, 0)
                need = req.input_len + sim.reserve
                if all(need > sim.instances[i].cap_tokens for i in macro.instances):
                    raise CapacityError(f"request {rid} needs {need} KV tokens, more than any "
                                        f"instance of macro {macro.id} holds")
                slo = sim.slo
                if all(self.cost(i, req.input_len) > slo.slo_ttft for i in macro.instances):
                    # TTFT is lost on any instance; route on the other two constraints
                    slo = SloConfig(math.inf, slo.slo_tpot)
                dec = inter_schedule(macro, req, self.statuses, sim.now, slo, self.cost,
                                     reserve_tokens=sim.reserve,
                                     staleness_bound=self.staleness_bound)
                sim.routing_log.append((sim.now, rid, macro.id,
                                        -1 if dec.deferred else dec.instance_id,
                                        format_outcomes(dec.outcomes)))
                if dec.deferred:
                    if not rec.deferred:
                        rec.deferred = True
                    sim.stats["deferrals"] += 1
                    self._request_update()
                    break
                macro.macro_queue.popleft()
                sim.assign(rec, sim.instances[dec.instance_id])
        finally:
            self._draining = False

    def _request_update(self) -> None:
        if not self._update_pending:
            self._update_pending = True
            self.sim.schedule(self.sim.now + self.status_period, EventKind.STATUS_UPDATE, None)

    def on_status_update(self, payload) -> None:
        self._update_pending = False
        for m in list(self.macros):
            if m.macro_queue:
                self.drain(m)

    def on_phase_change(self, inst: InstanceState) -> None:
        m = self.owner.get(inst.id)
        if m is not None and m.macro_queue:
            self.drain(m)

    def on_request_complete(self, inst: InstanceState, rid: int) -> None:
        m = self.owner.get(inst.id)
        if m is not None and m.macro_queue:
            self.drain(m)

    def intra_policy(self, inst: InstanceState, now: float) -> Action:
        return intra_policy(inst, now)

    def queued(self) -> int:
        return sum(len(m.macro_queue) for m in self.macros)
