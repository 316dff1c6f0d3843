"""Instance-granularity scaling of macro instances.

Macros grow one instance at a time up to ``n_upper``; one more instance
splits off ``n_lower`` members into a new macro.  Shrinking removes
instances from the smallest macro that is above ``n_lower`` and merges
the two smallest macros once they fit together.  Instances move between
macros through a small serializable handler, so their execution is never
interrupted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

from .engine import EventKind, Simulator
from .errors import VersionMismatch

HANDLER_VERSION = 1


@dataclass(frozen=True)
class ScalingPolicy:
    n_lower: int = 3
    n_upper: int = 6
    target_attainment: float = 0.9
    window: float = 30.0
    check_period: float = 10.0
    cooldown: float = 30.0
    min_samples: int = 10
    util_threshold: float = 0.4
    sustain: float = 60.0
    scale_down: bool = True
    migration_overhead: float = 0.1
    reinit_cost: float = 180.0  # full re-initialisation, for comparison reports only
    warmup: float = 0.0
    min_instances: int = 1
    max_instances: int = 64

    def __post_init__(self) -> None:
        if not 1 <= self.n_lower <= self.n_upper:
            raise ValueError("need 1 <= n_lower <= n_upper")
        if not 0 < self.target_attainment <= 1:
            raise ValueError("target_attainment must lie in (0, 1]")
        for name in ("window", "check_period", "sustain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("cooldown", "migration_overhead", "reinit_cost", "warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")


# -- actions ---------------------------------------------------------------
@dataclass(frozen=True)
class AddInstance:
    macro: int


@dataclass(frozen=True)
class RemoveInstance:
    macro: int


@dataclass(frozen=True)
class Split:
    macro: int


@dataclass(frozen=True)
class Merge:
    a: int  # survivor
    b: int  # loses one instance, the rest migrate into ``a``


ScalingAction = AddInstance | RemoveInstance | Split | Merge | None


@dataclass(frozen=True)
class MetricsWindow:
    attainment: float | None  # None when the window has too few samples
    low_utilization_for: float  # seconds utilization has stayed below threshold


def plan_expand(sizes: Sequence[int], policy: ScalingPolicy) -> ScalingAction:
    if not sizes:
        return AddInstance(0)
    for i, s in enumerate(sizes):
        if s < policy.n_upper:
            return AddInstance(i)
    return Split(len(sizes) - 1)


def plan_contract(sizes: Sequence[int], policy: ScalingPolicy) -> ScalingAction:
    if len(sizes) == 1:
        return RemoveInstance(0) if sizes[0] > 1 else None
    # two smallest; later-created macro is the one that dissolves on ties
    order = sorted(range(len(sizes)), key=lambda i: (sizes[i], -i))
    a, b = order[0], order[1]
    if sizes[a] + sizes[b] <= policy.n_upper:
        survivor, donor = min(a, b), max(a, b)
        return Merge(survivor, donor)
    above = [i for i in range(len(sizes)) if sizes[i] > policy.n_lower]
    if above:
        return RemoveInstance(min(above, key=lambda i: (sizes[i], -i)))
    return RemoveInstance(len(sizes) - 1)


def apply_action(sizes: Sequence[int], action: ScalingAction, policy: ScalingPolicy) -> list[int]:
    """Macro sizes after ``action``; the replay oracle for scaling logs."""
    out = list(sizes)
    if action is None:
        return out
    if isinstance(action, AddInstance):
        if action.macro == len(out):
            out.append(1)
        else:
            out[action.macro] += 1
    elif isinstance(action, Split):
        out[action.macro] += 1 - policy.n_lower
        out.append(policy.n_lower)
    elif isinstance(action, RemoveInstance):
        out[action.macro] -= 1
    elif isinstance(action, Merge):
        out[action.a] += out[action.b] - 1
        del out[action.b]
    return out


def scale_step(sizes: Sequence[int], metrics: MetricsWindow, policy: ScalingPolicy) -> ScalingAction:
    """At most one scaling action for the current macro layout."""
    total = sum(sizes)
    if metrics.attainment is not None and metrics.attainment < policy.target_attainment:
        if total < policy.max_instances:
            return plan_expand(sizes, policy)
        return None
    if policy.scale_down and metrics.low_utilization_for >= policy.sustain and total > policy.min_instances:
        return plan_contract(sizes, policy)
    return None


# -- handler codec -----------------------------------------------------------
@dataclass(frozen=True)
class InstanceHandler:
    actor_id: str
    worker_address: str
    model: str
    device: str
    tp_degree: int
    version: int = HANDLER_VERSION


def serialize(h: InstanceHandler) -> bytes:
    """Version byte, four uint32-BE length-prefixed UTF-8 strings, uint32-BE tp degree."""
    out = [struct.pack(">B", h.version)]
    for text in (h.actor_id, h.worker_address, h.model, h.device):
        raw = text.encode("utf-8")
        out.append(struct.pack(">I", len(raw)) + raw)
    out.append(struct.pack(">I", h.tp_degree))
    return b"".join(out)


def deserialize(data: bytes) -> InstanceHandler:
    if not data:
        raise ValueError("empty handler payload")
    version = data[0]
    if version != HANDLER_VERSION:
        raise VersionMismatch(f"handler version {version}, expected {HANDLER_VERSION}")
    pos = 1
    fields = []
    try:
        for _ in range(4):
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise ValueError("truncated handler payload")
            fields.append(data[pos:pos + n].decode("utf-8"))
            pos += n
        (tp,) = struct.unpack_from(">I", data, pos)
    except struct.error:
        raise ValueError("truncated handler payload") from None
    if pos + 4 != len(data):
        raise ValueError("trailing bytes in handler payload")
    return InstanceHandler(*fields, tp_degree=tp, version=version)


def migrate(sim: Simulator, handler: InstanceHandler, src, dst, now: float, overhead: float) -> float:
    """Hand an instance from macro ``src`` to ``dst``; returns when ``dst`` may route to it.

    The instance keeps executing throughout; only routing is affected.
    """
    strat = sim.strategy
    iid = int(handler.actor_id.rsplit("-", 1)[1])
    if strat.owner.get(iid) is not src:
        raise ValueError(f"instance {iid} is not owned by macro {src.id}")
    strat.remove_member(src, iid)
    payload = serialize(handler)
    done = now + overhead
    sim.schedule(done, EventKind.MIGRATION_DONE, (payload, dst.id))
    return done


def handler_for(sim: Simulator, iid: int) -> InstanceHandler:
    cfg = sim.instances[iid].cfg
    return InstanceHandler(f"instance-{iid}", f"worker-{iid}:0", cfg.model.name, cfg.device.name, cfg.tp_degree)


class MitosisScaler:
    """Drives scaling from periodic checks inside a PaDG simulation.

    ``scripted`` replaces the triggers with ``(time, "up" | "down")`` steps.
    """

    def __init__(self, policy: ScalingPolicy, scripted: Sequence[tuple[float, str]] = ()):
        self.policy = policy
        self.scripted = sorted(scripted)
        self._script_pos = 0
        self.incoming: dict[int, list[int]] = {}  # macro id -> instances on their way in
        self.last_action = -float("inf")
        self.low_since: float | None = None
        self.util_samples: list[tuple[float, float]] = []

    def attach(self, sim: Simulator) -> None:
        from .padg import PadgStrategy

        if not isinstance(sim.strategy, PadgStrategy):
            raise ValueError("mitosis scaling needs the padg strategy")
        self.sim = sim
        self.strat = sim.strategy
        self.template = sim.instances[min(sim.instances)].cfg
        sim.schedule(self.policy.check_period, EventKind.SCALE_CHECK, None)

    # layout as the planner sees it: routable members plus instances en route
    def layout(self):
        macros = [m for m in self.strat.macros if m.instances or self.incoming.get(m.id)]
        return macros, [len(m.instances) + len(self.incoming.get(m.id, ())) for m in macros]

    def on_event(self, ev) -> None:
        if ev.kind is EventKind.SCALE_CHECK:
            self.check()
            if len(self.sim.records) > self.sim._done_count:
                self.sim.schedule(self.sim.now + self.policy.check_period, EventKind.SCALE_CHECK, None)
        elif ev.kind is EventKind.MIGRATION_DONE:
            payload, dst_id = ev.payload
            iid = int(deserialize(payload).actor_id.rsplit("-", 1)[1])
            self._arrive(iid, dst_id)
        elif ev.kind is EventKind.INSTANCE_READY:
            iid, dst_id = ev.payload
            self._arrive(iid, dst_id)

    def _arrive(self, iid: int, macro_id: int) -> None:
        if iid not in self.incoming.get(macro_id, ()):
            return  # retired while on its way in
        self.incoming[macro_id].remove(iid)
        macro = next(m for m in self.strat.macros if m.id == macro_id)
        self.strat.add_member(macro, iid)

    def window_attainment(self) -> tuple[float | None, int]:
        sim = self.sim
        lo = sim.now - self.policy.window
        ok = bad = 0
        for t, good in reversed(sim.verdicts):
            if t <= lo:
                break
            if good:
                ok += 1
            else:
                bad += 1
        # requests already past the TTFT budget without a first token
        deadline = sim.now - sim.slo.slo_ttft
        for r in sim.records.values():
            if r.arrival_time > sim.now:
                continue
            if not r.judged and r.decode_begin_time is None and r.arrival_time < deadline:
                bad += 1
        n = ok + bad
        return (ok / n if n >= self.policy.min_samples else None), n

    def utilization(self) -> float:
        sim = self.sim
        live = [i for i in self.strat.owner]
        if not live:
            return 0.0
        return sum(sim.committed_tokens(sim.instances[i]) / sim.instances[i].cap_tokens for i in live) / len(live)

    def check(self) -> None:
        sim, pol = self.sim, self.policy
        att, n = self.window_attainment()
        util = self.utilization()
        self.util_samples.append((sim.now, util))
        sim.attainment_samples.append((sim.now, att, n, util))
        if util < pol.util_threshold:
            if self.low_since is None:
                self.low_since = sim.now
        else:
            self.low_since = None
        if self.scripted:
            while self._script_pos < len(self.scripted) and self.scripted[self._script_pos][0] <= sim.now:
                _, direction = self.scripted[self._script_pos]
                self._script_pos += 1
                _, sizes = self.layout()
                plan = plan_expand if direction == "up" else plan_contract
                self.apply(plan(sizes, pol))
            return
        if sim.now - self.last_action < pol.cooldown:
            return
        low_for = sim.now - self.low_since if self.low_since is not None else 0.0
        _, sizes = self.layout()
        action = scale_step(sizes, MetricsWindow(att, low_for), pol)
        if action is not None:
            self.apply(action)
            self.low_since = None

    def apply(self, action: ScalingAction) -> None:
        if action is None:
            return
        sim, strat, pol = self.sim, self.strat, self.policy
        macros, before = self.layout()
        self.last_action = sim.now
        if isinstance(action, AddInstance):
            if action.macro == len(macros):
                target = strat.new_macro([])
            else:
                target = macros[action.macro]
            self._provision(target)
        elif isinstance(action, Split):
            donor = macros[action.macro]
            fresh = strat.new_macro([])
            self._provision(fresh)
            # the most recently added members follow the new instance
            for iid in donor.instances[-(pol.n_lower - 1):] if pol.n_lower > 1 else []:
                self._migrate(iid, donor, fresh)
        elif isinstance(action, RemoveInstance):
            self._retire(macros[action.macro])
        elif isinstance(action, Merge):
            a, b = macros[action.a], macros[action.b]
            self._retire(b)
            for iid in list(b.instances):
                self._migrate(iid, b, a)
            if not b.instances and not self.incoming.get(b.id):
                strat.drop_macro(b, into=a)
        _, after = self.layout()
        sim.scaling_log.append((sim.now, type(action).__name__, tuple(before), tuple(after)))

    def _provision(self, macro) -> None:
        sim = self.sim
        inst = sim.add_instance(self.template)
        self.incoming.setdefault(macro.id, []).append(inst.id)
        sim.schedule(sim.now + self.policy.warmup, EventKind.INSTANCE_READY, (inst.id, macro.id))

    def _migrate(self, iid: int, src, dst) -> None:
        self.incoming.setdefault(dst.id, []).append(iid)
        migrate(self.sim, handler_for(self.sim, iid), src, dst, self.sim.now,
                self.policy.migration_overhead)

    def _retire(self, macro) -> None:
        if macro.instances:
            iid = macro.instances[-1]
            self.strat.remove_member(macro, iid)
        else:
            # only instances still on their way in; cancel the newest
            iid = self.incoming[macro.id].pop()
        self.sim.retire_instance(self.sim.instances[iid])
