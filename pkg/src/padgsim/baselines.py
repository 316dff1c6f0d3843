"""Reference strategies: non-disaggregated (separate or hybrid batching)
and fully disaggregated serving with KV-cache transfer."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .engine import Action, EventKind, InstanceState, RequestRecord, Simulator, Strategy


def outstanding_tokens(sim: Simulator, inst: InstanceState) -> int:
    """Tokens held in KV plus prompt tokens still waiting for prefill."""
    recs = sim.records
    return inst.kv_tokens + sum(recs[r].prompt_len - recs[r].prefilled for r in inst.pending_prefills)


def least_loaded(sim: Simulator, ids) -> InstanceState:
    # ties go to the lowest id
    return min((sim.instances[i] for i in ids if sim.instances[i].accepting),
               key=lambda inst: (outstanding_tokens(sim, inst), inst.id))


class NodgSeparate(Strategy):
    """Independent instances, separate batching, prefill priority."""

    name = "nodg-separate"

    def __init__(self, reserve_tokens: int | None = None):
        self.reserve_override = reserve_tokens

    def attach(self, sim: Simulator) -> None:
        super().attach(sim)
        if self.reserve_override is not None:
            sim.reserve = self.reserve_override

    def on_arrival(self, rec: RequestRecord) -> None:
        inst = least_loaded(self.sim, self.sim.instances)
        self.sim.routing_log.append((self.sim.now, rec.id, -1, inst.id, "least-loaded"))
        self.sim.assign(rec, inst)


class NodgHybrid(NodgSeparate):
    """Decode-first hybrid iterations topped up with prefill chunks."""

    name = "nodg-hybrid"

    def __init__(self, chunk_size: int = 512, token_budget: int = 512,
                 reserve_tokens: int | None = None):
        if chunk_size < 1 or token_budget < 1:
            raise ValueError("chunk_size and token_budget must be >= 1")
        if chunk_size > token_budget:
            raise ValueError(f"chunk_size {chunk_size} exceeds token_budget {token_budget}")
        super().__init__(reserve_tokens)
        self.chunk_size = chunk_size
        self.token_budget = token_budget

    def hybrid_params(self) -> tuple[int, int]:
        return self.chunk_size, self.token_budget

    def intra_policy(self, inst: InstanceState, now: float) -> Action:
        if inst.pending_prefills or inst.active_decodes or inst.ready:
            return Action.HYBRID_ITERATION
        return Action.IDLE


@dataclass(frozen=True)
class FudgTopology:
    prefill_instances: tuple[int, ...]
    decode_instances: tuple[int, ...]
    link_bandwidth: float  # bytes/s, shared by all transfers in flight
    hops: int = 1  # 2 = staged through a central KV pool
    latency: float = 0.0  # per hop

    def __post_init__(self) -> None:
        if not self.prefill_instances or not self.decode_instances:
            raise ValueError("FuDG needs at least one prefill and one decode instance")
        if set(self.prefill_instances) & set(self.decode_instances):
            raise ValueError("an instance cannot be both prefill and decode")
        if self.link_bandwidth <= 0:
            raise ValueError("link_bandwidth must be > 0")
        if self.hops not in (1, 2):
            raise ValueError("hops must be 1 or 2")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")

    @classmethod
    def split(cls, n_prefill: int, n_decode: int, link_bandwidth: float, hops: int = 1,
              latency: float = 0.0) -> "FudgTopology":
        return cls(tuple(range(n_prefill)), tuple(range(n_prefill, n_prefill + n_decode)),
                   link_bandwidth, hops, latency)


class FairShareLink:
    """A link whose bandwidth is split equally among transfers in flight.

    Completion events carry a version number; any start or finish bumps
    the version so superseded events are ignored.
    """

    def __init__(self, bandwidth: float, schedule):
        self.bandwidth = bandwidth
        self._schedule = schedule
        self.remaining: dict[int, float] = {}
        self.version = 0
        self.last = 0.0

    def _advance(self, now: float) -> None:
        if self.remaining:
            done = (now - self.last) * self.bandwidth / len(self.remaining)
            for k in self.remaining:
                self.remaining[k] -= done
        self.last = now

    def _reschedule(self, now: float) -> None:
        self.version += 1
        if self.remaining:
            share = self.bandwidth / len(self.remaining)
            t = now + max(0.0, min(self.remaining.values())) / share
            self._schedule(t, ("data", self.version))

    def start(self, key: int, nbytes: float, now: float) -> None:
        self._advance(now)
        self.remaining[key] = float(nbytes)
        self._reschedule(now)

    def on_event(self, version: int, now: float) -> list[int]:
        if version != self.version:
            return []
        self._advance(now)
        # tolerance absorbs float drift from repeated share updates
        eps = 1e-9 * max(1.0, self.bandwidth)
        finished = sorted(k for k, v in self.remaining.items() if v <= eps)
        for k in finished:
            del self.remaining[k]
        self._reschedule(now)
        return finished


class FudgStrategy(Strategy):
    name = "fudg"

    def __init__(self, topology: FudgTopology, reserve_tokens: int | None = None):
        self.topo = topology
        self.reserve_override = reserve_tokens
        self.decode_wait: deque[int] = deque()
        self.transfer_src: dict[int, int] = {}
        self.bytes_transferred = 0

    def attach(self, sim: Simulator) -> None:
        super().attach(sim)
        if self.reserve_override is not None:
            sim.reserve = self.reserve_override
        ids = set(sim.instances)
        if not set(self.topo.prefill_instances) | set(self.topo.decode_instances) <= ids:
            raise ValueError("FuDG topology names unknown instances")
        for i in self.topo.prefill_instances:
            sim.instances[i].role = "prefill"
        for i in self.topo.decode_instances:
            sim.instances[i].role = "decode"
        self.link = FairShareLink(
            self.topo.link_bandwidth,
            lambda t, payload: sim.schedule(t, EventKind.KV_TRANSFER_DONE, payload))

    def on_arrival(self, rec: RequestRecord) -> None:
        inst = least_loaded(self.sim, self.topo.prefill_instances)
        self.sim.routing_log.append((self.sim.now, rec.id, -1, inst.id, "prefill"))
        self.sim.assign(rec, inst)

    def intra_policy(self, inst: InstanceState, now: float) -> Action:
        if inst.role == "prefill":
            return Action.START_PREFILL_WINDOW if inst.pending_prefills else Action.IDLE
        return super().intra_policy(inst, now)

    def on_prefilled(self, inst: InstanceState, rids: list[int]) -> None:
        if inst.role != "prefill":
            return  # a decode instance recomputing a preempted request
        sim = self.sim
        for rid in rids:
            self.transfer_src[rid] = inst.id
            nbytes = sim.records[rid].input_len * inst.kvpt
            self.link.start(rid, self.topo.hops * nbytes, sim.now)

    def on_transfer_event(self, payload) -> None:
        stage, val = payload
        sim = self.sim
        if stage == "data":
            lag = self.topo.hops * self.topo.latency
            for rid in self.link.on_event(val, sim.now):
                if lag > 0:
                    sim.schedule(sim.now + lag, EventKind.KV_TRANSFER_DONE, ("arrive", rid))
                else:
                    self._arrive(rid)
        else:
            self._arrive(val)

    def _arrive(self, rid: int) -> None:
        self.decode_wait.append(rid)
        self._admit_waiting()

    def _admit_waiting(self) -> None:
        sim = self.sim
        while self.decode_wait:
            rid = self.decode_wait[0]
            rec = sim.records[rid]
            need = rec.input_len + sim.reserve
            best = None
            for iid in self.topo.decode_instances:
                inst = sim.instances[iid]
                used = sim.committed_tokens(inst)
                if used + need <= inst.cap_tokens and (best is None or used < best[0]):
                    best = (used, inst)
            if best is None:
                if not any(sim.instances[i].kv_tokens for i in self.topo.decode_instances):
                    from .errors import CapacityError
                    raise CapacityError(f"request {rid} does not fit on any decode instance")
                return  # wait for decode memory to free up
            self.decode_wait.popleft()
            self._move(rec, sim.instances[self.transfer_src.pop(rid)], best[1])

    def _move(self, rec: RequestRecord, src: InstanceState, dst: InstanceState) -> None:
        sim = self.sim
        ctx = rec.input_len + rec.tokens_generated
        src.ready.remove(rec.id)
        src.kv_tokens -= ctx
        dst.kv_tokens += ctx
        dst.ready.append(rec.id)
        rec.routed_instance = dst.id
        rec.kv_transferred += ctx * src.kvpt
        self.bytes_transferred += ctx * src.kvpt
        sim.stats["kv_bytes_transferred"] += ctx * src.kvpt
        sim.routing_log.append((sim.now, rec.id, -1, dst.id, "decode"))
        sim.kick(dst)
        sim.kick(src)

    def on_request_complete(self, inst: InstanceState, rid: int) -> None:
        if self.decode_wait:
            self._admit_waiting()
