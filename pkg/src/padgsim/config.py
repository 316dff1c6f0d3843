"""Scenario configuration: a strict JSON schema and the runner built on it.

Every field has a default unless marked required; unknown fields are
rejected.  Validation errors are raised as :class:`ConfigError` whose
``path`` is the dotted location of the offending field.

Example (one macro of four PaDG instances on the ShareGPT preset)::

    {
      "name": "sharegpt-padg",
      "workload": {"preset": "sharegpt", "rate": 4.0, "duration": 600},
      "cluster": {"model": "llama-30b", "device": "l20", "tp_degree": 4, "instances": 4},
      "strategy": {"kind": "padg", "macro_sizes": [4]},
      "seed": 0
    }

See ``scenarios/`` in the repository for an annotated file per strategy.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .baselines import FudgStrategy, FudgTopology, NodgHybrid, NodgSeparate
from .engine import SimulationResult, Simulator, Strategy
from .errors import ConfigError
from .mitosis import MitosisScaler, ScalingPolicy
from .padg import PadgStrategy
from .profiles import load_profiles
from .workload import PRESETS, LengthDist, SloConfig, WorkloadSpec, generate, load_trace, preset_spec

PosFloat = Annotated[float, Field(gt=0)]
NonNegFloat = Annotated[float, Field(ge=0)]
PosInt = Annotated[int, Field(ge=1)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LengthStats(_Strict):
    mean: Annotated[float, Field(ge=1, le=4096)]
    median: Annotated[float, Field(ge=1, le=4096)]


class WorkloadConfig(_Strict):
    preset: Optional[Literal["alpaca", "sharegpt", "longbench"]] = None
    trace: Optional[str] = None  # trace file; relative paths resolve against the config file
    rate: Optional[PosFloat] = None
    duration: Optional[PosFloat] = None
    input: Optional[LengthStats] = None  # custom length statistics instead of a preset
    output: Optional[LengthStats] = None
    rate_schedule: list[tuple[NonNegFloat, PosFloat]] = []  # [[start_s, rate], ...]

    @model_validator(mode="after")
    def _one_source(self):
        custom = self.input is not None or self.output is not None
        sources = sum([self.preset is not None, self.trace is not None, custom])
        if sources != 1:
            raise ValueError("give exactly one of preset, trace, or input+output statistics")
        if custom and (self.input is None or self.output is None):
            raise ValueError("custom workloads need both input and output statistics")
        if self.trace is None:
            if self.duration is None:
                raise ValueError("synthetic workloads need a duration")
            if self.rate is None and not self.rate_schedule:
                raise ValueError("synthetic workloads need a rate or a rate_schedule")
        starts = [s for s, _ in self.rate_schedule]
        if starts != sorted(starts):
            raise ValueError("rate_schedule must be sorted by start time")
        return self


class SloModel(_Strict):
    ttft: PosFloat
    tpot: PosFloat


class ClusterConfig(_Strict):
    model: str = "llama-30b"
    device: str = "l20"
    tp_degree: PosInt = 4
    instances: PosInt = 4
    gpu_memory_utilization: Annotated[float, Field(gt=0, le=1)] = 0.9
    switch_overhead: NonNegFloat = 0.0
    layer_overhead: NonNegFloat = 0.0
    comm_overhead_fraction: Optional[NonNegFloat] = None  # default: calibrated value
    profiles: Optional[str] = None  # default: bundled profiles


class PadgConfig(_Strict):
    kind: Literal["padg"]
    macro_sizes: Optional[list[PosInt]] = None  # default: one macro holding every instance
    status_period: PosFloat = 0.05
    staleness_factor: PosFloat = 4.0
    reserve_tokens: Optional[Annotated[int, Field(ge=0)]] = None  # default: mean output length


class NodgSeparateConfig(_Strict):
    kind: Literal["nodg-separate"]
    reserve_tokens: Optional[Annotated[int, Field(ge=0)]] = None


class NodgHybridConfig(_Strict):
    kind: Literal["nodg-hybrid"]
    chunk_size: PosInt = 512
    token_budget: PosInt = 512
    reserve_tokens: Optional[Annotated[int, Field(ge=0)]] = None

    @model_validator(mode="after")
    def _chunk_fits(self):
        if self.chunk_size > self.token_budget:
            raise ValueError("chunk_size must not exceed token_budget")
        return self


class FudgConfig(_Strict):
    kind: Literal["fudg"]
    prefill_instances: Optional[PosInt] = None  # default: half, rounded down, at least 1
    link_bandwidth: PosFloat = 1.25e9  # bytes/s (10 Gbit/s)
    hops: Literal[1, 2] = 1
    latency: NonNegFloat = 0.0
    reserve_tokens: Optional[Annotated[int, Field(ge=0)]] = None


StrategyConfig = Annotated[Union[PadgConfig, NodgSeparateConfig, NodgHybridConfig, FudgConfig],
                           Field(discriminator="kind")]


class ScalingConfig(_Strict):
    n_lower: PosInt = 3
    n_upper: PosInt = 6
    target_attainment: Annotated[float, Field(gt=0, le=1)] = 0.9
    window: PosFloat = 30.0
    check_period: PosFloat = 10.0
    cooldown: NonNegFloat = 30.0
    min_samples: PosInt = 10
    util_threshold: Annotated[float, Field(ge=0, le=1)] = 0.4
    sustain: PosFloat = 60.0
    scale_down: bool = True
    migration_overhead: NonNegFloat = 0.1
    reinit_cost: NonNegFloat = 180.0
    warmup: NonNegFloat = 0.0
    min_instances: PosInt = 1
    max_instances: PosInt = 64
    timeline_bucket: PosFloat = 30.0

    @model_validator(mode="after")
    def _bounds(self):
        if self.n_lower > self.n_upper:
            raise ValueError("n_lower must not exceed n_upper")
        return self


class SweepConfig(_Strict):
    strategies: Optional[list[StrategyConfig]] = None  # default: the scenario's strategy
    rates: Optional[list[PosFloat]] = None  # ascending grid; otherwise bisection on [lo, hi]
    lo: Optional[PosFloat] = None
    hi: Optional[PosFloat] = None
    tol: Optional[PosFloat] = None
    percentiles: list[Annotated[float, Field(gt=0, le=1)]] = [0.5, 0.9, 0.99]

    @model_validator(mode="after")
    def _grid_or_bounds(self):
        if self.rates is not None:
            if not self.rates:
                raise ValueError("rates must not be empty")
        elif self.lo is None or self.hi is None:
            raise ValueError("give either rates or both lo and hi")
        elif self.lo > self.hi:
            raise ValueError("lo must not exceed hi")
        if not self.percentiles:
            raise ValueError("percentiles must not be empty")
        return self


class Scenario(_Strict):
    name: str = "scenario"
    workload: WorkloadConfig
    slo: Optional[SloModel] = None  # default: the preset's SLOs (required otherwise)
    cluster: ClusterConfig = ClusterConfig()
    strategy: StrategyConfig
    scaling: Optional[ScalingConfig] = None
    seed: Annotated[int, Field(ge=0)] = 0
    horizon: Optional[PosFloat] = None  # simulated seconds; default: run to completion
    max_prefill_batch_tokens: PosInt = 4096
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.slo is None and self.workload.preset is None:
            raise ValueError("slo is required unless the workload uses a preset")
        _check_strategy(self.strategy, self.cluster.instances)
        if self.scaling is not None and self.strategy.kind != "padg":
            raise ValueError("scaling requires the padg strategy")
        return self


def _check_strategy(st, instances: int) -> None:
    if st.kind == "padg" and st.macro_sizes is not None and sum(st.macro_sizes) != instances:
        raise ValueError(f"strategy.macro_sizes must sum to cluster.instances ({instances})")
    if st.kind == "fudg":
        if instances < 2:
            raise ValueError("fudg needs at least 2 instances")
        if st.prefill_instances is not None and st.prefill_instances >= instances:
            raise ValueError("strategy.prefill_instances must leave at least one decode instance")


_TAGS = {"padg", "nodg-separate", "nodg-hybrid", "fudg"}


def _error_path(err: dict) -> str:
    # pydantic inserts the union member's tag into the location; drop it
    parts = [str(p) for p in err["loc"] if p not in _TAGS]
    return ".".join(parts) or "<root>"


def parse_scenario(doc: dict, base_dir: str | Path | None = None) -> Scenario:
    try:
        sc = Scenario.model_validate(doc)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(_error_path(first), first["msg"]) from None
    _check_profiles(sc)
    if base_dir is not None and sc.workload.trace is not None:
        trace = Path(sc.workload.trace)
        if not trace.is_absolute():
            wl = sc.workload.model_copy(update={"trace": str(Path(base_dir) / trace)})
            sc = sc.model_copy(update={"workload": wl})
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "top level must be an object")
    return parse_scenario(doc, path.parent)


def _check_profiles(sc: Scenario) -> None:
    try:
        profiles = load_profiles(sc.cluster.profiles)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError("cluster.profiles", str(exc)) from None
    if sc.cluster.model not in profiles.models:
        raise ConfigError("cluster.model", f"unknown model profile {sc.cluster.model!r}")
    if sc.cluster.device not in profiles.devices:
        raise ConfigError("cluster.device", f"unknown device profile {sc.cluster.device!r}")
    try:
        _instance_config(sc)
    except ValueError as exc:
        raise ConfigError("cluster", str(exc)) from None


def _instance_config(sc: Scenario):
    c = sc.cluster
    return load_profiles(c.profiles).instance_config(
        c.model, c.device, c.tp_degree, comm_overhead_fraction=c.comm_overhead_fraction,
        gpu_memory_utilization=c.gpu_memory_utilization, switch_overhead=c.switch_overhead,
        layer_overhead=c.layer_overhead)


def slo_of(sc: Scenario) -> SloConfig:
    if sc.slo is not None:
        return SloConfig(sc.slo.ttft, sc.slo.tpot)
    return PRESETS[sc.workload.preset].slo


def build_requests(sc: Scenario, rate: float | None = None, seed: int | None = None):
    wl = sc.workload
    seed = sc.seed if seed is None else seed
    if wl.trace is not None:
        return load_trace(wl.trace)
    rate = rate if rate is not None else (wl.rate if wl.rate is not None else wl.rate_schedule[0][1])
    if wl.preset is not None:
        return generate(preset_spec(wl.preset, rate, wl.duration, seed, wl.rate_schedule))
    spec = WorkloadSpec("custom", rate, wl.duration, LengthDist(wl.input.mean, wl.input.median),
                        LengthDist(wl.output.mean, wl.output.median), seed,
                        tuple(tuple(x) for x in wl.rate_schedule))
    return generate(spec)


def default_reserve(sc: Scenario, requests) -> int:
    wl = sc.workload
    if wl.preset is not None:
        return int(round(PRESETS[wl.preset].output_mean))
    if wl.output is not None:
        return int(round(wl.output.mean))
    # trace: the trace's own mean output length stands in for a dataset statistic
    return int(round(sum(r.output_len for r in requests) / len(requests)))


def make_strategy(st, instances: int) -> Strategy:
    if st.kind == "padg":
        return PadgStrategy(st.macro_sizes or [instances], status_period=st.status_period,
                            staleness_factor=st.staleness_factor, reserve_tokens=st.reserve_tokens)
    if st.kind == "nodg-separate":
        return NodgSeparate(st.reserve_tokens)
    if st.kind == "nodg-hybrid":
        return NodgHybrid(st.chunk_size, st.token_budget, st.reserve_tokens)
    n_p = st.prefill_instances or max(1, instances // 2)
    return FudgStrategy(FudgTopology.split(n_p, instances - n_p, st.link_bandwidth, st.hops, st.latency),
                        st.reserve_tokens)


def scaling_policy(cfg: ScalingConfig) -> ScalingPolicy:
    fields = cfg.model_dump(exclude={"timeline_bucket"})
    return ScalingPolicy(**fields)


def build_simulator(sc: Scenario, *, rate: float | None = None, seed: int | None = None,
                    strategy=None, abort_percentile: float | None = None,
                    check_invariants: bool = False, scripted_scaling=()) -> Simulator:
    requests = build_requests(sc, rate, seed)
    if not requests:
        raise ConfigError("workload", "workload produced no requests")
    st = strategy if strategy is not None else sc.strategy
    _check_strategy(st, sc.cluster.instances)
    cfg = _instance_config(sc)
    strat = make_strategy(st, sc.cluster.instances)
    scaler = None
    if sc.scaling is not None and st.kind == "padg":
        scaler = MitosisScaler(scaling_policy(sc.scaling), scripted_scaling)
    abort = None
    if abort_percentile is not None:
        abort = math.floor((1 - abort_percentile) * len(requests) + 1e-9)
    return Simulator(requests, [cfg] * sc.cluster.instances, strat, slo_of(sc),
                     max_prefill_batch_tokens=sc.max_prefill_batch_tokens,
                     output_reservation=default_reserve(sc, requests),
                     horizon=sc.horizon if sc.horizon is not None else math.inf,
                     scaler=scaler, check_invariants=check_invariants,
                     abort_after_violations=abort)


def run_scenario(sc: Scenario, **kw) -> SimulationResult:
    return build_simulator(sc, **kw).run()
