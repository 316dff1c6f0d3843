"""Discrete-event simulator of an LLM serving cluster.

Compares partially disaggregated serving (temporal prefill/decode
separation inside each instance, coordinated across a macro instance)
against non-disaggregated and fully disaggregated baselines, on top of
an analytic roofline cost model.
"""

from .baselines import FudgStrategy, FudgTopology, NodgHybrid, NodgSeparate
from .config import Scenario, load_scenario, parse_scenario, run_scenario
from .engine import Action, Event, EventKind, InstanceState, RequestRecord, SimulationResult, Simulator
from .metrics import attainment, attainment_timeline, goodput_search, request_metrics
from .model import (BatchShape, DeviceProfile, InstanceConfig, ModelProfile, OpKind, Phase,
                    arithmetic_intensity, decode_step_time, kv_bytes_per_token, op_cost,
                    prefill_time, required_kv_bandwidth)
from .padg import InstanceStatus, MacroInstance, PadgStrategy, check_constraints, inter_schedule
from .profiles import load_profiles
from .workload import Request, SloConfig, WorkloadSpec, generate, load_trace, preset_spec

__version__ = "0.1.0"
