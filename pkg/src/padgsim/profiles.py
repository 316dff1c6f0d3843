"""Bundled model/device profiles and the prefill-rate calibration.

Profile files are JSON documents with three top-level keys::

    {
      "models":  {"<name>": {layer_num, hidden_size, heads, size_per_head,
                             kv_groups, bytes_per_element, weights_bytes}},
      "devices": {"<name>": {peak_flops, mem_bandwidth, mem_capacity,
                             compute_efficiency, bandwidth_efficiency}},
      "calibrations": [{model, device, tp_degree, comm_overhead_fraction,
                        compute_efficiency, bandwidth_efficiency,
                        node_prefill_rate (optional), gpus_per_node}]
    }

A calibration entry overrides the device efficiencies for that
(model, device, tp_degree) triple.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from scipy.optimize import brentq

from .model import DeviceProfile, InstanceConfig, ModelProfile, steady_prefill_rate

MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelProfile)} - {"name"}
DEVICE_FIELDS = {f.name for f in dataclasses.fields(DeviceProfile)} - {"name"}


@dataclass(frozen=True)
class Calibration:
    model: str
    device: str
    tp_degree: int
    comm_overhead_fraction: float
    compute_efficiency: float
    bandwidth_efficiency: float
    gpus_per_node: int = 8
    node_prefill_rate: float | None = None


@dataclass
class ProfileSet:
    models: dict[str, ModelProfile]
    devices: dict[str, DeviceProfile]
    calibrations: list[Calibration]

    def calibration(self, model: str, device: str, tp_degree: int) -> Calibration | None:
        for c in self.calibrations:
            if (c.model, c.device, c.tp_degree) == (model, device, tp_degree):
                return c
        return None

    def instance_config(self, model: str, device: str, tp_degree: int, *,
                        comm_overhead_fraction: float | None = None,
                        gpu_memory_utilization: float = 0.9,
                        switch_overhead: float = 0.0,
                        layer_overhead: float = 0.0) -> InstanceConfig:
        if model not in self.models:
            raise KeyError(f"unknown model profile {model!r}")
        if device not in self.devices:
            raise KeyError(f"unknown device profile {device!r}")
        m, d = self.models[model], self.devices[device]
        cal = self.calibration(model, device, tp_degree)
        comm = 0.0
        if cal is not None:
            d = dataclasses.replace(d, compute_efficiency=cal.compute_efficiency,
                                    bandwidth_efficiency=cal.bandwidth_efficiency)
            comm = cal.comm_overhead_fraction
        if comm_overhead_fraction is not None:
            comm = comm_overhead_fraction
        return InstanceConfig.build(m, d, tp_degree, gpu_memory_utilization,
                                    comm_overhead_fraction=comm,
                                    switch_overhead=switch_overhead,
                                    layer_overhead=layer_overhead)


def _parse(doc: dict, source: str) -> ProfileSet:
    extra = set(doc) - {"models", "devices", "calibrations"}
    if extra:
        raise ValueError(f"{source}: unknown top-level keys {sorted(extra)}")
    models, devices = {}, {}
    for name, fields in doc.get("models", {}).items():
        bad = set(fields) - MODEL_FIELDS
        if bad:
            raise ValueError(f"{source}: models.{name}: unknown fields {sorted(bad)}")
        models[name] = ModelProfile(name=name, **fields)
    for name, fields in doc.get("devices", {}).items():
        bad = set(fields) - DEVICE_FIELDS
        if bad:
            raise ValueError(f"{source}: devices.{name}: unknown fields {sorted(bad)}")
        devices[name] = DeviceProfile(name=name, **fields)
    cals = [Calibration(**c) for c in doc.get("calibrations", [])]
    return ProfileSet(models, devices, cals)


def load_profiles(path: str | Path | None = None) -> ProfileSet:
    """Load a profile file; ``None`` loads the bundled set."""
    if path is None:
        text = resources.files("padgsim.data").joinpath("profiles.json").read_text("utf-8")
        return _parse(json.loads(text), "bundled profiles.json")
    p = Path(path)
    return _parse(json.loads(p.read_text("utf-8")), str(p))


def node_prefill_rate(cfg: InstanceConfig, gpus_per_node: int = 8) -> float:
    """Prefill tokens/s of a node fully packed with instances of ``cfg``."""
    return gpus_per_node // cfg.tp_degree * steady_prefill_rate(cfg)


def fit_compute_efficiency(model: ModelProfile, device: DeviceProfile, tp_degree: int,
                           comm_overhead_fraction: float, target_node_rate: float,
                           gpus_per_node: int = 8) -> float:
    """Solve for the compute efficiency that reproduces a measured node prefill rate."""

    def gap(c: float) -> float:
        d = dataclasses.replace(device, compute_efficiency=c)
        cfg = InstanceConfig.build(model, d, tp_degree, comm_overhead_fraction=comm_overhead_fraction)
        return node_prefill_rate(cfg, gpus_per_node) - target_node_rate

    if gap(1.0) < 0:
        raise ValueError(f"{model.name}/{device.name}: target rate unreachable at full efficiency")
    return brentq(gap, 1e-4, 1.0, xtol=1e-10)
