"""Domain profiles and the analytic roofline cost model.

Durations come from a per-operation roofline: each of the six matrix
multiplications of a transformer layer costs ``max(compute time, memory
time)`` on the instance, and a layer is the sum of its operations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

GIB = 2**30
MIB = 2**20


class Phase(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    IDLE = "idle"


class OpKind(enum.Enum):
    QKV_PROJECTION = "qkv_projection"
    ATTENTION_QK = "attention_qk"
    ATTENTION_AV = "attention_av"
    OUTPUT_PROJECTION = "output_projection"
    DIM_EXPANSION = "dim_expansion"
    DIM_REDUCTION = "dim_reduction"


# Weight matrices touched by each projection, in units of H^2 elements.
WEIGHT_ELEMS = {
    OpKind.QKV_PROJECTION: 3,
    OpKind.OUTPUT_PROJECTION: 1,
    OpKind.DIM_EXPANSION: 4,
    OpKind.DIM_REDUCTION: 4,
}
# FLOPs per token per H^2 for the projections.
PROJ_FLOPS = {
    OpKind.QKV_PROJECTION: 6,
    OpKind.OUTPUT_PROJECTION: 2,
    OpKind.DIM_EXPANSION: 8,
    OpKind.DIM_REDUCTION: 8,
}
# Activation elements per token per H for the projections.
PROJ_ACT = {
    OpKind.QKV_PROJECTION: 6,
    OpKind.OUTPUT_PROJECTION: 2,
    OpKind.DIM_EXPANSION: 2,
    OpKind.DIM_REDUCTION: 2,
}
ATTENTION_OPS = (OpKind.ATTENTION_QK, OpKind.ATTENTION_AV)


@dataclass(frozen=True)
class ModelProfile:
    name: str
    layer_num: int
    hidden_size: int
    heads: int
    size_per_head: int
    kv_groups: int = 1
    bytes_per_element: int = 2
    weights_bytes: int = 0

    def __post_init__(self) -> None:
        for attr in ("layer_num", "hidden_size", "heads", "size_per_head",
                     "kv_groups", "bytes_per_element"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{self.name}: {attr} must be >= 1")
        if self.heads * self.size_per_head != self.hidden_size:
            raise ValueError(
                f"{self.name}: hidden_size {self.hidden_size} != heads x size_per_head "
                f"({self.heads} x {self.size_per_head})")
        if self.heads % self.kv_groups:
            raise ValueError(f"{self.name}: kv_groups must divide heads")
        if self.weights_bytes < 0:
            raise ValueError(f"{self.name}: weights_bytes must be >= 0")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    peak_flops: float
    mem_bandwidth: float
    mem_capacity: float
    compute_efficiency: float = 1.0
    bandwidth_efficiency: float = 1.0

    def __post_init__(self) -> None:
        if min(self.peak_flops, self.mem_bandwidth, self.mem_capacity) <= 0:
            raise ValueError(f"{self.name}: rates and capacity must be > 0")
        for attr in ("compute_efficiency", "bandwidth_efficiency"):
            v = getattr(self, attr)
            if not 0 < v <= 1:
                raise ValueError(f"{self.name}: {attr} must lie in (0, 1], got {v}")


@dataclass(frozen=True)
class InstanceConfig:
    model: ModelProfile
    device: DeviceProfile
    device_count: int = 1
    tp_degree: int = 1
    comm_overhead_fraction: float = 0.0
    kv_capacity_bytes: int = 0
    switch_overhead: float = 0.0
    layer_overhead: float = 0.0  # fixed per-layer time for softmax/norm/sampling

    def __post_init__(self) -> None:
        if self.tp_degree != self.device_count:
            raise ValueError("tp_degree must equal device_count (no pipeline parallelism)")
        if self.comm_overhead_fraction < 0 or self.switch_overhead < 0 or self.layer_overhead < 0:
            raise ValueError("overheads must be >= 0")
        limit = self.device_count * self.device.mem_capacity - self.model.weights_bytes
        if self.kv_capacity_bytes <= 0 or self.kv_capacity_bytes > limit:
            raise ValueError(
                f"kv_capacity_bytes={self.kv_capacity_bytes} must lie in (0, {limit:.0f}]")

    @classmethod
    def build(cls, model: ModelProfile, device: DeviceProfile, tp_degree: int,
              gpu_memory_utilization: float = 0.9, **kw) -> "InstanceConfig":
        """Derive the KV capacity from device memory the way vLLM-style engines do."""
        cap = int(tp_degree * device.mem_capacity * gpu_memory_utilization - model.weights_bytes)
        return cls(model=model, device=device, device_count=tp_degree, tp_degree=tp_degree,
                   kv_capacity_bytes=cap, **kw)

    @property
    def kv_capacity_tokens(self) -> int:
        return self.kv_capacity_bytes // kv_bytes_per_token(self.model)


@dataclass(frozen=True)
class BatchShape:
    phase: Phase
    batch_size: int
    seq_len: int

    def __post_init__(self) -> None:
        if self.phase not in (Phase.PREFILL, Phase.DECODE):
            raise ValueError("shape phase must be PREFILL or DECODE")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")


def op_cost(model: ModelProfile, shape: BatchShape, op_kind: OpKind) -> tuple[int, int]:
    """FLOPs and bytes of one layer-level operation, straight from the per-op table.

    Memory-access expressions are element counts; they are scaled by
    ``bytes_per_element``.
    """
    H, M, e = model.hidden_size, model.heads, model.bytes_per_element
    B, S = shape.batch_size, shape.seq_len
    prefill = shape.phase is Phase.PREFILL
    if op_kind in ATTENTION_OPS:
        if prefill:
            flops = 2 * B * S * S * H
            elems = 2 * B * S * H + B * S * S * M
        else:
            flops = 2 * B * S * H
            elems = 2 * B * S * M + B * H * (S + 1)
    else:
        tokens = B * S if prefill else B
        flops = PROJ_FLOPS[op_kind] * tokens * H * H
        elems = PROJ_ACT[op_kind] * tokens * H + WEIGHT_ELEMS[op_kind] * H * H
    return flops, elems * e


def arithmetic_intensity(model: ModelProfile, shape: BatchShape, op_kind: OpKind) -> float:
    flops, nbytes = op_cost(model, shape, op_kind)
    return flops / nbytes


def kv_bytes_per_token(model: ModelProfile) -> int:
    return 2 * model.layer_num * (model.hidden_size // model.kv_groups) * model.bytes_per_element


def required_kv_bandwidth(model: ModelProfile, prefill_token_rate: float) -> float:
    """Bytes/s of KV cache a prefill stream produces (what FuDG must ship)."""
    if prefill_token_rate < 0:
        raise ValueError("prefill_token_rate must be >= 0")
    return prefill_token_rate * kv_bytes_per_token(model)


def _roof(cfg: InstanceConfig, flops: float, nbytes: float) -> float:
    dev = cfg.device
    t_c = flops / (dev.compute_efficiency * dev.peak_flops * cfg.tp_degree)
    t_m = nbytes / (dev.bandwidth_efficiency * dev.mem_bandwidth * cfg.tp_degree)
    return t_c if t_c > t_m else t_m


def _finish(cfg: InstanceConfig, per_layer: float) -> float:
    return cfg.model.layer_num * (per_layer + cfg.layer_overhead) * (1.0 + cfg.comm_overhead_fraction)


def prefill_batch_time(cfg: InstanceConfig, seq_lens: Sequence[int]) -> float:
    """Duration of one prefill batch holding the given prompts.

    Projections run on all batched tokens at once (weights read once);
    attention is per sequence since prompts do not attend to each other.
    """
    if not seq_lens or min(seq_lens) < 1:
        raise ValueError("prefill batch needs prompts of length >= 1")
    model = cfg.model
    total = sum(seq_lens)
    per_layer = 0.0
    flat = BatchShape(Phase.PREFILL, 1, total)
    for kind in WEIGHT_ELEMS:
        per_layer += _roof(cfg, *op_cost(model, flat, kind))
    a_flops = a_bytes = 0
    for s in seq_lens:
        f, b = op_cost(model, BatchShape(Phase.PREFILL, 1, s), OpKind.ATTENTION_QK)
        a_flops += f
        a_bytes += b
    per_layer += 2 * _roof(cfg, a_flops, a_bytes)
    return _finish(cfg, per_layer)


@lru_cache(maxsize=None)
def prefill_time(cfg: InstanceConfig, total_tokens: int) -> float:
    """Duration of prefilling one prompt of ``total_tokens`` tokens."""
    if total_tokens < 1:
        raise ValueError("total_tokens must be >= 1")
    return prefill_batch_time(cfg, (total_tokens,))


def _decode_attention(model: ModelProfile, batch: int, kv_tokens: int) -> tuple[int, int]:
    # K (or V) read is GQA-aware; scores and query terms follow the table's decode row.
    H, M, e = model.hidden_size, model.heads, model.bytes_per_element
    flops = 2 * kv_tokens * H
    elems = 2 * kv_tokens * M + batch * H + kv_tokens * (H // model.kv_groups)
    return flops, elems * e


def _weight_share(model: ModelProfile, kind: OpKind) -> float:
    return model.weights_bytes * WEIGHT_ELEMS[kind] / (12 * model.layer_num)


def decode_step_time(cfg: InstanceConfig, batch_size: int, total_kv_tokens: int) -> float:
    """One continuous-batching decode iteration over ``batch_size`` requests.

    Projection memory is the activation traffic plus that op's share of
    ``weights_bytes``; attention reads ``total_kv_tokens`` of KV cache.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if total_kv_tokens < batch_size:
        raise ValueError("total_kv_tokens must be >= batch_size")
    model = cfg.model
    H, e = model.hidden_size, model.bytes_per_element
    per_layer = 0.0
    for kind in WEIGHT_ELEMS:
        flops = PROJ_FLOPS[kind] * batch_size * H * H
        nbytes = PROJ_ACT[kind] * batch_size * H * e + _weight_share(model, kind)
        per_layer += _roof(cfg, flops, nbytes)
    per_layer += 2 * _roof(cfg, *_decode_attention(model, batch_size, total_kv_tokens))
    return _finish(cfg, per_layer)


def hybrid_step_time(cfg: InstanceConfig, decode_batch: int, decode_kv_tokens: int,
                     chunks: Sequence[tuple[int, int]]) -> float:
    """One hybrid (chunked-prefill) iteration.

    ``chunks`` holds ``(chunk_len, prior_len)`` pairs: a chunk attends to the
    ``prior_len`` prompt tokens already cached, which are re-read from memory.
    """
    if decode_batch < 0 or (decode_batch == 0 and not chunks):
        raise ValueError("empty hybrid iteration")
    model = cfg.model
    H, M, e = model.hidden_size, model.heads, model.bytes_per_element
    tokens = decode_batch + sum(c for c, _ in chunks)
    per_layer = 0.0
    for kind in WEIGHT_ELEMS:
        flops = PROJ_FLOPS[kind] * tokens * H * H
        nbytes = PROJ_ACT[kind] * tokens * H * e + _weight_share(model, kind)
        per_layer += _roof(cfg, flops, nbytes)
    a_flops = a_bytes = 0
    if decode_batch:
        a_flops, a_bytes = _decode_attention(model, decode_batch, decode_kv_tokens)
    for c, p in chunks:
        ctx = p + c
        a_flops += 2 * c * ctx * H
        a_bytes += (c * H + ctx * (H // model.kv_groups) + c * ctx * M) * e
    per_layer += 2 * _roof(cfg, a_flops, a_bytes)
    return _finish(cfg, per_layer)


def steady_prefill_rate(cfg: InstanceConfig, batch_tokens: int = 4096, seq_len: int = 512) -> float:
    """Tokens/s of one instance prefilling back-to-back full batches."""
    n = max(1, batch_tokens // seq_len)
    return n * seq_len / prefill_batch_time(cfg, (seq_len,) * n)


def kv_bytes(model: ModelProfile, tokens: int) -> int:
    return tokens * kv_bytes_per_token(model)


__all__ = [
    "GIB", "MIB", "Phase", "OpKind", "ModelProfile", "DeviceProfile", "InstanceConfig",
    "BatchShape", "op_cost", "arithmetic_intensity", "kv_bytes_per_token",
    "required_kv_bandwidth", "prefill_batch_time", "prefill_time", "decode_step_time",
    "hybrid_step_time", "steady_prefill_rate", "kv_bytes",
]
