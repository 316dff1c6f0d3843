"""Synthetic request traces and trace-file ingestion.

Prompt and output lengths follow lognormals truncated to ``[1, max_len]``
whose truncated median and mean match published dataset statistics.
Arrivals are Poisson at a fixed rate, or piecewise-constant rates for
ramps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri

from .errors import ParseError, SchemaError

MAX_LEN = 4096


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float
    input_len: int
    output_len: int
    app: str = ""


@dataclass(frozen=True)
class SloConfig:
    slo_ttft: float
    slo_tpot: float

    def __post_init__(self) -> None:
        if not (self.slo_ttft > 0 and self.slo_tpot > 0):
            raise ValueError("SLOs must be > 0")


@dataclass(frozen=True)
class LengthDist:
    """Lognormal over ``[1, max_len]`` fitted to a target mean and median."""

    mean: float
    median: float
    max_len: int = MAX_LEN

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.median)):
            raise ValueError("length statistics must be finite")
        if not 1 <= self.median <= self.max_len or not 1 <= self.mean <= self.max_len:
            raise ValueError("length statistics must lie within [1, max_len]")

    @property
    def params(self) -> tuple[float, float]:
        return fit_truncated_lognormal(self.mean, self.median, self.max_len)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        mu, sigma = self.params
        lo, hi = _bounds(self.max_len)
        a, b = ndtr((math.log(lo) - mu) / sigma), ndtr((math.log(hi) - mu) / sigma)
        u = a + (b - a) * rng.random(n)
        x = np.exp(mu + sigma * ndtri(u))
        return np.clip(np.rint(x), 1, self.max_len).astype(np.int64)


def _bounds(max_len: int) -> tuple[float, float]:
    # continuous support whose rounding lands on [1, max_len]
    return 0.5, max_len + 0.5


def truncated_stats(mu: float, sigma: float, max_len: int = MAX_LEN) -> tuple[float, float]:
    """(median, mean) of a lognormal(mu, sigma) truncated to the length support."""
    lo, hi = _bounds(max_len)
    la, lb = math.log(lo), math.log(hi)
    a, b = ndtr((la - mu) / sigma), ndtr((lb - mu) / sigma)
    median = math.exp(mu + sigma * ndtri(a + (b - a) / 2))
    mean = (math.exp(mu + sigma * sigma / 2)
            * (ndtr((lb - mu - sigma * sigma) / sigma) - ndtr((la - mu - sigma * sigma) / sigma))
            / (b - a))
    return median, mean


@lru_cache(maxsize=None)
def fit_truncated_lognormal(mean: float, median: float, max_len: int = MAX_LEN) -> tuple[float, float]:
    # Untruncated closed form seeds the solve; it does not exist when mean <= median.
    sigma0 = math.sqrt(2 * math.log(mean / median)) if mean > median else 0.5
    x0 = [math.log(median), math.log(sigma0)]

    def resid(x):
        med, m = truncated_stats(x[0], math.exp(x[1]), max_len)
        return [math.log(med / median), math.log(m / mean)]

    sol = optimize.least_squares(resid, x0, xtol=1e-14, ftol=1e-14)
    if max(abs(r) for r in sol.fun) > 1e-6:
        raise ValueError(f"cannot fit truncated lognormal to mean={mean}, median={median}")
    return float(sol.x[0]), float(math.exp(sol.x[1]))


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    request_rate: float
    duration: float
    input_len_dist: LengthDist
    output_len_dist: LengthDist
    seed: int = 0
    # optional piecewise-constant schedule: ((start_time, rate), ...)
    rate_schedule: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.request_rate > 0:
            raise ValueError("request_rate must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        for start, rate in self.rate_schedule:
            if start < 0 or rate <= 0:
                raise ValueError("rate_schedule entries need start >= 0 and rate > 0")
        starts = [s for s, _ in self.rate_schedule]
        if starts != sorted(starts):
            raise ValueError("rate_schedule must be sorted by start time")


@dataclass(frozen=True)
class Preset:
    input_mean: float
    input_median: float
    output_mean: float
    output_median: float
    slo: SloConfig


PRESETS = {
    "alpaca": Preset(20.63, 17.0, 163.80, 119.0, SloConfig(1.0, 0.1)),
    "sharegpt": Preset(343.76, 148.0, 237.20, 152.0, SloConfig(5.0, 0.1)),
    "longbench": Preset(2686.89, 2736.5, 101.78, 19.0, SloConfig(15.0, 0.1)),
}


def preset_spec(name: str, request_rate: float, duration: float, seed: int = 0,
                rate_schedule: Sequence[tuple[float, float]] = ()) -> WorkloadSpec:
    p = PRESETS[name]
    return WorkloadSpec(name, request_rate, duration,
                        LengthDist(p.input_mean, p.input_median),
                        LengthDist(p.output_mean, p.output_median), seed,
                        tuple((float(s), float(r)) for s, r in rate_schedule))


def _arrivals(rng: np.random.Generator, spec: WorkloadSpec) -> np.ndarray:
    segments = list(spec.rate_schedule) or [(0.0, spec.request_rate)]
    out = []
    for i, (start, rate) in enumerate(segments):
        end = segments[i + 1][0] if i + 1 < len(segments) else spec.duration
        end = min(end, spec.duration)
        t = start
        while True:
            # draw in blocks; exponential gaps are memoryless so segments restart cleanly
            gaps = rng.exponential(1.0 / rate, size=max(16, int((end - t) * rate * 1.2) + 16))
            ts = t + np.cumsum(gaps)
            keep = ts[ts < end]
            out.append(keep)
            if len(keep) < len(ts):
                break
            t = float(ts[-1])
    return np.concatenate(out) if out else np.empty(0)


def generate(spec: WorkloadSpec) -> list[Request]:
    rng = np.random.default_rng(spec.seed)
    arrivals = _arrivals(rng, spec)
    n = len(arrivals)
    ins = spec.input_len_dist.sample(rng, n)
    outs = spec.output_len_dist.sample(rng, n)
    return [Request(i, float(arrivals[i]), int(ins[i]), int(outs[i]), spec.name) for i in range(n)]


def load_trace(path: str | Path) -> list[Request]:
    """Parse a trace file.

    One request per line: ``arrival_time, input_len, output_len[, app]``.
    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    reqs: list[Request] = []
    last = -math.inf
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (3, 4):
                raise ParseError(path, lineno, f"expected 3 or 4 comma-separated fields, got {len(parts)}")
            try:
                arrival = float(parts[0])
            except ValueError:
                raise SchemaError(path, lineno, "arrival_time", f"not a number: {parts[0]!r}") from None
            if not math.isfinite(arrival) or arrival < 0:
                raise SchemaError(path, lineno, "arrival_time", "must be finite and >= 0")
            if arrival < last:
                raise SchemaError(path, lineno, "arrival_time",
                                  f"non-monotone ({arrival} after {last})")
            lens = []
            for name, text in (("input_len", parts[1]), ("output_len", parts[2])):
                try:
                    v = int(text)
                except ValueError:
                    raise SchemaError(path, lineno, name, f"not an integer: {text!r}") from None
                if v < 1:
                    raise SchemaError(path, lineno, name, f"must be >= 1, got {v}")
                lens.append(v)
            app = parts[3] if len(parts) == 4 else ""
            reqs.append(Request(len(reqs), arrival, lens[0], lens[1], app))
            last = arrival
    return reqs


def write_trace(path: str | Path, requests: Iterable[Request]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# arrival_time,input_len,output_len,app\n")
        for r in requests:
            tail = f",{r.app}" if r.app else ""
            fh.write(f"{r.arrival_time!r},{r.input_len},{r.output_len}{tail}\n")
