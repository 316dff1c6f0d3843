"""Per-request latency metrics, SLO attainment and goodput search.

TTFT is reported the way a client observes it: from arrival until the
first steady decode iteration, so it includes any wait between the end
of prefill and the start of decoding.  TPOT is measured from that point
on.  A request meets its SLO only if both checks hold; unfinished
requests count as misses.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .engine import RequestRecord, SimulationResult
from .errors import EmptyInput, NoFeasibleRate
from .workload import SloConfig

log = logging.getLogger(__name__)

PERCENTILES = (0.5, 0.9, 0.99)


@dataclass(frozen=True)
class RequestMetrics:
    request_id: int
    arrival: float
    input_len: int
    output_len: int
    instance: int | None
    reported_ttft: float  # nan when the request never started decoding
    true_ttft: float
    switch_wait: float
    tpot: float  # nan unless finished with >= 1 token
    ttft_ok: bool
    tpot_ok: bool
    finished: bool

    @property
    def ok(self) -> bool:
        return self.ttft_ok and self.tpot_ok


def request_metrics(r: RequestRecord, slo: SloConfig) -> RequestMetrics:
    nan = math.nan
    true_ttft = r.prefill_end_time - r.arrival_time if r.prefill_end_time is not None else nan
    if r.decode_begin_time is not None:
        reported = r.decode_begin_time - r.arrival_time
        wait = r.decode_begin_time - r.prefill_end_time
    else:
        reported = wait = nan
    finished = r.completion_time is not None
    tpot = nan
    tpot_ok = False
    if finished and r.tokens_generated >= 1:
        elapsed = r.completion_time - r.decode_begin_time
        tpot = elapsed / r.tokens_generated
        tpot_ok = elapsed <= r.tokens_generated * slo.slo_tpot
    ttft_ok = reported <= slo.slo_ttft  # nan compares False
    return RequestMetrics(r.id, r.arrival_time, r.input_len, r.true_output_len, r.routed_instance,
                          reported, true_ttft, wait, tpot, bool(ttft_ok), bool(tpot_ok), finished)


def all_metrics(records: Iterable[RequestRecord], slo: SloConfig) -> list[RequestMetrics]:
    return [request_metrics(r, slo) for r in records]


def attainment(records: Sequence[RequestRecord], slo: SloConfig,
               percentile: float | None = None) -> tuple[float, bool | None]:
    """Fraction of requests meeting both SLOs, and whether it reaches ``percentile``."""
    if not records:
        raise EmptyInput("attainment needs at least one request")
    ok = sum(request_metrics(r, slo).ok for r in records)
    frac = ok / len(records)
    return frac, (None if percentile is None else frac >= percentile)


def attainment_timeline(records: Sequence[RequestRecord], slo: SloConfig, bucket: float = 30.0,
                        end: float | None = None) -> list[tuple[float, int, float]]:
    """Attainment of the requests arriving in each ``bucket``-second interval."""
    if bucket <= 0:
        raise ValueError("bucket must be > 0")
    if not records:
        return []
    end = max(r.arrival_time for r in records) if end is None else end
    n = int(end // bucket) + 1
    tot = np.zeros(n, dtype=np.int64)
    good = np.zeros(n, dtype=np.int64)
    for r in records:
        k = int(r.arrival_time // bucket)
        if k < n:
            tot[k] += 1
            good[k] += request_metrics(r, slo).ok
    return [(k * bucket, int(tot[k]), float(good[k] / tot[k]) if tot[k] else math.nan) for k in range(n)]


def summarize(result: SimulationResult, scenario: str = "", strategy: str = "",
              rate: float = math.nan) -> dict:
    frac, _ = attainment(result.records, result.slo)
    return {
        "scenario": scenario,
        "strategy": strategy,
        "rate": rate,
        "attainment": frac,
        "pass_p50": frac >= 0.5,
        "pass_p90": frac >= 0.9,
        "pass_p99": frac >= 0.99,
        "unfinished": len(result.unfinished),
    }


# -- goodput ---------------------------------------------------------------------
@dataclass
class Probe:
    rate: float
    attainment: float
    passed: bool
    mean_output: float


@dataclass
class GoodputResult:
    rate: float
    tokens_per_s: float
    percentile: float
    probes: list[Probe] = field(default_factory=list)
    monotone_violations: list[tuple[float, float]] = field(default_factory=list)


def rate_seed(seed: int, rate: float) -> int:
    """Seed for the probe at ``rate``: independent across rates, reproducible."""
    return int(np.random.SeedSequence([seed, int(round(rate * 1e6))]).generate_state(1)[0])


def goodput_search(run_at: Callable[[float, int, float | None], SimulationResult], percentile: float,
                   lo: float, hi: float, *, tol: float | None = None,
                   grid: Sequence[float] | None = None, seed: int = 0,
                   early_abort: bool = True, full_grid: bool = False) -> GoodputResult:
    """Largest request rate whose attainment reaches ``percentile``.

    ``run_at(rate, seed, abort_percentile)`` runs one independent
    simulation; when ``abort_percentile`` is given the run may stop as soon
    as attainment can no longer reach it (the probe has failed anyway).
    With ``grid`` the rates are probed in ascending order until the first
    failure (every rate with ``full_grid``, so that non-monotone attainment
    shows up in ``monotone_violations``); otherwise bisection runs on
    ``[lo, hi]`` to width ``tol``.
    """
    if not 0 < percentile <= 1:
        raise ValueError("percentile must lie in (0, 1]")
    if grid is not None:
        grid = sorted(grid)
        if not grid:
            raise ValueError("empty rate grid")
        lo, hi = grid[0], grid[-1]
    if not (0 < lo <= hi):
        raise ValueError(f"invalid rate bounds lo={lo}, hi={hi}")
    probes: list[Probe] = []

    def probe(rate: float) -> Probe:
        res = run_at(rate, rate_seed(seed, rate), percentile if early_abort else None)
        frac, ok = attainment(res.records, res.slo, percentile)
        if res.aborted:
            ok = False
        out = float(np.mean([r.true_output_len for r in res.records]))
        p = Probe(rate, frac, bool(ok), out)
        probes.append(p)
        log.info("probe rate=%.4f attainment=%.4f %s", rate, frac, "pass" if ok else "fail")
        return p

    best: Probe | None = None
    if grid is not None:
        failed = False
        for rate in grid:
            p = probe(rate)
            failed = failed or not p.passed
            if not failed:
                best = p
            elif not full_grid:
                break
    else:
        p = probe(lo)
        if p.passed:
            best = p
            top = probe(hi)
            if top.passed:
                best = top
            else:
                a, b = lo, hi
                step = tol if tol is not None else (hi - lo) / 64
                while b - a > step:
                    mid = 0.5 * (a + b)
                    pm = probe(mid)
                    if pm.passed:
                        a, best = mid, pm
                    else:
                        b = mid
    if best is None:
        raise NoFeasibleRate(f"attainment below {percentile} even at {lo} req/s")
    ordered = sorted(probes, key=lambda p: p.rate)
    violations = [(p.rate, q.rate) for p, q in zip(ordered, ordered[1:])
                  if not p.passed and q.passed]
    if violations:
        log.warning("attainment not monotone in rate: %s", violations)
    return GoodputResult(best.rate, best.rate * best.mean_output, percentile, probes, violations)


# -- CSV output ---------------------------------------------------------------------
REQUEST_COLUMNS = ["request_id", "arrival", "input_len", "output_len", "instance",
                   "reported_ttft", "switch_wait", "tpot", "ttft_ok", "tpot_ok"]
SUMMARY_COLUMNS = ["scenario", "strategy", "rate", "attainment", "pass_p50", "pass_p90",
                   "pass_p99", "goodput_rps", "goodput_tps", "unfinished"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_requests_csv(path, result: SimulationResult) -> None:
    rows = ([m.request_id, m.arrival, m.input_len, m.output_len, m.instance, m.reported_ttft,
             m.switch_wait, m.tpot, m.ttft_ok, m.tpot_ok]
            for m in all_metrics(result.records, result.slo))
    _write(path, REQUEST_COLUMNS, rows)


def write_summary_csv(path, rows: Iterable[dict]) -> None:
    _write(path, SUMMARY_COLUMNS, ([row.get(c) for c in SUMMARY_COLUMNS] for row in rows))


def write_routing_csv(path, result: SimulationResult) -> None:
    _write(path, ["time", "request_id", "macro_id", "instance_id", "outcomes"], result.routing_log)


def write_scaling_csv(path, result: SimulationResult) -> None:
    rows = ((t, action, "|".join(map(str, before)), "|".join(map(str, after)))
            for t, action, before, after in result.scaling_log)
    _write(path, ["time", "action", "sizes_before", "sizes_after"], rows)


def write_timeline_csv(path, timeline: Sequence[tuple[float, int, float]]) -> None:
    _write(path, ["bucket_start", "requests", "attainment"], timeline)
