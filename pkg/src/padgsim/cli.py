"""Command line entry point: ``padgsim simulate | sweep | scale-demo``.

Exit codes: 0 success, 2 invalid configuration or input, 3 the horizon
was reached with unfinished requests.  Set ``PADGSIM_LOG`` to a logging
level name (``INFO``, ``DEBUG``) for progress output on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from pydantic import TypeAdapter, ValidationError

from . import metrics
from .config import (Scenario, StrategyConfig, build_simulator, load_scenario, run_scenario)
from .errors import ConfigError, NoFeasibleRate, ParseError, SchemaError

EXIT_OK, EXIT_INVALID, EXIT_NONQUIESCENT = 0, 2, 3

log = logging.getLogger("padgsim")


def _strategy_override(name: str):
    try:
        return TypeAdapter(StrategyConfig).validate_python({"kind": name})
    except ValidationError:
        raise ConfigError("strategy.kind", f"unknown strategy {name!r}") from None


def _apply_overrides(sc: Scenario, args) -> Scenario:
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if getattr(args, "strategy", None):
        st = _strategy_override(args.strategy)
        if st.kind != sc.strategy.kind:
            upd["strategy"] = st
    if upd:
        doc = sc.model_dump(exclude_none=True)
        doc.update({k: (v.model_dump(exclude_none=True) if hasattr(v, "model_dump") else v)
                    for k, v in upd.items()})
        if "strategy" in upd and doc["strategy"]["kind"] != "padg":
            doc.pop("scaling", None)
        try:
            sc = Scenario.model_validate(doc)
        except ValidationError as exc:
            e = exc.errors()[0]
            raise ConfigError(".".join(map(str, e["loc"])) or "<root>", e["msg"]) from None
    return sc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary_text(row: dict) -> str:
    return (f"{row['scenario']} [{row['strategy']}] rate={row['rate']!r} "
            f"attainment={row['attainment']:.4f} unfinished={row['unfinished']}")


def cmd_simulate(args) -> int:
    sc = _apply_overrides(load_scenario(args.config), args)
    res = run_scenario(sc, rate=args.rate)
    out = _out_dir(args)
    rate = args.rate if args.rate is not None else (sc.workload.rate or float("nan"))
    row = metrics.summarize(res, sc.name, sc.strategy.kind, rate)
    metrics.write_requests_csv(out / "requests.csv", res)
    metrics.write_summary_csv(out / "summary.csv", [row])
    metrics.write_routing_csv(out / "routing.csv", res)
    if res.scaling_log:
        metrics.write_scaling_csv(out / "scaling.csv", res)
    print(_summary_text(row))
    if args.percentile is not None:
        verdict = "meets" if row["attainment"] >= args.percentile else "misses"
        print(f"attainment {verdict} the {args.percentile:g} target")
    if not res.quiescent:
        print(f"horizon reached: {row['unfinished']} unfinished requests", file=sys.stderr)
        return EXIT_NONQUIESCENT
    return EXIT_OK


def _fudg_splits(st, instances: int):
    for n_p in range(1, instances):
        yield st.model_copy(update={"prefill_instances": n_p})


def sweep_strategy(sc: Scenario, st, percentile: float, *, lo=None, hi=None, grid=None, tol=None):
    """Goodput of one strategy; for fudg every prefill/decode split is tried."""
    candidates = list(_fudg_splits(st, sc.cluster.instances)) if st.kind == "fudg" else [st]
    best, best_st = None, None
    for cand in candidates:
        def run_at(rate, seed, abort, cand=cand):
            return build_simulator(sc, rate=rate, seed=seed, strategy=cand, abort_percentile=abort).run()
        try:
            g = metrics.goodput_search(run_at, percentile, lo, hi, tol=tol, grid=grid, seed=sc.seed)
        except NoFeasibleRate:
            continue
        if best is None or g.rate > best.rate:
            best, best_st = g, cand
    return best, best_st


def cmd_sweep(args) -> int:
    sc = _apply_overrides(load_scenario(args.config), args)
    if sc.sweep is None:
        raise ConfigError("sweep", "the sweep subcommand needs a 'sweep' section")
    sw = sc.sweep
    strategies = [sc.strategy] if args.strategy else (sw.strategies or [sc.strategy])
    percentiles = [args.percentile] if args.percentile is not None else sw.percentiles
    out = _out_dir(args)
    rows = []
    for st in strategies:
        for p in percentiles:
            g, used = sweep_strategy(sc, st, p, lo=sw.lo, hi=sw.hi, grid=sw.rates, tol=sw.tol)
            detail = ""
            if used is not None and used.kind == "fudg":
                n_p = used.prefill_instances
                detail = f"{n_p}P:{sc.cluster.instances - n_p}D"
            rows.append([st.kind, p, g.rate if g else None, g.tokens_per_s if g else None, detail])
            shown = f"{g.rate:.4f} req/s, {g.tokens_per_s:.1f} tok/s" if g else "infeasible"
            print(f"{st.kind:14s} P{round(p * 100):<3d} goodput {shown} {detail}".rstrip())
    metrics._write(out / "goodput.csv", ["strategy", "percentile", "goodput_rps", "goodput_tps", "detail"], rows)
    return EXIT_OK


def cmd_scale_demo(args) -> int:
    sc = _apply_overrides(load_scenario(args.config), args)
    if sc.scaling is None:
        raise ConfigError("scaling", "the scale-demo subcommand needs a 'scaling' section")
    res = run_scenario(sc, rate=args.rate)
    out = _out_dir(args)
    bucket = sc.scaling.timeline_bucket
    timeline = metrics.attainment_timeline(res.records, res.slo, bucket)
    metrics.write_scaling_csv(out / "scaling.csv", res)
    metrics.write_timeline_csv(out / "timeline.csv", timeline)
    metrics.write_requests_csv(out / "requests.csv", res)
    row = metrics.summarize(res, sc.name, sc.strategy.kind, args.rate or float("nan"))
    metrics.write_summary_csv(out / "summary.csv", [row])
    for t, action, before, after in res.scaling_log:
        print(f"t={t:8.1f}s {action:15s} {list(before)} -> {list(after)}")
    for start, n, att in timeline:
        print(f"[{start:7.0f}s] n={n:4d} attainment={att:.3f}")
    if not res.quiescent:
        return EXIT_NONQUIESCENT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="padgsim", description="LLM serving cluster simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (("simulate", cmd_simulate, "run one scenario"),
                               ("sweep", cmd_sweep, "goodput search per strategy and percentile"),
                               ("scale-demo", cmd_scale_demo, "ramped load with mitosis scaling")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="scenario JSON file")
        s.add_argument("--out", default="out", help="output directory (default: out)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--rate", type=float, default=None, help="override request rate (req/s)")
        s.add_argument("--strategy", default=None, help="padg | nodg-separate | nodg-hybrid | fudg")
        s.add_argument("--percentile", type=float, default=None, help="attainment target, e.g. 0.9")
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    level = os.environ.get("PADGSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.percentile is not None and not 0 < args.percentile <= 1:
        print("error: --percentile must lie in (0, 1]", file=sys.stderr)
        return EXIT_INVALID
    if args.rate is not None and args.rate <= 0:
        print("error: --rate must be > 0", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, SchemaError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
