"""Run the four bundled single-strategy scenarios at a few rates and print attainment.

    python demos/compare_strategies.py [rate ...]
"""

import sys
from pathlib import Path

from padgsim.config import load_scenario, run_scenario
from padgsim.metrics import all_metrics, summarize

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def main(rates):
    print(f"{'strategy':14s} {'rate':>5s} {'attain':>7s} {'ttft_ok':>8s} {'tpot_ok':>8s}")
    for name in ("padg", "nodg-separate", "nodg-hybrid", "fudg"):
        sc = load_scenario(SCENARIOS / f"{name}.json")
        for rate in rates:
            res = run_scenario(sc, rate=rate)
            ms = all_metrics(res.records, res.slo)
            row = summarize(res, sc.name, name, rate)
            ttft = sum(m.ttft_ok for m in ms) / len(ms)
            tpot = sum(m.tpot_ok for m in ms) / len(ms)
            print(f"{name:14s} {rate:5.1f} {row['attainment']:7.3f} {ttft:8.3f} {tpot:8.3f}")


if __name__ == "__main__":
    main([float(a) for a in sys.argv[1:]] or [2.0, 4.0, 8.0])
