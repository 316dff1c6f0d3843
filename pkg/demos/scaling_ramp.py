"""Ramped load on one macro: attainment per bucket next to the scaling actions.

    python demos/scaling_ramp.py [scenario.json]
"""

import sys
from pathlib import Path

from padgsim.config import load_scenario, run_scenario
from padgsim.metrics import attainment_timeline

DEFAULT = Path(__file__).resolve().parent.parent / "scenarios" / "scale-demo.json"


def main(path):
    sc = load_scenario(path)
    res = run_scenario(sc)
    bucket = sc.scaling.timeline_bucket
    actions = {}
    for t, action, before, after in res.scaling_log:
        actions.setdefault(int(t // bucket), []).append(f"{action} {list(before)}->{list(after)}")
    target = sc.scaling.target_attainment
    for k, (start, n, att) in enumerate(attainment_timeline(res.records, res.slo, bucket)):
        bar = "#" * round(20 * att) if n else ""
        flag = "<" if n and att < target else " "
        print(f"{start:6.0f}s n={n:4d} {att:5.2f} {flag} {bar:20s} {'; '.join(actions.get(k, []))}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else DEFAULT)
