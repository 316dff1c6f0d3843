import dataclasses

import pytest

from padgsim.model import DeviceProfile, InstanceConfig, ModelProfile
from padgsim.profiles import load_profiles
from padgsim.workload import Request, SloConfig


@pytest.fixture(scope="session")
def profiles():
    return load_profiles()


@pytest.fixture(scope="session")
def llama(profiles):
    return profiles.models["llama-30b"]


@pytest.fixture(scope="session")
def l20_cfg(profiles):
    """Calibrated Llama-30B instance on 4 L20 GPUs."""
    return profiles.instance_config("llama-30b", "l20", 4)


def toy_config(kv_tokens: int = 10_000, switch_overhead: float = 0.0) -> InstanceConfig:
    """A small model whose durations are easy to reason about in hand traces."""
    model = ModelProfile("toy", layer_num=2, hidden_size=256, heads=4, size_per_head=64,
                         weights_bytes=1_000_000)
    device = DeviceProfile("toy-dev", peak_flops=1e12, mem_bandwidth=1e11, mem_capacity=1e12)
    kvpt = 2 * 2 * 256 * 2
    cfg = InstanceConfig(model, device, kv_capacity_bytes=kv_tokens * kvpt,
                         switch_overhead=switch_overhead)
    return cfg


def with_overhead(cfg: InstanceConfig, switch_overhead: float) -> InstanceConfig:
    return dataclasses.replace(cfg, switch_overhead=switch_overhead)


def reqs(*spec):
    """Requests from (arrival, input_len, output_len) triples."""
    return [Request(i, float(a), int(n), int(o)) for i, (a, n, o) in enumerate(spec)]


LOOSE_SLO = SloConfig(1e6, 1e3)


# -- acceptance reporting: one pass/fail line per criterion ---------------------------
_criteria: dict[int, dict] = {}


@pytest.fixture
def detail(request):
    """Collects short findings that are printed next to the criterion's verdict."""
    lines: list[str] = []
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        _criteria.setdefault(m.args[0], {"title": m.args[1], "passed": None, "lines": lines})
    return lines.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    entry = _criteria.setdefault(m.args[0], {"title": m.args[1], "passed": None, "lines": []})
    entry["passed"] = rep.passed
    if rep.failed and call.excinfo is not None:
        entry["lines"].append(f"failure: {call.excinfo.exconly().splitlines()[0][:200]}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        c = _criteria[n]
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[c["passed"]]
        tr.write_line(f"criterion {n}: {verdict}  {c['title']}")
        for line in c["lines"]:
            tr.write_line(f"    {line}")
