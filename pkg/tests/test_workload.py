import math

import numpy as np
import pytest

from padgsim.errors import ParseError, SchemaError
from padgsim.workload import (MAX_LEN, PRESETS, LengthDist, generate, load_trace, preset_spec,
                              truncated_stats, write_trace)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_sample_statistics(name):
    p = PRESETS[name]
    reqs = generate(preset_spec(name, 100.0, 200.0, seed=3))
    assert len(reqs) >= 10_000
    ins = np.array([r.input_len for r in reqs])
    outs = np.array([r.output_len for r in reqs])
    assert ins.mean() == pytest.approx(p.input_mean, rel=0.10)
    assert np.median(ins) == pytest.approx(p.input_median, rel=0.10)
    assert outs.mean() == pytest.approx(p.output_mean, rel=0.10)
    assert np.median(outs) == pytest.approx(p.output_median, rel=0.10)
    for arr in (ins, outs):
        assert arr.min() >= 1 and arr.max() <= MAX_LEN


def test_fit_hits_truncated_targets():
    d = LengthDist(343.76, 148.0)
    med, mean = truncated_stats(*d.params)
    assert med == pytest.approx(148.0, rel=1e-6)
    assert mean == pytest.approx(343.76, rel=1e-6)


def test_untruncated_closed_form_is_close_for_light_tails():
    # with little mass beyond the bound the closed form is nearly the truncated fit
    mu, sigma = LengthDist(163.8, 119.0).params
    assert mu == pytest.approx(math.log(119.0), abs=0.02)
    assert sigma == pytest.approx(math.sqrt(2 * math.log(163.8 / 119.0)), rel=0.05)


def test_poisson_count():
    n = len(generate(preset_spec("sharegpt", 2.0, 100.0, seed=11)))
    assert abs(n - 200) <= 3 * math.sqrt(200)


def test_arrivals_sorted_and_in_range():
    reqs = generate(preset_spec("alpaca", 5.0, 60.0, seed=1))
    t = [r.arrival_time for r in reqs]
    assert t == sorted(t)
    assert 0 <= t[0] and t[-1] < 60.0
    assert [r.id for r in reqs] == list(range(len(reqs)))


def test_generate_deterministic(tmp_path):
    a = generate(preset_spec("sharegpt", 3.0, 50.0, seed=7))
    b = generate(preset_spec("sharegpt", 3.0, 50.0, seed=7))
    write_trace(tmp_path / "a.txt", a)
    write_trace(tmp_path / "b.txt", b)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    c = generate(preset_spec("sharegpt", 3.0, 50.0, seed=8))
    assert [r.arrival_time for r in a] != [r.arrival_time for r in c]


def test_rate_schedule_counts():
    spec = preset_spec("alpaca", 1.0, 300.0, seed=2, rate_schedule=[(0, 1.0), (100, 5.0), (200, 10.0)])
    t = np.array([r.arrival_time for r in generate(spec)])
    for (lo, hi, rate) in [(0, 100, 1.0), (100, 200, 5.0), (200, 300, 10.0)]:
        n = ((t >= lo) & (t < hi)).sum()
        assert abs(n - rate * 100) <= 3 * math.sqrt(rate * 100)


def test_invalid_specs():
    with pytest.raises(ValueError):
        preset_spec("alpaca", 0.0, 10.0)
    with pytest.raises(ValueError):
        preset_spec("alpaca", 1.0, -1.0)
    with pytest.raises(ValueError):
        LengthDist(float("nan"), 10.0)


# -- trace files ------------------------------------------------------------------
def write(tmp_path, text):
    p = tmp_path / "trace.csv"
    p.write_text(text, encoding="utf-8")
    return p


def test_trace_roundtrip(tmp_path):
    p = write(tmp_path, "# comment\n0.0,10,5\n0.5,20,6,chat\n\n1.25,30,7\n")
    reqs = load_trace(p)
    assert [(r.arrival_time, r.input_len, r.output_len) for r in reqs] == [
        (0.0, 10, 5), (0.5, 20, 6), (1.25, 30, 7)]
    assert reqs[1].app == "chat"
    write_trace(tmp_path / "out.csv", reqs)
    assert load_trace(tmp_path / "out.csv") == reqs


def test_trace_zero_input_len(tmp_path):
    p = write(tmp_path, "0.0,10,5\n1.0,0,5\n")
    with pytest.raises(SchemaError) as exc:
        load_trace(p)
    assert exc.value.line == 2 and exc.value.field == "input_len"


def test_trace_non_monotone(tmp_path):
    p = write(tmp_path, "1.0,10,5\n0.5,10,5\n")
    with pytest.raises(SchemaError) as exc:
        load_trace(p)
    assert exc.value.field == "arrival_time" and exc.value.line == 2


def test_trace_bad_field_count(tmp_path):
    p = write(tmp_path, "0.0,10\n")
    with pytest.raises(ParseError) as exc:
        load_trace(p)
    assert exc.value.line == 1


def test_trace_non_numeric(tmp_path):
    with pytest.raises(SchemaError):
        load_trace(write(tmp_path, "abc,10,5\n"))
    with pytest.raises(SchemaError):
        load_trace(write(tmp_path, "0.0,1.5,5\n"))
