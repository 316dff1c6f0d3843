import random

import pytest

import oracles
from conftest import LOOSE_SLO, reqs, toy_config
from padgsim.baselines import (FairShareLink, FudgStrategy, FudgTopology, NodgHybrid, NodgSeparate,
                               least_loaded, outstanding_tokens)
from padgsim.engine import Simulator, run
from padgsim.model import kv_bytes_per_token


def test_least_loaded_routing():
    cfg = toy_config()
    sim = Simulator(reqs((0, 10, 1)), [cfg, cfg], NodgSeparate(), LOOSE_SLO)
    a, b = sim.instances[0], sim.instances[1]
    a.kv_tokens = 100
    b.kv_tokens = 5000
    assert least_loaded(sim, [0, 1]) is a
    b.kv_tokens = 100
    assert least_loaded(sim, [0, 1]) is a  # ties go to the lower id
    a.kv_tokens = 0
    sim.records[0].prompt_len = 200
    a.pending_prefills.append(0)
    assert outstanding_tokens(sim, a) == 200
    assert least_loaded(sim, [0, 1]) is b


def test_nodg_prefill_delays_decodes():
    # one request decoding; a second arrives mid-iteration and its prefill runs
    # before the next decode iteration
    cfg = toy_config()
    P0 = oracles.prefill(cfg, [100])
    d0 = oracles.decode(cfg, 1, 101)
    a1 = P0 + 0.5 * d0
    res = run(reqs((0, 100, 20), (a1, 300, 2)), [cfg], NodgSeparate(), LOOSE_SLO)
    r1 = res.records[1]
    assert r1.prefill_end_time == pytest.approx(P0 + d0 + oracles.prefill(cfg, [300]), rel=1e-12)
    # request 0 produced one token before the prefill and then had to wait for it
    r0 = res.records[0]
    no_arrival = run(reqs((0, 100, 20)), [cfg], NodgSeparate(), LOOSE_SLO).records[0]
    assert r0.completion_time - no_arrival.completion_time >= oracles.prefill(cfg, [300])


def test_hybrid_chunk_iterations():
    cfg = toy_config()
    res = run(reqs((0, 1024, 1)), [cfg], NodgHybrid(chunk_size=256, token_budget=256), LOOSE_SLO)
    r = res.records[0]
    expect = sum(oracles.hybrid(cfg, 0, 0, [(256, 256 * k)]) for k in range(4))
    assert r.prefill_end_time == pytest.approx(expect, rel=1e-12)
    assert res.stats["decode_steps"] == 4 + 1


def test_hybrid_budget_counts_decodes():
    cfg = toy_config(kv_tokens=100_000)
    strat = NodgHybrid(chunk_size=256, token_budget=512)
    sim = Simulator(reqs(*[(0, 5, 50)] * 100, (0, 1000, 1)), [cfg], strat, LOOSE_SLO)
    inst = sim.instances[0]
    for rid in range(100):
        r = sim.records[rid]
        r.prefilled = 5
        r.prefill_end_time = 0.0
        inst.kv_tokens += 5
        sim._join(inst, rid)
    inst.new_joins.clear()
    big = sim.records[100]
    inst.pending_prefills.append(100)
    big.routed_instance = 0
    chunks = sim.form_prefill_batch(inst, budget=512 - 100, chunk_cap=256)
    assert chunks == [(100, 256, 0)]
    # with a larger chunk cap the whole remaining budget goes to the prompt
    strat.chunk_size = 512
    chunks = sim.form_prefill_batch(inst, budget=512 - 100, chunk_cap=512)
    assert chunks == [(100, 412, 0)]


def test_hybrid_chunk_must_fit_budget():
    with pytest.raises(ValueError):
        NodgHybrid(chunk_size=1024, token_budget=512)


def test_hybrid_ttft_nondecreasing_in_chunks():
    cfg = toy_config()
    prev = 0.0
    for n in (200, 500, 800, 1300):
        r = run(reqs((0, n, 1)), [cfg], NodgHybrid(256, 256), LOOSE_SLO).records[0]
        assert r.prefill_end_time >= prev
        prev = r.prefill_end_time


# -- FuDG -----------------------------------------------------------------------------
def test_topology_validation():
    with pytest.raises(ValueError):
        FudgTopology((), (1,), 1.0)
    with pytest.raises(ValueError):
        FudgTopology((0,), (0,), 1.0)
    with pytest.raises(ValueError):
        FudgTopology((0,), (1,), 0.0)
    with pytest.raises(ValueError):
        FudgTopology((0,), (1,), 1.0, hops=3)
    t = FudgTopology.split(1, 3, 1e9)
    assert t.prefill_instances == (0,) and t.decode_instances == (1, 2, 3)


def test_transfer_time_1000_tokens(l20_cfg):
    topo = FudgTopology.split(1, 1, 1.25e9)
    res = run(reqs((0, 1000, 1)), [l20_cfg] * 2, FudgStrategy(topo), LOOSE_SLO)
    r = res.records[0]
    xfer = 1000 * 1_597_440 / 1.25e9
    assert xfer == pytest.approx(1.28, rel=0.01)
    assert r.decode_begin_time - r.prefill_end_time == pytest.approx(xfer, rel=1e-9)
    assert r.routed_instance == 1
    assert r.kv_transferred == 1000 * 1_597_440


def test_two_hops_double_transfer(l20_cfg):
    waits = []
    for hops in (1, 2):
        topo = FudgTopology.split(1, 1, 1.25e9, hops=hops, latency=0.01)
        r = run(reqs((0, 1000, 1)), [l20_cfg] * 2, FudgStrategy(topo), LOOSE_SLO).records[0]
        waits.append(r.decode_begin_time - r.prefill_end_time)
    assert waits[1] == pytest.approx(2 * waits[0], rel=1e-9)


def test_fair_share_link_two_transfers():
    events = []
    link = FairShareLink(100.0, lambda t, p: events.append((t, p)))
    link.start(0, 100.0, 0.0)   # alone: would finish at 1.0
    link.start(1, 100.0, 0.5)   # 50 left for #0, both now at 50 B/s
    t, (_, v) = events[-1]
    assert t == pytest.approx(1.5)
    assert link.on_event(v, t) == [0]
    t, (_, v) = events[-1]
    assert t == pytest.approx(2.0)
    assert link.on_event(v, t) == [1]
    assert oracles.fair_share_finish([100.0, 100.0], [0.0, 0.5], 100.0) == pytest.approx([1.5, 2.0])


def test_fair_share_stale_events_ignored():
    events = []
    link = FairShareLink(10.0, lambda t, p: events.append((t, p)))
    link.start(0, 10.0, 0.0)
    stale = events[-1][1][1]
    link.start(1, 10.0, 0.0)
    assert link.on_event(stale, 1.0) == []


def test_simultaneous_transfers_in_simulation(l20_cfg):
    # two prompts finish prefill together and share the link
    topo = FudgTopology.split(1, 1, 1.25e9)
    strat = FudgStrategy(topo)
    sim = Simulator(reqs((0, 800, 1), (0, 400, 1)), [l20_cfg] * 2, strat, LOOSE_SLO)
    res = sim.run()
    a, b = res.records
    kvpt = kv_bytes_per_token(l20_cfg.model)
    starts = [a.prefill_end_time, b.prefill_end_time]
    done = oracles.fair_share_finish([800 * kvpt, 400 * kvpt], starts, 1.25e9)
    assert a.decode_begin_time == pytest.approx(done[0], rel=1e-9)
    assert b.decode_begin_time == pytest.approx(done[1], rel=1e-9)


def random_requests(seed, n, rate, max_in=2000, max_out=100):
    rnd = random.Random(seed)
    t, out = 0.0, []
    for _ in range(n):
        t += rnd.expovariate(rate)
        out.append((t, rnd.randint(1, max_in), rnd.randint(1, max_out)))
    return reqs(*out)


@pytest.mark.parametrize("hops", [1, 2])
def test_transfer_byte_conservation(l20_cfg, hops):
    topo = FudgTopology.split(2, 2, 1.25e9, hops=hops, latency=0.001)
    strat = FudgStrategy(topo)
    res = run(random_requests(3, 80, 2.0), [l20_cfg] * 4, strat, LOOSE_SLO, check_invariants=True)
    assert res.quiescent
    kvpt = kv_bytes_per_token(l20_cfg.model)
    total = sum(r.input_len for r in res.records) * kvpt
    assert res.stats["kv_bytes_transferred"] == total == strat.bytes_transferred
    assert all(r.routed_instance in (2, 3) for r in res.records)
    assert all(inst.kv_tokens == 0 for inst in res.instances)


def test_link_bottleneck_grows_queue(l20_cfg):
    # offered KV rate far above the link: transfers in flight keep piling up
    topo = FudgTopology.split(1, 1, 1.25e8)
    res = run(random_requests(1, 120, 4.0, max_in=800, max_out=2), [l20_cfg] * 2, FudgStrategy(topo),
              LOOSE_SLO)
    recs = res.records

    def in_flight(t):
        return sum(r.prefill_end_time <= t < r.decode_begin_time for r in recs)

    marks = [recs[k].arrival_time for k in (30, 60, 90, 119)]
    counts = [in_flight(t) for t in marks]
    assert counts == sorted(counts) and counts[-1] > 2 * counts[0]


def test_decode_admission_waits_for_memory(l20_cfg):
    import dataclasses
    small = dataclasses.replace(l20_cfg, kv_capacity_bytes=1500 * kv_bytes_per_token(l20_cfg.model))
    topo = FudgTopology.split(1, 1, 1e12)
    rs = reqs((0, 1000, 50), (0, 1000, 50))
    res = run(rs, [l20_cfg, small], FudgStrategy(topo), LOOSE_SLO, check_invariants=True)
    a, b = res.records
    assert res.quiescent
    # the second request could only start decoding once the first released its KV
    assert b.decode_begin_time >= a.completion_time
