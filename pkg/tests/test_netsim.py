import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctpsim import netsim
from sctpsim.errors import DanglingAddress, PastEvent
from sctpsim.netsim import Datagram, EventKind, Link, Simulator, Timer, build_topology, ip

MS = 1_000_000


def make_link(sim, **kw):
    kw.setdefault("bandwidth", 5e6)
    kw.setdefault("prop_delay", 0.2)
    link = Link(sim, "l", **kw)
    link.arrived = []
    link.deliver = lambda d, _l: link.arrived.append((sim.now, d))
    return link


def dg(size, seq=0):
    return Datagram(1, 2, 0, None, size, seq=seq)


# ----------------------------------------------------------- scheduling
def test_schedule_now_runs_before_later():
    sim = Simulator()
    order = []
    sim.schedule(5, EventKind.APP_SEND, order.append, "later")
    sim.schedule(0, EventKind.APP_SEND, order.append, "now")
    sim.run_until(1)
    assert order == ["now", "later"]


def test_ties_run_in_schedule_order():
    sim = Simulator()
    order = []
    for i in range(10):
        sim.schedule(7, EventKind.APP_SEND, order.append, i)
    sim.run_until(1)
    assert order == list(range(10))


def test_past_event():
    sim = Simulator()
    sim.schedule(10, EventKind.APP_SEND, lambda: None)
    sim.run_until(1)
    with pytest.raises(PastEvent):
        sim.schedule(9, EventKind.APP_SEND, lambda: None)


def test_empty_run_returns_zero():
    sim = Simulator()
    assert sim.run_until(400) == 0
    assert sim.now == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10**6), max_size=60))
def test_clock_never_decreases(times):
    sim = Simulator()
    seen = []

    def fire(spawn):
        seen.append(sim.now)
        if spawn:
            sim.schedule_in(spawn, EventKind.TIMER_FIRE, fire, 0)

    for t in times:
        sim.schedule(t, EventKind.APP_SEND, fire, t % 1000)
    assert sim.run_until(1.0) == len(seen)
    assert seen == sorted(seen)


def test_timer_moves_later_and_earlier():
    sim = Simulator()
    fired = []
    t = Timer(sim, fired.append)
    t.set(100)
    t.set(300)          # later: the 100 event re-arms
    sim.run_until(1e-7 * 2)
    assert fired == []
    t.set(250)          # earlier than 300
    sim.run_until(1)
    assert fired == [250]
    t.set(400)
    t.set(None)
    sim.run_until(1)
    assert fired == [250]


# ---------------------------------------------------------------- links
def test_serialization_1024_bytes():
    sim = Simulator()
    link = make_link(sim)
    assert link.transmit(dg(1024)) == 1_638_400 + 200 * MS
    sim.run_until(1)
    assert link.arrived[0][0] == 201_638_400


def test_queue_limit_drops_51st():
    sim = Simulator()
    link = make_link(sim, queue_limit=50)
    results = [link.transmit(dg(1000, i)) for i in range(51)]
    assert all(r is not None for r in results[:50])
    assert results[50] is None
    assert link.queue_drops == 1
    # once the head finishes serializing there is room again
    sim.schedule(link.serialization(1000), EventKind.APP_SEND, lambda: None)
    sim.run_until(0.0016)
    assert link.transmit(dg(1000, 99)) is not None


def test_lossless_link_delivers_everything():
    sim = Simulator()
    link = make_link(sim, loss_rate=0.0)
    for i in range(40):
        link.transmit(dg(500, i))
    sim.run_until(10)
    assert len(link.arrived) == 40 and link.loss_drops == 0


def test_loss_rate_one_drops_everything():
    sim = Simulator()
    link = make_link(sim, loss_rate=1.0)
    for i in range(5):
        assert link.transmit(dg(500, i)) is None
    assert link.loss_drops == 5


def test_loss_consumes_capacity():
    sim = Simulator()
    link = make_link(sim)
    link.drop_filter = lambda d: d.seq == 0
    assert link.transmit(dg(1000, 0)) is None
    arrival = link.transmit(dg(1000, 1))
    assert arrival == 2 * link.serialization(1000) + 200 * MS


def test_link_rng_independent_of_other_links():
    a = netsim.link_rng(7, "bneck_fwd").random(5)
    netsim.link_rng(7, "other").random(100)
    b = netsim.link_rng(7, "bneck_fwd").random(5)
    assert list(a) == list(b)
    assert list(a) != list(netsim.link_rng(8, "bneck_fwd").random(5))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50 * MS), st.integers(40, 1500)), max_size=120),
       st.floats(0, 0.5), st.integers(1, 60), st.integers(0, 2**16),
       st.integers(0, 600 * MS))
def test_conservation_and_fifo(offers, loss, qlim, seed, stop):
    sim = Simulator()
    link = make_link(sim, loss_rate=loss, queue_limit=qlim)
    link.rng = netsim.link_rng(seed, "l")
    for i, (t, size) in enumerate(sorted(offers)):
        sim.schedule(t, EventKind.APP_SEND, link.transmit, dg(size, i))
    sim.run_until(stop / 1e9)
    c = link.counters()
    assert c["offered"] == c["delivered"] + c["queue_drops"] + c["loss_drops"] + c["in_flight"]
    assert c["in_flight"] >= 0
    seqs = [d.seq for _, d in link.arrived]
    assert seqs == sorted(seqs)


def _loss_pattern(seed):
    sim = Simulator()
    link = make_link(sim, loss_rate=0.2, queue_limit=1000)
    link.rng = netsim.link_rng(seed, "l")
    for i in range(300):
        link.transmit(dg(100, i))
    sim.run_until(5)
    return [d.seq for _, d in link.arrived], sim.executed


def test_determinism():
    assert _loss_pattern(3) == _loss_pattern(3)
    assert _loss_pattern(3) != _loss_pattern(4)


# ------------------------------------------------------------- topology
def test_dualpath_template():
    sim = Simulator()
    topo = build_topology(sim, {"template": "dualpath"})
    assert set(topo.links) == {"p0_fwd", "p0_rev", "p1_fwd", "p1_rev"}
    a = topo.host_addresses["A"]
    assert len(a) == 2
    b = topo.host_addresses["B"]
    assert topo.routes[(a[0], b[0])] != topo.routes[(a[1], b[1])]


def test_dumbbell_ten_share_bottleneck():
    sim = Simulator()
    topo = build_topology(sim, {"template": "dumbbell", "n": 10})
    fwd = {topo.routes[(ip(10, 0, 0, i), ip(10, 1, 0, i))][0] for i in range(1, 11)}
    assert fwd == {topo.links["bneck_fwd"]}
    link = topo.links["bneck_fwd"]
    assert (link.bandwidth, link.prop_delay, link.queue_limit) == (5e6, 200 * MS, 50)


def test_dumbbell_with_access_links():
    sim = Simulator()
    topo = build_topology(sim, {"template": "dumbbell", "n": 2, "access_bandwidth": 1e8})
    route = topo.routes[(ip(10, 0, 0, 2), ip(10, 1, 0, 2))]
    assert [l.name for l in route] == ["acc_s1_up", "bneck_fwd", "acc_r1_down"]
    got = []
    topo.bind(ip(10, 1, 0, 2), 9, got.append)
    topo.send(Datagram(ip(10, 0, 0, 2), ip(10, 1, 0, 2), 9, None, 100))
    sim.run_until(1)
    assert len(got) == 1


def test_dangling_address():
    spec = {"nodes": ["A"], "links": [], "addresses": {1: "Z"}, "routes": {}}
    with pytest.raises(DanglingAddress):
        build_topology(Simulator(), spec)
    topo = build_topology(Simulator(), {"template": "dualpath"})
    with pytest.raises(DanglingAddress):
        topo.bind(ip(9, 9, 9, 9), 1, print)
    with pytest.raises(DanglingAddress):
        topo.send(Datagram(ip(9, 9, 9, 9), 1, 0, None, 10))
