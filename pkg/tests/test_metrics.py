import csv
import io
import json
from fractions import Fraction

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from sctpsim import metrics
from sctpsim.errors import EmptySamples, NonPositive, NonPositiveCapacity, NonPositiveRtt, \
    OutOfRange, ZeroSent
from sctpsim.metrics import (CSV_COLUMNS, FlowStats, MetricsRow, bandwidth_estimate,
                             cpu_utilization, goodput, loss_rate, max_cwnd, rows_to_csv,
                             synthesize_cpu_samples, throughput_est, uscpu)
from sctpsim.pipeline import CopyAccount, CopyStage

pct = st.floats(0, 100, allow_nan=False)


# --------------------------------------------------------------- uscpu
def test_uscpu_worked_example():
    assert [uscpu(6, 25), uscpu(4, 20), uscpu(7, 30)] == [69, 76, 63]
    assert uscpu(100, 0) == 0


def test_uscpu_range_checks():
    with pytest.raises(OutOfRange):
        uscpu(80, 30)
    with pytest.raises(OutOfRange):
        uscpu(-1, 0)
    with pytest.raises(OutOfRange):
        uscpu(0, 101)


@given(pct, pct)
def test_uscpu_nonnegative(idle, ipf):
    assume(idle + ipf <= 100)
    assert 0 <= uscpu(idle, ipf) <= 100


# ------------------------------------------------------ cpu_utilization
def test_cpu_utilization_worked_example():
    assert cpu_utilization([69, 76, 63]) == pytest.approx(69.33, abs=0.005)


def test_cpu_utilization_trivial():
    assert cpu_utilization([42.5]) == 42.5
    assert cpu_utilization([0, 100]) == 50
    with pytest.raises(EmptySamples):
        cpu_utilization([])


@given(st.lists(pct, min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_cpu_utilization_permutation_and_bounds(xs, rnd):
    m = cpu_utilization(xs)
    ys = list(xs)
    rnd.shuffle(ys)
    assert cpu_utilization(ys) == pytest.approx(m)
    assert min(xs) - 1e-9 <= m <= max(xs) + 1e-9


# -------------------------------------------------------------- goodput
def test_goodput_examples():
    assert goodput(100, 100) == 100
    assert goodput(95, 100) == 95
    with pytest.raises(ZeroSent):
        goodput(0, 0)


def test_goodput_of_flow_is_100_iff_no_retransmissions():
    f = FlowStats(10**9, 52, 5e6)
    f.segment_acked(0, 1, 512, 10, None)
    f.segment_acked(0, 1, 512, 10, None)
    assert f.totals()["goodput_pct"] == 100 and f.retransmissions == 0
    f.segment_acked(0, 3, 512, 10, None)
    assert f.totals()["goodput_pct"] == pytest.approx(60) and f.retransmissions == 2


@given(st.lists(st.integers(1, 8), min_size=1, max_size=40))
def test_goodput_bounded(transmit_counts):
    f = FlowStats(10**9, 52, 5e6)
    for i, n in enumerate(transmit_counts):
        f.segment_acked(i * 10**8, n, 512, i * 10**8 + 1, None)
    gp = f.totals()["goodput_pct"]
    assert 0 < gp <= 100
    assert (gp == 100) == all(n == 1 for n in transmit_counts)


# ------------------------------------------------------------- max_cwnd
def test_max_cwnd_examples():
    assert max_cwnd(0.2, 625000, 1024) == 122
    assert max_cwnd(1.0, 1000, 1000) == 1
    assert max_cwnd(0.1, 1000, 1000) == 0
    with pytest.raises(NonPositive):
        max_cwnd(0, 1, 1)


@given(st.floats(1e-3, 10), st.floats(1, 1e8), st.integers(1, 9000))
def test_max_cwnd_floor_characterization(rtt, bw, p_k):
    w = max_cwnd(rtt, bw, p_k)
    assert w * p_k <= rtt * bw < (w + 1) * p_k


# -------------------------------------------------------- throughput_est
def test_throughput_est_examples():
    assert throughput_est(122, 1024, 0.2) == pytest.approx(624640)
    assert throughput_est(0, 1024, 0.2) == 0
    assert throughput_est(1, 1024, 1.0) == 1024
    with pytest.raises(NonPositiveRtt):
        throughput_est(1, 1, 0)


# ---------------------------------------------------- bandwidth_estimate
def test_bandwidth_estimate_examples():
    assert bandwidth_estimate(1000, 1, 1000, 1) == 1000
    assert bandwidth_estimate(300, 0.5, 1000, 0) == pytest.approx(300 + 1000 / 0.5)
    assert bandwidth_estimate(0, 0.2, 1024, 0.0016384) == pytest.approx(1024 / 0.2016384)
    assert round(bandwidth_estimate(0, 0.2, 1024, 0.0016384)) == 5078
    with pytest.raises(NonPositiveRtt):
        bandwidth_estimate(0, 0, 1, 1)


def test_bandwidth_estimate_literal_form():
    assert bandwidth_estimate(10, 2, 8, 3, literal=True) == 10 * 2 + 8 / 2 + 3


@given(st.floats(0.01, 5), st.integers(40, 9000), st.floats(1e-4, 1))
def test_bandwidth_fixed_point(rtt, p_k, t_k):
    b = p_k / t_k
    assert bandwidth_estimate(b, rtt, p_k, t_k) == pytest.approx(b)


# ------------------------------------------------------------ loss_rate
def test_loss_rate_examples():
    assert loss_rate(100, 0) == 0
    assert loss_rate(200, 10) == 5
    with pytest.raises(ZeroSent):
        loss_rate(0, 0)
    with pytest.raises(OutOfRange):
        loss_rate(5, 6)


def test_loss_rate_matches_link_conservation():
    from sctpsim.netsim import Datagram, EventKind, Link, Simulator, link_rng
    sim = Simulator()
    link = Link(sim, "x", 5e6, 0.2, queue_limit=20, loss_rate=0.1, rng=link_rng(1, "x"))
    link.deliver = lambda d, l: None
    for i in range(200):
        sim.schedule(i * 500_000, EventKind.APP_SEND, link.transmit, Datagram(1, 2, 0, None, 1000))
    sim.run_until(0.15)
    c = link.counters()
    dropped = c["queue_drops"] + c["loss_drops"]
    assert dropped == c["offered"] - c["delivered"] - c["in_flight"]
    assert loss_rate(c["offered"], dropped) == dropped * 100 / c["offered"]


# ------------------------------------------------------------ CPU model
def _account(per_bucket, calls=None):
    acct = CopyAccount(interval=10**9)
    for b, nbytes in per_bucket.items():
        acct.record(CopyStage.NIC_DMA, nbytes, b * 10**9)
    for b, n in (calls or {}).items():
        for _ in range(n):
            acct.record_call(b * 10**9)
    return acct


def test_idle_interval_is_zero_uscpu():
    (s,) = synthesize_cpu_samples(_account({}), 1.0, 0, 1000, 1.0, 20, n_intervals=1)
    assert s.uscpu == 0


def test_saturated_interval():
    (s,) = synthesize_cpu_samples(_account({0: 1000}), 1.0, 0, 1000, 1.0, 20)
    assert s.idle_pct == 0 and s.uscpu == 80


def test_cpu_model_charges_calls_and_multipliers():
    acct = _account({0: 400}, calls={0: 2})
    (s,) = synthesize_cpu_samples(acct, 1.0, 100, 1000, 1.0, 0,
                                  multipliers={CopyStage.NIC_DMA: 0.5})
    # work = 400 * 0.5 + 2 * 100 = 400 of 1000
    assert s.idle_pct == pytest.approx(60)


def test_cpu_model_needs_capacity():
    with pytest.raises(NonPositiveCapacity):
        synthesize_cpu_samples(_account({0: 1}), 1.0, 0, 0, 1.0, 20)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.floats(0, 50))
def test_cpu_model_monotone_in_bytes(a, extra, ipf):
    lo = synthesize_cpu_samples(_account({0: a}), 1.0, 2000, 5e5, 1.0, ipf)[0]
    hi = synthesize_cpu_samples(_account({0: a + extra}), 1.0, 2000, 5e5, 1.0, ipf)[0]
    assert hi.uscpu >= lo.uscpu
    assert 0 <= lo.uscpu <= 100


def test_doubling_bytes_doubles_work():
    one = synthesize_cpu_samples(_account({0: 1000}), 1.0, 0, 1e4, 1.0, 0)[0]
    two = synthesize_cpu_samples(_account({0: 2000}), 1.0, 0, 1e4, 1.0, 0)[0]
    assert 100 - two.idle_pct == pytest.approx(2 * (100 - one.idle_pct))


# -------------------------------------------------------------- records
def _row(**kw):
    base = dict(scenario_id="s", protocol="tcp", seed=1, connections=1, time_bucket=0,
                cpu_utilization=12.5, throughput_bps=1e6, goodput_pct=100.0, loss_rate_pct=0.0,
                copy_user_bytes=1, copy_bundle_bytes=2, copy_dma_bytes=3, packets_sent=4,
                packets_acked=4, packets_dropped=0)
    base.update(kw)
    return MetricsRow(**base)


def test_csv_header_and_values():
    text = rows_to_csv([_row(), _row(time_bucket=1, throughput_est=None)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == CSV_COLUMNS
    assert rows[0][:15] == ["scenario_id", "protocol", "seed", "connections", "time_bucket",
                            "cpu_utilization", "throughput_bps", "goodput_pct", "loss_rate_pct",
                            "copy_user_bytes", "copy_bundle_bytes", "copy_dma_bytes",
                            "packets_sent", "packets_acked", "packets_dropped"]
    assert rows[1][5] == "12.500000" and rows[2][-1] == ""


def test_summary_json_is_stable():
    a = metrics.summary_json({"b": 0.1 + 0.2, "a": [1, Fraction(1, 2) * 1.0]})
    assert json.loads(a) == {"a": [1, 0.5], "b": 0.3}
    assert a.index('"a"') < a.index('"b"')
