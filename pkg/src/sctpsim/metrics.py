"""CPU, throughput, goodput and loss metrics plus the per-run accumulator.

The formula functions are pure. :class:`FlowStats` is fed by the transports
and the network during a run and turned into :class:`MetricsRow` records
(one per time bucket and connection) at the end.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

from .errors import (EmptySamples, NonPositive, NonPositiveCapacity, NonPositiveRtt,
                     OutOfRange, ZeroSent)
from .pipeline import CopyStage

NS = 1_000_000_000


# ------------------------------------------------------------ formulas
def uscpu(idle_pct, ipf_pct):
    """Utilized CPU sample: 100 minus idle time minus the per-fetch share."""
    if not (0 <= idle_pct <= 100 and 0 <= ipf_pct <= 100):
        raise OutOfRange(f"idle {idle_pct} / ipf {ipf_pct} outside [0, 100]")
    if idle_pct + ipf_pct > 100:
        raise OutOfRange(f"idle {idle_pct} + ipf {ipf_pct} exceeds 100")
    # float rounding can dip a hair below zero when the inputs sum to 100
    return max(100 - idle_pct - ipf_pct, 0)


def cpu_utilization(samples):
    """Arithmetic mean of USCPU samples."""
    samples = list(samples)
    if not samples:
        raise EmptySamples("cpu_utilization needs at least one sample")
    return sum(samples) / len(samples)


def goodput(acked_segments, sent_segments):
    if sent_segments < 1:
        raise ZeroSent("goodput needs at least one sent segment")
    return acked_segments * 100 / sent_segments


def max_cwnd(rtt, bandwidth, p_k):
    """Largest whole number of ``p_k``-byte packets in one bandwidth-delay product."""
    if rtt <= 0 or bandwidth <= 0 or p_k <= 0:
        raise NonPositive(f"max_cwnd needs positive inputs, got {rtt}, {bandwidth}, {p_k}")
    w = math.floor(rtt * bandwidth / p_k)
    # floor of a rounded product can be off by one; correct against the exact bound
    while w * p_k > rtt * bandwidth:
        w -= 1
    while (w + 1) * p_k <= rtt * bandwidth:
        w += 1
    return w


def throughput_est(w, mss, rtt):
    if rtt <= 0:
        raise NonPositiveRtt(f"rtt must be positive, got {rtt}")
    return w * mss / rtt


def bandwidth_estimate(b_prev, rtt, p_k, t_k, literal=False):
    """Current bandwidth from the previous estimate and one acknowledged packet.

    The default groups the terms as ``(b_prev*rtt + p_k) / (rtt + t_k)``;
    ``literal=True`` evaluates the ungrouped expression left to right.
    """
    if rtt <= 0:
        raise NonPositiveRtt(f"rtt must be positive, got {rtt}")
    if literal:
        return b_prev * rtt + p_k / rtt + t_k
    return (b_prev * rtt + p_k) / (rtt + t_k)


def loss_rate(sent, dropped):
    if sent < 1:
        raise ZeroSent("loss_rate needs at least one sent packet")
    if not 0 <= dropped <= sent:
        raise OutOfRange(f"dropped {dropped} not within 0..{sent}")
    return dropped * 100 / sent


# ----------------------------------------------------------- CPU model
@dataclass(frozen=True)
class CpuSample:
    idle_pct: float
    ipf_pct: float
    at: float

    @property
    def uscpu(self):
        return uscpu(self.idle_pct, self.ipf_pct)


@dataclass
class CostModel:
    """Work units charged per copied byte and per send call."""

    per_byte: float = 1.0
    per_call: float = 2000.0
    capacity: float = 5e5        # work units per second
    ipf_pct: float = 20.0
    multipliers: dict = None     # CopyStage -> factor, default 1.0

    def multiplier(self, stage):
        if not self.multipliers:
            return 1.0
        return self.multipliers.get(stage, 1.0)


def synthesize_cpu_samples(account, per_stage_cost, per_call_overhead, cpu_capacity, interval,
                           ipf_pct, multipliers=None, n_intervals=None):
    """One :class:`CpuSample` per interval of a bucketed copy account.

    ``per_stage_cost`` is work units per byte, either one number or a mapping
    per stage; ``interval`` is in seconds and must match ``account.interval``.
    """
    if cpu_capacity <= 0:
        raise NonPositiveCapacity(f"cpu_capacity must be positive, got {cpu_capacity}")
    if interval <= 0:
        raise NonPositive(f"interval must be positive, got {interval}")
    if n_intervals is None:
        keys = set(account.bucket_bytes) | set(account.bucket_calls)
        n_intervals = max(keys) + 1 if keys else 0
    budget = cpu_capacity * interval
    out = []
    for b in range(n_intervals):
        work = 0.0
        for stage, nbytes in account.bucket_bytes.get(b, {}).items():
            cost = per_stage_cost.get(stage, 1.0) if isinstance(per_stage_cost, dict) else per_stage_cost
            mult = multipliers.get(stage, 1.0) if multipliers else 1.0
            work += nbytes * cost * mult
        work += account.bucket_calls.get(b, 0) * per_call_overhead
        idle = max(0.0, 100.0 * (1.0 - work / budget))
        # clamp so that USCPU stays within [0, 100]
        idle = min(idle, 100.0 - ipf_pct)
        out.append(CpuSample(idle, ipf_pct, b * interval))
    return out


# ------------------------------------------------------------- records
@dataclass
class MetricsRow:
    scenario_id: str
    protocol: str
    seed: int
    connections: int
    time_bucket: int
    cpu_utilization: float
    throughput_bps: float
    goodput_pct: float
    loss_rate_pct: float
    copy_user_bytes: int
    copy_bundle_bytes: int
    copy_dma_bytes: int
    packets_sent: int
    packets_acked: int
    packets_dropped: int
    connection: int = 0
    throughput_est: float = None


CSV_COLUMNS = [f.name for f in fields(MetricsRow)]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows, columns=None):
    columns = columns or CSV_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        d = asdict(r) if not isinstance(r, dict) else r
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def summary_json(summary):
    """Serialise a run summary with sorted keys and floats rounded to 1e-9."""
    return json.dumps(_round_floats(summary), indent=2, sort_keys=True) + "\n"


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 9)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


# ---------------------------------------------------------- accumulator
class FlowStats:
    """Per-connection counters bucketed by simulation time.

    Goodput follows segments: a segment counts as acked once, in the bucket
    where it was first sent, and contributes every transmission to that
    bucket's sent count. Segments never acknowledged are left out.
    """

    def __init__(self, interval_ns, header_bytes, bottleneck_bps, literal_bandwidth=False):
        self.interval = interval_ns
        self.header_bytes = header_bytes
        self.bottleneck_Bps = bottleneck_bps / 8
        self.literal_bandwidth = literal_bandwidth
        self.seg_acked = {}
        self.seg_sent = {}
        self.packets_sent = {}
        self.packets_dropped = {}
        self.packets_acked = {}
        self.delivered_bytes = {}
        self.delivered_messages = 0
        self.estimate = {}          # bucket -> (b_current, srtt, p_k)
        self._b = 0.0
        self.retransmissions = 0

    def segment_acked(self, first_sent_at, transmit_count, nbytes, now, srtt):
        iv = self.interval
        b = first_sent_at // iv
        self.seg_acked[b] = self.seg_acked.get(b, 0) + 1
        self.seg_sent[b] = self.seg_sent.get(b, 0) + transmit_count
        self.retransmissions += transmit_count - 1
        nb = now // iv
        self.packets_acked[nb] = self.packets_acked.get(nb, 0) + 1
        if srtt:
            p_k = nbytes + self.header_bytes
            t_k = p_k / self.bottleneck_Bps
            self._b = bandwidth_estimate(self._b, srtt, p_k, t_k, self.literal_bandwidth)
            self.estimate[nb] = (self._b, srtt, p_k)

    def packet_sent(self, now):
        b = now // self.interval
        self.packets_sent[b] = self.packets_sent.get(b, 0) + 1

    def packet_dropped(self, sent_at):
        b = sent_at // self.interval
        self.packets_dropped[b] = self.packets_dropped.get(b, 0) + 1

    def delivered(self, nbytes, now):
        b = now // self.interval
        self.delivered_bytes[b] = self.delivered_bytes.get(b, 0) + nbytes
        self.delivered_messages += 1

    # -- totals
    def totals(self):
        sent = sum(self.packets_sent.values())
        dropped = sum(self.packets_dropped.values())
        ss = sum(self.seg_sent.values())
        sa = sum(self.seg_acked.values())
        return {
            "packets_sent": sent,
            "packets_dropped": dropped,
            "packets_acked": sum(self.packets_acked.values()),
            "segments_sent": ss,
            "segments_acked": sa,
            "retransmissions": self.retransmissions,
            "delivered_bytes": sum(self.delivered_bytes.values()),
            "delivered_messages": self.delivered_messages,
            "goodput_pct": goodput(sa, ss) if ss else None,
            "loss_rate_pct": loss_rate(sent, dropped) if sent else None,
        }

    def bucket_values(self, b, bucket_seconds, mss):
        """Per-bucket throughput, goodput, loss and throughput estimate."""
        ss = self.seg_sent.get(b, 0)
        sent = self.packets_sent.get(b, 0)
        est = None
        if b in self.estimate:
            bc, rtt, p_k = self.estimate[b]
            if bc > 0:
                est = throughput_est(max_cwnd(rtt, bc, p_k), mss, rtt)
        return {
            "throughput_bps": self.delivered_bytes.get(b, 0) * 8 / bucket_seconds,
            "goodput_pct": goodput(self.seg_acked.get(b, 0), ss) if ss else None,
            "loss_rate_pct": loss_rate(sent, self.packets_dropped.get(b, 0)) if sent else None,
            "packets_sent": sent,
            "packets_acked": self.packets_acked.get(b, 0),
            "packets_dropped": self.packets_dropped.get(b, 0),
            "throughput_est": est,
        }


def account_bucket_bytes(account, b, stage):
    per = account.bucket_bytes.get(b)
    return per.get(stage, 0) if per else 0


STAGES = (CopyStage.USER_TO_MESSAGE, CopyStage.BUNDLE_TO_NIC, CopyStage.NIC_DMA)
