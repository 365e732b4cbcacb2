"""Experiment runner: scenarios in, CSV rows and run summaries out."""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .driver import GreedySource, HostDriver, OnOffSource, PacedSource, drop_hook
from .errors import InvalidValue, UnknownPreset, UnsweepableKey
from .metrics import (STAGES, FlowStats, MetricsRow, account_bucket_bytes, cpu_utilization,
                      rows_to_csv, summary_json, synthesize_cpu_samples)
from .netsim import (EventKind, Simulator, build_topology, dualpath_spec, dumbbell_spec, ip,
                     seconds_to_ns)
from .pipeline import CopyAccount, CopyStage
from .scenario import KEYS, PROTOCOLS, SWEEPABLE, Scenario
from .sctp import AssocConfig, SctpEndpoint, State
from .tcp import TcpConfig, TcpEndpoint, TcpState

SERVER_PORT = 5001
CLIENT_PORT_BASE = 10000
SCTP_OVERHEAD = 12 + 16 + 20
TCP_OVERHEAD = 40


def sctp_config(v):
    return AssocConfig(
        rto_initial=v["rto_initial"], rto_min=v["rto_min"], rto_max=v["rto_max"],
        rto_alpha=Fraction(v["rto_alpha"]).limit_denominator(1000),
        rto_beta=Fraction(v["rto_beta"]).limit_denominator(1000),
        assoc_max_retrans=v["association_maximum_retransmission"],
        path_max_retrans=v["path_maximum_retransmission"],
        max_init_retransmits=v["maximum_initial_retransmits"],
        valid_cookie_life=v["valid_cookie_life"], hb_interval=v["hb_interval"],
        heartbeat_enabled=v["heart_beat_timer"], initial_rwnd=v["initial_receiving_window"],
        out_streams=v["number_of_out_streams"], mtu=v["mtu"], chunk_size=v["data_chunk_size"],
        rtx_cwnd=v["rtx_congestion_window"], cmt_cwnd=v["cmt_congestion_window"],
        cmt_delayed_ack=v["cmt_del_acknowledgement"], receiver_copies=v["model.receiver_copies"])


def tcp_config(v):
    return TcpConfig(
        mss=v["mtu"] - 40, rto_initial=v["rto_initial"], rto_min=v["rto_min"],
        rto_max=v["rto_max"], rto_alpha=v["rto_alpha"], rto_beta=v["rto_beta"],
        max_init_retransmits=v["maximum_initial_retransmits"],
        max_retrans=v["association_maximum_retransmission"],
        initial_cwnd=v["model.tcp_initial_cwnd"] or None,
        initial_ssthresh=v["initial_receiving_window"], rwnd=v["initial_receiving_window"],
        delayed_ack=v["model.delayed_ack"])


def cost_multipliers(v):
    return {CopyStage.USER_TO_MESSAGE: v["model.cost.user_to_message"],
            CopyStage.BUNDLE_TO_NIC: v["model.cost.bundle_to_nic"],
            CopyStage.NIC_DMA: v["model.cost.nic_dma"]}


@dataclass
class RunResult:
    scenario_id: str
    protocol: str
    seed: int
    rows: list
    summary: dict
    trace: list = None

    def csv(self):
        return rows_to_csv(self.rows)


class Run:
    """One simulator instance for one protocol and seed.

    Construct, optionally poke at ``sim``/``topology`` (scripted drops,
    cwnd tracing), then call :meth:`execute`.
    """

    def __init__(self, scenario, protocol=None, seed=None, trace=False, trace_cwnd=False):
        if protocol is None:
            protocol = scenario.protocols[0]
        v = self.values = scenario.resolved(protocol)
        self.scenario = scenario
        self.protocol = protocol
        self.is_tcp = protocol == "tcp"
        self.seed = v["model.seed"] if seed is None else seed
        self.sim = Simulator()
        self.n = v["model.connections"]
        bw, delay = v["drop_tail"]
        self.bandwidth = bw
        if v["model.topology"] == "dumbbell":
            spec = dumbbell_spec(self.n, bw, delay, v["queue_size_limit"], v["model.loss_rate"])
        else:
            if self.n != 1:
                raise InvalidValue("the dualpath template carries exactly one connection",
                                   key="model.connections")
            spec = dualpath_spec(bw, delay, v["queue_size_limit"], v["model.loss_rate"])
        self.topology = build_topology(self.sim, spec, self.seed)
        self.topology.set_drop_hook(drop_hook)
        self.trace = [] if trace else None
        if trace:
            self.topology.set_trace(self._trace)
        self.interval = seconds_to_ns(v["model.bucket"])
        self.flows, self.clients, self.servers = [], [], []
        self.client_drivers, self.server_drivers = [], []
        self.conns = [None] * self.n
        self.peer_conns = [None] * self.n
        self.sources = [None] * self.n
        self.started_at = [None] * self.n
        self.established_at = [None] * self.n
        self.completed_at = [None] * self.n
        self.delivered_msgs = [0] * self.n
        self.delivered_bytes = [0] * self.n
        self.received = [[] for _ in range(self.n)] if v["model.message_limit"] else None
        self.keep_payloads = False
        self.trace_cwnd = trace_cwnd
        for i in range(self.n):
            self._setup(i)
        if v["model.fail_at"] >= 0:
            self.sim.schedule(seconds_to_ns(v["model.fail_at"]), EventKind.APP_SEND, self._fail)

    # ------------------------------------------------------------ set-up
    def _addresses(self, i):
        if self.values["model.topology"] == "dualpath":
            return [ip(10, 0, 0, 1), ip(10, 0, 1, 1)], [ip(10, 1, 0, 1), ip(10, 1, 1, 1)]
        return [ip(10, 0, 0, i + 1)], [ip(10, 1, 0, i + 1)]

    def _setup(self, i):
        v = self.values
        caddrs, saddrs = self._addresses(i)
        rng_c = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1, i)))
        rng_s = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2, i)))
        overhead = TCP_OVERHEAD if self.is_tcp else SCTP_OVERHEAD
        flow = FlowStats(self.interval, overhead, self.bandwidth, v["model.literal_bandwidth"])
        if self.is_tcp:
            cfg = tcp_config(v)
            client = TcpEndpoint(caddrs[0], CLIENT_PORT_BASE + i, cfg, rng_c, listening=False,
                                 account_interval=self.interval)
            server = TcpEndpoint(saddrs[0], SERVER_PORT, cfg, rng_s,
                                 account_interval=self.interval)
            server.on_connection = lambda conn, i=i: self._server_conn(i, conn)
        else:
            cfg = sctp_config(v)
            client = SctpEndpoint(caddrs, CLIENT_PORT_BASE + i, cfg, rng_c, listening=False,
                                  account_interval=self.interval)
            server = SctpEndpoint(saddrs, SERVER_PORT, cfg, rng_s,
                                  account_interval=self.interval)
            server.on_association = lambda a, i=i: self._server_conn(i, a)
        kind = "tcp" if self.is_tcp else "sctp"
        enc = v["model.wire_encode"]
        self.flows.append(flow)
        self.clients.append(client)
        self.servers.append(server)
        self.client_drivers.append(HostDriver(self.sim, self.topology, client, kind, flow, enc))
        self.server_drivers.append(HostDriver(self.sim, self.topology, server, kind, None, enc))
        self.sources[i] = self._make_source()
        start = seconds_to_ns(i * v["model.start_stagger"])
        self.sim.schedule(start, EventKind.APP_SEND, self._start, i)

    def _make_source(self):
        v = self.values
        size = v["packet_size"]
        streams = 1 if self.is_tcp else v["number_of_out_streams"]
        limit = v["model.message_limit"] or None
        app = v["application"]
        if app == "ftp":
            return GreedySource(size, streams, limit)
        if app == "paced":
            return PacedSource(size, v["model.paced_rate"], streams, limit)
        return OnOffSource(size, v["model.paced_rate"], v["burst_time"], v["pause_time"],
                           streams, limit)

    def _start(self, i):
        now = self.sim.now
        self.started_at[i] = now
        _, saddrs = self._addresses(i)
        client = self.clients[i]
        if self.is_tcp:
            conn = client.connect(saddrs[0], SERVER_PORT, now)
        else:
            conn = client.connect(saddrs, SERVER_PORT, now)
        conn.stats = self.flows[i]
        if self.trace_cwnd:
            conn.cwnd_trace = []
        conn.on_state_change = lambda c, st, t, i=i: self._state_change(i, c, st, t)
        self.conns[i] = conn
        self.client_drivers[i].flush()

    def _state_change(self, i, conn, state, now):
        if state.value == "ESTABLISHED" and self.established_at[i] is None:
            self.established_at[i] = now
            self.sim.schedule(now, EventKind.APP_SEND, self.sources[i].attach, conn,
                              self.client_drivers[i], now)

    def _server_conn(self, i, conn):
        self.peer_conns[i] = conn
        if self.is_tcp:
            conn.on_data = lambda c, data, now, i=i: self._tcp_delivered(i, data, now)
        else:
            conn.on_message = lambda a, sid, msg, now, i=i: self._sctp_delivered(i, msg, now)

    def _sctp_delivered(self, i, msg, now):
        self.flows[i].delivered(len(msg), now)
        self.delivered_msgs[i] += 1
        self.delivered_bytes[i] += len(msg)
        if self.received is not None and self.keep_payloads:
            self.received[i].append(msg)
        limit = self.values["model.message_limit"]
        if limit and self.delivered_msgs[i] == limit:
            self.completed_at[i] = now

    def _tcp_delivered(self, i, data, now):
        flow = self.flows[i]
        flow.delivered(len(data), now)
        self.delivered_bytes[i] += len(data)
        if self.received is not None and self.keep_payloads:
            self.received[i].append(data)
        limit = self.values["model.message_limit"]
        if limit and self.delivered_bytes[i] == limit * self.values["packet_size"]:
            self.completed_at[i] = now

    def _fail(self):
        names = ("p0_fwd", "p0_rev") if self.values["model.topology"] == "dualpath" \
            else ("bneck_fwd", "bneck_rev")
        for name in names:
            self.topology.links[name].loss_rate = self.values["model.fail_loss_rate"]

    def _trace(self, t, kind, link, dgram):
        node = link.dst_node if kind == "arrive" else link.src_node
        self.trace.append(f"{t / 1e9:.9f}\t{kind}\t{node}\t{link.name}\t{dgram.size}\t"
                          f"{dgram.protocol}\t{dgram.seq}")

    # --------------------------------------------------------------- run
    def execute(self):
        self.sim.run_until(self.values["simulation_time"])
        return self.result()

    def sender_account(self, i):
        conn = self.conns[i]
        if conn is None:
            return None
        return conn.account if self.is_tcp else conn.pipeline.account

    def receiver_account(self, i):
        conn = self.peer_conns[i]
        if conn is None or self.is_tcp:
            return None
        return conn.receiver_account

    def n_buckets(self):
        sim_time = self.values["simulation_time"]
        return int(math.ceil(sim_time / self.values["model.bucket"] - 1e-9)) if sim_time > 0 else 0

    def result(self):
        v = self.values
        nb = self.n_buckets()
        bucket_s = v["model.bucket"]
        mss = v["mtu"] - 40 if self.is_tcp else v["data_chunk_size"]
        mult = cost_multipliers(v)
        rows = []
        # CPU is a property of the sending host, so all of its associations are charged together
        accts = [a for a in (self.sender_account(i) for i in range(self.n)) if a is not None]
        samples = []
        if accts:
            host = CopyAccount.merged(accts, accts[0].interval)
            samples = synthesize_cpu_samples(
                host, v["model.cost.per_byte"], v["model.cost.per_call"], v["model.cost.capacity"],
                bucket_s, v["model.cost.ipf_pct"], mult, nb)
        cpu_values = [s.uscpu for s in samples]
        for i, flow in enumerate(self.flows):
            acct = self.sender_account(i)
            for b in range(nb):
                bv = flow.bucket_values(b, bucket_s, mss)
                cpu = cpu_values[b] if cpu_values else None
                rows.append(MetricsRow(
                    scenario_id=self.scenario.name, protocol=self.protocol, seed=self.seed,
                    connections=self.n, time_bucket=b, cpu_utilization=cpu,
                    throughput_bps=bv["throughput_bps"], goodput_pct=bv["goodput_pct"],
                    loss_rate_pct=bv["loss_rate_pct"],
                    copy_user_bytes=account_bucket_bytes(acct, b, CopyStage.USER_TO_MESSAGE) if acct else 0,
                    copy_bundle_bytes=account_bucket_bytes(acct, b, CopyStage.BUNDLE_TO_NIC) if acct else 0,
                    copy_dma_bytes=account_bucket_bytes(acct, b, CopyStage.NIC_DMA) if acct else 0,
                    packets_sent=bv["packets_sent"], packets_acked=bv["packets_acked"],
                    packets_dropped=bv["packets_dropped"], connection=i,
                    throughput_est=bv["throughput_est"]))
        rows.sort(key=lambda r: (r.time_bucket, r.connection))
        return RunResult(self.scenario.name, self.protocol, self.seed, rows,
                         self.summary(cpu_values), self.trace)

    def summary(self, cpu_values):
        v = self.values
        per_conn = []
        tot = {"packets_sent": 0, "packets_dropped": 0, "packets_acked": 0, "segments_sent": 0,
               "segments_acked": 0, "retransmissions": 0, "delivered_bytes": 0,
               "delivered_messages": 0}
        sender = {s.value: 0 for s in STAGES}
        receiver = {s.value: 0 for s in STAGES}
        counters = {}
        for i, flow in enumerate(self.flows):
            t = flow.totals()
            for k in tot:
                tot[k] += t[k]
            acct = self.sender_account(i)
            racct = self.receiver_account(i)
            for s in STAGES:
                if acct is not None:
                    sender[s.value] += acct.bytes(s)
                if racct is not None:
                    receiver[s.value] += racct.bytes(s)
            conn = self.conns[i]
            if conn is not None:
                for k, c in conn.counters.items():
                    counters[k] = counters.get(k, 0) + c
            hs = None
            if self.established_at[i] is not None:
                hs = (self.established_at[i] - self.started_at[i]) / 1e9
            done = None
            if self.completed_at[i] is not None:
                done = (self.completed_at[i] - self.started_at[i]) / 1e9
            state = conn.state.value if conn is not None else None
            per_conn.append({"connection": i, "handshake_s": hs, "completion_s": done,
                             "state": state, **t})
        sim_time = v["simulation_time"]
        return {
            "scenario_id": self.scenario.name,
            "protocol": self.protocol,
            "seed": self.seed,
            "connections": self.n,
            "sim_time": sim_time,
            "bucket": v["model.bucket"],
            "events_executed": self.sim.executed,
            "cpu_utilization": cpu_utilization(cpu_values) if cpu_values else None,
            "throughput_bps": tot["delivered_bytes"] * 8 / sim_time if sim_time > 0 else None,
            "goodput_pct": tot["segments_acked"] * 100 / tot["segments_sent"] if tot["segments_sent"] else None,
            "loss_rate_pct": tot["packets_dropped"] * 100 / tot["packets_sent"] if tot["packets_sent"] else None,
            "totals": tot,
            "copies": {"sender": sender, "receiver": receiver},
            "transport_counters": dict(sorted(counters.items())),
            "links": {name: link.counters() for name, link in sorted(self.topology.links.items())},
            "per_connection": per_conn,
        }


def run_scenario(scenario, seed=None, protocol=None, trace=False):
    """Run every protocol the scenario names (or just ``protocol``); list of RunResult."""
    protocols = [protocol] if protocol else scenario.protocols
    return [Run(scenario, p, seed, trace).execute() for p in protocols]


def write_outputs(results, out_dir, name=None):
    """Write ``<name>.csv`` and ``<name>.summary.json`` (plus traces) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = name or (results[0].scenario_id if results else "scenario")
    rows = [r for res in results for r in res.rows]
    csv_path = out / f"{name}.csv"
    csv_path.write_text(rows_to_csv(rows))
    sum_path = out / f"{name}.summary.json"
    sum_path.write_text(summary_json({"runs": [r.summary for r in results]}))
    paths = [csv_path, sum_path]
    for r in results:
        if r.trace is not None:
            p = out / f"{name}.{r.protocol}.seed{r.seed}.trace.tsv"
            p.write_text("time\tevent\tnode\tlink\tsize\tprotocol\tseq\n" + "\n".join(r.trace)
                         + ("\n" if r.trace else ""))
            paths.append(p)
    return paths


# --------------------------------------------------------------- sweeps
SWEEP_COLUMNS = ["scenario_id", "protocol", "param", "value", "seeds", "throughput_bps",
                 "goodput_pct", "loss_rate_pct", "cpu_utilization", "packets_sent",
                 "packets_acked", "packets_dropped"]
_CELL_METRICS = ["throughput_bps", "goodput_pct", "loss_rate_pct", "cpu_utilization"]


@dataclass
class SweepResult:
    param: str
    cells: list                       # aggregated dict rows, SWEEP_COLUMNS
    runs: list = field(default_factory=list)   # (protocol, value, RunResult)

    def csv(self):
        return rows_to_csv(self.cells, SWEEP_COLUMNS)

    def cell(self, protocol, value):
        for c in self.cells:
            if c["protocol"] == protocol and c["value"] == value:
                return c
        raise KeyError((protocol, value))


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def sweep(scenario, param, values, seeds=None, protocols=None, overrides=None):
    """Run the cross product values x seeds x protocols and average each cell over seeds."""
    key = SWEEPABLE.get(param)
    if key is None:
        raise UnsweepableKey(f"cannot sweep {param!r}; sweepable: connections, loss_rate, "
                             f"paced_rate, message_size", key=param)
    values = list(values)
    if not values:
        raise UnsweepableKey(f"empty value list for {param!r}", key=param)
    parsed = [KEYS[key].parse(str(v)) for v in values]
    seeds = list(seeds) if seeds else [scenario.resolved()["model.seed"]]
    protocols = list(protocols) if protocols else scenario.protocols
    base = dict(scenario.explicit)
    base.update(overrides or {})
    cells, runs = [], []
    for proto in sorted(protocols, key=PROTOCOLS.index):
        for val in sorted(parsed):
            sc = Scenario({**base, key: val}, scenario.source)
            results = [Run(sc, proto, s).execute() for s in seeds]
            runs.extend((proto, val, r) for r in results)
            cell = {"scenario_id": scenario.name, "protocol": proto, "param": key, "value": val,
                    "seeds": " ".join(str(s) for s in seeds)}
            for m in _CELL_METRICS:
                cell[m] = _mean(r.summary[m] for r in results)
            for m in ("packets_sent", "packets_acked", "packets_dropped"):
                cell[m] = _mean(r.summary["totals"][m] for r in results)
            cells.append(cell)
    return SweepResult(key, cells, runs)


def write_sweep(result, out_dir, name):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.sweep.csv"
    csv_path.write_text(result.csv())
    sum_path = out / f"{name}.summary.json"
    sum_path.write_text(summary_json({"sweep": result.param, "cells": result.cells,
                                      "runs": [r.summary for _, _, r in result.runs]}))
    return [csv_path, sum_path]


# -------------------------------------------------------------- presets
@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    values: dict

    def scenario(self, **overrides):
        return Scenario({**self.values, **overrides}, f"<preset {self.name}>")


PRESETS = {
    "E1_cpu": Preset("E1_cpu", "CPU utilisation with 12 KB messages, all three protocols", {
        "model.name": "E1_cpu", "model.protocol": "all", "packet_size": 12288,
        "application": "ftp"}),
    "E2_scaling": Preset("E2_scaling", "throughput vs 1..10 connections on a shared bottleneck", {
        "model.name": "E2_scaling", "model.protocol": "all", "model.topology": "dumbbell",
        "application": "ftp", "model.sweep_param": "connections",
        "model.sweep_values": tuple(range(1, 11))}),
    "E3_goodput": Preset("E3_goodput", "goodput of 128-byte messages, 4 SCTP streams, 1% loss", {
        "model.name": "E3_goodput", "model.protocol": "all", "packet_size": 128,
        "number_of_out_streams": 4, "model.loss_rate": 0.01, "application": "paced",
        "model.paced_rate": 128e3}),
    "E4_loss": Preset("E4_loss", "data loss vs offered paced rate", {
        "model.name": "E4_loss", "model.protocol": "all", "application": "paced",
        "model.loss_rate": 0.01, "model.sweep_param": "paced_rate",
        "model.sweep_values": (0.5e6, 1e6, 2e6, 4e6, 6e6)}),
}


def preset(name, **overrides):
    """Scenario for a named experiment; keyword overrides use dotted keys via dict splat."""
    try:
        p = PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; known: {', '.join(PRESETS)}",
                            key=name) from None
    return p.scenario(**overrides)


def execute(scenario, seed=None, protocol=None, trace=False, out_dir=None, seeds=None):
    """Run a scenario the way the CLI does: a sweep when it names one, else single runs."""
    v = scenario.resolved()
    protocols = [protocol] if protocol else scenario.protocols
    if v["model.sweep_param"]:
        if seeds is None:
            seeds = [seed] if seed is not None else (list(int(s) for s in v["model.seeds"])
                                                     or [v["model.seed"]])
        res = sweep(scenario, v["model.sweep_param"], v["model.sweep_values"], seeds, protocols)
        if out_dir is not None:
            write_sweep(res, out_dir, scenario.name)
        return res
    results = []
    for s in (seeds or [seed]):
        for p in protocols:
            results.append(Run(scenario, p, s, trace).execute())
    if out_dir is not None:
        write_outputs(results, out_dir, scenario.name)
    return results
