"""Scenario files: a flat ``key: value`` text format.

Every row of the simulator parameter table has a lower_snake_case key;
artifact-only knobs live under the ``model.`` prefix. ``#`` starts a comment.
Protocol presets supply defaults that explicit keys in the file override.
"""

import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import InvalidValue, ParseError, UnknownKey

PROTOCOLS = ("tcp", "sctp_baseline", "sctp_optimized")


# ------------------------------------------------------------- parsers
def _int(text):
    try:
        return int(text, 0)
    except ValueError:
        f = float(text)
        if not f.is_integer():
            raise
        return int(f)


def _num(text):
    if "/" in text:
        return float(Fraction(text.replace(" ", "")))
    return float(text)


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text):
    return text


_RATE_UNITS = {"b": 1, "kb": 1e3, "mb": 1e6, "gb": 1e9}
_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6}


def parse_rate(text):
    m = re.fullmatch(r"\s*([0-9.]+(?:e[+-]?\d+)?)\s*([kKmMgG]?[bB])?(?:ps|/s)?\s*", text)
    if not m:
        raise ValueError(f"bad rate {text!r}")
    unit = (m.group(2) or "b").lower()
    return float(m.group(1)) * _RATE_UNITS[unit]


def parse_time(text):
    m = re.fullmatch(r"\s*([0-9.]+(?:e[+-]?\d+)?)\s*(s|ms|us)?\s*", text)
    if not m:
        raise ValueError(f"bad time {text!r}")
    return float(m.group(1)) * _TIME_UNITS[m.group(2) or "s"]


def _drop_tail(text):
    parts = text.split()
    if len(parts) != 2:
        raise ValueError("expected '<bandwidth> <delay>', e.g. '5Mb 200ms'")
    return (parse_rate(parts[0]), parse_time(parts[1]))


def _int_list(text):
    return tuple(_num(v) for v in text.replace(",", " ").split())


def _chunk_size(text):
    # the table row reads "512 and 1468"; the first listed size is not a default
    return _int(text)


# ----------------------------------------------------------- key table
@dataclass(frozen=True)
class KeySpec:
    default: object
    parse: object
    check: object = None       # callable(value) -> error message or None
    doc: str = ""


def _pos(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _prob(v):
    return None if 0 <= v <= 1 else "must be within [0, 1]"


def _pct(v):
    return None if 0 <= v <= 100 else "must be within [0, 100]"


def _oneof(*options):
    def check(v):
        return None if v in options else f"must be one of {', '.join(options)}"
    return check


def _min_mtu(v):
    return None if v >= 64 else "must be >= 64"


KEYS = {
    # simulator parameter table
    "debug_mask": KeySpec(1, _int, None, "recorded only"),
    "debug_file_index": KeySpec(0, _int, None, "recorded only"),
    "mtu": KeySpec(1500, _int, _min_mtu, "path MTU in bytes"),
    "data_chunk_size": KeySpec(1468, _chunk_size, _pos, "DATA chunk payload size (512 or 1468)"),
    "number_of_out_streams": KeySpec(1, _int, _pos, "SCTP outbound streams"),
    "cmt_congestion_window": KeySpec(1, _int, _nonneg, "stored, inert"),
    "cmt_del_acknowledgement": KeySpec(1, _int, _nonneg, "stored, inert"),
    "rtx_congestion_window": KeySpec(4, _int, _pos, "initial cwnd cap in MTUs"),
    "heart_beat_timer": KeySpec(False, _bool, None, "heartbeats enabled"),
    "initial_receiving_window": KeySpec(65536, _int, _pos, "receiver window in bytes"),
    "queue_size_limit": KeySpec(50, _int, _pos, "DropTail queue limit in packets"),
    "hb_interval": KeySpec(25.0, _num, _pos, "seconds between heartbeats"),
    "maximum_initial_retransmits": KeySpec(9, _int, _nonneg, "INIT retransmission limit"),
    "rto_initial": KeySpec(4.0, _num, _pos, "seconds"),
    "rto_max": KeySpec(60.0, _num, _pos, "seconds"),
    "rto_min": KeySpec(1.0, _num, _pos, "seconds"),
    "rto_beta": KeySpec(0.25, _num, lambda v: None if 0 < v < 1 else "must be within (0, 1)",
                        "RTTVAR gain"),
    "rto_alpha": KeySpec(0.125, _num, lambda v: None if 0 < v < 1 else "must be within (0, 1)",
                         "SRTT gain"),
    "association_maximum_retransmission": KeySpec(10, _int, _nonneg, "attempts"),
    "valid_cookie_life": KeySpec(50.0, _num, _pos, "seconds"),
    "path_maximum_retransmission": KeySpec(6, _int, _nonneg, "attempts per destination address"),
    "application_buffer_size": KeySpec(0, _int, _nonneg, "0 means unbounded"),
    "send_buffer_size": KeySpec(0, _int, _nonneg, "0 means unbounded"),
    "channel_type": KeySpec("wireless_channel", _str, None, "recorded only"),
    "drop_tail": KeySpec((5e6, 0.2), _drop_tail, None, "bottleneck '<rate> <delay>'"),
    "simulation_time": KeySpec(400.0, _num, _nonneg, "seconds"),
    "packet_size": KeySpec(1024, _int, _pos, "application write size in bytes"),
    "application": KeySpec("ftp", _str, _oneof("ftp", "paced", "onoff"), "traffic source"),
    "burst_time": KeySpec(0.5, _num, _pos, "on period of the on/off source"),
    "no_of_changes": KeySpec(10, _int, _nonneg, "recorded only"),
    "radio_propagation_model": KeySpec("two_ray_ground", _str, None, "recorded only"),
    "network_interface_type": KeySpec("ofdm", _str, None, "recorded only"),
    "mac_type": KeySpec("mac/802_16/bs", _str, None, "recorded only"),
    "link_layer_type": KeySpec("logical_link", _str, None, "recorded only"),
    "interface_queue_type": KeySpec("drop_tail/priority_queue", _str, None, "recorded only"),
    "pause_time": KeySpec(3.0, _num, _nonneg, "off period of the on/off source"),
    # artifact knobs
    "model.name": KeySpec("scenario", _str, None, "scenario id used in outputs"),
    "model.protocol": KeySpec("sctp_optimized", _str, _oneof(*PROTOCOLS, "all"), "protocol preset"),
    "model.topology": KeySpec("dumbbell", _str, _oneof("dumbbell", "dualpath"), "topology template"),
    "model.connections": KeySpec(1, _int, _pos, "sender/receiver pairs"),
    "model.loss_rate": KeySpec(0.0, _num, _prob, "per-link Bernoulli loss"),
    "model.paced_rate": KeySpec(1e6, parse_rate, _pos, "paced/onoff source rate, bits/s"),
    "model.message_limit": KeySpec(0, _int, _nonneg, "messages per connection, 0 = unlimited"),
    "model.seed": KeySpec(1, _int, _nonneg, "master seed"),
    "model.bucket": KeySpec(1.0, _num, _pos, "metrics bucket in seconds"),
    "model.fail_at": KeySpec(-1.0, _num, None, "time the primary path fails (<0: never)"),
    "model.fail_loss_rate": KeySpec(1.0, _num, _prob, "loss applied to the primary path at fail_at"),
    "model.start_stagger": KeySpec(0.001, _num, _nonneg, "seconds between connection starts"),
    "model.wire_encode": KeySpec(False, _bool, None, "encode/decode SCTP bytes on every hop"),
    "model.receiver_copies": KeySpec(True, _bool, None, "account receiver-side copies"),
    "model.delayed_ack": KeySpec(False, _bool, None, "TCP delayed ACKs"),
    "model.tcp_initial_cwnd": KeySpec(0, _int, _nonneg, "TCP initial cwnd bytes, 0 = RFC 3390"),
    "model.literal_bandwidth": KeySpec(False, _bool, None, "ungrouped bandwidth estimate"),
    "model.sweep_param": KeySpec("", _str, None, "sweep key for run"),
    "model.sweep_values": KeySpec((), _int_list, None, "values for model.sweep_param"),
    "model.seeds": KeySpec((), _int_list, None, "seeds to average over in sweeps"),
    "model.cost.per_byte": KeySpec(1.0, _num, _nonneg, "work units per copied byte"),
    "model.cost.per_call": KeySpec(2000.0, _num, _nonneg, "work units per send call"),
    "model.cost.capacity": KeySpec(5e5, _num, _pos, "work units per second"),
    "model.cost.ipf_pct": KeySpec(20.0, _num, _pct, "instructions-per-fetch share"),
    "model.cost.user_to_message": KeySpec(1.0, _num, _nonneg, "stage multiplier"),
    "model.cost.bundle_to_nic": KeySpec(1.0, _num, _nonneg, "stage multiplier"),
    "model.cost.nic_dma": KeySpec(1.0, _num, _nonneg, "stage multiplier"),
}

# Defaults each protocol preset layers over the table values.
PROTOCOL_DEFAULTS = {
    "sctp_optimized": {
        "model.cost.ipf_pct": 20.0,
        "model.cost.user_to_message": 1.0,
        "model.cost.bundle_to_nic": 0.0,
        "model.cost.nic_dma": 0.8,
    },
    "sctp_baseline": {
        "rto_initial": 3.0,
        "valid_cookie_life": 60.0,
        "hb_interval": 30.0,
        "maximum_initial_retransmits": 8,
        "model.cost.ipf_pct": 25.0,
        "model.cost.user_to_message": 1.0,
        "model.cost.bundle_to_nic": 1.0,
        "model.cost.nic_dma": 1.0,
    },
    "tcp": {
        "model.cost.ipf_pct": 20.0,
        "model.cost.user_to_message": 1.0,
        "model.cost.bundle_to_nic": 1.0,
        "model.cost.nic_dma": 1.0,
    },
}

SWEEPABLE = {
    "connections": "model.connections",
    "model.connections": "model.connections",
    "loss_rate": "model.loss_rate",
    "model.loss_rate": "model.loss_rate",
    "paced_rate": "model.paced_rate",
    "model.paced_rate": "model.paced_rate",
    "message_size": "packet_size",
    "packet_size": "packet_size",
}


@dataclass(frozen=True)
class Scenario:
    """Explicitly set keys plus the table defaults; see :meth:`resolved`."""

    explicit: dict = field(default_factory=dict)
    source: str = "<memory>"

    def resolved(self, protocol=None):
        protocol = protocol or self.explicit.get("model.protocol", KEYS["model.protocol"].default)
        values = {k: s.default for k, s in KEYS.items()}
        values.update(PROTOCOL_DEFAULTS.get(protocol, {}))
        values.update(self.explicit)
        values["model.protocol"] = protocol
        return values

    def get(self, key, protocol=None):
        return self.resolved(protocol)[key]

    @property
    def name(self):
        return self.explicit.get("model.name", KEYS["model.name"].default)

    @property
    def protocols(self):
        p = self.explicit.get("model.protocol", KEYS["model.protocol"].default)
        return list(PROTOCOLS) if p == "all" else [p]

    def with_values(self, **values):
        """Copy with extra explicit keys; dotted keys may be passed via a dict splat."""
        new = dict(self.explicit)
        for k, v in values.items():
            k = k if k in KEYS else k.replace("__", ".")
            if k not in KEYS:
                raise UnknownKey(f"unknown scenario key {k!r}", key=k)
            _check(k, v, None)
            new[k] = v
        return Scenario(new, self.source)


def _check(key, value, line):
    spec = KEYS[key]
    if spec.check is not None:
        problem = spec.check(value)
        if problem:
            raise InvalidValue(f"{key} {problem} (got {value!r})", key=key, line=line)


def parse_scenario(text, source="<string>"):
    explicit = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"expected 'key: value' in {source}", line=lineno)
        key, _, value = line.partition(":")
        key, value = key.strip().lower(), value.strip()
        if not key:
            raise ParseError(f"missing key in {source}", line=lineno)
        if key not in KEYS:
            raise UnknownKey(f"unknown scenario key {key!r} in {source}", key=key, line=lineno)
        if key in explicit:
            raise ParseError(f"duplicate key {key!r} in {source}", key=key, line=lineno)
        if value == "":
            raise InvalidValue(f"missing value for {key}", key=key, line=lineno)
        try:
            parsed = KEYS[key].parse(value)
        except (ValueError, ZeroDivisionError) as e:
            raise InvalidValue(f"cannot parse {key}: {e}", key=key, line=lineno) from None
        _check(key, parsed, lineno)
        explicit[key] = parsed
    sc = Scenario(explicit, source)
    _cross_check(sc)
    return sc


def _cross_check(sc):
    for proto in sc.protocols:
        v = sc.resolved(proto)
        if v["rto_min"] > v["rto_max"]:
            raise InvalidValue("rto_min exceeds rto_max", key="rto_min")
        if v["data_chunk_size"] + 28 > v["mtu"]:
            raise InvalidValue("data_chunk_size does not fit the MTU", key="data_chunk_size")
        if v["model.sweep_param"] and v["model.sweep_param"] not in SWEEPABLE:
            from .errors import UnsweepableKey
            raise UnsweepableKey(f"cannot sweep {v['model.sweep_param']!r}",
                                 key="model.sweep_param")


def load_scenario(path):
    path = Path(path)
    return parse_scenario(path.read_text(), str(path))


def format_value(key, value):
    """Render a value the way a scenario file spells it ('' when unset)."""
    if key == "drop_tail":
        rate, delay = value
        return f"{rate / 1e6:g}Mb {delay * 1e3:g}ms"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(f"{v:g}" for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def describe_keys():
    """Lines documenting every key with its default, for README and validate output."""
    out = []
    for k, s in KEYS.items():
        v = format_value(k, s.default)
        out.append(f"{k}: {v}  # {s.doc}" if v else f"{k}:  # unset; {s.doc}")
    return out
