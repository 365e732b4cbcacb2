"""Exception hierarchy shared by every layer of the simulator."""


class SimError(Exception):
    """Base class for all errors raised by sctpsim."""


# wire model
class WireError(SimError, ValueError):
    pass


class OversizeChunk(WireError):
    pass


class Truncated(WireError):
    pass


class BadChecksum(WireError):
    pass


# transport
class TransportError(SimError):
    pass


class NoAddresses(TransportError, ValueError):
    pass


class NotEstablished(TransportError):
    pass


class BadStream(TransportError, ValueError):
    pass


class StaleCookie(TransportError):
    pass


class BadCookieSignature(TransportError):
    pass


class NonPositiveSample(TransportError, ValueError):
    pass


# send pipeline
class PipelineError(SimError):
    pass


class EmptyMessage(PipelineError, ValueError):
    pass


class DoubleRelease(PipelineError):
    pass


class IncompleteFragments(PipelineError):
    """Not every fragment of a message has arrived yet; callers should wait."""


# netsim
class PastEvent(SimError, ValueError):
    pass


class DanglingAddress(SimError, KeyError):
    pass


# metrics
class MetricsError(SimError, ValueError):
    pass


class OutOfRange(MetricsError):
    pass


class EmptySamples(MetricsError):
    pass


class ZeroSent(MetricsError):
    pass


class NonPositive(MetricsError):
    pass


class NonPositiveRtt(MetricsError):
    pass


class NonPositiveCapacity(MetricsError):
    pass


# harness
class ScenarioError(SimError):
    """Configuration problem; ``key`` and ``line`` locate it when known."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class ParseError(ScenarioError):
    pass


class UnknownKey(ScenarioError):
    pass


class InvalidValue(ScenarioError):
    pass


class UnsweepableKey(ScenarioError):
    pass


class UnknownPreset(ScenarioError):
    pass
