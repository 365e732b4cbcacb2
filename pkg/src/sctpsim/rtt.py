"""Smoothed RTT / RTO estimation shared by both transports."""

from .errors import NonPositiveSample


def rto_step(srtt, rttvar, sample, alpha, beta, rto_min, rto_max):
    """Fold one RTT sample into (srtt, rttvar) and return ``(srtt, rttvar, rto)``.

    ``srtt`` is None before the first sample.
    """
    if not sample > 0:
        raise NonPositiveSample(f"RTT sample must be positive, got {sample}")
    if srtt is None:
        srtt = sample
        rttvar = sample / 2
    else:
        rttvar = (1 - beta) * rttvar + beta * abs(srtt - sample)
        srtt = (1 - alpha) * srtt + alpha * sample
    rto = min(max(srtt + 4 * rttvar, rto_min), rto_max)
    return srtt, rttvar, rto
