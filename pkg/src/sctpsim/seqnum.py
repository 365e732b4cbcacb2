"""Serial-number arithmetic for wrapping sequence spaces.

Transports keep sequence numbers as unbounded Python ints internally and only
fold them to 16/32 bits on the wire. ``unwrap`` maps a wire value back to the
unbounded integer nearest a known reference.
"""

MASK16 = 0xFFFF
MASK32 = 0xFFFFFFFF


def serial_lt(a, b, bits=32):
    """True if ``a`` precedes ``b`` in ``bits``-bit serial arithmetic (RFC 1982)."""
    half = 1 << (bits - 1)
    mod = 1 << bits
    a &= mod - 1
    b &= mod - 1
    return a != b and ((b - a) % mod) < half


def serial_le(a, b, bits=32):
    return (a - b) % (1 << bits) == 0 or serial_lt(a, b, bits)


def unwrap(value, reference, bits=32):
    """Return the integer congruent to ``value`` mod 2**bits closest to ``reference``."""
    mod = 1 << bits
    half = mod >> 1
    delta = (value - reference) % mod
    if delta >= half:
        delta -= mod
    return reference + delta
