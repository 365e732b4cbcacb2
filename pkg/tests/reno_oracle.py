"""Reference TCP Reno window arithmetic, written independently of sctpsim.tcp.

``replay`` walks the event log seen at a sender (segments sent, ACKs
received, retransmission timeouts) and recomputes cwnd/ssthresh with the
textbook Reno rules. Its output is the table the simulator's cwnd trace is
compared against.
"""

MASK32 = 0xFFFFFFFF


def _unwrap(v, ref):
    d = (v - ref) & MASK32
    if d >= 1 << 31:
        d -= 1 << 32
    return ref + d


class RenoReference:
    def __init__(self, mss, cwnd, ssthresh, iss):
        self.mss = mss
        self.cwnd = cwnd
        self.ssthresh = ssthresh
        self.una = iss + 1
        self.nxt = iss + 1
        self.max = iss + 1
        self.dups = 0
        self.recovering = False
        self.table = []

    def _note(self, t):
        self.table.append((t, self.cwnd, self.ssthresh))

    def sent(self, seq, n):
        seq = _unwrap(seq, self.una)
        if seq == self.nxt:
            self.nxt = seq + n
        self.max = max(self.max, seq + n)

    def ack(self, t, ack, carries_data):
        a = _unwrap(ack, self.una)
        if a < self.una or a > self.max:
            return
        mss = self.mss
        if a == self.una:
            if carries_data or self.max == self.una:
                return
            self.dups += 1
            if self.dups == 3:
                self.ssthresh = max((self.nxt - self.una) // 2, 2 * mss)
                self.cwnd = self.ssthresh + 3 * mss
                self.recovering = True
                self._note(t)
            elif self.dups > 3 and self.recovering:
                self.cwnd += mss
                self._note(t)
            return
        self.dups = 0
        if self.recovering:
            self.recovering = False
            self.cwnd = self.ssthresh
        elif self.cwnd <= self.ssthresh:
            self.cwnd += mss
        else:
            self.cwnd += max(1, mss * mss // self.cwnd)
        self._note(t)
        self.una = a
        self.nxt = max(self.nxt, a)

    def timeout(self, t):
        if self.una == self.max:
            return
        self.ssthresh = max((self.nxt - self.una) // 2, 2 * self.mss)
        self.cwnd = self.mss
        self.dups = 0
        self.recovering = False
        self._note(t)
        self.nxt = self.una


def replay(log, mss, cwnd, ssthresh, iss):
    """Table of (time_ns, cwnd, ssthresh) implied by a sender event log."""
    ref = RenoReference(mss, cwnd, ssthresh, iss)
    for ev in log:
        kind = ev[0]
        if kind == "send":
            ref.sent(ev[1], ev[2])
        elif kind == "ack":
            ref.ack(ev[1], ev[2], ev[3])
        elif kind == "timeout":
            ref.timeout(ev[1])
    return ref.table
