"""A listener under an INIT flood keeps no per-peer state.

Every spoofed INIT gets an INIT-ACK carrying a signed cookie, yet the
association table stays empty. A real client that echoes its cookie back
still gets in.
"""

import numpy as np

from sctpsim import wire
from sctpsim.netsim import ip
from sctpsim.sctp import SctpEndpoint

SERVER, CLIENT = ip(10, 1, 0, 1), ip(10, 0, 0, 1)
server = SctpEndpoint([SERVER], 5001)
rng = np.random.default_rng(0)

replies = 0
for i in range(10_000):
    init = wire.InitChunk(int(rng.integers(1, 1 << 32)), i, 65536, 1)
    pkt = wire.Packet(wire.CommonHeader(int(rng.integers(1, 65536)), 5001, 0), (init,))
    replies += len(server.receive(pkt, int(rng.integers(1, 1 << 32)), SERVER, 0))
print(f"10000 spoofed INITs -> {replies} INIT-ACKs, {server.association_count} associations")

client = SctpEndpoint([CLIENT], 5000, listening=False)
assoc = client.connect([SERVER], 5001)
out = client.drain()
now = 0
while out:
    now += 1
    nxt = []
    for e in out:
        ep = server if e.dst == SERVER else client
        nxt += ep.receive(e.packet, e.src, e.dst, now)
    out = nxt
print(f"legitimate client: {assoc.state.value}, listener now holds {server.association_count}")
