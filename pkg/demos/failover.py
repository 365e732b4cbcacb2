"""Multi-homing failover on the two-path topology.

The primary path goes dark two seconds in. Watch the retransmission timer
back off until the path is declared dead, then the transfer finishes on the
alternate path.
"""

from pathlib import Path

from sctpsim.harness import Run
from sctpsim.scenario import load_scenario

sc = load_scenario(Path(__file__).resolve().parent.parent / "scenarios" / "failover.scn")
run = Run(sc)
res = run.execute()

assoc = run.conns[0]
conn = res.summary["per_connection"][0]
print(f"handshake done after {conn['handshake_s']:.3f} s")
for i, p in enumerate(assoc.paths):
    print(f"path {i}: active={p.active} errors={p.error_count} rto={p.rto:g}s")
print(f"primary is now path {assoc.primary}")
print(f"{run.delivered_msgs[0]} messages delivered, last one at {conn['completion_s']:.1f} s")
print("transport counters:", res.summary["transport_counters"])
