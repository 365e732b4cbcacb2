"""Short run of every preset experiment, one line per protocol.

The full-length versions are ``sctpsim run --preset NAME``; this trims
simulation time so the whole tour takes a few seconds.
"""

from sctpsim.harness import PRESETS, preset, run_scenario

for name in ("E1_cpu", "E3_goodput"):
    print(f"{name}: {PRESETS[name].description}")
    for res in run_scenario(preset(name, simulation_time=30.0)):
        s = res.summary
        print(f"  {res.protocol:15s} throughput {s['throughput_bps'] / 1e3:8.1f} kb/s  "
              f"goodput {s['goodput_pct']:6.2f}%  cpu {s['cpu_utilization']:5.1f}%")
