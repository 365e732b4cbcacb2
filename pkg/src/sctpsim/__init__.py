"""Packet-level simulator comparing an SCTP-lite transport with a TCP Reno baseline."""

from .harness import PRESETS, Run, RunResult, execute, preset, run_scenario, sweep
from .scenario import Scenario, load_scenario, parse_scenario

__all__ = ["PRESETS", "Run", "RunResult", "Scenario", "execute", "load_scenario",
           "parse_scenario", "preset", "run_scenario", "sweep"]
__version__ = "0.1.0"
