"""Command line front end: run, sweep, preset-list, validate.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import sys

from .errors import ScenarioError, SimError
from .harness import PRESETS, execute, preset, sweep, write_sweep
from .scenario import KEYS, PROTOCOLS, load_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _scenario(args):
    if args.preset:
        return preset(args.preset)
    if args.scenario:
        return load_scenario(args.scenario)
    raise ScenarioError("give --scenario PATH or --preset NAME")


def _seeds(text):
    return [int(s) for s in text.replace(",", " ").split()]


def build_parser():
    p = argparse.ArgumentParser(prog="sctpsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", metavar="PATH", help="scenario file")
        sp.add_argument("--preset", metavar="NAME", choices=sorted(PRESETS),
                        help="use a built-in experiment instead of a file")
        sp.add_argument("--seed", type=int, help="override model.seed")
        sp.add_argument("--out", metavar="DIR", default="out", help="output directory")
        sp.add_argument("--protocol", choices=PROTOCOLS, help="run only this protocol")

    r = sub.add_parser("run", help="run a scenario and write CSV + summary")
    common(r)
    r.add_argument("--trace", action="store_true", help="write a per-packet trace")
    r.add_argument("--sim-time", type=float, help="override simulation_time (seconds)")

    s = sub.add_parser("sweep", help="sweep one key over values and seeds")
    common(s)
    s.add_argument("--param", required=True,
                   help="connections, loss_rate, paced_rate or message_size")
    s.add_argument("--values", required=True, help="comma separated values")
    s.add_argument("--seeds", help="comma separated seeds (default: --seed or model.seed)")
    s.add_argument("--sim-time", type=float, help="override simulation_time (seconds)")

    sub.add_parser("preset-list", help="list the built-in experiments")

    v = sub.add_parser("validate", help="parse and check a scenario file")
    v.add_argument("--scenario", metavar="PATH", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "preset-list":
            for name, pr in PRESETS.items():
                print(f"{name}\t{pr.description}")
            return EXIT_OK
        if args.command == "validate":
            sc = load_scenario(args.scenario)
            print(f"{args.scenario}: ok ({len(sc.explicit)} keys set, "
                  f"protocols: {', '.join(sc.protocols)})")
            return EXIT_OK
        sc = _scenario(args)
        if args.sim_time is not None:
            sc = sc.with_values(simulation_time=args.sim_time)
        if args.command == "run":
            res = execute(sc, seed=args.seed, protocol=args.protocol, trace=args.trace,
                          out_dir=args.out)
            n = len(res.cells) if hasattr(res, "cells") else len(res)
            print(f"wrote {n} result set(s) for {sc.name} to {args.out}")
            return EXIT_OK
        values = [v for v in args.values.replace(",", " ").split()]
        seeds = _seeds(args.seeds) if args.seeds else ([args.seed] if args.seed is not None else None)
        protos = [args.protocol] if args.protocol else None
        res = sweep(sc, args.param, values, seeds, protos)
        write_sweep(res, args.out, sc.name)
        print(f"wrote {len(res.cells)} sweep cells for {sc.name} to {args.out}")
        return EXIT_OK
    except ScenarioError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SimError, ValueError, KeyError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
