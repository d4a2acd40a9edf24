"""Command-line entry point.

::

    vlct <stage> --config <path> [--seed N] [--out DIR] [--force]
    vlct synth --out DIR [--n N] [--seed N] [--signal S]

Exit codes: 0 success, 2 validation error, 3 missing prerequisite,
1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError, ConfigHashMismatch, MissingPrerequisite, VlctError
from .config import RunConfig
from .stages import STAGES, run_pipeline
from .synth import SyntheticSpec, synth

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_PREREQ = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message short
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlct", description="CT enterography volume-language pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage in STAGES + ("all",):
        s = sub.add_parser(stage, help=f"run the {stage} stage")
        s.add_argument("--config", required=True, help="run configuration (JSON)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="override the output directory")
        s.add_argument("--force", action="store_true", help="recompute even if cached")
    s = sub.add_parser("synth", help="write a seeded synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--signal", type=float, default=1.0)
    s.add_argument("--repeat-patient-fraction", type=float, default=0.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.stage == "synth":
            spec = SyntheticSpec(n_studies=args.n, seed=args.seed, signal=args.signal,
                                 repeat_patient_fraction=args.repeat_patient_fraction)
            print(json.dumps(synth(spec, args.out)))
            return EXIT_OK
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        cfg.validate()
        for outcome in run_pipeline(cfg, args.stage, force=args.force):
            status = "cached" if outcome.cached else "done"
            print(f"{outcome.stage}: {status} {json.dumps(outcome.summary, sort_keys=True)}")
        print(f"run directory: {cfg.run_dir}")
        return EXIT_OK
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (ConfigError, ConfigHashMismatch, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except VlctError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
