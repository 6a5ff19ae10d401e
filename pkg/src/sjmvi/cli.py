"""Command line entry point: ``run``, ``evaluate`` and ``selftest``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import selftest
from .errors import SjmviError, SpecError, TrainingAborted
from .experiments import describe, evaluate_checkpoint, load_spec, run_experiment
from .trainer import checkpoint_load

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sjmvi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train and emit all artifacts for a spec file")
    run.add_argument("spec")
    ev = sub.add_parser("evaluate", help="evaluate a checkpoint under a spec file")
    ev.add_argument("checkpoint")
    ev.add_argument("spec")
    sub.add_parser("selftest", help="run the fast identity and gradient checks")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "selftest":
            return EXIT_OK if selftest.run() else EXIT_INVALID
        spec = load_spec(args.spec)
        if args.command == "run":
            result = run_experiment(spec)
            print(describe(result.evaluation))
            print(f"outputs written to {spec.output_dir}")
        else:
            record = evaluate_checkpoint(spec, checkpoint_load(args.checkpoint))
            print(describe(record))
        return EXIT_OK
    except TrainingAborted as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, SjmviError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
