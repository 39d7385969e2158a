"""Command-line entry point.

Exit status: 0 on success, 2 for configuration or input validation errors,
3 for numerical or method failures.
"""

import argparse
import logging
import sys

from ..errors import IUQError, ValidationError
from .config import METHODS, load_config
from .runner import Scenario, run_scenario, set_method

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FAILURE = 3

log = logging.getLogger("iuqlab")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS     # so flags work before or after the subcommand
    p.add_argument("--config", default=d, help="scenario TOML file")
    p.add_argument("--seed", type=int, default=d, help="override the scenario seed")
    p.add_argument("--out-dir", default=d, help="override the output directory")
    p.add_argument("--jobs", type=int, default=d, help="worker count for forward runs")
    p.add_argument("--verbose", action="store_true", default=d, help="debug logging")
    p.add_argument("--method", choices=METHODS, default=d,
                   help="override the configured IUQ method")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="iuqlab", parents=[common],
                                     description="Inverse UQ of model parameters on synthetic "
                                                 "experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "synthesize experiment records (experiments.csv)",
        "iuq": "run the IUQ method (iuq.json)",
        "fuq": "propagate the IUQ result to prediction bands (bands.json)",
        "envelope": "check data coverage by the bands (envelope.json)",
        "report": "assemble report.json and bands.csv from stage artifacts",
        "run": "all stages in sequence",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _configure_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)


def execute(args):
    if not getattr(args, "config", None):
        raise ValidationError("--config is required", field="--config")
    cfg = load_config(args.config)
    method = getattr(args, "method", None)
    if method and method != cfg.method.name:
        cfg = set_method(cfg, method)
    seed = getattr(args, "seed", None)
    out_dir = getattr(args, "out_dir", None)
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise ValidationError("--jobs must be >= 1", field="--jobs")
    if args.command == "run":
        run_scenario(cfg, seed, out_dir, jobs)
        return
    sc = Scenario(cfg, seed, out_dir, jobs)
    if args.command == "generate":
        sc.out.mkdir(parents=True, exist_ok=True)
        sc.generate()
    elif args.command == "iuq":
        sc.iuq()
    elif args.command == "fuq":
        sc.fuq()
    elif args.command == "envelope":
        sc.envelope()
    else:
        sc.report()


def main(argv=None):
    args = build_parser().parse_args(argv)
    _configure_logging(getattr(args, "verbose", False))
    try:
        execute(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IUQError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:                               # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
