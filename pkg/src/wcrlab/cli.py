"""Command line interface.

    wcrlab figure1|bound|wpe|sdot|clt --config <path.json> --out <dir>

Each subcommand reads a JSON config (which must carry an explicit seed) and
writes results.csv, any JSON artifacts, and manifest.json into the output
directory.  Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

import argparse
import sys
import time

from .errors import ConfigError, NumericError, WcrError
from .harness import ExperimentConfig, run_experiment, write_outputs

_SUBCOMMAND_KINDS = {
    "figure1": "figure1",
    "bound": "bound",
    "wpe": "wpe-fit",
    "sdot": "sdot-demo",
    "clt": "clt",
    "wpe-sweep": "wpe-sweep",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="wcrlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMAND_KINDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    expected_kind = _SUBCOMMAND_KINDS[args.command]
    try:
        config = ExperimentConfig.from_path(args.config)
        if config.kind != expected_kind:
            raise ConfigError(
                f"config kind {config.kind!r} does not match subcommand {args.command!r}"
            )
        started = time.time()
        table = run_experiment(config)
        write_outputs(config, table, args.out, elapsed=time.time() - started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, WcrError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
