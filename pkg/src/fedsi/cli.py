"""Command line entry point.

    fedsi run --config exp.cfg [--override key=value ...] --out runs/exp [--resume ckpt]
    fedsi eval --checkpoint runs/exp/checkpoints/final.ckpt --config exp.cfg

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error.
The ``FEDSI_WORKERS`` environment variable sets the client parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from fedsi.checkpoint import CheckpointShapeError
from fedsi.config import ConfigError, parse_config
from fedsi.data import CorpusFormatError
from fedsi.experiment import evaluate, init_state, prepare_data, restore_state, run_experiment
from fedsi.metrics import MetricsRecord

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsi", description="Federated language-model training simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a model")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--resume", help="checkpoint to resume from")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the held-out clients")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            result = run_experiment(cfg, args.out, args.resume)
            print(json.dumps(result.final.to_dict()))
            return EXIT_DIVERGED if result.diverged else EXIT_OK
        dataset = prepare_data(cfg)
        template = init_state(cfg, dataset).server.params
        state = restore_state(args.checkpoint, cfg, template)
        rec = MetricsRecord.from_stats(state.server.round, "eval", evaluate(state.server.params, dataset, cfg))
        print(json.dumps(rec.to_dict()))
        return EXIT_OK
    except CheckpointShapeError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CorpusFormatError) as exc:
        # CheckpointError is an OSError
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
