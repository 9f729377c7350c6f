"""Command-line entry point: one subcommand per pipeline stage plus ``lookup``.

Exit codes: 0 success, 1 usage error, 2 data or artifact error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import decode, pipeline
from .errors import AlignRecError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config, one object per stage")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="artifact directory (overrides config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.steps=500 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="alignrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in pipeline.STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    pipe = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    pipe.add_argument("--from", dest="start", choices=pipeline.STAGES,
                      help="first stage to run (earlier artifacts must exist)")
    look = sub.add_parser("lookup", parents=[common], help="print a cached user's top-K")
    look.add_argument("user_id")
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    cfg = (pipeline.PipelineConfig.load(args.config) if args.config
           else pipeline.PipelineConfig())
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key, _value(raw))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _lookup(cfg, user_id) -> None:
    ws = pipeline.Workspace(cfg.out)
    cache = decode.CacheFile.load(ws.need("cache"))
    from . import corpus, tokenizer
    vocab = corpus.Vocab.load(ws.need("vocab"))
    trie = decode.build_trie(tokenizer.load_semantic_ids(ws.need("semantic_ids")), vocab=vocab)
    for rank, item in enumerate(decode.lookup(cache, user_id, trie), 1):
        print(f"{rank}\t{item}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
    except UsageError as exc:
        print(f"alignrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, OSError) as exc:
        print(f"alignrec: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    stage = args.command
    try:
        if stage == "lookup":
            _lookup(cfg, args.user_id)
        elif stage == "pipeline":
            stages = pipeline.STAGES[pipeline.STAGES.index(args.start):] if args.start \
                else pipeline.STAGES
            result = pipeline.run_pipeline(cfg, stages)
            if result.report is not None:
                print(result.report.table())
        else:
            report = pipeline.run_stage(stage, cfg)
            if report is not None:
                print(report.table())
    except NumericalError as exc:
        print(f"alignrec: {stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AlignRecError, KeyError, OSError) as exc:
        print(f"alignrec: {stage}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"alignrec: {stage}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
