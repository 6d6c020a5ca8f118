"""``idlike`` command line.

    idlike run --config toy.cfg [--train.epochs 1 ...]
    idlike mine|train|score|eval --config toy.cfg
    idlike eval --scores out/scores.jsonl
    idlike calibrate --scores out/scores.jsonl --method idlike
    idlike report --config toy.cfg
    idlike toy-data --root toy

Any config key can be overridden as ``--<key> <value>``.  Exit status is
0 on success, 1 for usage and validation errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, EmptyManifest, InsufficientSamples, MissingFile, UnknownLabel
from ..toydata import write_toy_dataset
from . import pipeline
from .config import is_known_key, load_config

log = logging.getLogger("idlike")

VALIDATION_ERRORS = (ConfigError, MissingFile, UnknownLabel, EmptyManifest, InsufficientSamples)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idlike", description="Few-shot OOD detection with mined ID-like outliers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("mine", "train", "score", "run"):
        sub.add_parser(name).add_argument("--config")
    e = sub.add_parser("eval", help="metrics from a score dump (default: the run's own dumps)")
    e.add_argument("--config")
    e.add_argument("--scores")
    e.add_argument("--methods", default=",".join(pipeline.TRAINED_METHODS))
    e.add_argument("--tpr", type=float, default=0.95)
    c = sub.add_parser("calibrate", help="threshold at a target TPR from a score dump")
    c.add_argument("--scores", required=True)
    c.add_argument("--method", default="idlike")
    c.add_argument("--tpr", type=float, default=0.95)
    r = sub.add_parser("report", help="print a run's summary table")
    r.add_argument("--config")
    r.add_argument("--output-dir")
    t = sub.add_parser("toy-data", help="write the synthetic toy dataset and its config")
    t.add_argument("--root", required=True)
    t.add_argument("--seed", type=int, default=0)
    return p


def _overrides(extra: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not is_known_key(key):
            raise UsageError(f"unknown flag {tok.split('=')[0]!r}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag {tok!r} needs a value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _emit(rows):
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def _dispatch(args, overrides) -> None:
    cmd = args.command
    if cmd == "toy-data":
        print(write_toy_dataset(args.root, seed=args.seed))
        return
    if cmd == "calibrate":
        print(json.dumps(pipeline.calibrate_dump(pipeline.read_jsonl(args.scores), args.method, args.tpr),
                         sort_keys=True))
        return
    if cmd == "eval" and args.scores:
        methods = tuple(m for m in args.methods.split(",") if m)
        _emit(pipeline.report_rows(pipeline.evaluate_dump(pipeline.read_jsonl(args.scores), methods, args.tpr)))
        return
    if cmd == "report" and args.output_dir:
        sys.stdout.write((Path(args.output_dir) / "report.txt").read_text())
        return
    if args.config is None and not overrides:
        raise UsageError(f"{cmd} needs --config (or explicit --data.* flags)")
    cfg = load_config(args.config, overrides)
    if cmd == "run":
        pipeline.run_experiment(cfg)
        sys.stdout.write((cfg.output_dir / "report.txt").read_text())
    elif cmd == "report":
        sys.stdout.write((cfg.output_dir / "report.txt").read_text())
    elif cmd == "eval":
        _emit(pipeline.report_rows(pipeline.run_eval(cfg)))
    else:
        cfg.validate()
        pipeline.run_stage(cmd, cfg)
        log.info("%s done; artifacts in %s", cmd, cfg.output_dir)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = _parser().parse_known_args(argv)
        overrides = _overrides(extra)
    except UsageError as exc:
        print(f"idlike: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args, overrides)
    except UsageError as exc:
        print(f"idlike: error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"idlike: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"idlike: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
