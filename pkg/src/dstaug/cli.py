"""Command line entry point (``dstaug``)."""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import metrics, pipeline
from .llm import RecordingBackend

log = logging.getLogger("dstaug")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="pipeline config (JSON)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--resume", action="store_true", help="skip inputs that already have output")
    p.add_argument("--workers", type=int, help="worker threads per stage")
    p.add_argument("--no-permute", action="store_true", help="export without slot-value permutation")
    p.add_argument("--variant", choices=["easy", "difficult", "both"], help="which dialogue variants to keep")
    p.add_argument("--output-dir", type=Path, help="override output_dir from the config")
    p.add_argument("--backend-factory", metavar="MODULE:CALLABLE",
                   help="build the chat backend by calling this instead of using the config's backend")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstaug", description="Synthetic DST data generation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in pipeline.STAGES:
        _add_run_flags(sub.add_parser(name, help=f"run the {name} stage"))
    p = sub.add_parser("run", help="run one stage chosen with --stage")
    _add_run_flags(p)
    p.add_argument("--stage", required=True, choices=pipeline.STAGES)
    _add_run_flags(sub.add_parser("run-all", help="run every stage in order"))

    p = sub.add_parser("record-cassette", help="run against a live backend and save every exchange")
    _add_run_flags(p)
    p.add_argument("--stage", choices=pipeline.STAGES, help="record one stage only (default: all)")
    p.add_argument("--out", type=Path, help="cassette path (default: cassette_path from the config)")

    p = sub.add_parser("eval", help="score predictions against labeled dialogues")
    p.add_argument("--gold", required=True, type=Path, help="labeled.jsonl")
    p.add_argument("--pred", required=True, type=Path, help="JSONL of prediction records")
    p.add_argument("--annotations", type=Path, help="JSONL of coref annotations (default: derived from gold)")
    p.add_argument("--out", type=Path, help="write the report here as well as to stdout")
    return parser


def _load_factory(target: str):
    module, _, attr = target.partition(":")
    if not attr:
        raise SystemExit(f"--backend-factory expects MODULE:CALLABLE, got {target!r}")
    return getattr(importlib.import_module(module), attr)


def _config(args: argparse.Namespace, **extra) -> pipeline.PipelineConfig:
    overrides = {
        "workers": args.workers,
        "variant": args.variant,
        "output_dir": str(args.output_dir) if args.output_dir else None,
        "permute": False if args.no_permute else None,
        **extra,
    }
    return pipeline.load_config(args.config, **overrides)


def _run(args: argparse.Namespace) -> int:
    if args.command == "record-cassette":
        config = _config(args, backend="http")
        out = args.out or config.cassette_path
        if out is None:
            raise SystemExit("record-cassette needs --out or cassette_path in the config")
    else:
        config = _config(args)
    backend = _load_factory(args.backend_factory)(config) if args.backend_factory else None

    if args.command == "record-cassette":
        recorder = RecordingBackend(backend or pipeline.make_backend(config))
        try:
            if args.stage:
                pipeline.run_stage(args.stage, config, backend=recorder, resume=args.resume)
            else:
                pipeline.run_all(config, backend=recorder, resume=args.resume)
        finally:
            recorder.save(out)
        print(f"recorded {len(recorder.entries)} exchanges to {out}")
        return 0

    if args.command == "run-all":
        out = pipeline.run_all(config, backend=backend, resume=args.resume)
        print(json.dumps(json.loads((out / "run-summary.json").read_text()), indent=2))
        return 0

    stage = args.stage if args.command == "run" else args.command
    summary = pipeline.run_stage(stage, config, backend=backend, resume=args.resume)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _eval(args: argparse.Namespace) -> int:
    report = metrics.evaluate_files(args.gold, args.pred, args.annotations)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _eval(args) if args.command == "eval" else _run(args)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
