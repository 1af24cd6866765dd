"""Command-line entry point: ``stereopose run | summarize | curves``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .errors import ConfigInvalid, ModelLoadError


def _approaches(text: str) -> tuple[str, ...]:
    return tuple(a.strip().lower() for a in text.split(",") if a.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereopose", description="Two-view keypoint-fusion pose benchmark on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", type=Path, help="INI experiment config (defaults apply when omitted)")
    run.add_argument("--seed", type=int, help="master seed override")
    run.add_argument("--output-dir", type=Path, help="where to write results")
    run.add_argument("--approaches", type=_approaches, help="comma list from early,mid,late")
    run.add_argument("--preset", choices=sorted(bench.PRESETS), help="named baseline set")
    run.add_argument("--objects", help="object specs separated by ';' (parametric or .ply)")
    run.add_argument("--scenes", type=int, help="scenes per (object, baseline) cell")
    run.add_argument("--guess", choices=["detection", "gt"], help="Mid-Fusion volume centering")
    run.add_argument("--timing", action="store_true", help="record per-solve wall time (output no longer byte-stable)")

    summ = sub.add_parser("summarize", help="summary tables from a results CSV")
    summ.add_argument("--input", type=Path, required=True)
    summ.add_argument("--output-dir", type=Path)

    cur = sub.add_parser("curves", help="recall-vs-baseline CSVs from a results CSV")
    cur.add_argument("--input", type=Path, required=True)
    cur.add_argument("--threshold", type=float, default=bench.RECALL_THRESHOLD)
    cur.add_argument("--bin-width", type=float, default=bench.DEFAULT_BIN_WIDTH)
    cur.add_argument("--output-dir", type=Path)
    return p


def _run(args) -> int:
    cfg = bench.load_config(args.config) if args.config else bench.ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.output_dir is not None:
        over["output_dir"] = str(args.output_dir)
    if args.approaches is not None:
        over["approaches"] = args.approaches
    if args.preset is not None:
        over["baselines"] = bench.baselines_from_preset(args.preset)
    if args.objects is not None:
        over["objects"] = tuple(o.strip() for o in args.objects.split(";") if o.strip())
    if args.scenes is not None:
        over["scenes_per_cell"] = args.scenes
    if args.guess is not None:
        over["volume"] = replace(cfg.volume, guess=args.guess)
    if args.timing:
        over["record_timing"] = True
    cfg = replace(cfg, **over)
    rows = bench.run_experiment(cfg)
    bench.write_outputs(cfg, rows)
    sys.stdout.write(bench.format_summary(bench.summarize(rows)))
    failed = sum(not r.ok for r in rows)
    print(f"{len(rows)} rows ({failed} failed) written to {cfg.output_dir}")
    return 0


def _summarize(args) -> int:
    rows = bench.read_rows(args.input)
    summary = bench.summarize(rows)
    bench.write_summary(summary, args.output_dir or args.input.parent)
    sys.stdout.write(bench.format_summary(summary))
    return 0


def _curves(args) -> int:
    rows = bench.read_rows(args.input)
    out = args.output_dir or args.input.parent
    for path in bench.emit_recall_curves(rows, out, args.threshold, args.bin_width):
        print(path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return {"run": _run, "summarize": _summarize, "curves": _curves}[args.command](args)
    except (ConfigInvalid, ModelLoadError, ValueError, OSError) as exc:
        print(f"stereopose: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
