"""Command-line driver: ``run``, ``compare`` and ``generate``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline, report
from .errors import ConfigError, IngestionError, SadFusionError
from .synthetic import NoiseConfig, SCENE_KINDS, make_scene, write_sequence

logger = logging.getLogger("sadfusion")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3

LOG_LEVELS = {"DEBUG": logging.DEBUG, "INFO": logging.INFO, "WARNING": logging.WARNING,
              "WARN": logging.WARNING, "ERROR": logging.ERROR, "QUIET": logging.CRITICAL}


def configure_logging() -> None:
    name = os.environ.get("STAR_LOG", "warning").strip().upper()
    level = int(name) if name.isdigit() else LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sadfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="reconstruct a sequence or preset")
    run.add_argument("--input", required=True, help="sequence directory or preset:<name>")
    run.add_argument("--config", type=Path, help="flat TOML config file")
    run.add_argument("--output", type=Path, required=True, help="output directory")
    run.add_argument("--dump-ply", action="store_true", help="write the geometry per frame")
    run.add_argument("--dump-graph", action="store_true", help="write the deformation graph per frame")
    run.add_argument("--dump-render", action="store_true", help="write both renders per frame")
    run.add_argument("--graph-mode", choices=("sad", "ed-uniform"))
    run.add_argument("--no-2d-loss", action="store_true", help="set the 2D loss weight to zero")
    run.add_argument("--flow", choices=("gt", "files"), help="flow source")
    run.add_argument("--frames", type=int, help="process at most this many frames")
    run.add_argument("--threads", type=int, help="2 or more overlaps ingestion with processing")
    run.add_argument("--seed", type=int, help="noise seed for presets")
    run.add_argument("--no-plot", action="store_true", help="skip the metrics figure")

    cmp_ = sub.add_parser("compare", help="compare two metrics files")
    cmp_.add_argument("metrics_a", type=Path)
    cmp_.add_argument("metrics_b", type=Path)
    cmp_.add_argument("--output", type=Path, help="directory for comparison.json and figures")

    gen = sub.add_parser("generate", help="write a synthetic preset to disk")
    gen.add_argument("preset", choices=SCENE_KINDS)
    gen.add_argument("--output", type=Path, required=True)
    gen.add_argument("--frames", type=int)
    gen.add_argument("--depth-noise", type=float, default=0.0, help="depth noise sigma in meters")
    gen.add_argument("--label-flip", type=float, default=0.0, help="fraction of labels flipped")
    gen.add_argument("--erase-class", type=int, help="class relabeled unrecognized after frame 0")
    gen.add_argument("--seed", type=int, default=0)
    return parser


def config_from_args(args: argparse.Namespace) -> pipeline.PipelineConfig:
    config = pipeline.PipelineConfig.from_toml(args.config) if args.config else pipeline.PipelineConfig()
    changes = {}
    if args.graph_mode:
        changes["graph_mode"] = args.graph_mode
    if args.no_2d_loss:
        changes["w_2d"] = 0.0
    if args.flow:
        changes["flow_source"] = args.flow
    for name in ("frames", "threads", "seed"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    for name in ("dump_ply", "dump_graph", "dump_render"):
        if getattr(args, name):
            changes[name] = True
    try:
        return config.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_run(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    metrics = pipeline.run(config, args.input, args.output)
    if not args.no_plot and metrics:
        records = [m.to_dict() for m in metrics]
        report.plot_runs({Path(args.output).name or "run": records}, Path(args.output) / "metrics.png")
    last = metrics[-1] if metrics else None
    if last is not None and last.error and last.error.get("mean_mm") is not None:
        print(f"{len(metrics)} frames, final mean error {last.error['mean_mm']:.3f} mm, "
              f"{last.surfels} surfels, {last.nodes} nodes")
    else:
        print(f"{len(metrics)} frames processed")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    out = args.output or args.metrics_b.parent
    comp = report.write_comparison(args.metrics_a, args.metrics_b, out)
    print(report.summary_table(comp, args.metrics_a.parent.name or "a", args.metrics_b.parent.name or "b"))
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        scene = make_scene(args.preset, args.frames)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    noise = NoiseConfig(args.depth_noise, args.label_flip, args.erase_class, args.seed)
    write_sequence(args.output, scene, noise=noise)
    print(f"wrote {scene.n_frames} frames to {args.output}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "generate": cmd_generate}


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SadFusionError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
