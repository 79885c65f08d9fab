"""Command-line interface.

Subcommands: synth, track, prepare, train, refine, eval, run, report.
Common flags: --config <toml>, --seed <int>, --jobs <n>; the OFFTRACK_CONFIG
environment variable supplies a config path when --config is absent.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from offtrack.config import ObjectClass
from offtrack.metrics import EvalReport
from offtrack.pipeline import PipelineConfig, run_pipeline

_COMMAND_STAGES = {
    "track": ("track", "fuse"),
    "prepare": ("prepare",),
    "refine": ("refine", "labels"),
    "eval": ("eval",),
    "run": None,
}


def _add_pipeline_args(p):
    p.add_argument("--input", required=True, help="sequence directory")
    p.add_argument("--work", required=True, help="work directory for artifacts")
    p.add_argument("--checkpoints", help="refiner checkpoint directory")
    p.add_argument("--stage", help="run only this stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="offtrack",
        description="Offline LiDAR tracking and track-level box refinement")
    parser.add_argument("--config", help="TOML config path "
                        "(default: $OFFTRACK_CONFIG)")
    parser.add_argument("--seed", type=int, help="override pipeline seed")
    parser.add_argument("--jobs", type=int, help="parallel refinement workers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence directory")
    p.add_argument("--scenario", required=True, help="scenario TOML file")
    p.add_argument("--out", required=True, help="output sequence directory")

    for name in ("track", "prepare", "refine", "eval", "run"):
        p = sub.add_parser(name, help=f"pipeline: {name}")
        _add_pipeline_args(p)

    p = sub.add_parser("train", help="train refiner checkpoints on synthetic corpora")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--kind", default="all", choices=("all", "grm", "prm", "crm"))
    p.add_argument("--object-class", default="vehicle")
    p.add_argument("--tracks", type=int, default=200)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("report", help="render the evaluation report")
    p.add_argument("--work", required=True)
    return parser


def cmd_synth(args) -> int:
    from offtrack.ingest import save_sequence
    from offtrack.synth import corrupt, generate, scenario_from_toml
    from dataclasses import replace
    cfg = scenario_from_toml(args.scenario)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    bundle = corrupt(generate(cfg), cfg)
    save_sequence(bundle, args.out)
    print(f"wrote {bundle.num_frames} frames, "
          f"{len(bundle.all_detections())} detections to {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.checkpoints:
        overrides["checkpoint_dir"] = Path(args.checkpoints)
    config = PipelineConfig.from_file(args.input, args.work, args.config,
                                      **overrides)
    stages = _COMMAND_STAGES[args.command]
    if args.stage:
        stages = (args.stage,)
    return run_pipeline(config, stages)


def cmd_train(args) -> int:
    import numpy as np
    from offtrack.config import read_config_file
    from offtrack.refine import (RefinerSet, TrainHyper, anchors_from_examples,
                                 build_crm_corpus, build_grm_corpus,
                                 build_prm_corpus, load_refiner, save_refiner,
                                 train_crm, train_grm, train_prm)
    from offtrack.refine.apply import refine_or_passthrough

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cls = ObjectClass.from_label(args.object_class)
    seed = args.seed if args.seed is not None else 0
    raw = read_config_file(args.config).get("train", {})

    def hyper_for(kind, default_epochs):
        values = dict(raw.get(kind, {}))
        if args.epochs is not None:
            values["epochs"] = args.epochs
        values.setdefault("epochs", default_epochs)
        return TrainHyper(**values)

    kinds = ("grm", "prm", "crm") if args.kind == "all" else (args.kind,)
    models = {}
    if "grm" in kinds:
        corpus = build_grm_corpus(args.tracks, seed=seed, cls=cls)
        anchors = anchors_from_examples(corpus, seed=seed)
        result = train_grm(corpus, anchors, hyper_for("grm", 8), seed)
        save_refiner(result.model, out / f"grm_{cls.label}.oftk")
        models["grm"] = result.model
        print(f"grm: {len(result.epoch_losses)} epochs, "
              f"loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}")
    if "prm" in kinds:
        corpus = build_prm_corpus(max(50, args.tracks // 2), seed=seed, cls=cls)
        result = train_prm(corpus, hyper_for("prm", 10), seed)
        save_refiner(result.model, out / f"prm_{cls.label}.oftk")
        models["prm"] = result.model
        print(f"prm: {len(result.epoch_losses)} epochs, "
              f"loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}")
    if "crm" in kinds:
        corpus = build_crm_corpus(max(60, args.tracks // 2), seed=seed, cls=cls)
        result = train_crm(corpus, hyper_for("crm", 12), seed)
        save_refiner(result.model, out / f"crm_{cls.label}.oftk")
        print(f"crm: {len(result.epoch_losses)} epochs, "
              f"loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}")
    return 0


def _svg_pr_curve(recall, precision, label: str) -> str:
    width, height, margin = 420, 320, 40
    span_w, span_h = width - 2 * margin, height - 2 * margin

    def pt(r, p):
        return (margin + r * span_w, margin + (1.0 - p) * span_h)

    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in
                      (pt(r, p) for r, p in zip(recall, precision)))
    axis = (f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
            f'y2="{height - margin}" stroke="black"/>'
            f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
            f'y2="{height - margin}" stroke="black"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">'
            f'<rect width="{width}" height="{height}" fill="white"/>{axis}'
            f'<text x="{width // 2}" y="20" text-anchor="middle" '
            f'font-family="monospace">PR curve: {label}</text>'
            f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" '
            f'font-family="monospace" font-size="12">recall</text>'
            f'<polyline fill="none" stroke="steelblue" stroke-width="2" '
            f'points="{points}"/></svg>\n')


def cmd_report(args) -> int:
    work = Path(args.work)
    report_path = work / "report.json"
    if not report_path.exists():
        print(f"error: missing {report_path}", file=sys.stderr)
        return 1
    report = EvalReport.from_json(report_path.read_text())
    header = (f"{'class':<12}{'AP':>8}{'APH':>8}{'MOTA':>8}{'MOTP':>8}"
              f"{'IDSW':>6}{'R@trk':>8}{'TP':>7}{'FP':>7}{'FN':>7}")
    lines = [header, "-" * len(header)]
    for label, m in sorted(report.per_class.items()):
        ap = f"{m.ap:.4f}" if m.ap is not None else "  n/a"
        aph = f"{m.aph:.4f}" if m.aph is not None else "  n/a"
        lines.append(f"{label:<12}{ap:>8}{aph:>8}{m.mota:>8.4f}{m.motp:>8.4f}"
                     f"{m.id_switches:>6}{m.recall_at_track:>8.4f}"
                     f"{m.tp:>7}{m.fp:>7}{m.fn:>7}")
    print("\n".join(lines))

    curves_path = work / "pr_curves.json"
    if curves_path.exists():
        curves = json.loads(curves_path.read_text())
        for label, data in sorted(curves.items()):
            svg_path = work / f"pr_{label}.svg"
            svg_path.write_text(_svg_pr_curve(data["recall"],
                                              data["precision"], label))
            print(f"wrote {svg_path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "report":
        return cmd_report(args)
    return cmd_pipeline(args)


if __name__ == "__main__":
    sys.exit(main())
