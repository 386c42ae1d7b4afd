"""Command-line entry point wiring the pipeline into reproducible runs.

Exit codes: 0 success, 2 validation error, 3 runtime error.  Every flag
mirrors a config field 1:1; an optional JSON config file (--config) overrides
the defaults and explicit flags override the file.  MAPSIEVE_OUT sets the
default output root.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset_io, evaluate, regions, synth
from .classifier import TrainConfig, train
from .dataset_io import Checkpoint, TensorFormatError, ValidationError
from .evaluate import EvalConfig
from .synth import SynthConfig

_ENV_OUT = "MAPSIEVE_OUT"


def _out_root() -> Path:
    return Path(os.environ.get(_ENV_OUT, "."))


def _add_dataclass_args(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    """One CLI flag per config field; None default so the file layer can fill in."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        if kind is bool:
            parser.add_argument(flag, type=lambda v: v.lower() in ("1", "true", "yes"),
                                default=None, metavar="BOOL", help=f"default {f.default}")
        else:
            parser.add_argument(flag, type=kind, default=None, help=f"default {f.default}")


def _resolve_config(cls, args: argparse.Namespace, file_cfg: dict, section: str):
    """defaults < config-file section < explicit flags."""
    values = {}
    for f in dataclasses.fields(cls):
        if section in file_cfg and f.name in file_cfg[section]:
            values[f.name] = type(f.default)(file_cfg[section][f.name])
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    return cls(**values)


def _load_config_file(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    with open(args.config, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValidationError(f"config file {args.config} must hold a JSON object")
    return data


def _pipeline_params(args, file_cfg) -> dict:
    section = file_cfg.get("pipeline", {})
    out = {
        "score_floor": regions.DEFAULT_SCORE_FLOOR,
        "min_area_fraction": regions.DEFAULT_MIN_AREA_FRACTION,
        "gem_p": 3.0,
    }
    for key in out:
        if key in section:
            out[key] = float(section[key])
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    return out


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _print_metrics_table(rows: dict[str, dict]) -> None:
    cols = ("f1_at_tau", "auc", "max_f1", "p_at_target_recall")
    header = f"{'system':<12}" + "".join(f"{c:>20}" for c in cols)
    print(header)
    for name, m in rows.items():
        line = f"{name:<12}"
        for c in cols:
            suffix = "" if m.get("target_recall_reached", True) or c != "p_at_target_recall" else "*"
            line += f"{m[c]:>19.4f}{suffix or ' '}"
        print(line)
    if any(not m.get("target_recall_reached", True) for m in rows.values()):
        print("  (* target recall not reached; precision at max recall shown)")


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve_config(SynthConfig, args, file_cfg, "synth")
    out_dir = Path(args.out) if args.out else _out_root() / "synth_dataset"
    manifests = synth.generate_traverse(cfg, out_dir)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def cmd_validate(args) -> int:
    failures = 0
    for path in args.manifests:
        try:
            manifest = dataset_io.validate_manifest(path)
            print(f"{path}: OK ({len(manifest.reference_frames)} references, "
                  f"{len(manifest.query_frames)} queries)")
        except ValidationError as exc:
            failures += 1
            print(f"{path}: INVALID", file=sys.stderr)
            for issue in exc.issues:
                print(f"  - {issue}", file=sys.stderr)
    return 2 if failures else 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve_config(TrainConfig, args, file_cfg, "train")
    pipe = _pipeline_params(args, file_cfg)
    train_manifest = dataset_io.validate_manifest(args.train_manifest)
    val_manifest = dataset_io.validate_manifest(args.val_manifest)

    ckpt_path = Path(args.checkpoint_out) if args.checkpoint_out else _out_root() / "model.ckpt"
    history_path = (
        Path(args.history_out) if args.history_out else ckpt_path.with_suffix(".history.json")
    )

    train_frames = evaluate.collect_frames(
        train_manifest, args.encoding, gem_p=pipe["gem_p"],
        score_floor=pipe["score_floor"], min_area_fraction=pipe["min_area_fraction"],
    )
    val_frames = evaluate.collect_frames(
        val_manifest, args.encoding, gem_p=pipe["gem_p"],
        score_floor=pipe["score_floor"], min_area_fraction=pipe["min_area_fraction"],
    )
    pairs = evaluate.build_training_set(train_frames)
    scorer = evaluate.make_validation_scorer(
        val_frames, cfg.operating_threshold, cfg.val_score_source
    )
    result = train(pairs, cfg, scorer, encoding_mode=args.encoding, gem_p=pipe["gem_p"])

    save = Checkpoint(
        model=result.model,
        train_config=cfg.as_dict(),
        best_validation_f1=result.best_val_f1,
        best_epoch=result.best_epoch,
    )
    dataset_io.save_checkpoint(save, ckpt_path)
    _write_json(
        history_path,
        {
            "best_epoch": result.best_epoch,
            "best_validation_f1": result.best_val_f1,
            "epochs": [
                {"epoch": h.epoch, "train_loss": h.train_loss, "val_f1": h.val_f1}
                for h in result.history
            ],
        },
    )
    print(f"checkpoint: {ckpt_path}")
    print(f"history: {history_path}")
    print(f"best epoch {result.best_epoch}, validation F1 {result.best_val_f1:.4f}")
    return 0


def cmd_refine(args) -> int:
    file_cfg = _load_config_file(args)
    eval_cfg = _resolve_config(EvalConfig, args, file_cfg, "eval")
    pipe = _pipeline_params(args, file_cfg)
    manifest = dataset_io.validate_manifest(args.manifest)
    ckpt = dataset_io.load_checkpoint(args.checkpoint)
    model = ckpt.model

    frame_ids = [args.frame] if args.frame else None
    if args.frame and args.frame not in {q.frame_id for q in manifest.query_frames}:
        raise ValidationError(f"frame {args.frame!r} is not a query frame of {args.manifest}")
    frames = evaluate.collect_frames(
        manifest, model.encoding_mode, gem_p=model.gem_p,
        score_floor=pipe["score_floor"], min_area_fraction=pipe["min_area_fraction"],
        frame_ids=frame_ids,
    )
    out_frames = {}
    tau = eval_cfg.operating_threshold
    for frame in frames:
        scores_c = (
            model.predict(frame.encodings)
            if frame.encodings.shape[0]
            else np.zeros(0)
        )
        fused = evaluate.fuse_scores(scores_c, frame.detector_scores)
        out_frames[frame.frame_id] = [
            {
                "box": list(cand.box),
                "detector_score": cand.detector_score,
                "classifier_score": float(s_c),
                "fused_score": float(s),
                "kept": bool(s >= tau),
            }
            for cand, s_c, s in zip(frame.candidates, scores_c, fused)
        ]
    out_path = Path(args.out) if args.out else _out_root() / "refined_detections.json"
    dataset_io.save_detections(out_frames, out_path)
    kept = sum(sum(d["kept"] for d in dets) for dets in out_frames.values())
    total = sum(len(dets) for dets in out_frames.values())
    print(f"refined: {out_path} ({kept}/{total} detections kept at tau={tau})")
    return 0


def cmd_evaluate(args) -> int:
    file_cfg = _load_config_file(args)
    eval_cfg = _resolve_config(EvalConfig, args, file_cfg, "eval")
    pipe = _pipeline_params(args, file_cfg)
    manifest = dataset_io.validate_manifest(args.manifest)

    model = None
    if args.mode in ("ours", "disparity", "query_only"):
        if not args.checkpoint:
            raise ValidationError(f"mode {args.mode!r} needs --checkpoint")
        model = dataset_io.load_checkpoint(args.checkpoint).model

    common = dict(
        cfg=eval_cfg,
        score_floor=pipe["score_floor"],
        min_area_fraction=pipe["min_area_fraction"],
    )
    primary = evaluate.evaluate_system(
        manifest, model, args.mode,
        gem_p=None if model is not None else pipe["gem_p"], **common,
    )
    baseline = (
        primary
        if args.mode == "yolop_only"
        else evaluate.evaluate_system(manifest, None, "yolop_only", gem_p=pipe["gem_p"], **common)
    )
    report = {"primary": primary, "baseline": baseline}

    rows = {args.mode: primary["metrics"], "yolop_only": baseline["metrics"]}
    _print_metrics_table(rows)

    report_path = Path(args.report_out) if args.report_out else _out_root() / "report.json"
    _write_json(report_path, report)
    print(f"report: {report_path}")
    if args.csv_out:
        _write_pr_csv(Path(args.csv_out), primary["pr_points"])
        print(f"csv: {args.csv_out}")
    return 0


def _write_pr_csv(path: Path, points) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall"])
        writer.writerows(points)


def cmd_report(args) -> int:
    with open(args.report, "r", encoding="utf-8") as f:
        report = json.load(f)
    primary = report["primary"]
    baseline = report.get("baseline", primary)
    rows = {primary["mode"]: primary["metrics"]}
    if baseline is not primary:
        rows[baseline["mode"]] = baseline["metrics"]
    _print_metrics_table(rows)
    if args.csv_out:
        _write_pr_csv(Path(args.csv_out), primary["pr_points"])
        print(f"csv: {args.csv_out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapsieve",
        description="Map-aided refinement of vehicle detections",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic traverse dataset")
    p_synth.add_argument("--out", help="dataset directory (default $MAPSIEVE_OUT/synth_dataset)")
    p_synth.add_argument("--config", help="JSON config file")
    _add_dataclass_args(p_synth, SynthConfig)
    p_synth.set_defaults(func=cmd_synth)

    p_val = sub.add_parser("validate", help="validate traverse manifests")
    p_val.add_argument("manifests", nargs="+", help="manifest paths")
    p_val.set_defaults(func=cmd_validate)

    p_train = sub.add_parser("train", help="train the map-matching classifier")
    p_train.add_argument("--train-manifest", required=True)
    p_train.add_argument("--val-manifest", required=True)
    p_train.add_argument("--encoding", choices=regions.ENCODING_MODES, default="concat")
    p_train.add_argument("--checkpoint-out", help="default $MAPSIEVE_OUT/model.ckpt")
    p_train.add_argument("--history-out", help="default <checkpoint>.history.json")
    p_train.add_argument("--config", help="JSON config file")
    p_train.add_argument("--score-floor", type=float, default=None)
    p_train.add_argument("--min-area-fraction", type=float, default=None)
    p_train.add_argument("--gem-p", type=float, default=None)
    _add_dataclass_args(p_train, TrainConfig)
    p_train.set_defaults(func=cmd_train)

    p_refine = sub.add_parser("refine", help="rescore detections with a trained model")
    p_refine.add_argument("--manifest", required=True)
    p_refine.add_argument("--checkpoint", required=True)
    p_refine.add_argument("--frame", help="only refine this query frame")
    p_refine.add_argument("--out", help="default $MAPSIEVE_OUT/refined_detections.json")
    p_refine.add_argument("--config", help="JSON config file")
    p_refine.add_argument("--score-floor", type=float, default=None)
    p_refine.add_argument("--min-area-fraction", type=float, default=None)
    p_refine.add_argument("--gem-p", type=float, default=None)
    _add_dataclass_args(p_refine, EvalConfig)
    p_refine.set_defaults(func=cmd_refine)

    p_eval = sub.add_parser("evaluate", help="PR metrics for a traverse")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--mode", choices=evaluate.EVAL_MODES, default="ours")
    p_eval.add_argument("--checkpoint", help="required for learned modes")
    p_eval.add_argument("--report-out", help="default $MAPSIEVE_OUT/report.json")
    p_eval.add_argument("--csv-out", help="also write PR points as CSV")
    p_eval.add_argument("--config", help="JSON config file")
    p_eval.add_argument("--score-floor", type=float, default=None)
    p_eval.add_argument("--min-area-fraction", type=float, default=None)
    p_eval.add_argument("--gem-p", type=float, default=None)
    _add_dataclass_args(p_eval, EvalConfig)
    p_eval.set_defaults(func=cmd_evaluate)

    p_rep = sub.add_parser("report", help="render a saved evaluation report")
    p_rep.add_argument("--report", required=True)
    p_rep.add_argument("--csv-out", help="write PR points as CSV")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
