"""``tilscope`` command line: run the pipeline, evaluate outputs, synthesize fixtures.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .detection import detect_slide, nms, read_detections_csv, write_detections_csv
from .errors import (
    ConvergenceError,
    DivergingBetaError,
    RasterDecodeError,
    TilscopeError,
    UndefinedMetricError,
    ValidationError,
)
from .metrics import (
    SurvivalRecord,
    concordance_index,
    cox_fit_single,
    detection_f1,
    froc_curve,
    match_detections,
    pearson_r,
    tumor_stroma_dice,
)
from .raster import Raster, Resolution, load_raster, read_resolution, save_raster
from .scoring import L1, run_case
from .segmentation import finalize_segmentation, segment_slide
from .synth import SCENARIOS, synthesize

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class StageError(Exception):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


class _Stages:
    def __init__(self):
        self.name = "setup"

    def __call__(self, name):
        self.name = name
        return self

    def __enter__(self):
        return self

    def __exit__(self, typ, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _versions():
    return {"tilscope": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ValidationError(f"{what} not found: {path}")
    return Path(path)


def _probability_png(prob: Raster) -> Raster:
    return Raster(np.rint(np.clip(prob.data, 0, 1) * 255).astype(np.uint8), prob.resolution)


# ---------------------------------------------------------------- run


def cmd_run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": f"run {args.subcommand}",
        "inputs": {},
        "config_sha256": None,
        "defaults_applied": [],
        "versions": _versions(),
        "outputs": [],
        "flags": [],
        "status": "ok",
    }
    stage = _Stages()
    code = EXIT_OK
    try:
        with stage("inputs"):
            slide_path = _require_file(args.slide, "slide")
            mask_path = _require_file(args.tissue_mask, "tissue mask")
            inputs = {"slide": slide_path, "tissue_mask": mask_path}
            if args.config:
                inputs["config"] = _require_file(args.config, "config")
            for k, p in inputs.items():
                manifest["inputs"][k] = {"path": str(p), "sha256": _sha256(p)}
        with stage("config"):
            cfg = load_config(args.config)
            manifest["config_sha256"] = cfg.digest()
            manifest["defaults_applied"] = cfg.defaults_applied
        with stage("load"):
            slide = load_raster(slide_path)
            tissue = load_raster(mask_path)
            if tissue.data.shape[:2] != slide.data.shape[:2]:
                raise ValidationError(f"tissue mask {tissue.data.shape[:2]} does not match slide {slide.data.shape[:2]}")
            tissue_mask = np.asarray(tissue.data).astype(bool)
            if tissue_mask.ndim == 3:
                tissue_mask = tissue_mask.any(axis=2)
            manifest["flags"].extend(slide.flags)
        written = {
            "segment": _run_segment,
            "detect": _run_detect,
            "score": _run_score,
        }[args.subcommand](args, cfg, slide, tissue_mask, out, stage, manifest)
        manifest["outputs"] = sorted(written)
    except StageError as err:
        code = EXIT_INVALID if isinstance(err.exc, (ValidationError, ValueError, RasterDecodeError)) else EXIT_RUNTIME
        manifest["status"] = "error"
        manifest["error"] = {"stage": err.stage, "message": str(err.exc)}
        print(f"tilscope run {args.subcommand}: stage '{err.stage}' failed: {err.exc}", file=sys.stderr)
    _write_json(out / "manifest.json", manifest)
    return code


def _run_segment(args, cfg, slide, tissue_mask, out, stage, manifest):
    with stage("predictors"):
        preds = cfg.build_predictors("segmentation", args.slide)
    with stage("segmentation"):
        seg = segment_slide(slide, tissue_mask, preds, cfg.segmentation, args.threads)
        labels = finalize_segmentation(seg.tumor_prob, seg.stroma_prob, Raster(tissue_mask, slide.resolution),
                                       cfg.segmentation)
        manifest["flags"].extend(seg.flags)
    with stage("write"):
        save_raster(labels, out / "labels.png")
        written = ["labels.png"]
        if args.save_probabilities:
            # probabilities stay at inference resolution; the sidecar records it
            save_raster(_probability_png(seg.tumor_prob), out / "tumor_prob.png")
            save_raster(_probability_png(seg.stroma_prob), out / "stroma_prob.png")
            written += ["tumor_prob.png", "stroma_prob.png"]
        if args.figures:
            from .plotting import plot_overlay

            plot_overlay(_rgb(slide), labels.data, [], out / "overlay.png")
            written.append("overlay.png")
    return written


def _run_detect(args, cfg, slide, tissue_mask, out, stage, manifest):
    with stage("predictors"):
        preds = cfg.build_predictors("detection", args.slide)
    with stage("detection"):
        dets = detect_slide(slide, tissue_mask, preds, cfg.detection, args.threads)
    with stage("nms"):
        dets = nms(dets, cfg.detection, slide.resolution, args.threads)
    with stage("write"):
        write_detections_csv(out / "detections.csv", dets)
    return ["detections.csv"]


def _run_score(args, cfg, slide, tissue_mask, out, stage, manifest):
    with stage("predictors"):
        seg_preds = cfg.build_predictors("segmentation", args.slide)
        det_preds = cfg.build_predictors("detection", args.slide)
    with stage("score"):
        case = run_case(slide, tissue_mask, seg_preds, det_preds, cfg.segmentation, cfg.detection,
                        cfg.bulk, cfg.scoring, args.threads)
        manifest["branch"] = case.branch
        manifest["flags"].extend(f for f in case.flags if f not in manifest["flags"])
    with stage("write"):
        save_raster(case.label_mask, out / "labels.png")
        write_detections_csv(out / "detections.csv", case.detections)
        written = ["labels.png", "detections.csv"]
        if case.branch != L1:
            save_raster(Raster(case.bulk.mask.astype(np.uint8), slide.resolution), out / "bulk.png")
            _write_json(out / "report.json", case.report.to_json_dict())
            written += ["bulk.png", "report.json"]
        if args.figures:
            from .plotting import plot_overlay

            plot_overlay(_rgb(slide), case.label_mask.data, case.detections, out / "overlay.png")
            written.append("overlay.png")
    return written


def _rgb(slide):
    data = np.asarray(slide.data)
    if data.dtype != np.uint8:
        data = np.rint(np.clip(data, 0, 1) * 255).astype(np.uint8)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    return data


# ---------------------------------------------------------------- eval


def _collect(paths, suffixes):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(f for f in p.iterdir() if f.suffix.lower() in suffixes))
        elif p.is_file():
            files.append(p)
        else:
            raise ValidationError(f"no such file or directory: {p}")
    return files


def pair_files(pred_paths, gt_paths, suffixes) -> list:
    """Match prediction and ground-truth files by stem.

    A single file on each side is paired regardless of name. Anything left
    unmatched is an error that names the orphans.
    """
    preds = _collect(pred_paths, suffixes)
    gts = _collect(gt_paths, suffixes)
    if len(preds) == 1 and len(gts) == 1:
        return [(preds[0].stem, preds[0], gts[0])]
    by_pred = {f.stem: f for f in preds}
    by_gt = {f.stem: f for f in gts}
    orphans = sorted(f"pred:{k}" for k in by_pred.keys() - by_gt.keys())
    orphans += sorted(f"gt:{k}" for k in by_gt.keys() - by_pred.keys())
    if orphans:
        raise ValidationError("unpaired files: " + ", ".join(orphans))
    if not by_pred:
        raise ValidationError("no files to evaluate")
    return [(k, by_pred[k], by_gt[k]) for k in sorted(by_pred)]


def _read_csv_rows(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def _eval_seg(args, cfg, out):
    pairs = pair_files(args.pred, args.gt, {".png"})
    per_case = {}
    for case_id, p, g in pairs:
        per_case[case_id] = tumor_stroma_dice(load_raster(p).data, load_raster(g).data)
    values = list(per_case.values())
    report = {"task": "seg", "per_case": per_case, "mean_tumor_stroma_dice": float(np.mean(values))}
    figures = []
    if not args.no_figures:
        from .plotting import plot_dice

        plot_dice(list(per_case), values, out / "dice.png")
        figures.append("dice.png")
    return report, figures


def _read_areas(path):
    rows = _read_csv_rows(path, ["case_id", "area_mm2"])
    return {r["case_id"]: float(r["area_mm2"]) for r in rows}


def _eval_det(args, cfg, out):
    pairs = pair_files(args.pred, args.gt, {".csv"})
    areas = _read_areas(args.areas) if args.areas else {}
    flags = []
    preds, gts, area_list, resolutions = [], [], [], []
    per_case = {}
    tp = fp = fn = 0
    for case_id, p, g in pairs:
        pred = read_detections_csv(p)
        gt = read_detections_csv(g)
        res = read_resolution(g) or read_resolution(p) or Resolution()
        if case_id in areas:
            area = areas[case_id]
        else:
            area = cfg.metrics.area_mm2
            flags.append(f"{case_id}: no area given, using metrics.area_mm2 = {area}")
        m = match_detections(pred, gt, cfg.metrics.hit_radius_um, res)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        per_case[case_id] = {"tp": m.tp, "fp": m.fp, "fn": m.fn, "f1": detection_f1(m)}
        preds.append(pred)
        gts.append(gt)
        area_list.append(area)
        resolutions.append(res)
    denom = 2 * tp + fp + fn
    report = {
        "task": "det",
        "per_case": per_case,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "f1": (2 * tp / denom) if denom else None,
        "hit_radius_um": cfg.metrics.hit_radius_um,
        "flags": flags,
    }
    figures = []
    try:
        curve = froc_curve(preds, gts, area_list, cfg.metrics.fp_rates, cfg.metrics.hit_radius_um, resolutions)
    except UndefinedMetricError as exc:
        report["froc"] = None
        report["flags"].append(f"FROC undefined: {exc}")
        return report, figures
    report["froc"] = curve.score
    report["fp_rates"] = list(curve.fp_rates)
    report["sensitivities_at_rates"] = [float(s) for s in curve.sensitivities_at_rates]
    if not args.no_figures:
        from .plotting import plot_froc

        plot_froc(curve, out / "froc.png")
        figures.append("froc.png")
    return report, figures


def _read_scores(paths):
    scores = {}
    for p in _collect(paths, {".json", ".csv"}):
        if p.suffix.lower() == ".json":
            scores[p.stem] = float(json.loads(p.read_text())["tils_score"])
        else:
            for r in _read_csv_rows(p, ["case_id", "tils_score"]):
                scores[r["case_id"]] = float(r["tils_score"])
    return scores


def _eval_tils(args, cfg, out):
    pred = _read_scores(args.pred)
    gt = _read_scores(args.gt)
    orphans = sorted(f"pred:{k}" for k in pred.keys() - gt.keys())
    orphans += sorted(f"gt:{k}" for k in gt.keys() - pred.keys())
    if orphans:
        raise ValidationError("unpaired cases: " + ", ".join(orphans))
    ids = sorted(pred)
    x = [pred[k] for k in ids]
    y = [gt[k] for k in ids]
    report = {"task": "tils", "n": len(ids), "flags": []}
    try:
        report["pearson_r"] = pearson_r(x, y)
    except UndefinedMetricError as exc:
        report["pearson_r"] = None
        report["flags"].append(str(exc))
    figures = []
    if not args.no_figures:
        from .plotting import plot_tils_scatter

        plot_tils_scatter(x, y, report["pearson_r"], out / "tils_scatter.png")
        figures.append("tils_scatter.png")
    return report, figures


def _read_survival(pred_paths, gt_paths):
    """Risk, time and event per case; with --gt, risk comes from --pred and outcomes from --gt."""
    pred_rows = [r for p in _collect(pred_paths, {".csv"}) for r in _read_csv_rows(p, ["case_id", "risk"])]
    if not gt_paths:
        outcome_rows = [r for p in _collect(pred_paths, {".csv"}) for r in _read_csv_rows(p, ["case_id", "time", "event"])]
    else:
        outcome_rows = [r for p in _collect(gt_paths, {".csv"}) for r in _read_csv_rows(p, ["case_id", "time", "event"])]
    risk = {r["case_id"]: float(r["risk"]) for r in pred_rows}
    outcome = {r["case_id"]: (float(r["time"]), r["event"].strip().lower() in ("1", "true", "yes")) for r in outcome_rows}
    orphans = sorted(f"pred:{k}" for k in risk.keys() - outcome.keys())
    orphans += sorted(f"gt:{k}" for k in outcome.keys() - risk.keys())
    if orphans:
        raise ValidationError("unpaired cases: " + ", ".join(orphans))
    return [SurvivalRecord(risk[k], *outcome[k]) for k in sorted(risk)]


def _eval_survival(args, cfg, out):
    records = _read_survival(args.pred, args.gt)
    report = {"task": "survival", "n": len(records), "flags": []}
    try:
        report["c_index"] = concordance_index(records)
    except UndefinedMetricError as exc:
        report["c_index"] = None
        report["flags"].append(str(exc))
    try:
        fit = cox_fit_single(records)
        report["cox_beta"] = fit.beta
        report["cox_log_likelihood"] = fit.log_likelihood
    except (DivergingBetaError, ConvergenceError, UndefinedMetricError) as exc:
        report["cox_beta"] = None
        report["flags"].append(f"Cox fit failed: {exc}")
    figures = []
    if not args.no_figures:
        from .plotting import plot_survival

        plot_survival([r.risk_score for r in records], [r.time for r in records],
                      [bool(r.event) for r in records], out / "survival.png", report["c_index"])
        figures.append("survival.png")
    return report, figures


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = load_config(args.config)
        report, figures = {
            "seg": _eval_seg,
            "det": _eval_det,
            "tils": _eval_tils,
            "survival": _eval_survival,
        }[args.task](args, cfg, out)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"tilscope eval {args.task}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TilscopeError as exc:
        print(f"tilscope eval {args.task}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    report["config_sha256"] = cfg.digest()
    report["figures"] = figures
    _write_json(out / f"metrics_{args.task}.json", report)
    return EXIT_OK


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    try:
        synthesize(args.scenario, args.seed, args.out)
    except ValidationError as exc:
        print(f"tilscope synth: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run segmentation, detection or full scoring on one slide")
    run.add_argument("subcommand", choices=("segment", "detect", "score"))
    run.add_argument("--slide", required=True, help="RGB slide PNG (resolution from the .res sidecar)")
    run.add_argument("--tissue-mask", required=True, help="binary tissue mask PNG aligned with the slide")
    run.add_argument("--config", help="flat key = value config; defaults apply when omitted")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--threads", type=int, default=0, help="worker cap, 0 = auto")
    run.add_argument("--save-probabilities", action="store_true",
                     help="segment: also write tumor/stroma probability PNGs")
    run.add_argument("--figures", action="store_true", help="also render an overlay figure")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("task", choices=("seg", "det", "tils", "survival"))
    ev.add_argument("--pred", nargs="+", required=True, help="prediction files or directories")
    ev.add_argument("--gt", nargs="+", help="ground-truth files or directories")
    ev.add_argument("--config", help="config providing metric settings")
    ev.add_argument("--areas", help="det: CSV case_id,area_mm2")
    ev.add_argument("--out", required=True, help="output directory for the report and figures")
    ev.add_argument("--no-figures", action="store_true")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="write a seeded synthetic bundle")
    sy.add_argument("scenario", choices=SCENARIOS)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "task", None) in ("seg", "det", "tils") and not args.gt:
        print(f"tilscope eval {args.task}: --gt is required", file=sys.stderr)
        return EXIT_INVALID
    if getattr(args, "threads", 0) < 0:
        print("tilscope run: --threads must be >= 0", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
