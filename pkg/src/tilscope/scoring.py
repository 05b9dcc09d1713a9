"""Case routing, tumor-bulk stroma and the TILs score."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .detection import DetectionConfig, detect_slide, nms
from .errors import ShapeError, ValidationError
from .morphology import BulkRegion, tumor_bulk_region
from .raster import LABEL_STROMA, LABEL_TUMOR, Raster, Resolution, tissue_area_mm2
from .segmentation import SegmentationConfig, finalize_segmentation, segment_slide

L1 = "L1"
L2 = "L2"


@dataclass
class ScoringConfig:
    area_gate_mm2: float = 5.0
    lymphocyte_area_um2: float = 16.0
    rounding: str = "truncate"  # or "half_up"

    def validate(self):
        if self.area_gate_mm2 <= 0 or self.lymphocyte_area_um2 <= 0:
            raise ValidationError("scoring.area_gate_mm2 and scoring.lymphocyte_area_um2 must be positive")
        if self.rounding not in ("truncate", "half_up"):
            raise ValidationError(f"scoring.rounding must be 'truncate' or 'half_up', got {self.rounding!r}")
        return self


@dataclass
class BulkConfig:
    min_blob_area_px: int = 500
    sample_step_px: int = 50
    max_edge_um: float = 1000.0
    opening_radius: int = 10

    def validate(self):
        if self.min_blob_area_px < 0 or self.sample_step_px < 1 or self.max_edge_um <= 0 or self.opening_radius < 0:
            raise ValidationError("bulk parameters out of range")
        return self


@dataclass
class ScoreResult:
    til_count: int
    til_area_um2: float
    stroma_area_um2: float
    tils_score: int
    degenerate: bool = False


@dataclass
class TilsReport:
    branch: str
    tissue_area_mm2: float
    bulk_area_mm2: float
    stroma_in_bulk_area_um2: float
    til_count: int
    til_area_um2: float
    tils_score: int
    flags: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "tils_score": int(self.tils_score),
            "branch": self.branch,
            "tissue_area_mm2": round(self.tissue_area_mm2, 4),
            "stroma_in_bulk_area_um2": round(self.stroma_in_bulk_area_um2, 4),
            "til_count": int(self.til_count),
            "bulk_area_mm2": round(self.bulk_area_mm2, 4),
            "til_area_um2": round(self.til_area_um2, 4),
            "flags": list(self.flags),
        }


def _mask(m):
    return np.asarray(m.data if isinstance(m, Raster) else m).astype(bool)


def route_case(tissue_mask, res: Resolution | None = None, cfg: ScoringConfig | None = None) -> str:
    """L1 (ROI: segment + detect everywhere) when tissue area < gate, else L2 (score)."""
    cfg = cfg or ScoringConfig()
    if isinstance(tissue_mask, Raster):
        res = res or tissue_mask.resolution
    area = tissue_area_mm2(_mask(tissue_mask), res or Resolution())
    if area == 0:
        warnings.warn("tissue mask is empty; routing to L1", stacklevel=2)
    return L1 if area < cfg.area_gate_mm2 else L2


def stroma_in_bulk(seg_mask, bulk) -> np.ndarray:
    labels = np.asarray(seg_mask.data if isinstance(seg_mask, Raster) else seg_mask)
    bulk_mask = _mask(bulk.mask if isinstance(bulk, BulkRegion) else bulk)
    if labels.shape != bulk_mask.shape:
        raise ShapeError(f"segmentation {labels.shape} and bulk {bulk_mask.shape} differ")
    return (labels == LABEL_STROMA) & bulk_mask


def tils_score(til_count: int, stroma_mask, res: Resolution | None = None,
               cfg: ScoringConfig | None = None) -> ScoreResult:
    """Percentage of bulk stroma covered by lymphocytes, as an integer in [0, 100]."""
    cfg = (cfg or ScoringConfig()).validate()
    if isinstance(stroma_mask, Raster):
        res = res or stroma_mask.resolution
    res = res or Resolution()
    stroma_px = int(np.count_nonzero(_mask(stroma_mask)))
    stroma_um2 = stroma_px * res.mpp_x * res.mpp_y
    til_um2 = til_count * cfg.lymphocyte_area_um2
    if stroma_um2 <= 0:
        return ScoreResult(til_count, til_um2, 0.0, 0, degenerate=True)
    raw = 100.0 * til_um2 / stroma_um2
    score = math.floor(raw + 0.5) if cfg.rounding == "half_up" else math.trunc(raw)
    return ScoreResult(til_count, til_um2, stroma_um2, int(min(max(score, 0), 100)))


@dataclass
class CaseResult:
    branch: str
    label_mask: Raster
    detections: list
    report: TilsReport | None = None
    bulk: BulkRegion | None = None
    region_mask: np.ndarray | None = None
    flags: list = field(default_factory=list)


def run_case(slide: Raster, tissue_mask, seg_predictors, det_predictors,
             seg_cfg: SegmentationConfig | None = None, det_cfg: DetectionConfig | None = None,
             bulk_cfg: BulkConfig | None = None, score_cfg: ScoringConfig | None = None,
             threads: int = 0) -> CaseResult:
    seg_cfg = seg_cfg or SegmentationConfig()
    det_cfg = det_cfg or DetectionConfig()
    bulk_cfg = (bulk_cfg or BulkConfig()).validate()
    score_cfg = (score_cfg or ScoringConfig()).validate()
    tissue = _mask(tissue_mask)
    res = slide.resolution
    tissue_raster = Raster(tissue, res)
    flags = list(slide.flags)
    if not tissue.any():
        flags.append("empty tissue mask: routed to L1")
    branch = route_case(tissue, res, score_cfg)

    seg = segment_slide(slide, tissue, seg_predictors, seg_cfg, threads)
    flags.extend(f for f in seg.flags if f not in flags)
    labels = finalize_segmentation(seg.tumor_prob, seg.stroma_prob, tissue_raster, seg_cfg)

    if branch == L1:
        dets = nms(detect_slide(slide, tissue, det_predictors, det_cfg, threads), det_cfg, res, threads)
        return CaseResult(L1, labels, dets, region_mask=tissue, flags=flags)

    bulk = tumor_bulk_region(
        labels.data == LABEL_TUMOR, res,
        min_blob_area_px=bulk_cfg.min_blob_area_px,
        sample_step_px=bulk_cfg.sample_step_px,
        max_edge_um=bulk_cfg.max_edge_um,
        opening_radius=bulk_cfg.opening_radius,
    )
    flags.extend(bulk.flags)
    region = stroma_in_bulk(labels, bulk)
    dets = nms(detect_slide(slide, region, det_predictors, det_cfg, threads), det_cfg, res, threads)
    score = tils_score(len(dets), region, res, score_cfg)
    if score.degenerate:
        flags.append("degenerate: no stroma inside the tumor bulk; score set to 0")
    report = TilsReport(
        branch=L2,
        tissue_area_mm2=tissue_area_mm2(tissue, res),
        bulk_area_mm2=tissue_area_mm2(bulk.mask, res),
        stroma_in_bulk_area_um2=score.stroma_area_um2,
        til_count=score.til_count,
        til_area_um2=score.til_area_um2,
        tils_score=score.tils_score,
        flags=flags,
    )
    return CaseResult(L2, labels, dets, report, bulk, region, flags)
