"""Whole-slide lymphocyte detection: two-level tiling, blob extraction, NMS."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError, ValidationError
from .morphology import label_stats
from .predictors import Window, run_members
from .raster import Raster, Resolution, extract_window, plan_patch_grid


@dataclass
class DetectionConfig:
    tile_size: int = 1024
    tile_stride: int = 1024
    subpatch_size: int = 128
    subpatch_overlap: int = 28
    det_threshold: float = 0.3
    nms_tile: int = 2048
    nms_radius_um: float = 4.0
    nms_halo_px: float | None = None
    connectivity: int = 8
    ensemble_size: int = 3

    @property
    def subpatch_stride(self) -> int:
        return self.subpatch_size - self.subpatch_overlap

    def validate(self):
        if not 0 <= self.subpatch_overlap < self.subpatch_size:
            raise ValidationError("detection.subpatch_overlap must be in [0, subpatch_size)")
        if not 0.0 < self.det_threshold < 1.0:
            raise ValidationError(f"detection.det_threshold must lie in (0, 1), got {self.det_threshold}")
        if self.nms_radius_um <= 0:
            raise ValidationError("detection.nms_radius_um must be positive")
        if self.tile_size < 1 or not 0 < self.tile_stride <= self.tile_size:
            raise ValidationError("detection needs 0 < tile_stride <= tile_size")
        if self.nms_tile < 1:
            raise ValidationError("detection.nms_tile must be positive")
        if self.connectivity != 8:
            raise ValidationError("only 8-connectivity is supported")
        if self.ensemble_size < 1:
            raise ValidationError("detection.ensemble_size must be >= 1")
        return self


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    probability: float = 1.0


def prob_map_to_detections(prob_map, threshold: float, offset=(0, 0)) -> list:
    """One detection per 8-connected blob of ``prob_map >= threshold``.

    Position is the blob centroid shifted by ``offset``; probability is the
    mean of ``prob_map`` over the blob.
    """
    p = np.asarray(prob_map.data if isinstance(prob_map, Raster) else prob_map, dtype=np.float64)
    _, n, _, cx, cy, mean = label_stats(p >= threshold, p)
    ox, oy = offset
    return [Detection(float(cx[i] + ox), float(cy[i] + oy), float(mean[i])) for i in range(n)]


def _in_mask(mask, x, y):
    xi, yi = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
    return 0 <= yi < mask.shape[0] and 0 <= xi < mask.shape[1] and bool(mask[yi, xi])


def tile_probability(slide: Raster, tx: int, ty: int, predictors, cfg: DetectionConfig) -> np.ndarray:
    """Ensemble lymphocyte probability for one tile; overlapping sub-patches are averaged.

    The returned array is clipped to the slide extent.
    """
    h, w = slide.shape
    th, tw = min(cfg.tile_size, h - ty), min(cfg.tile_size, w - tx)
    total = np.zeros((th, tw))
    count = np.zeros((th, tw), dtype=np.int32)
    sub = plan_patch_grid(tw, th, cfg.subpatch_size, cfg.subpatch_stride, 0, slide.resolution)
    size = cfg.subpatch_size
    for sx, sy in sub.windows:
        x, y = tx + sx, ty + sy
        patch = extract_window(slide.data, x, y, size, size)
        window = Window(x, y, size, size, slide.resolution, (h, w))
        prob = run_members(predictors, patch, window)["lymphocyte"]
        ph, pw = min(size, th - sy), min(size, tw - sx)
        total[sy:sy + ph, sx:sx + pw] += prob[:ph, :pw]
        count[sy:sy + ph, sx:sx + pw] += 1
    return total / np.maximum(count, 1)


def detect_slide(slide: Raster, region_mask, predictors, cfg: DetectionConfig | None = None,
                 threads: int = 0) -> list:
    """Detections (before NMS) whose centroid pixel lies inside ``region_mask``."""
    cfg = (cfg or DetectionConfig()).validate()
    region = np.asarray(region_mask.data if isinstance(region_mask, Raster) else region_mask).astype(bool)
    if region.shape != slide.shape:
        raise ShapeError(f"region mask {region.shape} does not match slide {slide.shape}")
    h, w = slide.shape
    tiles = plan_patch_grid(w, h, cfg.tile_size, cfg.tile_stride, 0, slide.resolution)
    active = [
        (tx, ty) for tx, ty in tiles.windows
        if region[ty:ty + cfg.tile_size, tx:tx + cfg.tile_size].any()
    ]

    def run_tile(origin):
        tx, ty = origin
        prob = tile_probability(slide, tx, ty, predictors, cfg)
        dets = prob_map_to_detections(prob, cfg.det_threshold, (tx, ty))
        return [d for d in dets if _in_mask(region, d.x, d.y)]

    parallel = threads != 1 and len(active) > 1 and all(getattr(p, "concurrent", False) for p in predictors)
    if parallel:
        with ThreadPoolExecutor(max_workers=None if threads in (0, None) else threads) as pool:
            per_tile = list(pool.map(run_tile, active))
    else:
        per_tile = [run_tile(t) for t in active]
    return sort_detections([d for dets in per_tile for d in dets])


def sort_detections(dets) -> list:
    return sorted(dets, key=lambda d: (d.y, d.x, -d.probability))


def priority_order(dets) -> np.ndarray:
    """Indices by probability descending, ties broken by lower y then lower x."""
    p = np.array([d.probability for d in dets])
    y = np.array([d.y for d in dets])
    x = np.array([d.x for d in dets])
    return np.lexsort((x, y, -p))


def _within(a, b, r2):
    dx, dy = a[0] - b[0], a[1] - b[1]
    return dx * dx + dy * dy <= r2


def nms(detections, cfg: DetectionConfig | None = None, res: Resolution | None = None,
        threads: int = 0) -> list:
    """Greedy radius suppression, computed tile by tile.

    A detection survives iff no surviving detection of higher priority lies
    within ``nms_radius_um``. Each ``nms_tile`` square resolves its own
    detections in priority order, reading the status of halo detections
    owned by neighbouring tiles from the previous pass; passes repeat until
    no status changes. The fixed point is the global greedy result.
    """
    cfg = (cfg or DetectionConfig()).validate()
    res = res or Resolution()
    dets = list(detections)
    n = len(dets)
    if n <= 1:
        return dets
    radius = cfg.nms_radius_um / res.mpp_x
    halo = radius if cfg.nms_halo_px is None else cfg.nms_halo_px
    if halo < radius:
        raise ValidationError(f"NMS halo {halo} px is smaller than the suppression radius {radius} px")
    r2 = radius * radius

    order = priority_order(dets)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    pts = np.array([(d.x, d.y) for d in dets])
    T = cfg.nms_tile
    owner = np.floor(pts / T).astype(np.int64)

    tiles = defaultdict(list)
    for i in order:
        tiles[(owner[i, 0], owner[i, 1])].append(i)

    # per tile: own detections in priority order, each with its higher-priority conflicts
    plans = {}
    for key, own in tiles.items():
        x0, y0 = key[0] * T - halo, key[1] * T - halo
        x1, y1 = (key[0] + 1) * T + halo, (key[1] + 1) * T + halo
        near = np.flatnonzero(
            (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        )
        tree = cKDTree(pts[near])
        conflicts = []
        for i in own:
            cand = near[tree.query_ball_point(pts[i], radius * (1 + 1e-9) + 1e-9)]
            higher = [j for j in cand if rank[j] < rank[i] and _within(pts[i], pts[j], r2)]
            conflicts.append((i, sorted(higher, key=lambda j: rank[j])))
        plans[key] = conflicts

    kept = np.zeros(n, dtype=bool)

    def resolve(key, previous):
        local = {}
        for i, higher in plans[key]:
            alive = True
            for j in higher:
                jk = (owner[j, 0], owner[j, 1])
                status = local[j] if jk == key else previous[j]
                if status:
                    alive = False
                    break
            local[i] = alive
        return local

    keys = sorted(plans)
    for _ in range(n + 1):
        previous = kept.copy()
        if threads != 1 and len(keys) > 1:
            with ThreadPoolExecutor(max_workers=None if threads in (0, None) else threads) as pool:
                results = list(pool.map(lambda k: resolve(k, previous), keys))
        else:
            results = [resolve(k, previous) for k in keys]
        for local in results:
            for i, alive in local.items():
                kept[i] = alive
        if np.array_equal(kept, previous):
            break
    return sort_detections([dets[i] for i in order if kept[i]])


def write_detections_csv(path, detections, with_probability: bool = True) -> None:
    rows = sort_detections(detections)
    with open(path, "w", newline="") as fh:
        fh.write("x_px,y_px,probability\n" if with_probability else "x_px,y_px\n")
        for d in rows:
            if with_probability:
                fh.write(f"{d.x:.3f},{d.y:.3f},{d.probability:.6f}\n")
            else:
                fh.write(f"{d.x:.3f},{d.y:.3f}\n")


def read_detections_csv(path) -> list:
    """Read ``x_px,y_px[,probability]``; a missing probability column reads as 1.0."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if not {"x_px", "y_px"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must start with x_px,y_px, got {reader.fieldnames}")
        out = []
        for row in reader:
            p = float(row["probability"]) if row.get("probability") not in (None, "") else 1.0
            out.append(Detection(float(row["x_px"]), float(row["y_px"]), p))
    return out
