"""Whole-slide tumor/stroma segmentation by tiled ensemble inference."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import IncompleteStitchError, ShapeError, ValidationError
from .morphology import binary_morphology, disc_element
from .predictors import Window, run_members
from .raster import (
    LABEL_OTHER,
    LABEL_STROMA,
    LABEL_TUMOR,
    Raster,
    central_crop_slices,
    downsample_any,
    extract_window,
    plan_patch_grid,
    resample_half,
    upsample_nearest,
)


@dataclass
class SegmentationConfig:
    patch_size: int = 512
    stride: int = 256
    pad: int = 128
    inference_mpp: float = 1.0
    tau_stroma: float = 0.35
    tau_tumor: float = 0.20
    opening_radius: int = 10
    ensemble_size: int = 3
    # where both thresholds fire, tumor wins (tumor anchors the bulk estimate)
    tumor_precedence: bool = True

    def validate(self):
        if 2 * self.pad != self.patch_size - self.stride:
            raise ValidationError("segmentation.pad must equal (patch_size - stride) / 2")
        if not self.patch_size >= self.stride > 0:
            raise ValidationError("segmentation needs patch_size >= stride > 0")
        for name in ("tau_stroma", "tau_tumor"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"segmentation.{name} must lie in (0, 1), got {v}")
        if self.inference_mpp <= 0:
            raise ValidationError("segmentation.inference_mpp must be positive")
        if self.opening_radius < 0:
            raise ValidationError("segmentation.opening_radius must be >= 0")
        if self.ensemble_size < 1:
            raise ValidationError("segmentation.ensemble_size must be >= 1")
        return self


class SegmentationOutput(NamedTuple):
    tumor_prob: Raster
    stroma_prob: Raster
    flags: list


def level_factor(base_mpp, target_mpp) -> int:
    """Integer power-of-two downsampling factor between two resolutions."""
    ratio = target_mpp / base_mpp
    steps = round(math.log2(ratio)) if ratio >= 1 else -1
    if steps < 0 or not math.isclose(2.0 ** steps, ratio, rel_tol=1e-6):
        raise ValidationError(f"cannot reach {target_mpp} mpp from {base_mpp} mpp by halving")
    return 2 ** steps


def _as_mask(m):
    return np.asarray(m.data if isinstance(m, Raster) else m).astype(bool)


def _map_windows(fn, windows, predictors, threads):
    parallel = threads != 1 and all(getattr(p, "concurrent", False) for p in predictors)
    if not parallel or len(windows) < 2:
        for w in windows:
            yield w, fn(w)
        return
    workers = None if threads in (0, None) else threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from zip(windows, pool.map(fn, windows))


def segment_slide(slide: Raster, tissue_mask, predictors, cfg: SegmentationConfig | None = None,
                  threads: int = 0) -> SegmentationOutput:
    """Tumor and stroma probability maps at ``cfg.inference_mpp``.

    Windows without any tissue are skipped and read as probability 0.
    """
    cfg = (cfg or SegmentationConfig()).validate()
    tissue = _as_mask(tissue_mask)
    if tissue.shape != slide.shape:
        raise ShapeError(f"tissue mask {tissue.shape} does not match slide {slide.shape}")
    flags = list(slide.flags)

    factor = level_factor(slide.resolution.mpp_x, cfg.inference_mpp)
    level = slide
    for _ in range(int(math.log2(factor))):
        level = resample_half(level)
    flags.extend(f for f in level.flags if f not in flags)
    h, w = level.shape
    tissue_lvl = downsample_any(tissue, factor)[:h, :w]

    tumor = np.zeros((h, w))
    stroma = np.zeros((h, w))
    if not tissue_lvl.any():
        flags.append("empty tissue mask: segmentation skipped, maps are all zero")
        return SegmentationOutput(Raster(tumor, level.resolution), Raster(stroma, level.resolution), flags)

    grid = plan_patch_grid(w, h, cfg.patch_size, cfg.stride, cfg.pad, level.resolution)
    active = []
    for win in grid.windows:
        x, y = grid.image_origin(win)
        if extract_window(tissue_lvl, x, y, cfg.patch_size, cfg.patch_size).any():
            active.append(win)

    def infer(win):
        x, y = grid.image_origin(win)
        patch = grid.extract(level.data, win)
        window = Window(x, y, cfg.patch_size, cfg.patch_size, level.resolution, (h, w))
        maps = run_members(predictors, patch, window)
        return maps["tumor"], maps["stroma"]

    written = np.zeros((h, w), dtype=np.uint8)
    for win in grid.windows:
        sl = central_crop_slices(grid, win)
        if sl is not None:
            written[sl[0]] += 1
    if not np.all(written == 1):
        raise IncompleteStitchError(grid.windows)

    for win, (tp, sp) in _map_windows(infer, active, predictors, threads):
        sl = central_crop_slices(grid, win)
        if sl is None:
            continue
        dst, src = sl
        tumor[dst] = tp[src]
        stroma[dst] = sp[src]
    return SegmentationOutput(Raster(tumor, level.resolution), Raster(stroma, level.resolution), flags)


def threshold_labels(tumor_prob, stroma_prob, cfg: SegmentationConfig) -> np.ndarray:
    """Thresholded and opened label map at the inference resolution."""
    tp = np.asarray(tumor_prob.data if isinstance(tumor_prob, Raster) else tumor_prob)
    sp = np.asarray(stroma_prob.data if isinstance(stroma_prob, Raster) else stroma_prob)
    if tp.shape != sp.shape:
        raise ShapeError(f"tumor map {tp.shape} and stroma map {sp.shape} differ")
    stroma = sp >= cfg.tau_stroma
    tumor = binary_morphology(tp >= cfg.tau_tumor, disc_element(cfg.opening_radius), "open")
    labels = np.full(tp.shape, LABEL_OTHER, dtype=np.uint8)
    if cfg.tumor_precedence:
        labels[stroma] = LABEL_STROMA
        labels[tumor] = LABEL_TUMOR
    else:
        labels[tumor] = LABEL_TUMOR
        labels[stroma] = LABEL_STROMA
    return labels


def finalize_segmentation(tumor_prob, stroma_prob, tissue_mask, cfg: SegmentationConfig | None = None) -> Raster:
    """Label mask {0 other, 1 tumor, 2 stroma} at the tissue mask's resolution."""
    cfg = (cfg or SegmentationConfig()).validate()
    labels = threshold_labels(tumor_prob, stroma_prob, cfg)
    tissue = _as_mask(tissue_mask)
    res = tissue_mask.resolution if isinstance(tissue_mask, Raster) else None
    prob_res = tumor_prob.resolution if isinstance(tumor_prob, Raster) else None
    if res is not None and prob_res is not None:
        factor = level_factor(res.mpp_x, prob_res.mpp_x)
    else:
        factor = max(1, round(tissue.shape[0] / labels.shape[0]))
    if abs(labels.shape[0] * factor - tissue.shape[0]) >= factor or abs(labels.shape[1] * factor - tissue.shape[1]) >= factor:
        raise ShapeError(
            f"label map {labels.shape} at factor {factor} does not match tissue mask {tissue.shape}"
        )
    full = upsample_nearest(labels, factor, tissue.shape)
    full[~tissue] = LABEL_OTHER
    return Raster(full, res) if res is not None else Raster(full)
