"""Patch predictors: the seam where a trained segmentation/detection network plugs in.

Every predictor maps an RGB patch (plus the window it was cut from) to one
unit-interval probability map per class. The built-in kinds are
deterministic stand-ins used for testing and for replaying precomputed
probability maps.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, OutOfBoundsError, ShapeError
from .raster import Raster, Resolution, extract_window, load_raster, resample_half

SEGMENTATION_CLASSES = ("tumor", "stroma")
DETECTION_CLASSES = ("lymphocyte",)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

KINDS = ("constant", "identity", "file_backed", "intensity_heuristic")


@dataclass(frozen=True)
class Window:
    """Where a patch came from: origin and size in pixels of the processed level.

    ``bounds`` is ``(height, width)`` of that level; samples outside it are
    zero padding.
    """

    x: int
    y: int
    width: int
    height: int
    resolution: Resolution = field(default_factory=Resolution)
    bounds: tuple | None = None


@dataclass
class PredictionMaps:
    maps: dict

    def __getitem__(self, name):
        return self.maps[name]

    @property
    def classes(self):
        return tuple(self.maps)

    @property
    def shape(self):
        return next(iter(self.maps.values())).shape


@dataclass
class PredictorSpec:
    kind: str
    classes: tuple = SEGMENTATION_CLASSES
    value: float | dict = 0.0
    source: str | Path | None = None
    sources: dict | None = None
    dark_threshold: float = 100.0
    blue_margin: float = 10.0
    normalize: bool = False
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD


class Predictor:
    """Base class. Subclasses implement ``_predict(patch, window) -> {class: array}``."""

    classes: tuple = SEGMENTATION_CLASSES
    # backends that are not thread-safe set this to False; the pipelines then dispatch sequentially
    concurrent = True

    def predict_patch(self, patch, window: Window | None = None) -> PredictionMaps:
        data = patch.data if isinstance(patch, Raster) else np.asarray(patch)
        maps = self._predict(data, window)
        return PredictionMaps({c: maps[c] for c in self.classes})

    def _predict(self, data, window):
        raise NotImplementedError


class ConstantPredictor(Predictor):
    def __init__(self, value, classes=SEGMENTATION_CLASSES):
        self.classes = tuple(classes)
        if not isinstance(value, dict):
            value = {c: value for c in self.classes}
        for c, v in value.items():
            if not 0.0 <= float(v) <= 1.0:
                raise ConfigurationError(f"constant for class {c!r} must lie in [0, 1], got {v}")
        self.values = {c: float(value[c]) for c in self.classes}

    def _predict(self, data, window):
        shape = data.shape[:2]
        return {c: np.full(shape, v) for c, v in self.values.items()}


def _to_unit(channel):
    if channel.dtype == np.uint8:
        return channel / 255.0
    return channel.astype(np.float64)


class IdentityPredictor(Predictor):
    """Every class map is the patch's green channel scaled to [0, 1]."""

    def __init__(self, classes=SEGMENTATION_CLASSES):
        self.classes = tuple(classes)

    def _predict(self, data, window):
        green = _to_unit(data[:, :, 1] if data.ndim == 3 else data)
        return {c: green for c in self.classes}


class IntensityHeuristicPredictor(Predictor):
    """Crude hematoxylin proxy: dark, blue-dominant pixels are lymphocyte (p = 1)."""

    def __init__(self, dark_threshold=100.0, blue_margin=10.0, classes=DETECTION_CLASSES):
        self.classes = tuple(classes)
        if self.classes != DETECTION_CLASSES:
            raise ConfigurationError("intensity_heuristic only predicts the lymphocyte class")
        self.dark_threshold = float(dark_threshold)
        self.blue_margin = float(blue_margin)

    def _predict(self, data, window):
        if data.ndim != 3:
            raise ShapeError("intensity_heuristic needs an RGB patch")
        rgb = data.astype(np.float64)
        if data.dtype != np.uint8:
            rgb = rgb * 255.0
        r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
        luminance = 0.299 * r + 0.587 * g + 0.114 * b
        hit = (luminance < self.dark_threshold) & (b >= np.maximum(r, g) + self.blue_margin)
        return {"lymphocyte": hit.astype(np.float64)}


class FileBackedPredictor(Predictor):
    """Replays whole-slide probability rasters, cropping them at each window.

    ``sources`` maps class name to a Raster (uint8 ``value / 255`` or float).
    When a window is requested at a coarser resolution than the source, the
    source is mean-pooled down by powers of two once and cached.
    """

    def __init__(self, sources: dict, classes=SEGMENTATION_CLASSES):
        self.classes = tuple(classes)
        missing = [c for c in self.classes if c not in sources]
        if missing:
            raise ConfigurationError(f"file_backed predictor has no source for classes {missing}")
        self._levels = {c: {sources[c].resolution.mpp_x: sources[c]} for c in self.classes}
        self._lock = threading.Lock()

    @classmethod
    def from_prefix(cls, prefix, classes=SEGMENTATION_CLASSES):
        sources = {}
        for c in classes:
            path = Path(f"{prefix}.{c}.png")
            if not path.is_file():
                raise ConfigurationError(f"file_backed source {path} is missing or unreadable")
            sources[c] = load_raster(path)
        return cls(sources, classes)

    def _source_at(self, cls_name, res: Resolution) -> Raster:
        levels = self._levels[cls_name]
        target = res.mpp_x
        for mpp, r in levels.items():
            if np.isclose(mpp, target):
                return r
        with self._lock:
            finest = min(levels)
            ratio = target / finest
            steps = int(round(np.log2(ratio))) if ratio > 1 else -1
            if steps < 1 or not np.isclose(2.0 ** steps, ratio):
                raise ConfigurationError(
                    f"source for {cls_name!r} is at {finest} mpp; cannot serve {target} mpp"
                )
            r = levels[finest]
            for _ in range(steps):
                r = resample_half(r)
            levels[r.resolution.mpp_x] = r
            return r

    def _predict(self, data, window):
        if window is None:
            raise ConfigurationError("file_backed predictor needs the patch window")
        out = {}
        for c in self.classes:
            src = self._source_at(c, window.resolution)
            bounds = window.bounds or src.shape
            # the part of the window that lies inside the processed level must be inside the source
            x0, y0 = max(window.x, 0), max(window.y, 0)
            x1 = min(window.x + window.width, bounds[1])
            y1 = min(window.y + window.height, bounds[0])
            if x1 > x0 and y1 > y0 and (x1 > src.width or y1 > src.height):
                raise OutOfBoundsError(
                    f"window ({window.x},{window.y},{window.width}x{window.height}) reaches outside the "
                    f"{src.width}x{src.height} source for class {c!r}"
                )
            crop = extract_window(src.data, window.x, window.y, window.width, window.height)
            if bounds != src.shape:
                # zero out samples that lie in padding beyond the processed level
                valid = extract_window(np.ones(bounds, dtype=bool), window.x, window.y, window.width, window.height)
                crop = np.where(valid, crop, 0)
            out[c] = _to_unit(crop)
        return out


class CallablePredictor(Predictor):
    """Wraps an external model ``fn(float32 HxWx3) -> HxWxC`` probabilities.

    Applies per-channel mean/std normalization first when enabled.
    """

    def __init__(self, fn, classes=SEGMENTATION_CLASSES, normalize=True,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD, concurrent=False):
        self.fn = fn
        self.classes = tuple(classes)
        self.normalize = normalize
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.concurrent = concurrent

    def preprocess(self, data):
        x = data.astype(np.float32)
        if data.dtype == np.uint8:
            x /= 255.0
        if self.normalize:
            x = (x - self.mean) / self.std
        return x

    def _predict(self, data, window):
        probs = np.asarray(self.fn(self.preprocess(data)), dtype=np.float64)
        if probs.ndim == 2:
            probs = probs[:, :, None]
        if probs.shape[:2] != data.shape[:2] or probs.shape[2] != len(self.classes):
            raise ShapeError(f"model returned {probs.shape}, expected {data.shape[:2]} x {len(self.classes)}")
        return {c: np.clip(probs[:, :, i], 0.0, 1.0) for i, c in enumerate(self.classes)}


def ensemble_average(maps: list) -> PredictionMaps:
    """Per-pixel mean of each class over the ensemble members."""
    if not maps:
        raise ConfigurationError("ensemble needs at least one member")
    classes = maps[0].classes
    for m in maps[1:]:
        if set(m.classes) != set(classes):
            raise ConfigurationError(f"ensemble class sets differ: {classes} vs {m.classes}")
        if m.shape != maps[0].shape:
            raise ShapeError(f"ensemble map shapes differ: {maps[0].shape} vs {m.shape}")
    if len(maps) == 1:
        return PredictionMaps(dict(maps[0].maps))
    out = {}
    for c in classes:
        stack = np.stack([m[c] for m in maps])
        # clamping keeps rounding from leaving [min, max]; equal members stay bit-identical
        out[c] = np.clip(stack.mean(axis=0), stack.min(axis=0), stack.max(axis=0))
    return PredictionMaps(out)


def make_builtin_predictor(spec: PredictorSpec) -> Predictor:
    kind = spec.kind
    if kind not in KINDS:
        raise ConfigurationError(f"unknown predictor kind {kind!r}; expected one of {KINDS}")
    if spec.normalize and kind in ("identity", "intensity_heuristic"):
        raise ConfigurationError(f"{kind} reads raw intensities; normalization cannot be enabled")
    if kind == "constant":
        return ConstantPredictor(spec.value, spec.classes)
    if kind == "identity":
        return IdentityPredictor(spec.classes)
    if kind == "intensity_heuristic":
        return IntensityHeuristicPredictor(spec.dark_threshold, spec.blue_margin, spec.classes)
    if spec.sources is not None:
        return FileBackedPredictor(spec.sources, spec.classes)
    if spec.source is None:
        raise ConfigurationError("file_backed predictor needs a source prefix")
    return FileBackedPredictor.from_prefix(spec.source, spec.classes)


def run_members(predictors, patch, window):
    return ensemble_average([p.predict_patch(patch, window) for p in predictors])
