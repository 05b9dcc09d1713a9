"""Flat ``section.key = value`` run configuration.

Example::

    segmentation.tau_stroma = 0.35
    detection.det_threshold = 0.3
    predictor.segmentation.kind = file_backed
    predictor.segmentation.source = slide

Unknown keys are rejected; keys that are absent take their defaults and are
reported in :attr:`RunConfig.defaults_applied`.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .detection import DetectionConfig
from .errors import ConfigurationError
from .metrics import DEFAULT_FP_RATES
from .predictors import (
    DETECTION_CLASSES,
    IMAGENET_MEAN,
    IMAGENET_STD,
    SEGMENTATION_CLASSES,
    PredictorSpec,
    make_builtin_predictor,
)
from .scoring import BulkConfig, ScoringConfig
from .segmentation import SegmentationConfig


@dataclass
class MetricsConfig:
    hit_radius_um: float = 4.0
    fp_rates: tuple = DEFAULT_FP_RATES
    area_mm2: float = 1.0

    def validate(self):
        if self.hit_radius_um <= 0:
            raise ConfigurationError("metrics.hit_radius_um must be positive")
        if not self.fp_rates or any(r <= 0 for r in self.fp_rates):
            raise ConfigurationError("metrics.fp_rates must be a non-empty list of positive numbers")
        if self.area_mm2 <= 0:
            raise ConfigurationError("metrics.area_mm2 must be positive")
        return self


@dataclass
class PredictorSettings:
    kind: str = "file_backed"
    value: float = 0.0
    # comma-separated path prefixes, each giving one ensemble member; empty = next to the slide
    source: str = ""
    dark_threshold: float = 100.0
    blue_margin: float = 10.0
    normalize: bool = False
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def validate(self):
        if self.kind not in ("constant", "identity", "file_backed", "intensity_heuristic"):
            raise ConfigurationError(f"unknown predictor kind {self.kind!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ConfigurationError(f"predictor constant must lie in [0, 1], got {self.value}")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ConfigurationError("predictor mean/std need three values (std > 0)")
        return self


SECTIONS = {
    "segmentation": SegmentationConfig,
    "detection": DetectionConfig,
    "bulk": BulkConfig,
    "scoring": ScoringConfig,
    "metrics": MetricsConfig,
    "predictor.segmentation": PredictorSettings,
    "predictor.detection": PredictorSettings,
}


def _attr(section):
    return section.replace(".", "_")


@dataclass
class RunConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    bulk: BulkConfig = field(default_factory=BulkConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    predictor_segmentation: PredictorSettings = field(default_factory=PredictorSettings)
    predictor_detection: PredictorSettings = field(default_factory=PredictorSettings)
    explicit_keys: frozenset = frozenset()
    base_dir: Path | None = None

    def validate(self):
        for section in SECTIONS:
            getattr(self, _attr(section)).validate()
        return self

    @property
    def defaults_applied(self) -> list:
        return [k for k in all_keys() if k not in self.explicit_keys]

    def items(self):
        for section in SECTIONS:
            obj = getattr(self, _attr(section))
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def serialize(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def predictor_specs(self, task: str, slide_path=None) -> list:
        """One PredictorSpec per ensemble member for ``task`` ('segmentation' or 'detection')."""
        settings = getattr(self, f"predictor_{task}")
        classes = SEGMENTATION_CLASSES if task == "segmentation" else DETECTION_CLASSES
        size = getattr(self, task).ensemble_size
        base = dict(
            kind=settings.kind, classes=classes, value=settings.value,
            dark_threshold=settings.dark_threshold, blue_margin=settings.blue_margin,
            normalize=settings.normalize, mean=settings.mean, std=settings.std,
        )
        if settings.kind != "file_backed":
            return [PredictorSpec(**base) for _ in range(size)]
        prefixes = [s.strip() for s in settings.source.split(",") if s.strip()]
        if not prefixes:
            if slide_path is None:
                raise ConfigurationError(f"predictor.{task}.source is required for file_backed predictors")
            prefixes = [str(Path(slide_path).with_suffix(""))]
        prefixes = [str(self._resolve(p)) for p in prefixes]
        if len(prefixes) == 1:
            prefixes = prefixes * size
        return [PredictorSpec(**base, source=p) for p in prefixes]

    def build_predictors(self, task: str, slide_path=None) -> list:
        cache = {}
        members = []
        for spec in self.predictor_specs(task, slide_path):
            key = (spec.kind, str(spec.source))
            # identical file-backed members share one loaded source
            if spec.kind == "file_backed" and key in cache:
                members.append(cache[key])
                continue
            pred = make_builtin_predictor(spec)
            cache[key] = pred
            members.append(pred)
        return members

    def _resolve(self, p):
        path = Path(p)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path


def all_keys() -> list:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, base_dir=None) -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir) if base_dir else None)
    explicit = set()
    lookup = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            lookup[f"{section}.{f.name}"] = (section, f.name)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in lookup:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        if key in explicit:
            raise ConfigurationError(f"line {lineno}: duplicate config key {key!r}")
        section, name = lookup[key]
        obj = getattr(cfg, _attr(section))
        setattr(obj, name, _parse_value(key, value, getattr(obj, name)))
        explicit.add(key)
    cfg.explicit_keys = frozenset(explicit)
    try:
        return cfg.validate()
    except ConfigurationError:
        raise
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
