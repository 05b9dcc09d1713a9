"""Seeded synthetic slide bundles with independently computed expected results.

Every bundle holds an RGB slide, tissue mask, ground-truth labels and TIL
points, file-backed probability maps consistent with that ground truth, a
run config pointing at those maps, and ``expected.json``. The expected
values are derived here from the planted geometry by direct arithmetic;
nothing in this module calls the pipeline.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .raster import Raster, Resolution, save_raster

SCENARIOS = ("roi_small", "slide_l2", "detection_blobs", "survival_cohort")

BACKGROUND = (245, 245, 245)
TISSUE = (228, 176, 196)
TUMOR = (150, 84, 160)
STROMA = (238, 196, 208)
TIL = (40, 42, 125)

TIL_RADIUS = 5
LYMPHOCYTE_AREA_UM2 = 16.0


def _disc_offsets(r):
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= r * r
    return dx[keep], dy[keep]


class _Canvas:
    def __init__(self, width, height, mpp=0.5):
        self.res = Resolution(mpp, mpp)
        self.rgb = np.empty((height, width, 3), dtype=np.uint8)
        self.rgb[:] = BACKGROUND
        self.tissue = np.zeros((height, width), dtype=np.uint8)
        self.labels = np.zeros((height, width), dtype=np.uint8)
        self.tumor_p = np.zeros((height, width), dtype=np.uint8)
        self.stroma_p = np.zeros((height, width), dtype=np.uint8)
        self.lymph_p = np.zeros((height, width), dtype=np.uint8)
        self.points = []  # (x, y, value)

    def rect(self, x0, y0, x1, y1, label):
        sl = (slice(y0, y1), slice(x0, x1))
        if label == 1:
            self.rgb[sl] = TUMOR
            self.labels[sl] = 1
            self.tumor_p[sl] = 255
            self.stroma_p[sl] = 0
        elif label == 2:
            self.rgb[sl] = STROMA
            self.labels[sl] = 2
            self.stroma_p[sl] = 255
            self.tumor_p[sl] = 0
        else:
            self.rgb[sl] = TISSUE
            self.labels[sl] = 0
            self.tumor_p[sl] = 0
            self.stroma_p[sl] = 0

    def til(self, x, y, value):
        dx, dy = _disc_offsets(TIL_RADIUS)
        self.rgb[y + dy, x + dx] = TIL
        self.lymph_p[y + dy, x + dx] = value
        self.points.append((x, y, int(value)))

    def write(self, out: Path, prefix="slide"):
        save_raster(Raster(self.rgb, self.res), out / f"{prefix}.png")
        save_raster(Raster(self.tissue, self.res), out / "tissue.png")
        save_raster(Raster(self.labels, self.res), out / "gt_labels.png")
        save_raster(Raster(self.tumor_p, self.res), out / f"{prefix}.tumor.png")
        save_raster(Raster(self.stroma_p, self.res), out / f"{prefix}.stroma.png")
        save_raster(Raster(self.lymph_p, self.res), out / f"{prefix}.lymphocyte.png")
        with open(out / "gt_points.csv", "w", newline="") as fh:
            fh.write("x_px,y_px\n")
            for x, y, _ in sorted(self.points, key=lambda p: (p[1], p[0])):
                fh.write(f"{x:.3f},{y:.3f}\n")


def _jittered_grid(rng, x0, y0, size, cell, count, jitter):
    n = size // cell
    cells = rng.choice(n * n, size=count, replace=False)
    cells.sort()
    pts = []
    for c in cells:
        cy, cx = divmod(int(c), n)
        jx, jy = rng.integers(-jitter, jitter + 1, size=2)
        pts.append((x0 + cx * cell + cell // 2 + int(jx), y0 + cy * cell + cell // 2 + int(jy)))
    return pts


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_config(out: Path, lines):
    (out / "config.txt").write_text("".join(f"{line}\n" for line in lines))


FILE_BACKED_CONFIG = [
    "predictor.segmentation.kind = file_backed",
    "predictor.segmentation.source = slide",
    "predictor.detection.kind = file_backed",
    "predictor.detection.source = slide",
]


def synth_slide_l2(out: Path, seed: int):
    """About 6 mm2 of tissue; an 800x800 stroma block sits inside a tumor frame.

    The frame encloses the block, so the bulk contains exactly the block's
    640,000 stroma pixels (160,000 um2 at 0.5 mpp) and its 1,000 TILs.
    A second stroma block with decoy TILs lies far outside the bulk.
    """
    rng = np.random.default_rng(seed)
    size = 4900
    c = _Canvas(size, size)
    c.tissue[:] = 1
    c.rect(0, 0, size, size, 0)

    # stroma block inside detection tile (1024..2048) so no blob straddles a tile edge
    sx = 1124 + 2 * int(rng.integers(0, 13))
    sy = 1124 + 2 * int(rng.integers(0, 13))
    block, frame = 800, 300
    c.rect(sx - frame, sy - frame, sx + block + frame, sy + block + frame, 1)
    c.rect(sx, sy, sx + block, sy + block, 2)

    # decoy stroma far from any tumor
    dx, dy = 3200, 3200
    c.rect(dx, dy, dx + 1000, dy + 1000, 2)
    for x, y in _jittered_grid(rng, dx, dy, 1000, 40, 200, 4):
        c.til(x, y, int(rng.integers(180, 256)))

    # tumor specks too small to survive the segmentation opening
    for _ in range(5):
        x = int(rng.integers(3000, 4800))
        y = int(rng.integers(200, 2000))
        c.rect(x, y, x + 12, y + 12, 1)

    n_tils = 1000
    for x, y in _jittered_grid(rng, sx, sy, block, 25, n_tils, 3):
        c.til(x, y, int(rng.integers(180, 256)))

    c.write(out)
    _write_config(out, FILE_BACKED_CONFIG)

    stroma_px = block * block
    stroma_um2 = stroma_px * c.res.mpp_x * c.res.mpp_y
    til_area = n_tils * LYMPHOCYTE_AREA_UM2
    expected = {
        "scenario": "slide_l2",
        "seed": seed,
        "branch": "L2",
        "tissue_area_mm2": round(size * size * 0.25 / 1e6, 4),
        "stroma_in_bulk_px": stroma_px,
        "stroma_in_bulk_area_um2": stroma_um2,
        "til_count": n_tils,
        "til_area_um2": til_area,
        "tils_score": int(100 * til_area // stroma_um2),
        "stroma_block": [sx, sy, block],
    }
    _write_json(out / "expected.json", expected)
    return expected


def synth_roi_small(out: Path, seed: int):
    """A 1 mm2 ROI: tissue rectangle with one tumor and one stroma region plus TILs."""
    rng = np.random.default_rng(seed)
    w = h = 2000
    c = _Canvas(w, h)
    tx0, ty0, tx1, ty1 = 100, 100, 1900, 1900
    c.tissue[ty0:ty1, tx0:tx1] = 1
    c.rect(tx0, ty0, tx1, ty1, 0)
    c.rect(200, 200, 900, 1800, 1)
    c.rect(1000, 200, 1800, 1800, 2)
    n_tils = 100 + int(rng.integers(0, 50))
    for x, y in _jittered_grid(rng, 1000, 200, 800, 40, n_tils, 4):
        c.til(x, y, int(rng.integers(180, 256)))
    c.write(out)
    _write_config(out, FILE_BACKED_CONFIG)
    expected = {
        "scenario": "roi_small",
        "seed": seed,
        "branch": "L1",
        "tissue_area_mm2": round((tx1 - tx0) * (ty1 - ty0) * 0.25 / 1e6, 4),
        "til_count": n_tils,
    }
    _write_json(out / "expected.json", expected)
    return expected


def plant_blobs(rng, width, height, count, tile=1024, margin=8, spacing=24):
    """Blob centres away from tile seams and from each other, with uint8 intensities."""
    pts = []
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > 100000:
            raise ValidationError("could not place the requested number of blobs")
        x = int(rng.integers(margin, width - margin))
        y = int(rng.integers(margin, height - margin))
        if min(x % tile, tile - x % tile) < margin or min(y % tile, tile - y % tile) < margin:
            continue
        if any((x - px) ** 2 + (y - py) ** 2 < spacing * spacing for px, py, _ in pts):
            continue
        pts.append((x, y, int(rng.integers(102, 256))))
    return pts


def synth_detection_blobs(out: Path, seed: int):
    rng = np.random.default_rng(seed)
    w, h = 2048, 1536
    c = _Canvas(w, h)
    c.tissue[:] = 1
    c.rect(0, 0, w, h, 2)
    k = int(rng.integers(20, 41))
    for x, y, v in plant_blobs(rng, w, h, k):
        c.til(x, y, v)
    c.write(out)
    _write_config(out, FILE_BACKED_CONFIG)
    rows = sorted(c.points, key=lambda p: (p[1], p[0]))
    with open(out / "expected_detections.csv", "w", newline="") as fh:
        fh.write("x_px,y_px,probability\n")
        for x, y, v in rows:
            fh.write(f"{x:.3f},{y:.3f},{v / 255:.6f}\n")
    expected = {"scenario": "detection_blobs", "seed": seed, "blob_count": k}
    _write_json(out / "expected.json", expected)
    return expected


def _pairwise_cindex(risk, time, event):
    concordant = tied = comparable = 0
    n = len(risk)
    for i in range(n):
        if not event[i]:
            continue
        for j in range(n):
            if time[i] < time[j]:
                comparable += 1
                if risk[i] > risk[j]:
                    concordant += 1
                elif risk[i] == risk[j]:
                    tied += 1
    return concordant, tied, comparable


def synth_survival_cohort(out: Path, seed: int, n: int = 200):
    """Cohort where the risk column raises the hazard; expected C-index by pair counting."""
    rng = np.random.default_rng(seed)
    risk = rng.integers(0, 101, size=n).astype(float)
    hazard = 0.01 * np.exp(0.03 * (risk - 50))
    event_time = rng.exponential(1.0 / hazard)
    censor_time = rng.exponential(150.0, size=n)
    time = np.round(np.minimum(event_time, censor_time), 3) + 0.001
    event = event_time <= censor_time
    with open(out / "survival.csv", "w", newline="") as fh:
        fh.write("case_id,risk,time,event\n")
        for i in range(n):
            fh.write(f"case{i:03d},{risk[i]:.0f},{time[i]:.3f},{int(event[i])}\n")
    # re-read the written values so the oracle sees exactly what the CSV holds
    time = np.array([float(f"{t:.3f}") for t in time])
    concordant, tied, comparable = _pairwise_cindex(risk, time, event)
    expected = {
        "scenario": "survival_cohort",
        "seed": seed,
        "n": n,
        "concordant_pairs": concordant,
        "tied_risk_pairs": tied,
        "comparable_pairs": comparable,
        "c_index": (2 * concordant + tied) / (2 * comparable),
    }
    _write_json(out / "expected.json", expected)
    return expected


def synthesize(scenario: str, seed: int, out) -> dict:
    if scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "roi_small": synth_roi_small,
        "slide_l2": synth_slide_l2,
        "detection_blobs": synth_detection_blobs,
        "survival_cohort": synth_survival_cohort,
    }[scenario](out, seed)
