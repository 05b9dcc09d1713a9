"""Disc morphology, connected components, Delaunay triangulation and tumor bulk.

Binary erosion/dilation with a digital disc is computed through the exact
Euclidean distance transform, which keeps large radii on slide-sized masks
cheap: a pixel is within the disc of radius ``r`` of a set iff its squared
distance to the set is at most ``r**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

from .errors import ShapeError, ValidationError
from .raster import Raster, Resolution

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class StructuringElement:
    radius: int
    offsets: np.ndarray  # (K, 2) integer (dx, dy)

    def __len__(self):
        return len(self.offsets)

    @property
    def footprint(self) -> np.ndarray:
        r = self.radius
        fp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
        fp[self.offsets[:, 1] + r, self.offsets[:, 0] + r] = True
        return fp


def disc_element(radius: int) -> StructuringElement:
    if radius < 0 or int(radius) != radius:
        raise ValidationError(f"disc radius must be a non-negative integer, got {radius}")
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= r * r
    return StructuringElement(r, np.stack([dx[keep], dy[keep]], axis=1))


def _bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _dilate(mask, r):
    out = np.zeros(mask.shape, dtype=bool)
    box = _bbox(mask)
    if box is None:
        return out
    if r == 0:
        return mask.copy()
    h, w = mask.shape
    y0, y1 = max(box[0] - r, 0), min(box[1] + r, h)
    x0, x1 = max(box[2] - r, 0), min(box[3] + r, w)
    dist = ndimage.distance_transform_edt(~mask[y0:y1, x0:x1])
    out[y0:y1, x0:x1] = dist * dist <= r * r + 0.5
    return out


def _erode(mask, r):
    out = np.zeros(mask.shape, dtype=bool)
    box = _bbox(mask)
    if box is None:
        return out
    if r == 0:
        return mask.copy()
    y0, y1, x0, x1 = box
    # zero border so that out-of-bounds counts as background
    sub = np.pad(mask[y0:y1, x0:x1], r + 1)
    dist = ndimage.distance_transform_edt(sub)
    out[y0:y1, x0:x1] = (dist * dist > r * r + 0.5)[r + 1:-(r + 1), r + 1:-(r + 1)]
    return out


def binary_morphology(mask, element: StructuringElement, kind: str) -> np.ndarray:
    """Dilate, erode or open a binary mask with a disc element.

    Pixels outside the array are background.
    """
    m = np.asarray(mask.data if isinstance(mask, Raster) else mask).astype(bool)
    r = element.radius
    if kind == "dilate":
        return _dilate(m, r)
    if kind == "erode":
        return _erode(m, r)
    if kind == "open":
        return _dilate(_erode(m, r), r)
    if kind == "close":
        return _erode(_dilate(m, r), r)
    raise ValidationError(f"unknown morphology kind {kind!r}")


@dataclass
class Component:
    id: int
    pixels: np.ndarray  # (N, 2) of (x, y)
    centroid: tuple
    area: int
    mean_value: float | None = None


def label_stats(mask, prob_map=None):
    """Label 8-connected components and return per-component statistics.

    Returns ``(labels, count, area, cx, cy, mean)`` where the arrays are
    indexed by ``label - 1``. Labels follow raster order of each component's
    first pixel, i.e. components are ordered by (min y, min x).
    """
    m = np.asarray(mask).astype(bool)
    if prob_map is not None and np.shape(prob_map)[:2] != m.shape:
        raise ShapeError(f"probability map shape {np.shape(prob_map)} != mask shape {m.shape}")
    labels, n = ndimage.label(m, structure=EIGHT_CONNECTED)
    if n == 0:
        empty = np.zeros(0)
        return labels, 0, empty.astype(np.int64), empty, empty, (empty if prob_map is not None else None)
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs] - 1
    area = np.bincount(lab, minlength=n)
    cx = np.bincount(lab, weights=xs, minlength=n) / area
    cy = np.bincount(lab, weights=ys, minlength=n) / area
    mean = None
    if prob_map is not None:
        vals = np.asarray(prob_map, dtype=np.float64)[ys, xs]
        mean = np.bincount(lab, weights=vals, minlength=n) / area
    return labels, n, area, cx, cy, mean


def connected_components(mask, prob_map=None) -> list:
    m = np.asarray(mask.data if isinstance(mask, Raster) else mask)
    p = prob_map.data if isinstance(prob_map, Raster) else prob_map
    labels, n, area, cx, cy, mean = label_stats(m, p)
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    splits = np.cumsum(area)[:-1]
    pix = np.split(np.stack([xs[order], ys[order]], axis=1), splits)
    return [
        Component(
            id=i + 1,
            pixels=pix[i],
            centroid=(float(cx[i]), float(cy[i])),
            area=int(area[i]),
            mean_value=None if mean is None else float(mean[i]),
        )
        for i in range(n)
    ]


def delaunay_triangulate(points) -> np.ndarray:
    """Delaunay triangles as an array of shape (T, 3, 2).

    Duplicate points are dropped; fewer than three distinct points or a
    collinear set give an empty result.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return np.zeros((0, 3, 2))
    try:
        tri = Delaunay(pts)
    except QhullError:
        return np.zeros((0, 3, 2))
    simplices = pts[tri.simplices]
    area2 = _cross(simplices[:, 0], simplices[:, 1], simplices[:, 2])
    # Qhull can leave slivers on near-degenerate input
    scale = np.ptp(pts, axis=0).max() ** 2
    return simplices[np.abs(area2) > 1e-12 * max(scale, 1.0)]


def _cross(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def rasterize_triangles(triangles, shape) -> np.ndarray:
    """Union of triangles; a pixel is inside if its centre lies inside or on an edge.

    Pixel ``(x, y)`` has its centre at integer coordinates ``(x, y)``.
    """
    out = np.zeros(shape, dtype=bool)
    h, w = shape
    eps = 1e-9
    for a, b, c in np.asarray(triangles, dtype=np.float64):
        x0 = max(int(np.ceil(min(a[0], b[0], c[0]) - eps)), 0)
        x1 = min(int(np.floor(max(a[0], b[0], c[0]) + eps)), w - 1)
        y0 = max(int(np.ceil(min(a[1], b[1], c[1]) - eps)), 0)
        y1 = min(int(np.floor(max(a[1], b[1], c[1]) + eps)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        p = np.stack([px, py], axis=-1).astype(np.float64)
        area = _cross(a, b, c)
        if area == 0:
            continue
        sign = 1.0 if area > 0 else -1.0
        tol = eps * abs(area)
        inside = (
            (sign * _cross(a, b, p) >= -tol)
            & (sign * _cross(b, c, p) >= -tol)
            & (sign * _cross(c, a, p) >= -tol)
        )
        out[y0:y1 + 1, x0:x1 + 1] |= inside
    return out


@dataclass
class BulkRegion:
    triangles: np.ndarray
    mask: np.ndarray
    params: dict
    seeds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    fallback: bool = False
    flags: list = field(default_factory=list)

    def area_px(self) -> int:
        return int(np.count_nonzero(self.mask))


def _keep_large_blobs(mask, opening_radius, min_blob_area_px):
    """Open the mask, drop small blobs, then restore the survivors' original outline.

    The restore step (reconstruction by 8-connectivity inside the original
    mask) keeps sharp tumor corners that a plain opening would round off.
    """
    opened = binary_morphology(mask, disc_element(opening_radius), "open")
    labels, n, area, *_ = label_stats(opened)
    if n == 0:
        return np.zeros_like(mask)
    core = np.isin(labels, np.flatnonzero(area >= min_blob_area_px) + 1)
    if not core.any():
        return np.zeros_like(mask)
    orig_labels, _ = ndimage.label(mask, structure=EIGHT_CONNECTED)
    keep_ids = np.unique(orig_labels[core])
    return np.isin(orig_labels, keep_ids[keep_ids > 0])


def _seed_points(kept, sample_step_px):
    boundary = kept & ~_erode(kept, 1)
    ys, xs = np.nonzero(boundary)
    on_grid = (xs % sample_step_px == 0) | (ys % sample_step_px == 0)
    seeds = [np.stack([xs[on_grid], ys[on_grid]], axis=1).astype(np.float64)]
    _, n, _, cx, cy, _ = label_stats(kept)
    if n:
        seeds.append(np.stack([cx, cy], axis=1))
    pts = np.concatenate(seeds, axis=0)
    return np.unique(pts, axis=0) if len(pts) else pts


def tumor_bulk_region(
    tumor_mask,
    res: Resolution | None = None,
    min_blob_area_px: int = 500,
    sample_step_px: int = 50,
    max_edge_um: float = 1000.0,
    opening_radius: int = 10,
) -> BulkRegion:
    """Estimate the tumor bulk from a base-magnification tumor mask.

    Small tumor fragments are removed by opening plus an area filter; seed
    points sampled on the surviving outlines (plus blob centroids) are
    Delaunay-triangulated, triangles with an edge longer than ``max_edge_um``
    are discarded and the rest are rasterized, merged with the surviving
    tumor and hole-filled.
    """
    if isinstance(tumor_mask, Raster):
        res = res or tumor_mask.resolution
        tumor_mask = tumor_mask.data
    res = res or Resolution()
    mask = np.asarray(tumor_mask).astype(bool)
    params = {
        "min_blob_area_px": min_blob_area_px,
        "sample_step_px": sample_step_px,
        "max_edge_um": max_edge_um,
        "opening_radius": opening_radius,
    }
    kept = _keep_large_blobs(mask, opening_radius, min_blob_area_px)
    seeds = _seed_points(kept, sample_step_px)
    triangles = delaunay_triangulate(seeds) if len(seeds) >= 3 else np.zeros((0, 3, 2))
    if len(triangles) == 0:
        return BulkRegion(
            np.zeros((0, 3, 2)), kept, params, seeds, fallback=True,
            flags=["bulk fallback: fewer than 3 usable seed points; bulk = filtered tumor mask"],
        )

    max_edge_px = max_edge_um / res.mpp_x
    edges = np.stack([
        np.linalg.norm(triangles[:, 0] - triangles[:, 1], axis=1),
        np.linalg.norm(triangles[:, 1] - triangles[:, 2], axis=1),
        np.linalg.norm(triangles[:, 2] - triangles[:, 0], axis=1),
    ], axis=1)
    triangles = triangles[edges.max(axis=1) <= max_edge_px]
    bulk = rasterize_triangles(triangles, mask.shape) | kept
    box = _bbox(bulk)
    if box is not None:
        y0, y1, x0, x1 = box
        bulk[y0:y1, x0:x1] = ndimage.binary_fill_holes(bulk[y0:y1, x0:x1])
    return BulkRegion(triangles, bulk, params, seeds)
