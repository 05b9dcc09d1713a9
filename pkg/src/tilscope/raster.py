"""Raster data model, PNG/sidecar IO, label remapping and patch-grid planning.

All coordinates are ``(x, y)`` = ``(column, row)``; arrays are indexed
``[row, column, channel]``.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    EmptyRasterError,
    IncompleteStitchError,
    InvalidAnnotationError,
    RasterDecodeError,
    ShapeError,
    ValidationError,
)

BASE_MPP = 0.5

LABEL_OTHER = 0
LABEL_TUMOR = 1
LABEL_STROMA = 2
LABEL_IGNORE = 255

# annotation class -> training label; index 3 (in-situ tumor) is excluded from loss and metrics
_ANNOTATION_LUT = np.array([0, 1, 2, 255, 0, 0, 2, 0], dtype=np.uint8)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class Resolution:
    mpp_x: float = BASE_MPP
    mpp_y: float = BASE_MPP

    def __post_init__(self):
        if not (self.mpp_x > 0 and self.mpp_y > 0):
            raise ValidationError(f"microns-per-pixel must be positive, got {self.mpp_x}, {self.mpp_y}")

    @property
    def magnification(self) -> float:
        """Nominal objective power; 0.5 mpp is 20x."""
        return 10.0 / self.mpp_x

    @property
    def pixel_area_um2(self) -> float:
        return self.mpp_x * self.mpp_y

    def halved(self) -> "Resolution":
        """Resolution after halving the magnification (mpp doubles)."""
        return Resolution(self.mpp_x * 2, self.mpp_y * 2)


@dataclass
class Raster:
    """A 2-D sample grid plus its physical resolution.

    ``data`` is ``(H, W)`` or ``(H, W, 3)`` of dtype uint8, bool or float
    (floats must lie in [0, 1]). ``flags`` collects non-fatal warnings raised
    while producing the raster (missing sidecar, dropped odd row, ...).
    """

    data: np.ndarray
    resolution: Resolution = field(default_factory=Resolution)
    flags: list = field(default_factory=list)
    _source_png: bytes | None = field(default=None, repr=False, compare=False)
    _source_digest: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
            raise ValidationError(f"raster must be HxW or HxWx3, got shape {data.shape}")
        if data.dtype.kind == "f":
            if data.size and (np.nanmin(data) < 0 or np.nanmax(data) > 1):
                raise ValidationError("float raster samples must lie in [0, 1]")
        elif data.dtype not in (np.uint8, np.bool_):
            raise ValidationError(f"unsupported raster dtype {data.dtype}")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def shape(self):
        return self.data.shape[:2]


def _data_digest(data: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(str((data.shape, data.dtype.str)).encode())
    h.update(np.ascontiguousarray(data).tobytes())
    return h.digest()


def _check_png_structure(buf: bytes, path) -> None:
    """Walk the chunk list, verifying lengths and CRCs."""
    if not buf.startswith(_PNG_SIGNATURE):
        raise RasterDecodeError(path, 0, "missing PNG signature")
    pos = len(_PNG_SIGNATURE)
    seen_end = False
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise RasterDecodeError(path, pos, "truncated chunk header")
        length, ctype = struct.unpack(">I4s", buf[pos:pos + 8])
        end = pos + 12 + length
        if end > len(buf):
            raise RasterDecodeError(path, pos, f"chunk {ctype!r} runs past end of file")
        (crc,) = struct.unpack(">I", buf[end - 4:end])
        if zlib.crc32(buf[pos + 4:end - 4]) != crc:
            raise RasterDecodeError(path, pos, f"CRC mismatch in chunk {ctype!r}")
        pos = end
        if ctype == b"IEND":
            seen_end = True
            break
    if not seen_end:
        raise RasterDecodeError(path, pos, "no IEND chunk")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".res")


def read_resolution(path) -> Resolution | None:
    side = sidecar_path(path)
    if not side.exists():
        return None
    fields = side.read_text().split()
    if len(fields) != 2:
        raise ValidationError(f"{side}: expected two numbers 'mpp_x mpp_y', got {fields!r}")
    return Resolution(float(fields[0]), float(fields[1]))


def write_resolution(path, res: Resolution) -> None:
    sidecar_path(path).write_text(f"{res.mpp_x!r} {res.mpp_y!r}\n")


def load_raster(path) -> Raster:
    """Read an 8-bit gray or RGB PNG and its ``.res`` sidecar.

    Missing sidecar falls back to 0.5 mpp and records a flag on the result.
    """
    path = Path(path)
    buf = path.read_bytes()
    _check_png_structure(buf, path)
    try:
        with Image.open(io.BytesIO(buf)) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                raise ValidationError(f"{path}: only 8-bit gray or RGB PNG supported, got mode {img.mode}")
            data = np.array(img)
    except (OSError, SyntaxError, zlib.error) as exc:
        raise RasterDecodeError(path, _first_idat_offset(buf), str(exc)) from exc

    flags = []
    res = read_resolution(path)
    if res is None:
        res = Resolution()
        flags.append(f"no resolution sidecar for {path.name}; assumed {BASE_MPP} mpp")
    return Raster(data, res, flags, _source_png=buf, _source_digest=_data_digest(data))


def _first_idat_offset(buf: bytes) -> int:
    idx = buf.find(b"IDAT")
    return max(idx - 4, 0)


def encode_png(data: np.ndarray) -> bytes:
    arr = np.asarray(data)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind == "f":
        arr = np.round(arr * 255.0).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(arr).save(out, format="PNG", compress_level=6)
    return out.getvalue()


def save_raster(raster: Raster, path) -> None:
    """Write ``raster`` as PNG plus a ``.res`` sidecar.

    Float samples are stored as ``round(255 * p)``; bool masks as literal 0/1.
    A raster loaded from disk whose pixels were not modified is written back
    with its original encoded bytes.
    """
    path = Path(path)
    if raster._source_png is not None and raster._source_digest == _data_digest(raster.data):
        payload = raster._source_png
    else:
        payload = encode_png(raster.data)
    path.write_bytes(payload)
    write_resolution(path, raster.resolution)


def map_annotation_labels(annotated) -> Raster:
    """Collapse the 8 annotation classes onto {0 other, 1 tumor, 2 stroma, 255 ignore}."""
    if isinstance(annotated, Raster):
        data, res = annotated.data, annotated.resolution
    else:
        data, res = np.asarray(annotated), Resolution()
    if data.ndim != 2:
        raise ValidationError("annotation masks must be single-channel")
    bad = np.argwhere(data > 7)
    if bad.size:
        y, x = bad[0]
        raise InvalidAnnotationError(int(data[y, x]), int(x), int(y))
    return Raster(_ANNOTATION_LUT[data.astype(np.intp)], res)


def tissue_area_mm2(mask, res: Resolution | None = None) -> float:
    if isinstance(mask, Raster):
        res = res or mask.resolution
        mask = mask.data
    res = res or Resolution()
    return float(np.count_nonzero(mask)) * res.mpp_x * res.mpp_y / 1e6


def resample_half(r: Raster) -> Raster:
    """Halve the magnification by 2x2 mean pooling.

    uint8 input is mapped to unit-interval floats. An odd trailing row or
    column is dropped and flagged.
    """
    data = r.data
    if data.size == 0:
        raise EmptyRasterError("cannot resample an empty raster")
    flags = list(r.flags)
    h2, w2 = data.shape[0] // 2, data.shape[1] // 2
    if data.shape[0] % 2 or data.shape[1] % 2:
        flags.append("odd dimension: trailing row/column dropped by resample_half")
    if h2 == 0 or w2 == 0:
        raise EmptyRasterError("raster too small to resample")
    crop = data[: 2 * h2, : 2 * w2]
    blocks = crop.reshape(h2, 2, w2, 2, *crop.shape[2:])
    if data.dtype == np.uint8:
        out = blocks.sum(axis=(1, 3), dtype=np.uint16) / (4 * 255.0)
    else:
        out = blocks.astype(np.float64).mean(axis=(1, 3))
    return Raster(out, r.resolution.halved(), flags)


def resample_half_nearest(r: Raster) -> Raster:
    """Nearest-neighbour halving for label masks (no label mixing)."""
    data = r.data
    flags = list(r.flags)
    if data.shape[0] % 2 or data.shape[1] % 2:
        flags.append("odd dimension: trailing row/column dropped by resample_half_nearest")
    h2, w2 = data.shape[0] // 2, data.shape[1] // 2
    return Raster(data[: 2 * h2 : 2, : 2 * w2 : 2].copy(), r.resolution.halved(), flags)


def downsample_any(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-wise OR: a low-resolution pixel is set if any source pixel is."""
    if factor == 1:
        return mask.astype(bool)
    h, w = mask.shape
    hp, wp = -(-h // factor) * factor, -(-w // factor) * factor
    padded = np.zeros((hp, wp), dtype=bool)
    padded[:h, :w] = mask
    return padded.reshape(hp // factor, factor, wp // factor, factor).any(axis=(1, 3))


def upsample_nearest(data: np.ndarray, factor: int, shape=None) -> np.ndarray:
    """Repeat each sample ``factor`` times per axis, then zero-pad/crop to ``shape``."""
    out = data if factor == 1 else np.repeat(np.repeat(data, factor, axis=0), factor, axis=1)
    if shape is None or out.shape[:2] == tuple(shape):
        return out
    fitted = np.zeros(tuple(shape) + out.shape[2:], dtype=out.dtype)
    h, w = min(shape[0], out.shape[0]), min(shape[1], out.shape[1])
    fitted[:h, :w] = out[:h, :w]
    return fitted


def extract_window(data: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Crop ``data`` at image coordinates (x, y) with size (w, h); outside samples are zero."""
    out = np.zeros((h, w) + data.shape[2:], dtype=data.dtype)
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, data.shape[1]), min(y + h, data.shape[0])
    if x1 > x0 and y1 > y0:
        out[y0 - y:y1 - y, x0 - x:x1 - x] = data[y0:y1, x0:x1]
    return out


@dataclass
class PatchGrid:
    """Row-major window origins in padded coordinates.

    Window ``(x0, y0)`` covers image pixels ``[x0 - pad, x0 - pad + patch_size)``
    horizontally (same vertically).
    """

    width: int
    height: int
    patch_size: int
    stride: int
    pad: int
    resolution: Resolution = field(default_factory=Resolution)
    windows: list = field(default_factory=list)

    def image_origin(self, window):
        return window[0] - self.pad, window[1] - self.pad

    def extract(self, data: np.ndarray, window) -> np.ndarray:
        x, y = self.image_origin(window)
        return extract_window(data, x, y, self.patch_size, self.patch_size)

    @property
    def central_crop_ok(self) -> bool:
        return 2 * self.pad == self.patch_size - self.stride


def _axis_origins(length, patch_size, stride, pad):
    span = length + 2 * pad
    n = 1 if span <= patch_size else math.ceil((span - patch_size) / stride) + 1
    return [i * stride for i in range(n)]


def plan_patch_grid(width, height, patch_size, stride, pad=0, resolution=None) -> PatchGrid:
    if width <= 0 or height <= 0:
        raise EmptyRasterError(f"cannot tile an empty raster ({width}x{height})")
    if not (patch_size >= stride > 0) or pad < 0:
        raise ValidationError(
            f"need patch_size >= stride > 0 and pad >= 0 (got {patch_size}, {stride}, {pad})"
        )
    xs = _axis_origins(width, patch_size, stride, pad)
    ys = _axis_origins(height, patch_size, stride, pad)
    windows = [(x, y) for y in ys for x in xs]
    return PatchGrid(width, height, patch_size, stride, pad, resolution or Resolution(), windows)


def central_crop_slices(grid: PatchGrid, window):
    """Destination and source slices for the central stride x stride crop of ``window``.

    Returns ``None`` when the crop lies entirely outside the image.
    """
    x0, y0 = window
    s, pad = grid.stride, grid.pad
    dx1, dy1 = min(x0 + s, grid.width), min(y0 + s, grid.height)
    if dx1 <= x0 or dy1 <= y0:
        return None
    dst = (slice(y0, dy1), slice(x0, dx1))
    src = (slice(pad, pad + dy1 - y0), slice(pad, pad + dx1 - x0))
    return dst, src


def stitch_central_crops(patch_results, grid: PatchGrid, dtype=None) -> np.ndarray:
    """Assemble the central crop of each patch result into a full-size array.

    ``patch_results`` maps window origin to an array (or Raster) of
    ``patch_size`` x ``patch_size`` samples; a list of ``(origin, result)``
    pairs is accepted too.
    """
    if not grid.central_crop_ok:
        raise ValidationError("central-crop stitching needs pad == (patch_size - stride) / 2")
    results = dict(patch_results)
    missing = [w for w in grid.windows if w not in results]
    if missing:
        raise IncompleteStitchError(missing)

    out = None
    written = np.zeros((grid.height, grid.width), dtype=np.uint8)
    for window in grid.windows:
        patch = results[window]
        patch = patch.data if isinstance(patch, Raster) else np.asarray(patch)
        if patch.shape[:2] != (grid.patch_size, grid.patch_size):
            raise ShapeError(f"patch at {window} has shape {patch.shape}, expected {grid.patch_size}^2")
        if out is None:
            out = np.zeros((grid.height, grid.width) + patch.shape[2:], dtype=dtype or patch.dtype)
        sl = central_crop_slices(grid, window)
        if sl is None:
            continue
        dst, src = sl
        out[dst] = patch[src]
        written[dst] += 1
    if not np.all(written == 1):
        raise IncompleteStitchError([w for w in grid.windows if central_crop_slices(grid, w) is None])
    return out

