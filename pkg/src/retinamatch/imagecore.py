"""Grayscale image representation, I/O, and the fundus preprocessing pipeline.

Images are plain numpy arrays:
  * raw images: uint8, shape (h, w) for single-channel or (h, w, 3) for RGB
  * gray images: float32, shape (h, w), values nominally in [0, 1]

The preprocessing pipeline is green-channel extraction, per-image z-score
normalization, a clip/rescale onto the 8-bit lattice, contrast limited
adaptive histogram equalization (CLAHE), and gamma correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

# Minimum side length accepted for raw images.
MIN_SIDE = 16

CLAHE_BINS = 256


class ImageError(ValueError):
    """Invalid image data or unsupported file content."""


class DegenerateImageError(ImageError):
    """Image has no variance; z-score normalization is undefined."""


@dataclass(frozen=True)
class PreprocessConfig:
    """Tunables for the enhancement stages.

    clahe_clip_limit is relative to the uniform histogram height (a tile's
    histogram is clipped at clip_limit * tile_pixels / 256).
    """

    clahe_clip_limit: float = 2.0
    clahe_tile_grid: tuple[int, int] = (8, 8)
    gamma: float = 1.2

    def __post_init__(self) -> None:
        if self.clahe_clip_limit <= 0:
            raise ValueError("clahe_clip_limit must be > 0")
        rows, cols = self.clahe_tile_grid
        if rows < 1 or cols < 1:
            raise ValueError("clahe_tile_grid must be at least (1, 1)")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


def validate_raw(img: np.ndarray) -> np.ndarray:
    """Check dtype/shape invariants of a raw 8-bit image and return it."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise ImageError(f"raw image must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] in (1, 3):
        h, w = arr.shape[:2]
    else:
        raise ImageError(f"unsupported raw image shape {arr.shape}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ImageError(f"image too small: {w}x{h}, need at least {MIN_SIDE}")
    return arr


def extract_green(img: np.ndarray) -> np.ndarray:
    """Green channel (or the single channel) scaled to [0, 1] float32."""
    arr = validate_raw(img)
    if arr.ndim == 3 and arr.shape[2] == 3:
        chan = arr[:, :, 1]
    else:
        chan = arr.reshape(arr.shape[0], arr.shape[1])
    return (chan.astype(np.float32)) / np.float32(255.0)


def zscore(img: np.ndarray) -> np.ndarray:
    """Standardize to zero mean and unit (population) standard deviation."""
    arr = np.asarray(img, dtype=np.float64)
    std = arr.std()
    if std == 0.0:
        raise DegenerateImageError("constant image: z-score is undefined")
    out = (arr - arr.mean()) / std
    return out.astype(np.float32)


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Elementwise power transform on values in [0, 1]."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    arr = np.asarray(img, dtype=np.float32)
    return np.power(arr, np.float32(gamma))


def _equalize_lut(hist: np.ndarray) -> np.ndarray:
    """Histogram-equalization lookup table for one tile.

    Maps level k to (cdf(k) - cdf_min) / (n - cdf_min), quantized back onto
    the 8-bit lattice. A tile whose mass sits in a single bin maps to the
    identity (there is nothing to equalize).
    """
    n = hist.sum()
    cdf = np.cumsum(hist)
    first = int(np.argmax(hist > 0))
    cdf_min = cdf[first]
    denom = n - cdf_min
    if denom <= 0:
        return np.arange(CLAHE_BINS, dtype=np.float64) / (CLAHE_BINS - 1)
    lut = np.rint((cdf - cdf_min) / denom * (CLAHE_BINS - 1))
    return np.clip(lut, 0, CLAHE_BINS - 1) / (CLAHE_BINS - 1)


def clahe(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Contrast limited adaptive histogram equalization on [0, 1] values.

    The image is quantized to 256 levels, padded (edge-replicated) so the
    tile grid divides it evenly, and each tile's clipped histogram yields an
    equalization LUT; clipped mass is redistributed uniformly over all bins.
    Pixel outputs blend the four surrounding tile LUTs bilinearly.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ImageError("clahe expects a single-channel image")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError("clahe input must be within [0, 1]")
    rows, cols = cfg.clahe_tile_grid
    h, w = arr.shape
    th = math.ceil(h / rows)
    tw = math.ceil(w / cols)
    pad_h = rows * th - h
    pad_w = cols * tw - w
    levels = np.rint(arr * (CLAHE_BINS - 1)).astype(np.int64)
    padded = np.pad(levels, ((0, pad_h), (0, pad_w)), mode="edge")

    tile_n = th * tw
    clip = cfg.clahe_clip_limit * tile_n / CLAHE_BINS
    luts = np.empty((rows, cols, CLAHE_BINS), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=CLAHE_BINS).astype(np.float64)
            excess = np.maximum(hist - clip, 0.0).sum()
            if excess > 0.0:
                hist = np.minimum(hist, clip) + excess / CLAHE_BINS
            luts[r, c] = _equalize_lut(hist)

    # Bilinear blend between tile-center mappings, clamped at the borders.
    ph, pw = padded.shape
    fy = np.clip((np.arange(ph) + 0.5) / th - 0.5, 0.0, rows - 1.0)
    fx = np.clip((np.arange(pw) + 0.5) / tw - 0.5, 0.0, cols - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]

    y0g = y0[:, None]
    y1g = y1[:, None]
    x0g = x0[None, :]
    x1g = x1[None, :]
    out = ((1 - wy) * (1 - wx) * luts[y0g, x0g, padded]
           + (1 - wy) * wx * luts[y0g, x1g, padded]
           + wy * (1 - wx) * luts[y1g, x0g, padded]
           + wy * wx * luts[y1g, x1g, padded])
    return out[:h, :w].astype(np.float32)


def preprocess(img: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Full enhancement pipeline: green -> z-score -> 8-bit rescale -> CLAHE -> gamma.

    The z-scored image is clipped to +/-3 sigma and rescaled onto the 8-bit
    lattice (expressed in [0, 1]) because histogram equalization needs a
    bounded, quantized domain. Output is float32 in [0, 1].
    """
    cfg = cfg or PreprocessConfig()
    g = extract_green(img)
    z = zscore(g).astype(np.float64)
    z = np.clip(z, -3.0, 3.0)
    q = np.rint((z + 3.0) / 6.0 * 255.0) / 255.0
    e = clahe(q.astype(np.float32), cfg)
    return gamma_correct(e, cfg.gamma)


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG or binary PGM file as a raw uint8 image.

    Lossy formats are rejected so golden-file comparisons stay bit-exact.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "PPM"):
                raise ImageError(f"{path}: unsupported format {fmt!r} (PNG/PGM only)")
            if im.mode in ("I", "I;16", "I;16B"):
                arr16 = np.asarray(im.convert("I"), dtype=np.int64)
                arr = (arr16 >> 8).astype(np.uint8)
            elif im.mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.uint8)
            elif im.mode in ("LA",):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc
    return validate_raw(arr)


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write a gray [0, 1] float image or a raw uint8 image as PNG."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(Path(path), format="PNG")


def to_gray(img: np.ndarray) -> np.ndarray:
    """Coerce a [0, 1] array to the canonical float32 gray layout."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ImageError("gray image must be 2-D")
    return arr
