"""Planar homographies: application, estimation (DLT + RANSAC), warping,
and random augmentation sampling.

Points are (x, y) pixel coordinates; arrays of points have shape (n, 2).
Correspondences are rows [x_query, y_query, x_ref, y_ref] in an (n, 4)
array. Homographies are 3x3 float64 matrices normalized so m[2][2] = 1
(Frobenius norm 1 when that entry vanishes).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    """Degenerate geometric input (singular matrix, point at infinity...)."""


class EstimationFailedError(GeometryError):
    """No homography could be estimated (too few points / no consensus)."""


def as_homography(m: np.ndarray) -> np.ndarray:
    """Validate and normalize a 3x3 matrix into canonical homography form."""
    h = np.asarray(m, dtype=np.float64)
    if h.shape != (3, 3):
        raise GeometryError(f"homography must be 3x3, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise GeometryError("homography contains non-finite entries")
    if abs(np.linalg.det(h)) < 1e-12 * max(np.linalg.norm(h) ** 3, 1e-30):
        raise GeometryError("homography is singular")
    if abs(h[2, 2]) > 1e-8 * np.linalg.norm(h):
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def identity_homography() -> np.ndarray:
    return np.eye(3, dtype=np.float64)


def translation(tx: float, ty: float) -> np.ndarray:
    h = np.eye(3, dtype=np.float64)
    h[0, 2] = tx
    h[1, 2] = ty
    return h


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Project points through a homography with perspective divide.

    Accepts a single (2,) point or an (n, 2) array; returns the same shape.
    """
    p = np.asarray(pts, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    hom = np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)
    proj = hom @ np.asarray(h, dtype=np.float64).T
    w = proj[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise GeometryError("point maps to infinity (w ~ 0)")
    out = proj[:, :2] / w[:, None]
    return out[0] if single else out


def invert_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(h)) < 1e-12:
        raise GeometryError("cannot invert a singular homography")
    return as_homography(np.linalg.inv(h))


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Composition a。b: apply(compose(a, b), p) == apply(a, apply(b, p))."""
    return as_homography(np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64))


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking points to centroid 0, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < 1e-12:
        raise GeometryError("degenerate configuration: coincident points")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return t


def estimate_dlt(corrs: np.ndarray) -> np.ndarray:
    """Least-squares homography (query -> ref) via the normalized DLT.

    Both point sets are Hartley-normalized for conditioning; the solution is
    the right singular vector of the 2n x 9 design matrix with the smallest
    singular value.
    """
    c = np.asarray(corrs, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 4:
        raise GeometryError(f"correspondences must be (n, 4), got {c.shape}")
    n = c.shape[0]
    if n < 4:
        raise EstimationFailedError(f"need at least 4 correspondences, got {n}")
    tq = _hartley_normalization(c[:, :2])
    tr = _hartley_normalization(c[:, 2:])
    q = apply_homography(tq, c[:, :2])
    r = apply_homography(tr, c[:, 2:])

    a = np.zeros((2 * n, 9), dtype=np.float64)
    x, y = q[:, 0], q[:, 1]
    u, v = r[:, 0], r[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = x * u
    a[0::2, 7] = y * u
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = x * v
    a[1::2, 7] = y * v
    a[1::2, 8] = v

    _, s, vt = np.linalg.svd(a)
    if s[0] > 0 and s[-2] / s[0] < 1e-10:
        raise GeometryError("degenerate configuration: rank-deficient system")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tr) @ h_norm @ tq
    try:
        return as_homography(h)
    except GeometryError as exc:
        raise GeometryError(f"degenerate configuration: {exc}") from exc


def ransac_homography(
    corrs: np.ndarray,
    inlier_threshold: float = 3.0,
    iterations: int = 2000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC homography with a DLT refit on the best consensus set.

    Returns (homography, boolean inlier mask). Fully deterministic for a
    given seed. Raises EstimationFailedError when no model reaches 4 inliers.
    """
    c = np.asarray(corrs, dtype=np.float64)
    n = c.shape[0] if c.ndim == 2 else 0
    if n < 4:
        raise EstimationFailedError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    query, ref = c[:, :2], c[:, 2:]
    best_mask: np.ndarray | None = None
    best_count = 0
    best_err = np.inf
    for _ in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = estimate_dlt(c[idx])
            proj = apply_homography(h, query)
        except GeometryError:
            continue
        err = np.linalg.norm(proj - ref, axis=1)
        mask = err < inlier_threshold
        count = int(mask.sum())
        total = float(err[mask].sum())
        if count > best_count or (count == best_count and total < best_err):
            best_mask = mask
            best_count = count
            best_err = total
    if best_mask is None or best_count < 4:
        raise EstimationFailedError("no consensus set with at least 4 inliers")
    h = estimate_dlt(c[best_mask])
    return h, best_mask


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a 2-D image at float positions, 0 outside."""
    h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros_like(out)
            vals[valid] = img[yi[valid], xi[valid]]
            out += wgt * vals
    return out


def warp_image(img: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Warp an image's content forward through h (backward bilinear mapping).

    output(p) = img(h^-1 p); samples falling outside the image are 0.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise GeometryError("warp_image expects a 2-D image")
    hinv = invert_homography(h)
    hh, ww = arr.shape
    ys, xs = np.meshgrid(np.arange(hh, dtype=np.float64),
                         np.arange(ww, dtype=np.float64), indexing="ij")
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, np.nan, denom)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    sx = np.nan_to_num(sx, nan=-1e9)
    sy = np.nan_to_num(sy, nan=-1e9)
    return bilinear_sample(arr, sx, sy).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the random homography sampler used by augmentation."""

    max_rotation: float = 0.0        # degrees
    max_translation: float = 0.0     # fraction of image width/height
    scale_range: tuple[float, float] = (1.0, 1.0)
    max_perspective: float = 0.0     # dimensionless jitter of the bottom row

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError("scale_range must satisfy 0 < min <= max")
        if self.max_rotation < 0 or self.max_translation < 0 or self.max_perspective < 0:
            raise ValueError("augmentation ranges must be non-negative")


def sample_homography(params: AugmentParams, size: tuple[int, int], seed: int) -> np.ndarray:
    """Draw a random homography: rotation * scale * translation * perspective.

    All factors act about the image center; ranges are uniform and the draw
    order is fixed so a seed fully determines the result. `size` is (h, w).
    """
    h, w = size
    rng = np.random.default_rng(seed)
    theta = np.deg2rad(rng.uniform(-params.max_rotation, params.max_rotation))
    scale = rng.uniform(params.scale_range[0], params.scale_range[1])
    tx = rng.uniform(-params.max_translation, params.max_translation) * w
    ty = rng.uniform(-params.max_translation, params.max_translation) * h
    px = rng.uniform(-params.max_perspective, params.max_perspective)
    py = rng.uniform(-params.max_perspective, params.max_perspective)

    rot = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                    [np.sin(theta), np.cos(theta), 0.0],
                    [0.0, 0.0, 1.0]])
    sc = np.diag([scale, scale, 1.0])
    tr = translation(tx, ty)
    persp = np.eye(3)
    persp[2, 0] = px / w
    persp[2, 1] = py / h

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = translation(cx, cy)
    uncenter = translation(-cx, -cy)
    return as_homography(center @ persp @ tr @ rot @ sc @ uncenter)


def decompose_rotation(h: np.ndarray, size: tuple[int, int]) -> float:
    """Recover the sampled rotation angle (degrees) of a sample_homography output."""
    hh, ww = size
    cx, cy = (ww - 1) / 2.0, (hh - 1) / 2.0
    m = translation(-cx, -cy) @ np.asarray(h, dtype=np.float64) @ translation(cx, cy)
    return float(np.rad2deg(np.arctan2(m[1, 0], m[0, 0])))


def load_correspondences(path: str | Path) -> np.ndarray:
    """Read the text control-point format: one `xq yq xr yr` row per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 values, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def save_correspondences(path: str | Path, corrs: np.ndarray) -> None:
    c = np.asarray(corrs, dtype=np.float64).reshape(-1, 4)
    lines = [" ".join(repr(float(v)) for v in row) for row in c]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
