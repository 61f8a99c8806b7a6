"""Heatmap -> keypoint extraction (greedy NMS with subpixel refinement),
descriptor sampling, and mutual nearest-neighbor matching with a ratio test.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class KeypointSet:
    """Keypoints as (n, 2) xy coordinates with scores, sorted by descending
    score (ties broken by ascending y then x)."""

    xy: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.xy.shape[0] != self.scores.shape[0]:
            raise ValueError("keypoint/score count mismatch")

    def __len__(self) -> int:
        return self.xy.shape[0]

    @staticmethod
    def empty() -> "KeypointSet":
        return KeypointSet(np.zeros((0, 2)), np.zeros(0))


@dataclass
class MatchSet:
    """Descriptor matches: row [query_index, ref_index] with L2 distances."""

    query: KeypointSet
    ref: KeypointSet
    indices: np.ndarray   # (m, 2) int
    distances: np.ndarray  # (m,)

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if self.indices.shape[0] != self.distances.shape[0]:
            raise ValueError("match/distance count mismatch")

    def __len__(self) -> int:
        return self.indices.shape[0]


def _local_maxima(heat: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean mask of pixels above threshold that dominate their 8-neighborhood."""
    padded = np.pad(heat, 1, mode="constant", constant_values=-np.inf)
    center = padded[1:-1, 1:-1]
    mask = center >= threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            mask &= center >= padded[1 + dy:padded.shape[0] - 1 + dy,
                                     1 + dx:padded.shape[1] - 1 + dx]
    return mask


def _refine_subpixel(heat: np.ndarray, y: int, x: int) -> tuple[float, float]:
    """Quadratic fit of the 3x3 neighborhood; offsets clamped to +/-0.5."""
    h, w = heat.shape
    if not (1 <= y < h - 1 and 1 <= x < w - 1):
        return float(x), float(y)
    p = heat[y - 1:y + 2, x - 1:x + 2].astype(np.float64)
    dx = (p[1, 2] - p[1, 0]) / 2.0
    dy = (p[2, 1] - p[0, 1]) / 2.0
    dxx = p[1, 2] - 2.0 * p[1, 1] + p[1, 0]
    dyy = p[2, 1] - 2.0 * p[1, 1] + p[0, 1]
    dxy = (p[2, 2] - p[2, 0] - p[0, 2] + p[0, 0]) / 4.0
    hess = np.array([[dxx, dxy], [dxy, dyy]])
    det = np.linalg.det(hess)
    if abs(det) < 1e-12:
        return float(x), float(y)
    off = -np.linalg.solve(hess, np.array([dx, dy]))
    off = np.clip(off, -0.5, 0.5)
    return float(x + off[0]), float(y + off[1])


def nms_extract(heat: np.ndarray, threshold: float = 0.3, window: float = 10.0,
                max_keypoints: int = 1024, refine: bool = True) -> KeypointSet:
    """Greedy non-maximum suppression over a detection heatmap.

    Local maxima above `threshold` are visited in (score desc, y, x) order;
    a candidate is kept only if no kept point lies within `window` pixels
    (Euclidean, on the integer grid). Kept points get a subpixel quadratic
    refinement and the set is capped at `max_keypoints`.
    """
    heat = np.asarray(heat, dtype=np.float64)
    ys, xs = np.nonzero(_local_maxima(heat, threshold))
    if ys.size == 0:
        return KeypointSet.empty()
    scores = heat[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    ys, xs, scores = ys[order], xs[order], scores[order]

    kept: list[int] = []
    kept_pos = np.empty((0, 2), dtype=np.float64)
    for i in range(ys.size):
        pos = np.array([xs[i], ys[i]], dtype=np.float64)
        if kept and np.min(np.linalg.norm(kept_pos - pos, axis=1)) < window:
            continue
        kept.append(i)
        kept_pos = np.vstack([kept_pos, pos])
        if len(kept) >= max_keypoints:
            break

    pts = []
    for i in kept:
        if refine:
            pts.append(_refine_subpixel(heat, int(ys[i]), int(xs[i])))
        else:
            pts.append((float(xs[i]), float(ys[i])))
    return KeypointSet(np.asarray(pts, dtype=np.float64), scores[kept])


def sample_descriptors(field: np.ndarray, kps: KeypointSet) -> np.ndarray:
    """Bilinear samples of an (h, w, d) descriptor field at the keypoints,
    renormalized to unit L2. Raises on out-of-bounds keypoints."""
    f = np.asarray(field, dtype=np.float64)
    h, w, d = f.shape
    out = np.empty((len(kps), d), dtype=np.float64)
    for i, (x, y) in enumerate(kps.xy):
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise ValueError(f"keypoint ({x}, {y}) outside descriptor field {w}x{h}")
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0
        v = ((1 - fy) * (1 - fx) * f[y0, x0] + (1 - fy) * fx * f[y0, x1]
             + fy * (1 - fx) * f[y1, x0] + fy * fx * f[y1, x1])
        norm = np.linalg.norm(v)
        out[i] = v / max(norm, 1e-8)
    return out.astype(np.float32)


def match_descriptors(desc_query: np.ndarray, desc_ref: np.ndarray,
                      ratio_threshold: float = 0.9, mutual: bool = True,
                      query_kps: KeypointSet | None = None,
                      ref_kps: KeypointSet | None = None) -> MatchSet:
    """Nearest-neighbor matching with Lowe's ratio test and optional mutuality.

    When the reference list has a single descriptor the ratio test is
    undefined; such a match is kept only if the mutual check holds.
    """
    a = np.asarray(desc_query, dtype=np.float64)
    b = np.asarray(desc_ref, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("descriptor lists must be nonempty")
    d2 = np.maximum(
        (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T,
        0.0)
    dmat = np.sqrt(d2)
    nn_ref = dmat.argmin(axis=1)
    nn_query = dmat.argmin(axis=0)

    rows = []
    dists = []
    for i in range(a.shape[0]):
        j = int(nn_ref[i])
        d1 = dmat[i, j]
        reciprocal = int(nn_query[j]) == i
        if b.shape[0] >= 2:
            d2nd = np.partition(dmat[i], 1)[1]
            if not (d2nd > 0 and d1 / d2nd < ratio_threshold):
                continue
            if mutual and not reciprocal:
                continue
        else:
            if not reciprocal:
                continue
        rows.append((i, j))
        dists.append(d1)

    return MatchSet(
        query=query_kps or KeypointSet.empty(),
        ref=ref_kps or KeypointSet.empty(),
        indices=np.asarray(rows, dtype=np.int64).reshape(-1, 2),
        distances=np.asarray(dists, dtype=np.float64),
    )


def dump_keypoints(kps: KeypointSet, descriptors: np.ndarray | None = None) -> dict:
    """JSON-ready dump: points as [x, y, score] plus an optional base64
    little-endian float32 descriptor block."""
    doc: dict = {
        "points": [[float(x), float(y), float(s)]
                   for (x, y), s in zip(kps.xy, kps.scores)],
    }
    if descriptors is not None:
        d = np.ascontiguousarray(descriptors, dtype="<f4")
        doc["descriptor_dim"] = int(d.shape[1]) if d.ndim == 2 else 0
        doc["descriptors"] = base64.b64encode(d.tobytes()).decode("ascii")
    return doc


def load_keypoints(doc: dict) -> tuple[KeypointSet, np.ndarray | None]:
    pts = np.asarray([[p[0], p[1]] for p in doc["points"]], dtype=np.float64).reshape(-1, 2)
    scores = np.asarray([p[2] for p in doc["points"]], dtype=np.float64)
    kps = KeypointSet(pts, scores)
    desc = None
    if doc.get("descriptors") is not None:
        raw = base64.b64decode(doc["descriptors"])
        dim = int(doc["descriptor_dim"])
        desc = np.frombuffer(raw, dtype="<f4").reshape(-1, dim).astype(np.float32)
    return kps, desc


def save_keypoints_json(path: str | Path, kps: KeypointSet,
                        descriptors: np.ndarray | None = None) -> None:
    Path(path).write_text(json.dumps(dump_keypoints(kps, descriptors)))
