"""Training objectives for the detector/descriptor models.

Detector side: soft dice losses against Gaussian-smoothed keypoint labels,
against a frozen teacher heatmap (distillation), and between an image's
heatmap and the inverse-warped heatmap of its augmented copy (geometric
consistency). Descriptor side: a hinge triplet loss over the NMS keypoint
set using one random and one hardest negative, plus its distillation twin
where the teacher's descriptor field supplies positives and negatives.

All functions take torch tensors where gradients must flow and are pure
given (inputs, seed); the random negative is keyed by hashing the keypoint
coordinates with the seed, so values are independent of keypoint order.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import apply_homography

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    clf: float = 1.0
    clf_rkd: float = 1.0
    geo: float = 1.0
    des: float = 1.0
    des_rkd: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of every term; the aggregates are exact sums."""

    l_clf: float = 0.0
    l_clf_rkd: float = 0.0
    l_geo: float = 0.0
    l_des: float = 0.0
    l_des_rkd: float = 0.0

    @property
    def l_det(self) -> float:
        return self.l_clf + self.l_clf_rkd + self.l_geo

    @property
    def l_des_total(self) -> float:
        return self.l_des + self.l_des_rkd

    @property
    def total(self) -> float:
        return self.l_det + self.l_des_total

    def to_dict(self) -> dict:
        return {
            "l_clf": self.l_clf,
            "l_clf_rkd": self.l_clf_rkd,
            "l_geo": self.l_geo,
            "l_det": self.l_det,
            "l_des": self.l_des,
            "l_des_rkd": self.l_des_rkd,
            "l_des_total": self.l_des_total,
            "total": self.total,
        }


def smooth_labels(keypoints: np.ndarray, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Gaussian-smoothed keypoint map, max-composed so every peak is exactly 1.

    Keypoint coordinates are rounded to the pixel grid before placing each
    Gaussian, which pins the maximum of 1 at the rounded location.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    h, w = shape
    out = np.zeros((h, w), dtype=np.float64)
    if hasattr(keypoints, "xy"):  # KeypointSet
        keypoints = keypoints.xy
    pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    radius = int(np.ceil(4.0 * sigma))
    for x, y in pts:
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise ValueError(f"keypoint ({x}, {y}) outside image bounds {w}x{h}")
        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
        x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        patch = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
        out[y0:y1, x0:x1] = np.maximum(out[y0:y1, x0:x1], patch)
    return out.astype(np.float32)


def dice_loss(a: torch.Tensor, b: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(a*b) + eps) / (sum(a*a) + sum(b*b) + eps)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    inter = (a * b).sum()
    denom = (a * a).sum() + (b * b).sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def l_clf(heatmap: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Dice loss between the predicted heatmap and smoothed ground truth."""
    return dice_loss(heatmap, labels, eps)


def l_clf_rkd(student_heatmap: torch.Tensor, teacher_heatmap: torch.Tensor,
              eps: float = DICE_EPS) -> torch.Tensor:
    """Dice loss to the teacher's heatmap; the teacher is a constant."""
    return dice_loss(student_heatmap, teacher_heatmap.detach(), eps)


def _sampling_grid(shape: tuple[int, int], matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source positions matrix^-1 @ p for every output pixel p of warp."""
    hinv = np.linalg.inv(np.asarray(matrix, dtype=np.float64))
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, np.nan, denom)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    return np.nan_to_num(sx, nan=-1e9), np.nan_to_num(sy, nan=-1e9)


def warp_tensor(img: torch.Tensor, matrix: np.ndarray) -> torch.Tensor:
    """Differentiable counterpart of geometry.warp_image for (h, w) tensors."""
    h, w = img.shape
    sx, sy = _sampling_grid((h, w), matrix)
    xs = torch.from_numpy(sx).to(img.dtype)
    ys = torch.from_numpy(sy).to(img.dtype)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    fx = xs - x0
    fy = ys - y0
    flat = img.reshape(-1)
    out = torch.zeros_like(xs)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0.long() + dx
            yi = y0.long() + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(-1)
            vals = flat[idx].reshape(h, w)
            out = out + wgt * valid.to(img.dtype) * vals
    return out


def warp_valid_mask(shape: tuple[int, int], matrix: np.ndarray) -> np.ndarray:
    """Pixels of warp_tensor(~, matrix) whose source sample is in bounds."""
    h, w = shape
    sx, sy = _sampling_grid(shape, matrix)
    return (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)


def l_geo(heatmap: torch.Tensor, heatmap_aug: torch.Tensor, h_aug: np.ndarray,
          valid_mask: np.ndarray | None = None, eps: float = DICE_EPS) -> torch.Tensor:
    """Geometric consistency: dice between P(I) and the inverse projection of
    P(I') onto I's frame, restricted to pixels whose projection lands inside
    the augmented image. Gradients flow through both heatmaps and the warp.
    """
    inv = np.linalg.inv(np.asarray(h_aug, dtype=np.float64))
    warped = warp_tensor(heatmap_aug, inv)
    if valid_mask is None:
        valid_mask = warp_valid_mask(tuple(heatmap.shape), inv)
    mask = torch.from_numpy(np.ascontiguousarray(valid_mask))
    if not bool(mask.any()):
        warnings.warn("l_geo valid mask is empty; defining the loss as 0")
        return heatmap.sum() * 0.0
    return dice_loss(heatmap[mask], warped[mask], eps)


def sample_descriptor_field(field: torch.Tensor, points: np.ndarray) -> torch.Tensor:
    """Bilinear sampling of a (d, h, w) field at (n, 2) xy positions,
    renormalized to unit length. Differentiable w.r.t. the field."""
    d, h, w = field.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xs = torch.from_numpy(pts[:, 0]).to(field.dtype)
    ys = torch.from_numpy(pts[:, 1]).to(field.dtype)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    fx = xs - x0
    fy = ys - y0
    flat = field.reshape(d, -1)
    acc = torch.zeros(pts.shape[0], d, dtype=field.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0.long() + dx
            yi = y0.long() + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = ((fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)) * valid.to(field.dtype)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
            acc = acc + wgt[:, None] * flat[:, idx].T
    return acc / acc.norm(dim=1, keepdim=True).clamp_min(1e-8)


def _stable_negative_index(seed: int, x: float, y: float, n_other: int) -> int:
    key = struct.pack("<q", int(seed)) + struct.pack("<dd", float(x), float(y))
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") % n_other


def registered_keypoints(keypoints: np.ndarray, h: np.ndarray | None,
                         shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Canonically ordered keypoints and their in-bounds projections.

    Keypoints whose projection falls outside `shape` are dropped (their
    descriptors in the second field are undefined).
    """
    pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    pts = pts[order]
    warped = pts if h is None else apply_homography(h, pts)
    hh, ww = shape
    keep = ((warped[:, 0] >= 0) & (warped[:, 0] <= ww - 1)
            & (warped[:, 1] >= 0) & (warped[:, 1] <= hh - 1))
    return pts[keep], warped[keep]


def triplet_descriptor_loss(desc: torch.Tensor, desc_prime: torch.Tensor,
                            keypoints: np.ndarray, h: np.ndarray | None,
                            margin: float, seed: int) -> torch.Tensor:
    """Hinge triplet loss over the NMS keypoint set.

    For each keypoint, the positive is the descriptor at its projection into
    the second image; the negatives are a seed-chosen random other projected
    keypoint and the hardest (minimum-distance) one:
        sum_i max(0, margin + pos_i - (rand_i + hard_i) / 2)
    """
    shape = (desc_prime.shape[1], desc_prime.shape[2])
    anchors_xy, warped_xy = registered_keypoints(keypoints, h, shape)
    n = anchors_xy.shape[0]
    if n < 2:
        raise ValueError("triplet loss needs at least 2 registered keypoints")
    a = sample_descriptor_field(desc, anchors_xy)
    b = sample_descriptor_field(desc_prime, warped_xy)
    sim = a @ b.T
    a2 = (a * a).sum(dim=1)[:, None]
    b2 = (b * b).sum(dim=1)[None, :]
    # the tiny epsilon sits inside the sqrt so coincident descriptors still
    # receive a separating gradient (a collapsed field must be able to escape)
    dmat = ((a2 + b2 - 2.0 * sim).clamp_min(0.0) + 1e-12).sqrt()
    pos = dmat.diagonal()
    off = dmat + torch.diag(torch.full((n,), torch.inf, dtype=dmat.dtype))
    hard = off.min(dim=1).values
    rand_idx = []
    for i in range(n):
        j = _stable_negative_index(seed, anchors_xy[i, 0], anchors_xy[i, 1], n - 1)
        rand_idx.append(j if j < i else j + 1)
    rand = dmat[torch.arange(n), torch.tensor(rand_idx)]
    terms = torch.clamp(margin + pos - 0.5 * (rand + hard), min=0.0)
    return terms.sum()


def l_des_rkd(student_desc: torch.Tensor, teacher_desc: torch.Tensor,
              keypoints: np.ndarray, margin: float, seed: int) -> torch.Tensor:
    """Descriptor distillation: contrastive matching of the student field
    against the frozen teacher field at the same keypoint locations."""
    return triplet_descriptor_loss(student_desc, teacher_desc.detach(),
                                   keypoints, None, margin, seed)


def combine_losses(l_clf_t: torch.Tensor | None = None,
                   l_clf_rkd_t: torch.Tensor | None = None,
                   l_geo_t: torch.Tensor | None = None,
                   l_des_t: torch.Tensor | None = None,
                   l_des_rkd_t: torch.Tensor | None = None,
                   weights: LossWeights | None = None,
                   ) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of whatever terms are present; absent terms contribute 0.

    The breakdown records the weighted values so its additivity identities
    hold exactly for any weights.
    """
    w = weights or LossWeights()
    pairs = [(l_clf_t, w.clf), (l_clf_rkd_t, w.clf_rkd), (l_geo_t, w.geo),
             (l_des_t, w.des), (l_des_rkd_t, w.des_rkd)]
    total: torch.Tensor | None = None
    values = []
    for term, weight in pairs:
        if term is None:
            values.append(0.0)
            continue
        scaled = term * weight
        values.append(float(scaled.detach()))
        total = scaled if total is None else total + scaled
    if total is None:
        total = torch.zeros(())
    breakdown = LossBreakdown(l_clf=values[0], l_clf_rkd=values[1], l_geo=values[2],
                              l_des=values[3], l_des_rkd=values[4])
    return total, breakdown


def detector_loss(heatmap: torch.Tensor, labels: torch.Tensor,
                  teacher_heatmap: torch.Tensor | None = None,
                  geo: tuple[torch.Tensor, np.ndarray] | None = None,
                  weights: LossWeights | None = None,
                  eps: float = DICE_EPS) -> tuple[torch.Tensor, LossBreakdown]:
    """Detector total: l_clf plus optional distillation and geometric terms."""
    clf = l_clf(heatmap, labels, eps)
    rkd = None if teacher_heatmap is None else l_clf_rkd(heatmap, teacher_heatmap, eps)
    geo_t = None if geo is None else l_geo(heatmap, geo[0], geo[1], eps=eps)
    return combine_losses(l_clf_t=clf, l_clf_rkd_t=rkd, l_geo_t=geo_t, weights=weights)


def descriptor_loss_total(desc: torch.Tensor, desc_prime: torch.Tensor,
                          keypoints: np.ndarray, h: np.ndarray | None,
                          margin: float, seed: int,
                          teacher_desc: torch.Tensor | None = None,
                          weights: LossWeights | None = None,
                          ) -> tuple[torch.Tensor, LossBreakdown]:
    """Descriptor total: the triplet term plus its distillation twin."""
    des = triplet_descriptor_loss(desc, desc_prime, keypoints, h, margin, seed)
    rkd = None
    if teacher_desc is not None:
        rkd = l_des_rkd(desc, teacher_desc, keypoints, margin, seed)
    return combine_losses(l_des_t=des, l_des_rkd_t=rkd, weights=weights)
