"""Annotation files, keypoint statistics, and synthetic retina-like data.

Annotations are one JSON file per image with subpixel keypoints tagged as
bifurcation / crossover / intersection. The synthetic generator draws
bright quadratic-Bezier "vessels" over a dark circular field; ground-truth
keypoints are the analytically known branch points plus curve crossings,
so no human labels are needed for desk-scale experiments.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imagecore
from .geometry import (AugmentParams, apply_homography, sample_homography,
                       save_correspondences, warp_image)

KEYPOINT_KINDS = ("bifurcation", "crossover", "intersection")
DEFAULT_KIND = "bifurcation"


class AnnotationSchemaError(ValueError):
    """Annotation JSON violates the schema; message carries the field path."""


@dataclass
class AnnotatedKeypoint:
    x: float
    y: float
    kind: str = DEFAULT_KIND


@dataclass
class AnnotationFile:
    image_id: str
    image_path: str
    width: int
    height: int
    keypoints: list[AnnotatedKeypoint] = field(default_factory=list)
    annotator: str = ""
    version: int = 0

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "width": self.width,
            "height": self.height,
            "keypoints": [{"x": k.x, "y": k.y, "kind": k.kind} for k in self.keypoints],
            "annotator": self.annotator,
            "version": self.version,
        }

    def keypoint_array(self) -> np.ndarray:
        return np.asarray([[k.x, k.y] for k in self.keypoints],
                          dtype=np.float64).reshape(-1, 2)


def _require(doc: dict, key: str, types, path: str):
    if key not in doc:
        raise AnnotationSchemaError(f"{path}{key}: missing required field")
    value = doc[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise AnnotationSchemaError(f"{path}{key}: expected {types}, got {type(value).__name__}")
    return value


def parse_annotation(doc: dict) -> AnnotationFile:
    """Validate and build an AnnotationFile; errors name the offending field."""
    if not isinstance(doc, dict):
        raise AnnotationSchemaError("root: expected a JSON object")
    image_id = _require(doc, "image_id", str, "")
    image_path = str(doc.get("image_path", ""))
    width = _require(doc, "width", int, "")
    height = _require(doc, "height", int, "")
    if width <= 0 or height <= 0:
        raise AnnotationSchemaError("width/height: must be positive")
    raw_kps = doc.get("keypoints", [])
    if not isinstance(raw_kps, list):
        raise AnnotationSchemaError("keypoints: expected a list")
    kps = []
    for i, k in enumerate(raw_kps):
        path = f"keypoints[{i}]."
        if not isinstance(k, dict):
            raise AnnotationSchemaError(f"keypoints[{i}]: expected an object")
        x = _require(k, "x", (int, float), path)
        y = _require(k, "y", (int, float), path)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise AnnotationSchemaError(f"{path}x/y: must be finite")
        if not 0 <= x <= width - 1:
            raise AnnotationSchemaError(f"{path}x: {x} outside [0, {width - 1}]")
        if not 0 <= y <= height - 1:
            raise AnnotationSchemaError(f"{path}y: {y} outside [0, {height - 1}]")
        kind = k.get("kind")
        if kind is None:
            warnings.warn(f"keypoints[{i}]: missing kind, defaulting to {DEFAULT_KIND}")
            kind = DEFAULT_KIND
        if kind not in KEYPOINT_KINDS:
            raise AnnotationSchemaError(f"{path}kind: {kind!r} not one of {KEYPOINT_KINDS}")
        kps.append(AnnotatedKeypoint(float(x), float(y), kind))
    version = doc.get("version", 0)
    if not isinstance(version, int) or isinstance(version, bool) or version < 0:
        raise AnnotationSchemaError("version: expected a non-negative integer")
    return AnnotationFile(image_id=image_id, image_path=image_path, width=width,
                          height=height, keypoints=kps,
                          annotator=str(doc.get("annotator", "")), version=version)


def load_annotations(path: str | Path) -> AnnotationFile:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationSchemaError(f"{path}: invalid JSON ({exc})") from exc
    return parse_annotation(doc)


def save_annotations(ann: AnnotationFile, path: str | Path) -> AnnotationFile:
    """Atomically write the annotation with its version bumped by one.

    Returns the stored AnnotationFile. Coordinates round-trip exactly
    (JSON decimal serialization preserves float64).
    """
    stored = replace(ann, version=ann.version + 1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(stored.to_dict(), fh, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return stored


def keypoint_stats(annotations: list[AnnotationFile], bins: int = 10) -> dict:
    """Per-image keypoint count summary (population std) plus a histogram."""
    if not annotations:
        raise ValueError("empty annotation list")
    counts = np.asarray([len(a.keypoints) for a in annotations], dtype=np.float64)
    hist, edges = np.histogram(counts, bins=bins)
    return {
        "n_images": int(counts.size),
        "min": float(counts.min()),
        "max": float(counts.max()),
        "mean": float(counts.mean()),
        "std": float(counts.std()),
        "histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
    }


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: tuple[int, int] = (128, 128)     # (h, w)
    n_images: int = 8
    n_vessels: int = 6                            # primary curves per image
    n_branches: int = 10                          # branch curves per image
    vessel_width: tuple[float, float] = (1.5, 3.0)
    vessel_intensity: tuple[float, float] = (0.55, 0.95)
    background: float = 0.08
    noise: float = 0.01
    n_pairs: int = 6
    n_identity_pairs: int = 2
    pair_augment: AugmentParams = AugmentParams(
        max_rotation=5.0, max_translation=0.03, scale_range=(0.97, 1.03),
        max_perspective=0.0)

    def __post_init__(self) -> None:
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError("image_size too small for the generator")
        if self.n_images < 1 or self.n_vessels < 1:
            raise ValueError("counts must be positive")
        if self.vessel_width[0] <= 0:
            raise ValueError("vessel width must be positive")


@dataclass
class SynthSample:
    image: np.ndarray                   # float32 (h, w) in [0, 1]
    keypoints: list[AnnotatedKeypoint]

    def keypoint_array(self) -> np.ndarray:
        return np.asarray([[k.x, k.y] for k in self.keypoints],
                          dtype=np.float64).reshape(-1, 2)


@dataclass
class SynthPair:
    pair_id: str
    query_index: int      # index of the warped image
    ref_index: int        # index of the source image
    query_image: np.ndarray
    controls: np.ndarray  # (n, 4) [xq yq xr yr]
    category: str
    homography: np.ndarray


def _bezier(p0, p1, p2, ts):
    ts = ts[:, None]
    return (1 - ts) ** 2 * p0 + 2 * (1 - ts) * ts * p1 + ts ** 2 * p2


def _segment_intersections(poly_a: np.ndarray, poly_b: np.ndarray) -> list[np.ndarray]:
    """Crossing points between two polylines (exact per-segment solutions)."""
    out = []
    a0, a1 = poly_a[:-1], poly_a[1:]
    b0, b1 = poly_b[:-1], poly_b[1:]
    for i in range(a0.shape[0]):
        d1 = a1[i] - a0[i]
        d2 = b1 - b0
        denom = d1[0] * d2[:, 1] - d1[1] * d2[:, 0]
        ok = np.abs(denom) > 1e-12
        if not ok.any():
            continue
        diff = b0 - a0[i]
        t = (diff[:, 0] * d2[:, 1] - diff[:, 1] * d2[:, 0]) / np.where(ok, denom, 1.0)
        u = (diff[:, 0] * d1[1] - diff[:, 1] * d1[0]) / np.where(ok, denom, 1.0)
        hit = ok & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        for j in np.nonzero(hit)[0]:
            out.append(a0[i] + t[j] * d1)
    return out


def _stamp_curve(canvas: np.ndarray, poly: np.ndarray, width: float, intensity: float) -> None:
    """Rasterize a polyline by stamping soft disks along dense samples."""
    h, w = canvas.shape
    radius = width / 2.0
    r_int = int(np.ceil(radius + 1))
    for px, py in poly:
        x0, x1 = int(np.floor(px)) - r_int, int(np.floor(px)) + r_int + 1
        y0, y1 = int(np.floor(py)) - r_int, int(np.floor(py)) + r_int + 1
        x0c, x1c = max(0, x0), min(w, x1)
        y0c, y1c = max(0, y0), min(h, y1)
        if x0c >= x1c or y0c >= y1c:
            continue
        ys, xs = np.mgrid[y0c:y1c, x0c:x1c]
        dist = np.hypot(xs - px, ys - py)
        profile = np.clip(radius + 0.5 - dist, 0.0, 1.0) * intensity
        canvas[y0c:y1c, x0c:x1c] = np.maximum(canvas[y0c:y1c, x0c:x1c], profile)


def _generate_image(rng: np.random.Generator, cfg: SynthConfig) -> SynthSample:
    h, w = cfg.image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    disk_r = 0.47 * min(h, w)
    margin = 6.0

    def random_point(radius_frac=0.9):
        ang = rng.uniform(0, 2 * np.pi)
        rad = disk_r * radius_frac * np.sqrt(rng.uniform(0.05, 1.0))
        return np.array([cx + rad * np.cos(ang), cy + rad * np.sin(ang)])

    ts = np.linspace(0.0, 1.0, 160)
    curves = []       # (polyline, width, intensity)
    keypoints: list[AnnotatedKeypoint] = []

    for _ in range(cfg.n_vessels):
        p0, p2 = random_point(1.0), random_point(1.0)
        p1 = (p0 + p2) / 2 + rng.uniform(-0.35, 0.35, 2) * disk_r
        poly = _bezier(p0, p1, p2, ts)
        width = rng.uniform(*cfg.vessel_width)
        inten = rng.uniform(*cfg.vessel_intensity)
        curves.append((poly, width, inten))

    for _ in range(cfg.n_branches):
        parent = curves[rng.integers(0, len(curves))]
        t0 = rng.uniform(0.25, 0.75)
        # branch at a dense-sample point of the parent so the keypoint lies
        # exactly on the rasterized curve
        start = parent[0][int(t0 * (len(ts) - 1))]
        end = random_point(1.0)
        mid = (start + end) / 2 + rng.uniform(-0.25, 0.25, 2) * disk_r
        poly = _bezier(start, mid, end, ts)
        width = rng.uniform(*cfg.vessel_width)
        inten = rng.uniform(*cfg.vessel_intensity)
        curves.append((poly, width, inten))
        if _inside(start, w, h, margin, cx, cy, disk_r):
            keypoints.append(AnnotatedKeypoint(float(start[0]), float(start[1]),
                                               "bifurcation"))

    for i in range(len(curves)):
        for j in range(i + 1, len(curves)):
            for pt in _segment_intersections(curves[i][0], curves[j][0]):
                if _inside(pt, w, h, margin, cx, cy, disk_r):
                    keypoints.append(AnnotatedKeypoint(float(pt[0]), float(pt[1]),
                                                       "crossover"))

    keypoints = _dedupe(keypoints, min_dist=3.0)

    canvas = np.zeros((h, w), dtype=np.float64)
    for poly, width, inten in curves:
        _stamp_curve(canvas, poly, width, inten)
    ys, xs = np.mgrid[0:h, 0:w]
    disk = (xs - cx) ** 2 + (ys - cy) ** 2 <= disk_r ** 2
    img = np.where(disk, cfg.background + canvas, 0.01)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SynthSample(image=img, keypoints=keypoints)


def _inside(pt, w, h, margin, cx, cy, disk_r) -> bool:
    in_img = margin <= pt[0] <= w - 1 - margin and margin <= pt[1] <= h - 1 - margin
    in_disk = (pt[0] - cx) ** 2 + (pt[1] - cy) ** 2 <= (disk_r - margin / 2) ** 2
    return bool(in_img and in_disk)


def _dedupe(kps: list[AnnotatedKeypoint], min_dist: float) -> list[AnnotatedKeypoint]:
    kept: list[AnnotatedKeypoint] = []
    for k in kps:
        if all(np.hypot(k.x - o.x, k.y - o.y) >= min_dist for o in kept):
            kept.append(k)
    return kept


def generate_synthetic(cfg: SynthConfig) -> tuple[list[SynthSample], list[SynthPair]]:
    """Deterministic synthetic dataset: images with exact keypoints, plus
    registration pairs whose control points follow the known homography."""
    rng = np.random.default_rng(cfg.seed)
    samples = [_generate_image(rng, cfg) for _ in range(cfg.n_images)]

    h, w = cfg.image_size
    pairs: list[SynthPair] = []
    categories = ("S", "A", "P")
    for p in range(cfg.n_identity_pairs + cfg.n_pairs):
        ref_idx = p % cfg.n_images
        ref = samples[ref_idx]
        identity = p < cfg.n_identity_pairs
        if identity:
            hmat = np.eye(3)
            query_img = ref.image.copy()
        else:
            hmat = sample_homography(cfg.pair_augment, cfg.image_size,
                                     seed=cfg.seed * 100003 + p)
            query_img = warp_image(ref.image, hmat)
        ref_kps = ref.keypoint_array()
        warped = apply_homography(hmat, ref_kps) if len(ref_kps) else ref_kps
        rows = []
        for (rx, ry), (qx, qy) in zip(ref_kps, warped):
            if 2 <= qx <= w - 3 and 2 <= qy <= h - 3:
                rows.append([qx, qy, rx, ry])
        pairs.append(SynthPair(
            pair_id=f"pair_{p:03d}",
            query_index=ref_idx,
            ref_index=ref_idx,
            query_image=query_img,
            controls=np.asarray(rows, dtype=np.float64).reshape(-1, 4),
            category="S" if identity else categories[p % 3],
            homography=hmat,
        ))
    return samples, pairs


def write_synthetic_dataset(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Materialize a synthetic dataset directory.

    Layout: images/*.png, annotations/*.json, controls/*.txt, pairs.json
    (registration manifest) and train.json (training manifest with a
    75/25 train/val split).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    (out / "controls").mkdir(exist_ok=True)
    samples, pairs = generate_synthetic(cfg)

    sample_entries = []
    for i, s in enumerate(samples):
        image_id = f"synth_{i:03d}"
        img_rel = f"images/{image_id}.png"
        ann_rel = f"annotations/{image_id}.json"
        imagecore.write_png(out / img_rel, s.image)
        ann = AnnotationFile(image_id=image_id, image_path=img_rel,
                             width=cfg.image_size[1], height=cfg.image_size[0],
                             keypoints=s.keypoints, annotator="synthetic")
        save_annotations(ann, out / ann_rel)
        sample_entries.append({"image": img_rel, "annotations": ann_rel})

    pair_entries = []
    for p in pairs:
        qid = f"{p.pair_id}_query"
        q_rel = f"images/{qid}.png"
        imagecore.write_png(out / q_rel, p.query_image)
        c_rel = f"controls/{p.pair_id}.txt"
        save_correspondences(out / c_rel, p.controls)
        pair_entries.append({
            "id": p.pair_id,
            "query": q_rel,
            "ref": sample_entries[p.ref_index]["image"],
            "controls_path": c_rel,
            "category": p.category,
        })
    (out / "pairs.json").write_text(json.dumps(pair_entries, indent=1))

    n_val = max(1, len(sample_entries) // 4) if len(sample_entries) > 1 else 0
    train_manifest = {
        "train": sample_entries[:len(sample_entries) - n_val],
        "val": sample_entries[len(sample_entries) - n_val:],
    }
    (out / "train.json").write_text(json.dumps(train_manifest, indent=1))
    return {"n_images": len(sample_entries), "n_pairs": len(pair_entries),
            "out_dir": str(out)}
