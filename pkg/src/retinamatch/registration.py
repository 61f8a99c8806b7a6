"""End-to-end pair registration and the evaluation protocol.

A pair registration fails when fewer than 4 matches survive (the minimum to
estimate a homography) or when RANSAC finds no consensus. Evaluated pairs
get the median (MEE) and maximum (MAE) L2 error over the human control
points; a pair is acceptable iff MEE < 20 px and MAE < 50 px (strict).
The report aggregates failure/inaccuracy/acceptance percentages plus the
acceptance-rate AUC per category (Easy <- S, Mod <- A, Hard <- P) and mAUC.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imagecore, keypoints
from .geometry import (EstimationFailedError, apply_homography, load_correspondences,
                       ransac_homography)
from .imagecore import PreprocessConfig

MEE_ACCEPT = 20.0
MAE_ACCEPT = 50.0
MIN_MATCHES = 4

CATEGORY_NAMES = {"S": "easy", "A": "mod", "P": "hard"}

FAILED = "failed"
EVALUATED = "evaluated"
ACCEPTABLE = "acceptable"
INACCURATE = "inaccurate"


@dataclass
class PairRecord:
    pair_id: str
    query_path: str
    ref_path: str
    controls: np.ndarray | None = None    # (n, 4) rows [xq yq xr yr]
    category: str | None = None           # "S" | "A" | "P"


@dataclass
class RegistrationOutcome:
    status: str                            # FAILED | EVALUATED
    n_matches: int = 0
    homography: np.ndarray | None = None
    mee: float | None = None
    mae: float | None = None
    verdict: str | None = None             # ACCEPTABLE | INACCURATE
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "n_matches": self.n_matches,
            "homography": None if self.homography is None else
                          [[float(v) for v in row] for row in self.homography],
            "mee": self.mee,
            "mae": self.mae,
            "verdict": self.verdict,
            "note": self.note,
        }


@dataclass
class EvalReport:
    pct_failed: float
    pct_inaccurate: float
    pct_acceptable: float
    auc: dict                                # {"easy"|"mod"|"hard": float | None}
    mauc: float
    outcomes: list = field(default_factory=list)   # (pair_id, category, RegistrationOutcome)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pct_failed": self.pct_failed,
            "pct_inaccurate": self.pct_inaccurate,
            "pct_acceptable": self.pct_acceptable,
            "auc_easy": self.auc.get("easy"),
            "auc_mod": self.auc.get("mod"),
            "auc_hard": self.auc.get("hard"),
            "mauc": self.mauc,
            "warnings": list(self.warnings),
            "pairs": [{"pair_id": pid, "category": cat, **out.to_dict()}
                      for pid, cat, out in self.outcomes],
        }


@dataclass(frozen=True)
class RegistrationConfig:
    preprocess: PreprocessConfig = PreprocessConfig()
    detection_threshold: float = 0.3
    nms_window: float = 10.0
    max_keypoints: int = 1024
    ratio_threshold: float = 0.9
    mutual: bool = True
    ransac_threshold: float = 3.0
    ransac_iterations: int = 2000
    seed: int = 0
    auc_t_max: float = 25.0
    auc_step: float = 1.0


class ModelDetector:
    """Detector backed by a trained model: preprocessed image in, NMS
    keypoints and sampled unit descriptors out."""

    def __init__(self, params, cfg: RegistrationConfig):
        from . import nets  # local import keeps numpy-only users torch-free
        self._nets = nets
        self.params = params
        self.cfg = cfg

    def detect(self, gray: np.ndarray) -> tuple[keypoints.KeypointSet, np.ndarray]:
        out, _ = self._nets.forward(self.params.spec, self.params, gray,
                                    train_mode=False, seed=0)
        kps = keypoints.nms_extract(out.heatmap, self.cfg.detection_threshold,
                                    self.cfg.nms_window, self.cfg.max_keypoints)
        if len(kps) == 0:
            return kps, np.zeros((0, out.descriptors.shape[2]), dtype=np.float32)
        return kps, keypoints.sample_descriptors(out.descriptors, kps)


def mee_mae(h: np.ndarray, controls: np.ndarray) -> tuple[float, float]:
    """Median and maximum L2 reprojection error over the control points.

    The median of an even count is the midpoint of the two central values.
    """
    c = np.asarray(controls, dtype=np.float64).reshape(-1, 4)
    if c.shape[0] == 0:
        raise ValueError("need at least one control point")
    proj = apply_homography(h, c[:, :2])
    errors = np.linalg.norm(proj - c[:, 2:], axis=1)
    return float(np.median(errors)), float(errors.max())


def classify(mee: float, mae: float) -> str:
    """Acceptable iff MEE < 20 and MAE < 50, both strict."""
    return ACCEPTABLE if (mee < MEE_ACCEPT and mae < MAE_ACCEPT) else INACCURATE


def register_pair(detector, pair: PairRecord,
                  cfg: RegistrationConfig | None = None,
                  seed: int | None = None,
                  details: dict | None = None) -> RegistrationOutcome:
    """Register one pair: preprocess, detect, match, estimate, score.

    I/O and preprocessing problems raise; they are never folded into the
    protocol's "failed" status. Pass a dict as `details` to receive the
    intermediate keypoints and matches (for dumps and the review UI).
    """
    cfg = cfg or RegistrationConfig()
    query = imagecore.preprocess(imagecore.read_image(pair.query_path), cfg.preprocess)
    ref = imagecore.preprocess(imagecore.read_image(pair.ref_path), cfg.preprocess)
    kq, dq = detector.detect(query)
    kr, dr = detector.detect(ref)
    if details is not None:
        details.update(query_kps=kq, ref_kps=kr, query_gray=query, ref_gray=ref)
    if len(kq) == 0 or len(kr) == 0:
        return RegistrationOutcome(status=FAILED, n_matches=0, note="no keypoints")
    matches = keypoints.match_descriptors(dq, dr, cfg.ratio_threshold, cfg.mutual,
                                          query_kps=kq, ref_kps=kr)
    if details is not None:
        details["matches"] = matches
    n = len(matches)
    if n < MIN_MATCHES:
        return RegistrationOutcome(status=FAILED, n_matches=n,
                                   note=f"{n} matches < minimum {MIN_MATCHES}")
    corrs = np.hstack([matches.query.xy[matches.indices[:, 0]],
                       matches.ref.xy[matches.indices[:, 1]]])
    try:
        h, _ = ransac_homography(corrs, cfg.ransac_threshold, cfg.ransac_iterations,
                                 seed=cfg.seed if seed is None else seed)
    except EstimationFailedError as exc:
        return RegistrationOutcome(status=FAILED, n_matches=n, note=str(exc))
    if pair.controls is None or len(pair.controls) == 0:
        raise ValueError(f"pair {pair.pair_id}: control points required for evaluation")
    mee, mae = mee_mae(h, pair.controls)
    return RegistrationOutcome(status=EVALUATED, n_matches=n, homography=h,
                               mee=mee, mae=mae, verdict=classify(mee, mae))


def acceptance_auc(mee_values, t_max: float = 25.0, step: float = 1.0) -> float:
    """Area under the acceptance-rate-vs-threshold curve, normalized by t_max.

    acceptance_rate(t) = fraction of pairs with MEE <= t; failed pairs carry
    MEE = +inf and are never accepted. Trapezoidal rule on a uniform grid.
    """
    values = np.asarray(list(mee_values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one pair")
    ts = np.arange(0.0, t_max + step / 2, step)
    rates = np.array([(values <= t).mean() for t in ts])
    integral = float((0.5 * (rates[1:] + rates[:-1]) * np.diff(ts)).sum())
    return integral / t_max


def _pair_seed(global_seed: int, pair_id: str) -> int:
    key = struct.pack("<q", int(global_seed)) + pair_id.encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def aggregate_report(results: list[tuple[str, str | None, RegistrationOutcome]],
                     t_max: float = 25.0, step: float = 1.0) -> EvalReport:
    """Assemble the protocol report from per-pair outcomes.

    Percentages cover every pair. Pairs with an unknown category are
    excluded from the per-category AUCs (with a warning); an empty category
    yields a None AUC and mAUC averages over the present ones.
    """
    if not results:
        raise ValueError("empty result list")
    warnings_list = []
    n = len(results)
    n_failed = sum(1 for _, _, o in results if o.status == FAILED)
    n_acc = sum(1 for _, _, o in results if o.verdict == ACCEPTABLE)
    n_inacc = n - n_failed - n_acc

    by_cat: dict[str, list[float]] = {"easy": [], "mod": [], "hard": []}
    for pid, cat, out in results:
        mee = np.inf if out.status == FAILED else float(out.mee)
        name = CATEGORY_NAMES.get(cat or "")
        if name is None:
            warnings_list.append(f"pair {pid}: unknown category {cat!r}, "
                                 "excluded from category AUCs")
            continue
        by_cat[name].append(mee)

    auc: dict[str, float | None] = {}
    for name, values in by_cat.items():
        if values:
            auc[name] = acceptance_auc(values, t_max, step)
        else:
            auc[name] = None
            warnings_list.append(f"category {name}: no pairs, AUC not reported")
    present = [v for v in auc.values() if v is not None]
    mauc = float(np.mean(present)) if present else 0.0

    return EvalReport(
        pct_failed=100.0 * n_failed / n,
        pct_inaccurate=100.0 * n_inacc / n,
        pct_acceptable=100.0 * n_acc / n,
        auc=auc,
        mauc=mauc,
        outcomes=list(results),
        warnings=warnings_list,
    )


def evaluate_dataset(detector, pairs: list[PairRecord],
                     cfg: RegistrationConfig | None = None) -> EvalReport:
    """Register every pair and aggregate the protocol report.

    Per-pair RANSAC seeds derive from (global seed, pair id) so results are
    independent of evaluation order.
    """
    cfg = cfg or RegistrationConfig()
    if not pairs:
        raise ValueError("empty pair list")
    results = []
    for pair in pairs:
        outcome = register_pair(detector, pair, cfg,
                                seed=_pair_seed(cfg.seed, pair.pair_id))
        results.append((pair.pair_id, pair.category, outcome))
    return aggregate_report(results, cfg.auc_t_max, cfg.auc_step)


def load_manifest(path: str | Path) -> list[PairRecord]:
    """Dataset manifest: JSON list of {query, ref, controls_path, category}.

    Relative paths resolve against the manifest's directory; an optional
    "id" field names the pair (defaults to its index).
    """
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    base = path.parent
    records = []
    for i, e in enumerate(entries):
        controls = None
        if e.get("controls_path"):
            controls = load_correspondences(base / e["controls_path"])
        records.append(PairRecord(
            pair_id=str(e.get("id", i)),
            query_path=str(base / e["query"]),
            ref_path=str(base / e["ref"]),
            controls=controls,
            category=e.get("category"),
        ))
    return records


def format_report_table(report: EvalReport) -> str:
    """Aligned text table in the protocol's column order."""
    headers = ["Failed", "Inaccurate", "Acceptable",
               "AUC-Easy", "AUC-Mod", "AUC-Hard", "mAUC"]
    def fmt_auc(v):
        return "-" if v is None else f"{v:.3f}"
    row = [f"{report.pct_failed:.2f}%", f"{report.pct_inaccurate:.2f}%",
           f"{report.pct_acceptable:.2f}%", fmt_auc(report.auc.get("easy")),
           fmt_auc(report.auc.get("mod")), fmt_auc(report.auc.get("hard")),
           f"{report.mauc:.3f}"]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    line2 = "  ".join(v.rjust(w) for v, w in zip(row, widths))
    return line1 + "\n" + line2 + "\n"
