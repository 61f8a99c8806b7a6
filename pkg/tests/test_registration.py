import json
from pathlib import Path

import numpy as np
import pytest

from retinamatch import imagecore
from retinamatch.geometry import (apply_homography, sample_homography,
                                  save_correspondences, warp_image, AugmentParams)
from retinamatch.keypoints import KeypointSet
from retinamatch.registration import (ACCEPTABLE, EVALUATED, FAILED, INACCURATE,
                                      PairRecord, RegistrationConfig,
                                      RegistrationOutcome, acceptance_auc,
                                      aggregate_report, classify, evaluate_dataset,
                                      format_report_table, load_manifest, mee_mae,
                                      register_pair)

GOLDEN = Path(__file__).parent / "golden"


class StubDetector:
    """Returns queued (KeypointSet, descriptors) pairs, one per detect call."""

    def __init__(self, outputs):
        self.outputs = list(outputs)

    def detect(self, gray):
        return self.outputs.pop(0)


def unit_rows(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def write_textured_pair(tmp_path, rng, h=None, size=64):
    """Write a textured ref image and its (optionally warped) query to disk."""
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = (0.25 + 0.3 * np.sin(9 * xs) * np.cos(7 * ys)
           + 0.3 * np.exp(-((xs - 0.5) ** 2 + (ys - 0.55) ** 2) * 10)
           + rng.uniform(0, 0.08, (size, size))).astype(np.float32)
    ref_path = tmp_path / "ref.png"
    imagecore.write_png(ref_path, img)
    if h is None:
        query_path = ref_path
    else:
        query_path = tmp_path / "query.png"
        imagecore.write_png(query_path, warp_image(img, h))
    return query_path, ref_path


class TestMeeMae:
    def test_odd_count(self):
        h = np.eye(3)
        controls = np.array([[0, 0, 1, 0], [0, 0, 0, 2], [0, 0, 3, 0.]])
        mee, mae = mee_mae(h, controls)
        assert (mee, mae) == (2.0, 3.0)

    def test_even_count_midpoint(self):
        h = np.eye(3)
        controls = np.array([[0, 0, 1, 0], [0, 0, 2, 0], [0, 0, 3, 0], [0, 0, 4, 0.]])
        mee, mae = mee_mae(h, controls)
        assert (mee, mae) == (2.5, 4.0)

    def test_true_homography_zero(self, rng):
        h = sample_homography(AugmentParams(10, 0.1, (0.9, 1.1), 1e-3), (64, 64), 3)
        q = rng.uniform(5, 59, (9, 2))
        controls = np.hstack([q, apply_homography(h, q)])
        mee, mae = mee_mae(h, controls)
        assert mee < 1e-9 and mae < 1e-9

    def test_empty_controls(self):
        with pytest.raises(ValueError):
            mee_mae(np.eye(3), np.zeros((0, 4)))


class TestClassify:
    def test_boundaries(self):
        assert classify(19.99, 49.9) == ACCEPTABLE
        assert classify(20.0, 10.0) == INACCURATE
        assert classify(5.0, 50.0) == INACCURATE
        assert classify(0.0, 0.0) == ACCEPTABLE

    def test_monotone(self, rng):
        for _ in range(50):
            mee, mae = rng.uniform(0, 40), rng.uniform(0, 80)
            if classify(mee, mae) == ACCEPTABLE:
                assert classify(mee * 0.9, mae * 0.9) == ACCEPTABLE


class TestAcceptanceAuc:
    def test_all_zero_mee(self):
        assert acceptance_auc([0.0, 0.0, 0.0]) == pytest.approx(1.0)

    def test_all_failed(self):
        assert acceptance_auc([np.inf, np.inf]) == pytest.approx(0.0)

    def test_two_pair_closed_form(self):
        # step curve: rate 0.5 below 12.5, 1.0 above -> 18.75/25
        assert acceptance_auc([0.0, 12.5], t_max=25.0, step=1.0) \
            == pytest.approx(0.75, abs=1e-12)

    def test_order_invariant(self, rng):
        values = rng.uniform(0, 30, 20).tolist() + [np.inf] * 3
        a = acceptance_auc(values)
        rng.shuffle(values)
        assert acceptance_auc(values) == pytest.approx(a, abs=1e-12)

    def test_empty_error(self):
        with pytest.raises(ValueError):
            acceptance_auc([])


def fixture_results():
    doc = json.loads((GOLDEN / "protocol_fixture.json").read_text())
    results = []
    for p in doc["pairs"]:
        if p["status"] == "failed":
            out = RegistrationOutcome(status=FAILED, n_matches=2, note="fixture")
        else:
            out = RegistrationOutcome(status=EVALUATED, n_matches=30,
                                      mee=p["mee"], mae=p["mae"],
                                      verdict=classify(p["mee"], p["mae"]))
        results.append((p["id"], p["category"], out))
    return doc, results


class TestAggregateReport:
    def test_matches_hand_computed_fixture(self):
        doc, results = fixture_results()
        report = aggregate_report(results, doc["t_max"], doc["step"])
        exp = doc["expected"]
        assert report.pct_failed == pytest.approx(exp["pct_failed"], abs=1e-9)
        assert report.pct_inaccurate == pytest.approx(exp["pct_inaccurate"], abs=1e-9)
        assert report.pct_acceptable == pytest.approx(exp["pct_acceptable"], abs=1e-9)
        assert report.auc["easy"] == pytest.approx(exp["auc_easy"], abs=1e-12)
        assert report.auc["mod"] == pytest.approx(exp["auc_mod"], abs=1e-12)
        assert report.auc["hard"] == pytest.approx(exp["auc_hard"], abs=1e-12)
        assert report.mauc == pytest.approx(exp["mauc"], abs=1e-12)
        for pid, cat, out in results:
            if out.status == EVALUATED:
                assert out.verdict == exp["verdicts"][pid]

    def test_percentages_sum_to_100(self):
        _, results = fixture_results()
        report = aggregate_report(results)
        total = report.pct_failed + report.pct_inaccurate + report.pct_acceptable
        assert total == pytest.approx(100.0, abs=1e-9)

    def test_mauc_is_mean_of_aucs(self):
        _, results = fixture_results()
        report = aggregate_report(results)
        present = [v for v in report.auc.values() if v is not None]
        assert report.mauc == pytest.approx(np.mean(present), abs=1e-9)

    def test_empty_category_warning_and_none(self):
        results = [("x", "S", RegistrationOutcome(status=EVALUATED, n_matches=9,
                                                  mee=1.0, mae=2.0,
                                                  verdict=ACCEPTABLE))]
        report = aggregate_report(results)
        assert report.auc["mod"] is None and report.auc["hard"] is None
        assert report.mauc == pytest.approx(report.auc["easy"])
        assert any("no pairs" in w for w in report.warnings)

    def test_unknown_category_excluded_with_warning(self):
        _, results = fixture_results()
        results.append(("weird", "Q",
                        RegistrationOutcome(status=EVALUATED, n_matches=8,
                                            mee=0.0, mae=0.0, verdict=ACCEPTABLE)))
        base = aggregate_report(fixture_results()[1])
        report = aggregate_report(results)
        assert any("unknown category" in w for w in report.warnings)
        for k in ("easy", "mod", "hard"):
            assert report.auc[k] == pytest.approx(base.auc[k], abs=1e-12)
        assert report.pct_acceptable == pytest.approx(100 * 6 / 11, abs=1e-9)

    def test_table_format(self):
        _, results = fixture_results()
        table = format_report_table(aggregate_report(results))
        lines = table.strip().split("\n")
        assert lines[0].split() == ["Failed", "Inaccurate", "Acceptable",
                                    "AUC-Easy", "AUC-Mod", "AUC-Hard", "mAUC"]
        assert "20.00%" in lines[1] and "0.610" in lines[1]


class TestRegisterPair:
    def oracle_outputs(self, kps_ref, h, rng, drop=0):
        """Detector outputs for (query, ref): query keypoints are H(ref kps),
        descriptors match per index."""
        n = len(kps_ref)
        desc = unit_rows(rng.normal(0, 1, (n, 16)))
        q_xy = apply_homography(h, kps_ref)
        scores = np.linspace(1, 0.5, n)
        query = (KeypointSet(q_xy[:n - drop], scores[:n - drop]), desc[:n - drop])
        ref = (KeypointSet(kps_ref, scores), desc)
        return [query, ref]

    def test_identity_pair_acceptable(self, tmp_path, rng):
        qp, rp = write_textured_pair(tmp_path, rng)
        kps = rng.uniform(8, 56, (20, 2))
        controls = np.hstack([kps, kps])
        det = StubDetector(self.oracle_outputs(kps, np.eye(3), rng))
        pair = PairRecord("ident", str(qp), str(rp), controls=controls, category="S")
        out = register_pair(det, pair, RegistrationConfig())
        assert out.status == EVALUATED
        assert out.verdict == ACCEPTABLE
        assert out.mee < 1e-6 and out.mae < 1e-6

    def test_three_matches_is_failed(self, tmp_path, rng):
        qp, rp = write_textured_pair(tmp_path, rng)
        kps = rng.uniform(8, 56, (3, 2))
        det = StubDetector(self.oracle_outputs(kps, np.eye(3), rng))
        pair = PairRecord("few", str(qp), str(rp),
                          controls=np.hstack([kps, kps]), category="S")
        out = register_pair(det, pair, RegistrationConfig())
        assert out.status == FAILED
        assert out.n_matches == 3

    def test_synthetic_warp_with_oracle_detector(self, tmp_path, rng):
        h = sample_homography(AugmentParams(6.0, 0.03, (0.97, 1.03), 0.0), (64, 64), 9)
        qp, rp = write_textured_pair(tmp_path, rng, h=h)
        kps = rng.uniform(12, 52, (30, 2))
        controls = np.hstack([apply_homography(h, kps), kps])
        det = StubDetector(self.oracle_outputs(kps, h, rng))
        pair = PairRecord("warp", str(qp), str(rp), controls=controls, category="P")
        out = register_pair(det, pair, RegistrationConfig())
        assert out.status == EVALUATED
        assert out.mee < 0.5

    def test_io_error_raises_not_failed(self, rng):
        det = StubDetector([])
        pair = PairRecord("gone", "/nonexistent/q.png", "/nonexistent/r.png",
                          controls=np.ones((1, 4)))
        with pytest.raises(imagecore.ImageError):
            register_pair(det, pair, RegistrationConfig())

    def test_missing_controls_error(self, tmp_path, rng):
        qp, rp = write_textured_pair(tmp_path, rng)
        kps = rng.uniform(8, 56, (10, 2))
        det = StubDetector(self.oracle_outputs(kps, np.eye(3), rng))
        pair = PairRecord("noctl", str(qp), str(rp), controls=None)
        with pytest.raises(ValueError, match="control"):
            register_pair(det, pair, RegistrationConfig())


class TestEvaluateDataset:
    def build_pairs(self, tmp_path, rng, n=6):
        pairs, outputs = [], []
        for i in range(n):
            sub = tmp_path / f"p{i}"
            sub.mkdir()
            local = np.random.default_rng(100 + i)
            h = sample_homography(AugmentParams(4.0, 0.02, (0.98, 1.02), 0.0),
                                  (64, 64), seed=i)
            qp, rp = write_textured_pair(sub, local, h=h)
            kps = local.uniform(12, 52, (25, 2))
            controls = np.hstack([apply_homography(h, kps), kps])
            desc = unit_rows(local.normal(0, 1, (25, 16)))
            outputs.append(((KeypointSet(apply_homography(h, kps),
                                         np.linspace(1, 0.5, 25)), desc),
                            (KeypointSet(kps, np.linspace(1, 0.5, 25)), desc)))
            pairs.append(PairRecord(f"pair{i}", str(qp), str(rp),
                                    controls=controls,
                                    category="SAP"[i % 3]))
        return pairs, outputs

    def test_full_dataset_report(self, tmp_path, rng):
        pairs, outputs = self.build_pairs(tmp_path, rng)
        det = StubDetector([o for pair_out in outputs for o in pair_out])
        report = evaluate_dataset(det, pairs, RegistrationConfig())
        assert report.pct_acceptable == pytest.approx(100.0)
        # float MEE ~1e-14 > 0 zeroes the t=0 grid point of the trapezoid, so
        # a perfectly-registering dataset tops out at (25 - 0.5) / 25
        assert report.mauc == pytest.approx(0.98, abs=1e-9)
        assert all(out.mee < 1e-9 for _, _, out in report.outcomes)

    def test_order_invariant_report(self, tmp_path, rng):
        pairs, outputs = self.build_pairs(tmp_path, rng)
        det1 = StubDetector([o for po in outputs for o in po])
        r1 = evaluate_dataset(det1, pairs, RegistrationConfig())
        order = [3, 1, 5, 0, 4, 2]
        det2 = StubDetector([o for i in order for o in outputs[i]])
        r2 = evaluate_dataset(det2, [pairs[i] for i in order], RegistrationConfig())
        assert r1.mauc == pytest.approx(r2.mauc, abs=1e-12)
        assert r1.pct_acceptable == pytest.approx(r2.pct_acceptable)
        m1 = {pid: out.mee for pid, _, out in r1.outcomes}
        m2 = {pid: out.mee for pid, _, out in r2.outcomes}
        assert m1 == m2

    def test_empty_pairs_error(self):
        with pytest.raises(ValueError):
            evaluate_dataset(StubDetector([]), [], RegistrationConfig())


class TestManifest:
    def test_load_manifest(self, tmp_path):
        (tmp_path / "img_q.png").write_bytes(b"")
        save_correspondences(tmp_path / "c.txt", np.array([[1, 2, 3, 4.0]]))
        manifest = [{"id": "x", "query": "img_q.png", "ref": "img_r.png",
                     "controls_path": "c.txt", "category": "S"}]
        mp = tmp_path / "pairs.json"
        mp.write_text(json.dumps(manifest))
        records = load_manifest(mp)
        assert len(records) == 1
        assert records[0].pair_id == "x"
        assert records[0].category == "S"
        assert records[0].controls.shape == (1, 4)
        assert records[0].query_path.endswith("img_q.png")

    def test_manifest_must_be_list(self, tmp_path):
        mp = tmp_path / "pairs.json"
        mp.write_text(json.dumps({"not": "a list"}))
        with pytest.raises(ValueError):
            load_manifest(mp)
