import hashlib
import math
import struct

import numpy as np
import pytest
import torch

from retinamatch.geometry import (apply_homography, identity_homography,
                                  sample_homography, translation, warp_image,
                                  AugmentParams)
from retinamatch.losses import (LossBreakdown, LossWeights, combine_losses,
                                descriptor_loss_total, detector_loss, dice_loss,
                                l_clf_rkd, l_des_rkd, l_geo,
                                sample_descriptor_field, smooth_labels,
                                triplet_descriptor_loss, warp_tensor,
                                warp_valid_mask)

from gradcheck import check_tensor_grad


def brute_force_triplet(desc_a, desc_b, keypoints, h, margin, seed):
    """Scalar-loop oracle for the triplet loss. Same definitional choices
    (canonical keypoint order, hashed random negative, bilinear + renormalize)
    but implemented independently, one keypoint at a time."""

    def sample(field, x, y):
        d, hh, ww = field.shape
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        vec = [0.0] * d
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
                if 0 <= xi < ww and 0 <= yi < hh:
                    for c in range(d):
                        vec[c] += wgt * float(field[c, yi, xi])
        norm = math.sqrt(sum(v * v for v in vec))
        return [v / max(norm, 1e-8) for v in vec]

    def dist(u, v):
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))

    pts = sorted(map(tuple, np.asarray(keypoints, dtype=float)),
                 key=lambda p: (p[1], p[0]))
    hh, ww = desc_b.shape[1], desc_b.shape[2]
    kept, warped = [], []
    for (x, y) in pts:
        wx, wy = (x, y) if h is None else tuple(apply_homography(h, np.array([x, y])))
        if 0 <= wx <= ww - 1 and 0 <= wy <= hh - 1:
            kept.append((x, y))
            warped.append((wx, wy))
    assert len(kept) >= 2
    anchors = [sample(desc_a, x, y) for x, y in kept]
    targets = [sample(desc_b, x, y) for x, y in warped]
    total = 0.0
    n = len(kept)
    for i in range(n):
        pos = dist(anchors[i], targets[i])
        hard = min(dist(anchors[i], targets[j]) for j in range(n) if j != i)
        key = struct.pack("<q", int(seed)) + struct.pack("<dd", kept[i][0], kept[i][1])
        j = int.from_bytes(hashlib.sha256(key).digest()[:8], "little") % (n - 1)
        j = j if j < i else j + 1
        rand = dist(anchors[i], targets[j])
        total += max(0.0, margin + pos - 0.5 * (rand + hard))
    return total


class TestSmoothLabels:
    def test_single_keypoint_closed_form(self):
        lbl = smooth_labels(np.array([[10.0, 10.0]]), (21, 21), sigma=1.0)
        assert lbl[10, 10] == pytest.approx(1.0)
        assert lbl[11, 10] == pytest.approx(math.exp(-0.5), abs=1e-6)
        assert lbl[10, 11] == pytest.approx(math.exp(-0.5), abs=1e-6)

    def test_empty_set(self):
        lbl = smooth_labels(np.zeros((0, 2)), (16, 16), sigma=1.5)
        assert np.all(lbl == 0.0)

    def test_far_keypoints_superpose(self):
        sigma = 0.5
        pts = np.array([[5.0, 5.0], [25.0, 25.0]])  # 20 sigma apart and more
        both = smooth_labels(pts, (32, 32), sigma)
        a = smooth_labels(pts[:1], (32, 32), sigma)
        b = smooth_labels(pts[1:], (32, 32), sigma)
        assert np.abs(both - (a + b)).max() < 1e-9

    def test_subpixel_keypoint_peak_at_rounded_location(self):
        lbl = smooth_labels(np.array([[7.4, 3.6]]), (16, 16), sigma=1.5)
        assert lbl[4, 7] == pytest.approx(1.0)

    def test_out_of_bounds_raises(self):
        with pytest.raises(ValueError):
            smooth_labels(np.array([[20.0, 4.0]]), (16, 16), sigma=1.0)


class TestDice:
    def test_perfect_overlap_zero(self, rng):
        a = torch.from_numpy(rng.uniform(0.1, 1.0, (8, 8)))
        assert float(dice_loss(a, a.clone())) == pytest.approx(0.0, abs=1e-6)

    def test_hand_example(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([1.0, 1.0])
        assert float(dice_loss(a, b)) == pytest.approx(1.0 / 3.0, abs=1e-5)

    def test_both_empty_is_zero(self):
        z = torch.zeros(4, 4)
        assert float(dice_loss(z, z)) == 0.0

    def test_symmetry(self, rng):
        a = torch.from_numpy(rng.uniform(0, 1, (6, 6)))
        b = torch.from_numpy(rng.uniform(0, 1, (6, 6)))
        assert float(dice_loss(a, b)) == pytest.approx(float(dice_loss(b, a)), abs=1e-12)

    def test_bounded(self, rng):
        for _ in range(20):
            a = torch.from_numpy(rng.uniform(0, 1, (5, 5)))
            b = torch.from_numpy(rng.uniform(0, 1, (5, 5)))
            v = float(dice_loss(a, b))
            assert 0.0 <= v <= 1.0 + 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(torch.zeros(3, 3), torch.zeros(4, 4))

    def test_gradient_matches_fd(self, rng):
        b = torch.from_numpy(rng.uniform(0, 1, (5, 5)))
        worst = check_tensor_grad(lambda a: dice_loss(a, b),
                                  torch.from_numpy(rng.uniform(0.1, 1, (5, 5))))
        assert worst < 1e-3


class TestClfRkd:
    def test_identical_maps_zero(self, rng):
        p = torch.from_numpy(rng.uniform(0.1, 1, (8, 8)))
        assert float(l_clf_rkd(p, p.clone())) == pytest.approx(0.0, abs=1e-6)

    def test_teacher_gets_no_gradient(self, rng):
        ps = torch.from_numpy(rng.uniform(0.1, 1, (6, 6))).requires_grad_(True)
        pt = torch.from_numpy(rng.uniform(0.1, 1, (6, 6))).requires_grad_(True)
        l_clf_rkd(ps, pt).backward()
        assert pt.grad is None or torch.all(pt.grad == 0)
        assert ps.grad is not None and torch.any(ps.grad != 0)

    def test_matches_direct_formula(self, rng):
        ps = torch.from_numpy(rng.uniform(0, 1, (7, 9)))
        pt = torch.from_numpy(rng.uniform(0, 1, (7, 9)))
        got = float(l_clf_rkd(ps, pt, eps=0.0))
        a, b = ps.numpy(), pt.numpy()
        expected = 1 - 2 * (a * b).sum() / ((a * a).sum() + (b * b).sum())
        assert got == pytest.approx(expected, abs=1e-9)


class TestWarpTensor:
    def test_matches_numpy_warp(self, rng):
        img = rng.uniform(0, 1, (40, 40)).astype(np.float32)
        h = sample_homography(AugmentParams(8.0, 0.05, (0.95, 1.05), 1e-3),
                              img.shape, seed=2)
        a = warp_image(img, h)
        b = warp_tensor(torch.from_numpy(img), h).numpy()
        assert np.abs(a - b).max() < 1e-5

    def test_differentiable(self, rng):
        h = translation(1.5, -0.5)
        img = torch.from_numpy(rng.uniform(0, 1, (8, 8)))
        worst = check_tensor_grad(lambda t: warp_tensor(t, h).sum(), img)
        assert worst < 1e-3


class TestGeo:
    def test_identity_pair_zero(self, rng):
        p = torch.from_numpy(rng.uniform(0.1, 1, (16, 16)))
        assert float(l_geo(p, p.clone(), identity_homography())) \
            == pytest.approx(0.0, abs=1e-6)

    def test_consistent_pair_small(self, rng):
        ys, xs = np.mgrid[0:32, 0:32] / 32
        p = (0.2 + 0.6 * np.exp(-((xs - 0.5) ** 2 + (ys - 0.4) ** 2) * 20)).astype(np.float32)
        h = sample_homography(AugmentParams(4.0, 0.02, (1.0, 1.0), 0.0), (32, 32), seed=1)
        p_t = torch.from_numpy(p)
        p_aug = warp_tensor(p_t, h)  # exactly consistent by construction
        assert float(l_geo(p_t, p_aug, h)) <= 0.02

    def test_empty_mask_warns_and_zero(self, rng):
        p = torch.from_numpy(rng.uniform(0, 1, (8, 8)))
        with pytest.warns(UserWarning):
            v = l_geo(p, p.clone(), identity_homography(),
                      valid_mask=np.zeros((8, 8), dtype=bool))
        assert float(v) == 0.0

    def test_gradients_flow_to_both(self, rng):
        h = sample_homography(AugmentParams(3.0, 0.02, (1.0, 1.0), 0.0), (12, 12), seed=4)
        a = torch.from_numpy(rng.uniform(0.1, 1, (12, 12))).requires_grad_(True)
        b = torch.from_numpy(rng.uniform(0.1, 1, (12, 12))).requires_grad_(True)
        l_geo(a, b, h).backward()
        assert torch.any(a.grad != 0)
        assert torch.any(b.grad != 0)

    def test_valid_mask_default(self):
        h = translation(6.0, 0.0)
        mask = warp_valid_mask((8, 8), np.linalg.inv(h))
        # sampling at h(p) = p + 6 is out of bounds for x >= 2
        assert mask[:, :2].all()
        assert not mask[:, 2:].any()


class TestTriplet:
    def make_fields(self, rng, d=6, size=12):
        f = rng.normal(0, 1, (d, size, size))
        return torch.from_numpy(f)

    def test_orthogonal_descriptors_zero_loss(self):
        d = 4
        field = np.zeros((d, 16, 16))
        kps = np.array([[2.0, 2.0], [9.0, 2.0], [2.0, 9.0], [9.0, 9.0]])
        for i, (x, y) in enumerate(kps):
            field[i, int(y), int(x)] = 1.0
        f = torch.from_numpy(field)
        assert float(triplet_descriptor_loss(f, f, kps, None, 1.0, seed=0)) == 0.0

    def test_zero_margin_perfect_positives(self, rng):
        f = self.make_fields(rng)
        kps = np.array([[2.0, 3.0], [8.0, 2.0], [4.0, 9.0]])
        assert float(triplet_descriptor_loss(f, f.clone(), kps, None, 0.0, seed=1)) == 0.0

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d, size = 5, 14
        da = torch.from_numpy(rng.normal(0, 1, (d, size, size)))
        db = torch.from_numpy(rng.normal(0, 1, (d, size, size)))
        n = int(rng.integers(3, 11))
        kps = rng.uniform(1, size - 2, (n, 2))
        h = sample_homography(AugmentParams(5.0, 0.03, (0.97, 1.03), 0.0),
                              (size, size), seed=seed)
        got = float(triplet_descriptor_loss(da, db, kps, h, 0.8, seed=seed))
        expected = brute_force_triplet(da.numpy(), db.numpy(), kps, h, 0.8, seed)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_permutation_invariance(self, rng):
        da, db = self.make_fields(rng), self.make_fields(rng)
        kps = rng.uniform(1, 10, (8, 2))
        v1 = float(triplet_descriptor_loss(da, db, kps, None, 1.0, seed=5))
        perm = rng.permutation(8)
        v2 = float(triplet_descriptor_loss(da, db, kps[perm], None, 1.0, seed=5))
        assert v1 == pytest.approx(v2, abs=1e-12)

    def test_out_of_bounds_projections_dropped(self, rng):
        da, db = self.make_fields(rng), self.make_fields(rng)
        kps = np.array([[2.0, 2.0], [9.0, 9.0], [5.0, 5.0]])
        h = translation(100.0, 0.0)  # pushes everything out except nothing
        with pytest.raises(ValueError):
            triplet_descriptor_loss(da, db, kps, h, 1.0, seed=0)

    def test_needs_two_keypoints(self, rng):
        da, db = self.make_fields(rng), self.make_fields(rng)
        with pytest.raises(ValueError):
            triplet_descriptor_loss(da, db, np.array([[3.0, 3.0]]), None, 1.0, seed=0)

    def test_gradient_matches_fd(self, rng):
        db = self.make_fields(rng, d=4, size=8)
        kps = np.array([[1.5, 2.0], [5.0, 2.5], [3.0, 6.0]])

        def fn(t):
            return triplet_descriptor_loss(t, db, kps, None, 1.0, seed=3)

        worst = check_tensor_grad(fn, self.make_fields(rng, d=4, size=8))
        assert worst < 1e-3


class TestDesRkd:
    def test_identical_fields_positive_is_zero(self, rng):
        f = torch.from_numpy(rng.normal(0, 1, (5, 10, 10)))
        kps = rng.uniform(1, 8, (5, 2))
        v = float(l_des_rkd(f, f.clone(), kps, 0.0, seed=0))
        assert v == 0.0  # margin 0 and perfect positives

    def test_teacher_gradient_zero(self, rng):
        s = torch.from_numpy(rng.normal(0, 1, (4, 9, 9))).requires_grad_(True)
        t = torch.from_numpy(rng.normal(0, 1, (4, 9, 9))).requires_grad_(True)
        kps = rng.uniform(1, 7, (4, 2))
        l_des_rkd(s, t, kps, 1.0, seed=1).backward()
        assert t.grad is None or torch.all(t.grad == 0)
        assert torch.any(s.grad != 0)

    @pytest.mark.parametrize("seed", [0, 7])
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s = torch.from_numpy(rng.normal(0, 1, (4, 10, 10)))
        t = torch.from_numpy(rng.normal(0, 1, (4, 10, 10)))
        kps = rng.uniform(1, 8, (6, 2))
        got = float(l_des_rkd(s, t, kps, 0.7, seed=seed))
        expected = brute_force_triplet(s.numpy(), t.numpy(), kps, None, 0.7, seed)
        assert got == pytest.approx(expected, abs=1e-9)


class TestBreakdownAndCombos:
    def test_additivity_identities(self):
        b = LossBreakdown(l_clf=0.3, l_clf_rkd=0.1, l_geo=0.05, l_des=2.0, l_des_rkd=1.5)
        assert b.l_det == pytest.approx(0.45, abs=1e-12)
        assert b.l_des_total == pytest.approx(3.5, abs=1e-12)
        assert b.total == pytest.approx(3.95, abs=1e-12)

    def test_combine_all_none_zero(self):
        total, b = combine_losses()
        assert float(total) == 0.0 and b.total == 0.0

    def test_detector_loss_teacher_mode(self, rng):
        p = torch.from_numpy(rng.uniform(0.1, 1, (8, 8)))
        lbl = torch.from_numpy(rng.uniform(0, 1, (8, 8)))
        total, b = detector_loss(p, lbl, geo=(p.clone(), identity_homography()))
        assert b.l_clf_rkd == 0.0
        assert b.l_det == pytest.approx(b.l_clf + b.l_geo, abs=1e-9)
        assert float(total) == pytest.approx(b.l_det, abs=1e-9)

    def test_detector_loss_student_mode(self, rng):
        p = torch.from_numpy(rng.uniform(0.1, 1, (8, 8)))
        lbl = torch.from_numpy(rng.uniform(0, 1, (8, 8)))
        pt = torch.from_numpy(rng.uniform(0.1, 1, (8, 8)))
        total, b = detector_loss(p, lbl, teacher_heatmap=pt,
                                 geo=(p.clone(), identity_homography()))
        assert b.l_det == pytest.approx(b.l_clf + b.l_clf_rkd + b.l_geo, abs=1e-9)

    def test_descriptor_loss_total_combines(self, rng):
        d = torch.from_numpy(rng.normal(0, 1, (4, 10, 10)))
        dp = torch.from_numpy(rng.normal(0, 1, (4, 10, 10)))
        dt = torch.from_numpy(rng.normal(0, 1, (4, 10, 10)))
        kps = rng.uniform(1, 8, (5, 2))
        total, b = descriptor_loss_total(d, dp, kps, None, 1.0, 0, teacher_desc=dt)
        assert b.l_des_total == pytest.approx(b.l_des + b.l_des_rkd, abs=1e-9)
        assert float(total) == pytest.approx(b.l_des_total, abs=1e-9)

    def test_weights_scale_components(self, rng):
        p = torch.from_numpy(rng.uniform(0.1, 1, (8, 8)))
        lbl = torch.from_numpy(rng.uniform(0, 1, (8, 8)))
        _, b1 = detector_loss(p, lbl)
        _, b2 = detector_loss(p, lbl, weights=LossWeights(clf=2.0))
        assert b2.l_clf == pytest.approx(2 * b1.l_clf, abs=1e-9)


class TestSampleDescriptorField:
    def test_integer_position_exact(self, rng):
        f = torch.from_numpy(rng.normal(0, 1, (5, 8, 8)))
        out = sample_descriptor_field(f, np.array([[3.0, 4.0]]))
        expected = f[:, 4, 3]
        expected = expected / expected.norm()
        assert torch.allclose(out[0], expected, atol=1e-9)

    def test_unit_norm(self, rng):
        f = torch.from_numpy(rng.normal(0, 1, (6, 9, 9)))
        pts = rng.uniform(0, 8, (10, 2))
        out = sample_descriptor_field(f, pts)
        assert torch.allclose(out.norm(dim=1), torch.ones(10, dtype=out.dtype), atol=1e-6)
