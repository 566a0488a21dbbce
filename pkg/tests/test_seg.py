import math

import numpy as np
import pytest

from spectraflow import autodiff as ad
from spectraflow import seg
from spectraflow.autodiff import ContractError, Var


def count_oracle(p, g):
    tp = fp = fn = 0
    for a, b in zip(p.ravel(), g.ravel()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    return tp, fp, fn


def boundary_oracle(m):
    h, w = m.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= a < h and 0 <= b < w) or not m[a, b] for a, b in nbrs):
                out.append((i, j))
    return np.array(out, dtype=float)


def hd95_oracle(p, g):
    bp, bg = boundary_oracle(p), boundary_oracle(g)
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([d.min(1), d.min(0)]), 95))


def random_pair(rng, size=32):
    # smooth-ish blobs so boundaries are realistic, plus some salt noise
    def blob():
        yy, xx = np.mgrid[:size, :size]
        cy, cx = rng.uniform(4, size - 4, 2)
        r = rng.uniform(2, size / 3)
        m = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        return m ^ (rng.random((size, size)) < 0.02)

    return blob(), blob()


class TestLosses:
    def test_perfect_prediction(self):
        gt = np.zeros((2, 1, 4, 4))
        gt[:, :, 1:3, 1:3] = 1
        pred = np.clip(gt, 1e-9, 1 - 1e-9)
        assert float(seg.dice_loss(pred, gt).value) == pytest.approx(0.0, abs=1e-8)
        assert float(seg.bce_loss(pred, gt).value) == pytest.approx(0.0, abs=1e-6)

    def test_dice_loss_oracle(self):
        rng = np.random.default_rng(0)
        pred = rng.random((3, 1, 5, 5))
        gt = (rng.random((3, 1, 5, 5)) > 0.5).astype(float)
        per = [1 - (2 * np.sum(p * g) + 1) / (np.sum(p) + np.sum(g) + 1) for p, g in zip(pred, gt)]
        assert float(seg.dice_loss(pred, gt).value) == pytest.approx(np.mean(per), rel=1e-12)

    def test_bce_oracle_and_clamp(self):
        pred = np.array([[[[0.0, 1.0, 0.3]]]])
        gt = np.array([[[[1.0, 1.0, 0.0]]]])
        ref = -np.mean([np.log(1e-7), np.log(1 - 1e-7), np.log(0.7)])
        val = float(seg.bce_loss(pred, gt).value)
        assert np.isfinite(val) and val == pytest.approx(ref, rel=1e-9)

    def test_combined_weights(self):
        rng = np.random.default_rng(1)
        pred = rng.random((2, 1, 4, 4))
        gt = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        mix = 0.5 * float(seg.dice_loss(pred, gt).value) + 0.5 * float(seg.bce_loss(pred, gt).value)
        assert float(seg.dice_bce_loss(pred, gt).value) == pytest.approx(mix, rel=1e-12)
        assert float(seg.stage2_loss(pred, gt, beta=0.0).value) == pytest.approx(mix, rel=1e-12)
        full = mix + 2.0 * float(seg.boundary_loss(pred, gt).value)
        assert float(seg.stage2_loss(pred, gt, beta=2.0).value) == pytest.approx(full, rel=1e-12)

    def test_soft_boundary_flat_regions(self):
        m = np.zeros((1, 1, 7, 7))
        m[..., 2:5, 2:5] = 1
        b = seg.soft_boundary(m).value[0, 0]
        assert b[3, 3] == 0.0 and b[0, 6] == 0.0 and b[2, 2] > 0

    def test_boundary_loss_zero_at_target(self):
        gt = np.zeros((1, 1, 6, 6))
        gt[..., 1:4, 2:5] = 1
        assert float(seg.boundary_loss(gt, gt).value) == 0.0

    def test_gradient_only_through_prediction(self):
        gt = (np.random.default_rng(2).random((1, 1, 5, 5)) > 0.5).astype(float)
        pred = Var(np.full((1, 1, 5, 5), 0.4), requires_grad=True)
        (g,) = ad.grad(seg.stage2_loss(pred, gt), [pred])
        assert np.all(np.isfinite(g)) and np.any(g != 0)

    def test_shape_contract(self):
        with pytest.raises(ContractError):
            seg.dice_loss(np.ones((1, 1, 4, 4)), np.ones((1, 1, 4, 3)))


class TestMetrics:
    def test_region_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p, g = random_pair(rng)
            tp, fp, fn = count_oracle(p, g)
            r = seg.region_metrics(p.astype(float), g.astype(float))
            assert r["dice"] == (2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)
            assert r["iou"] == (tp / (tp + fp + fn) if tp + fp + fn else 1.0)
            assert r["precision"] == (tp / (tp + fp) if tp + fp else 1.0)
            assert r["recall"] == (tp / (tp + fn) if tp + fn else 1.0)

    def test_hd95_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            p, g = random_pair(rng)
            if not p.any() or not g.any():
                continue
            assert seg.hd95(p.astype(float), g.astype(float)) == pytest.approx(hd95_oracle(p, g), abs=1e-12)

    def test_single_pixels(self):
        p = np.zeros((8, 8))
        g = np.zeros((8, 8))
        p[0, 0] = 1
        g[3, 4] = 1
        assert seg.hd95(p, g) == pytest.approx(5.0)

    def test_empty_conventions(self):
        z = np.zeros((6, 8))
        m = z.copy()
        m[2, 2] = 1
        assert seg.hd95_with_flag(z, z) == (0.0, False)
        assert seg.hd95_with_flag(z, m) == (math.hypot(6, 8), True)
        assert seg.hd95_with_flag(m, z) == (10.0, True)
        assert seg.region_metrics(z, z) == {"dice": 1.0, "iou": 1.0, "precision": 1.0, "recall": 1.0}
        r = seg.region_metrics(z, m)
        assert r["dice"] == 0.0 and r["precision"] == 1.0 and r["recall"] == 0.0

    def test_threshold_is_strict(self):
        assert not seg.binarize(np.array(0.5))
        assert seg.binarize(np.array(0.5000001))

    def test_boundary_matches_oracle(self):
        m = np.random.default_rng(5).random((9, 9)) > 0.4
        ref = np.zeros_like(m)
        for i, j in boundary_oracle(m).astype(int):
            ref[i, j] = True
        np.testing.assert_array_equal(seg.boundary_pixels(m), ref)

    def test_identical_masks(self):
        p, _ = random_pair(np.random.default_rng(6))
        assert seg.hd95(p, p) == 0.0
        assert seg.region_metrics(p, p)["dice"] == 1.0

    def test_aggregate(self):
        recs = [seg.SampleMetrics(0, 1.0, 1.0, 1.0, 1.0, 0.0), seg.SampleMetrics(1, 0.0, 0.0, 1.0, 0.0, 10.0, True)]
        agg = seg.aggregate(recs)
        assert agg["dice"] == 0.5 and agg["hd95"] == 5.0 and agg["n"] == 2 and agg["hd95_sentinels"] == 1
        with pytest.raises(ContractError):
            seg.aggregate([])

    def test_evaluate_pair_record(self):
        m = np.zeros((1, 4, 4))
        m[0, 1, 1] = 1
        rec = seg.evaluate_pair(7, m, m).record()
        assert rec["sample_id"] == 7 and rec["dice"] == 1.0 and rec["hd95"] == 0.0
