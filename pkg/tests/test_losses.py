import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radialssm import losses as lo
from radialssm.numerics import ShapeError


class TestCharbonnier:
    def test_floor_is_eps(self):
        x = np.random.default_rng(0).uniform(0, 1, size=(4, 4))
        assert lo.charbonnier(x, x, eps=1e-3) == pytest.approx(1e-3, abs=1e-12)

    def test_three_four_five(self):
        assert lo.charbonnier(np.array([3.0]), np.array([0.0]), eps=4.0) \
            == pytest.approx(5.0, abs=1e-9)

    @given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
    def test_monotone_in_abs_diff(self, a, b):
        lo_small = lo.charbonnier(np.array([min(a, b)]), np.array([0.0]))
        lo_big = lo.charbonnier(np.array([max(a, b)]), np.array([0.0]))
        assert lo_big >= lo_small - 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lo.charbonnier(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            lo.charbonnier(np.zeros(2), np.zeros(2), eps=0.0)


class TestWeightedBce:
    def test_equal_midpoint_zero(self):
        x = np.full((3, 3), 0.5)
        assert lo.weighted_bce_err(x, x) == 0.0

    def test_hand_value(self):
        v = lo.weighted_bce_err(np.array([0.5]), np.array([1.0]))
        assert v == pytest.approx(-math.log(0.5), abs=1e-6)

    def test_gradient_matches_detached_fd(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(0.2, 0.8, size=(4, 5))
        gt = rng.uniform(0.0, 1.0, size=(4, 5))
        _, grad = lo.weighted_bce_err_grad(pred, gt)
        w = np.minimum(1.0, 4.0 * np.abs(pred - gt))
        step = 1e-6
        num = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            p = pred.copy()
            p[idx] += step
            up = np.mean(w * -(gt * np.log(p) + (1 - gt) * np.log(1 - p)))
            p[idx] -= 2 * step
            dn = np.mean(w * -(gt * np.log(p) + (1 - gt) * np.log(1 - p)))
            num[idx] = (up - dn) / (2 * step)
        assert np.max(np.abs(grad - num)) / (np.max(np.abs(num)) + 1e-12) < 1e-5


class TestWeakRegion:
    def test_empty_region_zero(self):
        gt = np.full((3, 3), 0.9)
        assert lo.weak_region_l1(np.zeros((3, 3)), gt) == 0.0

    def test_single_pixel_region(self):
        gt = np.array([0.1, 0.9])
        pred = np.array([0.3, 0.0])
        assert lo.weak_region_l1(pred, gt, 0.5) == pytest.approx(0.2, abs=1e-12)

    def test_exact_match_zero(self):
        gt = np.array([0.05, 0.1])
        assert lo.weak_region_l1(gt, gt) == 0.0

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            lo.weak_region_l1(np.zeros(2), np.zeros(2), 1.5)


class TestFocal:
    def test_hand_value(self):
        pred = np.array([[0.5, 0.5]])
        gt = np.array([[1.0, 0.0]])
        # one positive at 0.5 plus one zero-target negative at 0.5
        assert lo.focal_heatmap_loss(pred, gt) == pytest.approx(0.346574, abs=1e-6)

    def test_perfect_prediction_limit(self):
        gt = np.zeros((4, 4))
        gt[1, 1] = 1.0
        pred = np.where(gt == 1.0, 1.0 - 1e-7, 1e-7)
        assert lo.focal_heatmap_loss(pred, gt) < 1e-5

    def test_near_center_negative_barely_penalized(self):
        gt = np.array([[1.0 - 1e-6]])
        pred = np.array([[0.9]])
        assert lo.focal_heatmap_loss(pred, gt) < 1e-20

    def test_no_positive_normalizer_one(self):
        gt = np.zeros((2, 2))
        pred = np.full((2, 2), 0.5)
        want = -4 * (0.25 * math.log(0.5))
        assert lo.focal_heatmap_loss(pred, gt) == pytest.approx(want, abs=1e-9)

    def test_monotone_direction(self):
        gt = np.array([[1.0, 0.0]])
        low = lo.focal_heatmap_loss(np.array([[0.3, 0.2]]), gt)
        hi = lo.focal_heatmap_loss(np.array([[0.6, 0.2]]), gt)
        assert hi < low
        worse_neg = lo.focal_heatmap_loss(np.array([[0.3, 0.5]]), gt)
        assert worse_neg > low


class TestComposites:
    def test_fpn_report_decomposes(self):
        rng = np.random.default_rng(2)
        pf = rng.uniform(0.1, 0.9, size=(8, 8))
        gf = rng.uniform(0, 1, size=(8, 8))
        ph = rng.uniform(0.1, 0.9, size=(8, 8))
        gh = np.zeros((8, 8))
        gh[3, 4] = 1.0
        report = lo.fpn_loss(pf, gf, ph, gh)
        assert report.components["char"] == pytest.approx(lo.charbonnier(pf, gf))
        assert report.components["err"] == pytest.approx(lo.weighted_bce_err(pf, gf))
        assert report.components["weak"] == pytest.approx(lo.weak_region_l1(pf, gf))
        assert report.components["hm"] == pytest.approx(lo.focal_heatmap_loss(ph, gh))
        assert report.total == pytest.approx(sum(report.components.values()), abs=1e-6)

    def test_main_perfect_zero(self):
        rng = np.random.default_rng(3)
        clean = rng.uniform(0.2, 0.4, size=(6, 6, 3))
        flare = rng.uniform(0.0, 0.3, size=(6, 6))
        flare3 = np.repeat(flare[:, :, None], 3, axis=2)
        inp = np.clip(clean + flare3, 0, 1)
        pred6 = np.concatenate([clean, flare3], axis=2)
        report = lo.main_loss(pred6, clean, flare, inp)
        assert report.total == pytest.approx(0.0, abs=1e-9)

    def test_main_constant_offset(self):
        clean = np.full((5, 5, 3), 0.3)
        flare = np.full((5, 5), 0.1)
        flare3 = np.repeat(flare[:, :, None], 3, axis=2)
        inp = clean + flare3
        pred6 = np.concatenate([clean + 0.1, flare3], axis=2)
        report = lo.main_loss(pred6, clean, flare, inp)
        assert report.components["l1"] == pytest.approx(0.1, abs=1e-7)
        assert report.components["rec"] == pytest.approx(0.1, abs=1e-7)
        assert report.components["vgg_slot"] == 0.0

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ShapeError, match="6"):
            lo.main_loss(np.zeros((4, 4, 5)), np.zeros((4, 4, 3)),
                         np.zeros((4, 4)), np.zeros((4, 4, 3)))

    def test_report_total_is_component_sum(self):
        rng = np.random.default_rng(4)
        pred6 = rng.uniform(0.1, 0.4, size=(6, 6, 6))
        report = lo.main_loss(pred6, rng.uniform(0, 1, (6, 6, 3)),
                              rng.uniform(0, 1, (6, 6)), rng.uniform(0, 1, (6, 6, 3)))
        assert report.total == pytest.approx(sum(report.components.values()), abs=1e-6)


class TestPsnr:
    def test_identical_capped(self):
        x = np.random.default_rng(5).uniform(0, 1, size=(8, 8, 3))
        assert lo.psnr(x, x) == 100.0

    def test_closed_form(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01
        assert lo.psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_full_mask_equals_plain_to_last_bit(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 1, size=(8, 8, 3))
        b = rng.uniform(0, 1, size=(8, 8, 3))
        assert lo.masked_psnr(a, b, lo.EvalMask.full(a.shape)) == lo.psnr(a, b)

    def test_empty_mask_rejected(self):
        a = np.zeros((4, 4))
        with pytest.raises(ValueError, match="active"):
            lo.masked_psnr(a, a, lo.EvalMask(np.zeros((4, 4), dtype=bool)))

    def test_masked_region_only(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        b[0, 0] = 0.1
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        assert lo.masked_psnr(a, b, lo.EvalMask(mask)) == pytest.approx(20.0, abs=1e-9)


class TestSsim:
    def test_identical_is_exactly_one(self):
        x = np.random.default_rng(7).uniform(0, 1, size=(16, 16, 3))
        assert lo.ssim(x, x) == 1.0

    def test_constant_images_closed_form(self):
        a = np.zeros((16, 16))
        b = np.ones((16, 16))
        c1 = 0.01 ** 2
        assert lo.ssim(a, b) == pytest.approx(c1 / (1 + c1), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, size=(16, 16))
        b = rng.uniform(0, 1, size=(16, 16))
        assert lo.ssim(a, b) == pytest.approx(lo.ssim(b, a), abs=1e-12)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="window"):
            lo.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestGradSuite:
    def test_all_loss_gradients(self):
        for report in lo.gradcheck_suite(seed=0):
            assert report.passed, str(report)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_losses_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0.05, 0.95, size=(6, 6))
        gt = rng.uniform(0, 1, size=(6, 6))
        assert lo.charbonnier(pred, gt) >= 0
        assert lo.weighted_bce_err(pred, gt) >= 0
        assert lo.weak_region_l1(pred, gt) >= 0
        heat = np.zeros((6, 6))
        heat[rng.integers(0, 6), rng.integers(0, 6)] = 1.0
        assert lo.focal_heatmap_loss(pred, heat) >= 0
