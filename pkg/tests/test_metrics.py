"""Segmentation metrics against trivial cases and brute-force oracles."""

import numpy as np
import pytest

from erfseg.errors import ShapeError
from erfseg.metrics import MetricsReport, binarize, fp_fn_rates, hd95, iou

from oracles import hd95_bruteforce, hd_exact_bruteforce, iou_loops, rates_loops


def random_mask(rng, shape, p):
    return rng.random(shape) < p


class TestBinarize:
    def test_ties_go_to_background(self):
        assert not binarize(np.full((3, 3), 0.5)).any()

    def test_just_above_threshold(self):
        assert binarize(np.full((3, 3), 0.51)).all()

    def test_matches_elementwise_comparison(self):
        rng = np.random.default_rng(0)
        prob = rng.random((8, 8))
        got = binarize(prob, 0.3)
        want = np.array([[prob[i, j] > 0.3 for j in range(8)] for i in range(8)])
        assert np.array_equal(got, want)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            binarize(np.array([[0.2, 1.2]]))


class TestIoU:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert iou(a, b) == 0.0

    def test_half_frame(self):
        gt = np.ones((4, 4), bool)
        pred = np.zeros((4, 4), bool)
        pred[:, :2] = True
        assert iou(pred, gt) == 0.5

    def test_both_empty_is_one(self):
        assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0

    def test_symmetric_and_identity_iff_equal(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = random_mask(rng, (9, 9), 0.3)
            b = random_mask(rng, (9, 9), 0.3)
            assert iou(a, b) == iou(b, a)
            if a.any() or b.any():
                assert (iou(a, b) == 1.0) == np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            iou(np.zeros((3, 3), bool), np.zeros((4, 4), bool))


class TestHD95:
    def test_identical_masks_zero(self):
        m = np.zeros((6, 6), bool)
        m[2:4, 2:4] = True
        assert hd95(m, m) == 0.0

    def test_three_four_five_triangle(self):
        a = np.zeros((6, 6), bool)
        b = np.zeros((6, 6), bool)
        a[0, 0] = True
        b[3, 4] = True
        assert hd95(a, b) == pytest.approx(5.0)

    def test_empty_mask_gives_none(self):
        m = np.zeros((4, 4), bool)
        n = m.copy()
        n[0, 0] = True
        assert hd95(m, n) is None
        assert hd95(n, m) is None

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = random_mask(rng, (12, 12), 0.15)
            b = random_mask(rng, (12, 12), 0.15)
            want = hd95_bruteforce(a, b)
            got = hd95(a, b)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-9)

    def test_percentile_below_exact_hausdorff(self):
        rng = np.random.default_rng(3)
        for _ in range(15):
            a = random_mask(rng, (10, 10), 0.2)
            b = random_mask(rng, (10, 10), 0.2)
            if not (a.any() and b.any()):
                continue
            assert hd95(a, b) <= hd_exact_bruteforce(a, b) + 1e-12

    def test_pixel_spacing(self):
        a = np.zeros((3, 3), bool)
        b = np.zeros((3, 3), bool)
        a[0, 0] = True
        b[0, 1] = True  # one column apart
        assert hd95(a, b, spacing=(1.0, 2.5)) == pytest.approx(2.5)


class TestRates:
    def test_perfect_prediction(self):
        gt = np.zeros((4, 4), bool)
        gt[1, 1] = True
        assert fp_fn_rates(gt, gt) == (0.0, 0.0)

    def test_complement_prediction(self):
        gt = np.zeros((4, 4), bool)
        gt[:2] = True
        assert fp_fn_rates(~gt, gt) == (1.0, 1.0)

    def test_half_missed_foreground(self):
        gt = np.zeros((4, 4), bool)
        gt[0] = True  # 4 pixels
        pred = gt.copy()
        pred[0, :2] = False
        fp_rate, fn_rate = fp_fn_rates(pred, gt)
        assert fp_rate == 0.0 and fn_rate == 0.5

    def test_empty_denominators_give_none(self):
        empty = np.zeros((3, 3), bool)
        full = np.ones((3, 3), bool)
        assert fp_fn_rates(empty, empty)[1] is None  # no foreground
        assert fp_fn_rates(full, full)[0] is None  # no background

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = random_mask(rng, (7, 7), 0.4)
            b = random_mask(rng, (7, 7), 0.4)
            assert fp_fn_rates(a, b) == rates_loops(a, b)

    def test_fn_monotone_when_filling_foreground(self):
        rng = np.random.default_rng(5)
        gt = random_mask(rng, (8, 8), 0.4)
        pred = np.zeros_like(gt)
        last = 1.0
        for i, j in np.argwhere(gt):
            pred[i, j] = True
            fn = fp_fn_rates(pred, gt)[1]
            assert fn <= last
            last = fn
        assert last == 0.0


class TestReport:
    def test_csv_layout_and_sentinels(self, tmp_path):
        rep = MetricsReport(param_count=123)
        gt = np.zeros((4, 4), bool)
        gt[1, 1] = True
        rep.add_case("c0", gt, gt)
        rep.add_case("c1", np.zeros((4, 4), bool), gt)  # empty pred: hd95 undefined
        path = tmp_path / "m.csv"
        rep.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "case_id,iou,hd95,fp_rate,fn_rate"
        assert len(lines) == 5  # header + 2 cases + aggregate + exclusions
        assert lines[2].split(",")[2] == ""  # undefined hd95 serialized empty
        assert lines[3].startswith("mean±std")
        assert lines[4].split(",")[2] == "1"  # one hd95 exclusion

    def test_aggregate_excludes_not_imputes(self):
        rep = MetricsReport()
        gt = np.zeros((4, 4), bool)
        gt[0, 0] = True
        rep.add_case("a", gt, gt)
        rep.add_case("b", np.zeros((4, 4), bool), gt)
        agg = rep.aggregate()
        assert agg["hd95"] == (0.0, 0.0, 1)
