import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from boundaryflow.evaluation import (
    FlowField, PrCounts, baseline_greedy_nn, baseline_ransac_translation, boundary_pr,
    default_thresholds, default_tolerance, epe, f_measure, greedy_correspondence,
    interpolated_ap, patch_descriptors, pr_table_csv, ransac_translation, summarize,
)
from boundaryflow.oracle import BfGroundTruth, boundary_points


def gt_of(points, flow):
    pts = np.asarray(points, np.int64).reshape(-1, 2)
    fl = np.asarray(flow, np.float64).reshape(-1, 2)
    case = np.where(np.isnan(fl[:, 0]), 0, 1).astype(np.int8)
    return BfGroundTruth(pts, fl, case, [""] * len(pts))


def square_outline(n=32, lo=8, hi=23):
    m = np.zeros((n, n), bool)
    m[lo, lo:hi + 1] = m[hi, lo:hi + 1] = m[lo:hi + 1, lo] = m[lo:hi + 1, hi] = True
    return m


def max_matching(pred, gt, tol):
    if len(pred) == 0 or len(gt) == 0:
        return 0
    d = np.sqrt(((pred[:, None] - gt[None]) ** 2).sum(-1)) <= tol
    m = maximum_bipartite_matching(csr_matrix(d.astype(np.int8)), perm_type="column")
    return int((m >= 0).sum())


class TestEpe:
    def test_identity(self):
        gt = gt_of([[1, 1], [2, 2]], [[1, 0], [0, 3]])
        assert epe(FlowField(gt.points, gt.flow), gt) == 0

    def test_three_four_five(self):
        gt = gt_of([[1, 1]], [[0, 0]])
        assert epe(FlowField([[1, 1]], [[3, 4]]), gt) == pytest.approx(5.0)

    def test_uncovered_penalised(self):
        gt = gt_of([[0, 0], [50, 50]], [[0, 0], [0, 0]])
        assert epe(FlowField([[1, 1]], [[0, 0]]), gt) == pytest.approx(50.0)
        assert epe(FlowField.empty(), gt) == 100.0

    def test_undefined_skipped_and_empty_rejected(self):
        gt = gt_of([[0, 0], [5, 5]], [[1, 0], [np.nan, np.nan]])
        assert epe(FlowField([[0, 0]], [[1, 0]]), gt) == 0
        with pytest.raises(ValueError):
            epe(FlowField.empty(), gt_of([[0, 0]], [[np.nan, np.nan]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_symmetric_on_same_pixels(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.unique(rng.integers(0, 30, (20, 2)), axis=0)
        fa, fb = rng.normal(size=(len(pts), 2)), rng.normal(size=(len(pts), 2))
        e1 = epe(FlowField(pts, fa), gt_of(pts, fb))
        e2 = epe(FlowField(pts, fb), gt_of(pts, fa))
        assert e1 == pytest.approx(e2) and e1 >= 0


class TestFlowField:
    def test_text_round_trip(self):
        f = FlowField([[1, 2], [3, 4]], [[0.1, -2.5], [1e-9, 3.0]], [0, 7])
        text = f.to_text()
        assert FlowField.from_text(text).to_text() == text


class TestPr:
    def test_perfect_prediction(self):
        gt = square_outline()
        c = boundary_pr(gt.astype(float), gt)
        s = summarize([c])
        assert (s.ods, s.ois, s.ap) == (1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        c = boundary_pr(np.zeros((32, 32)), square_outline())
        np.testing.assert_array_equal(c.recall, 0)
        np.testing.assert_array_equal(c.precision, 1)

    def test_defaults(self):
        th = default_thresholds()
        assert len(th) == 33 and 0 < th[0] < th[-1] < 1
        assert default_tolerance((64, 64)) == pytest.approx(0.0075 * np.hypot(64, 64))

    def test_offset_within_tolerance(self):
        gt = square_outline()
        shifted = np.roll(gt, 1, axis=1).astype(float)
        c = boundary_pr(shifted, gt, tol=1.0)
        # nearest-first pairing gives a few pairs away on the rolled column
        assert c.f.max() >= 0.95
        assert boundary_pr(shifted, gt, tol=0.5).f.max() < 0.6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_monotone_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.random((16, 16)) < 0.15
        pred = rng.random((16, 16))
        c = boundary_pr(pred, gt, tol=1.5)
        # thresholds increase, so recall must not increase
        assert np.all(np.diff(c.recall) <= 1e-12)
        assert np.all(np.diff(c.total_pred) <= 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_greedy_equals_exact_at_default_tolerance(self, seed):
        rng = np.random.default_rng(seed)
        gt = boundary_points(rng.random((16, 16)) < 0.2).astype(float)
        pred = boundary_points(rng.random((16, 16)) < 0.2).astype(float)
        tol = default_tolerance((16, 16))
        assert greedy_correspondence(pred, gt, tol) == max_matching(pred, gt, tol)

    def test_greedy_close_to_exact_on_average(self):
        gaps = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            gt = boundary_points(rng.random((16, 16)) < 0.2).astype(float)
            pred = boundary_points(rng.random((16, 16)) < 0.1).astype(float)
            g, m = greedy_correspondence(pred, gt, 1.0), max_matching(pred, gt, 1.0)
            assert g <= m
            f_exact = f_measure(m / len(pred), m / len(gt))
            gaps.append(f_exact - f_measure(g / len(pred), g / len(gt)))
        assert np.mean(gaps) <= 0.01

    def test_greedy_nearest_first(self):
        pred = np.array([[0.0, 0.0], [1.0, 0.0]])
        gt = np.array([[1.0, 0.0]])
        assert greedy_correspondence(pred, gt, 2.0) == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_ois_dominates_ods(self, seed):
        rng = np.random.default_rng(seed)
        counts = [boundary_pr(rng.random((16, 16)), rng.random((16, 16)) < 0.1, 9, tol=1.0)
                  for _ in range(4)]
        s = summarize(counts)
        assert s.ois >= s.ods - 1e-12
        assert 0 <= s.ap <= 1

    def test_empty_gt_excluded(self, caplog):
        gt = square_outline()
        good = boundary_pr(gt.astype(float), gt)
        empty = boundary_pr(np.zeros((32, 32)), np.zeros((32, 32), bool))
        with caplog.at_level("INFO"):
            s = summarize([good, empty])
        assert s.ods == 1.0 and s.ois == 1.0
        assert "excluded" in caplog.text

    def test_summarize_rejects_mixed_thresholds(self):
        gt = square_outline()
        with pytest.raises(ValueError):
            summarize([boundary_pr(gt.astype(float), gt, 5), boundary_pr(gt.astype(float), gt, 7)])

    def test_ap_of_step_curve(self):
        assert interpolated_ap(np.array([1.0, 0.5]), np.array([0.5, 1.0])) == pytest.approx(
            (51 * 1.0 + 50 * 0.5) / 101)

    def test_csv(self):
        gt = square_outline()
        c = boundary_pr(gt.astype(float), gt, 3)
        csv = pr_table_csv([c], ["img"], summarize([c]))
        lines = csv.splitlines()
        assert lines[0] == "image,threshold,precision,recall,f"
        assert len(lines) == 1 + 3 + 3
        assert lines[1].startswith("img,") and lines[-1].startswith("all,")


def textured(rng, n=48):
    from scipy.ndimage import gaussian_filter
    return (np.clip(gaussian_filter(rng.random((n, n, 3)), (1.5, 1.5, 0)) * 2 - 0.5, 0, 1)
            * 255).astype(np.uint8)


class TestBaselines:
    def test_identical_frames_zero_flow(self):
        rng = np.random.default_rng(0)
        img = textured(rng)
        b = rng.random((48, 48)) < 0.1
        f = baseline_greedy_nn(img, img, b, b)
        assert (np.abs(f.flow).sum(axis=1) == 0).mean() >= 0.99

    def test_flat_square_aperture_failure(self):
        # oblique 10 px shift of a flat 40 px square: patches repeat along every edge
        img_a = np.full((64, 64, 3), 40, np.uint8)
        img_a[8:48, 8:48] = 220
        img_b = np.roll(img_a, (6, 8), axis=(0, 1))
        b1 = square_outline(64, 8, 47)
        b2 = np.roll(b1, (6, 8), axis=(0, 1))
        f = baseline_greedy_nn(img_a, img_b, b1, b2)
        err = np.linalg.norm(f.flow - [8, 6], axis=1)
        assert np.median(err) > 5

    def test_empty_b2(self):
        img = np.zeros((8, 8, 3), np.uint8)
        b = np.zeros((8, 8), bool)
        b[2, 2] = True
        assert len(baseline_greedy_nn(img, img, b, np.zeros((8, 8), bool))) == 0

    def test_ransac_recovers_translation(self):
        rng = np.random.default_rng(1)
        d = np.tile([5.0, -3.0], (100, 1))
        d[:20] = rng.uniform(-20, 20, (20, 2))
        t, mask = ransac_translation(d)
        np.testing.assert_array_equal(t, [5.0, -3.0])
        assert mask.sum() >= 80

    def test_ransac_identity(self):
        rng = np.random.default_rng(2)
        img = textured(rng)
        b = rng.random((48, 48)) < 0.1
        f = baseline_ransac_translation(img, img, b, b)
        assert len(f) == b.sum()
        np.testing.assert_array_equal(f.flow, 0)

    def test_ransac_needs_matches(self):
        with pytest.raises(ValueError):
            ransac_translation(np.zeros((0, 2)))

    def test_descriptor_shape(self):
        img = np.zeros((10, 10, 3), np.uint8)
        assert patch_descriptors(img, [[0, 0], [9, 9]]).shape == (2, 147)


class TestCountsContainer:
    def test_no_gt_recall_zero(self):
        c = PrCounts(np.array([0.5]), np.array([0]), np.array([3]), np.array([0]), 0)
        np.testing.assert_array_equal(c.recall, [0])
        np.testing.assert_array_equal(c.precision, [0])
