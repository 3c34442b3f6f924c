import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octvq import score as sc
from octvq.data import PhantomConfig, generate_synthetic_dataset
from octvq.perturb import perturb
from octvq.roi import extract_roi


def youden_oracle(scores, labels):
    """Exhaustive scan: every midpoint plus ±inf; J by explicit counting.

    Ties in J: widest gap between the neighbouring scores (0 for the
    sentinels), then the larger threshold.
    """
    u = sorted(set(float(s) for s in scores))
    cands = [(-np.inf, 0.0)] + [((a + b) / 2, b - a) for a, b in zip(u, u[1:])] + [(np.inf, 0.0)]
    n_pos = sum(1 for l in labels if l == 1)
    n_neg = len(labels) - n_pos
    best = None
    for t, gap in cands:
        tp = sum(1 for s, l in zip(scores, labels) if l == 1 and s > t)
        fp = sum(1 for s, l in zip(scores, labels) if l == 0 and s > t)
        j = tp / n_pos - fp / n_neg
        key = (j, gap, t)
        if best is None or key > best:
            best = key
    return best[2], best[0]


class TestImageScore:
    def test_exact_model(self):
        x = np.random.default_rng(0).random((64, 64))
        assert sc.image_score(x, lambda a: a).value == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(0).random((64, 64)) * 0.5
        assert sc.image_score(x, lambda a: a + 0.25).value == pytest.approx(0.25, abs=1e-12)

    def test_resolution_mismatch(self):
        from octvq.model import VQModel
        with pytest.raises(ValueError, match="resolution"):
            sc.image_score(np.zeros((32, 32)), VQModel())

    def test_perturbed_scores_higher_with_oracle_model(self):
        """A model that maps every image back to its normal source."""
        idx = generate_synthetic_dataset(PhantomConfig(), 10, seed=5)
        rng = np.random.default_rng(0)
        for e in idx:
            roi = extract_roi(e.pixels).mask
            neg = perturb(e.pixels, roi, rng=rng)
            oracle = lambda a, src=e.pixels: np.broadcast_to(src, np.shape(a))
            assert sc.image_score(neg, oracle).value >= sc.image_score(e.pixels, oracle).value


class TestSSIM:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_self_similarity(self):
        for _ in range(10):
            x = self.rng.random((32, 32))
            assert np.abs(sc.ssim_map(x, x) - 1).max() <= 1e-9

    def test_symmetry(self):
        x, y = self.rng.random((2, 32, 32))
        assert np.abs(sc.ssim_map(x, y) - sc.ssim_map(y, x)).max() <= 1e-9

    def test_range(self):
        for _ in range(10):
            x, y = self.rng.random((2, 24, 24))
            m = sc.ssim_map(x, 1 - y if self.rng.random() < 0.5 else y)
            assert m.min() >= -1 and m.max() <= 1

    def test_constant_closed_form(self):
        c1 = 0.01**2
        expect = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
        m = sc.ssim_map(np.full((16, 16), 0.5), np.full((16, 16), 0.6))
        assert np.abs(m - expect).max() <= 1e-6

    def test_errors(self):
        with pytest.raises(ValueError):
            sc.ssim_map(np.zeros((8, 8)), np.zeros((8, 8)), window=11)
        with pytest.raises(ValueError):
            sc.ssim_map(np.zeros((16, 16)), np.zeros((16, 16)), window=4)


class TestAnomalyMap:
    def test_identity(self):
        x = np.random.default_rng(0).random((32, 32))
        assert np.all(sc.anomaly_map(x, x) == 0)

    def test_beta_zero(self):
        x, y = np.random.default_rng(1).random((2, 32, 32))
        np.testing.assert_array_equal(sc.anomaly_map(x, y, 0.6, 0.0), 0.6 * np.abs(x - y))

    def test_range(self):
        x, y = np.random.default_rng(2).random((2, 32, 32))
        for metric in sc.MAP_METRICS:
            m = sc.anomaly_map(x, y, metric=metric)
            assert m.min() >= 0 and m.max() <= 1

    def test_weighted_composition(self):
        x, y = np.random.default_rng(3).random((2, 32, 32))
        expect = 0.6 * np.abs(x - y) + 0.4 * (1 - sc.ssim_map(x, y))
        np.testing.assert_allclose(sc.anomaly_map(x, y), np.clip(expect, 0, 1), rtol=0, atol=1e-15)

    def test_hand_value(self):
        # constant images: |Δ| = 0.1 and SSIM has the closed form, so the map is uniform
        c1 = 0.01**2
        s = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
        m = sc.anomaly_map(np.full((16, 16), 0.5), np.full((16, 16), 0.6))
        assert np.abs(m - (0.06 + 0.4 * (1 - s))).max() <= 1e-12

    def test_ssim_alternative_is_rescaled_dissimilarity(self):
        x, y = np.random.default_rng(5).random((2, 32, 32))
        np.testing.assert_allclose(sc.anomaly_map(x, y, metric="ssim"), (1 - sc.ssim_map(x, y)) / 2, atol=1e-15)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            sc.anomaly_map(np.zeros((16, 16)), np.zeros((16, 16)), metric="psnr")

    def test_monotone_in_residual_beta_zero(self):
        rng = np.random.default_rng(4)
        x, y = rng.random((2, 16, 16))
        base = sc.anomaly_map(x, y, 0.6, 0.0)
        y2 = y.copy()
        y2[5, 5] = y[5, 5] + np.sign(y[5, 5] - x[5, 5]) * 0.1
        assert sc.anomaly_map(x, y2, 0.6, 0.0)[5, 5] >= base[5, 5]


class TestYouden:
    def test_hand_example(self):
        thr = sc.select_threshold_youden([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert thr.t_star == 0.5 and thr.J == 1.0

    def test_single_class(self):
        with pytest.raises(ValueError, match="both classes"):
            sc.select_threshold_youden([0.1, 0.2], [0, 0])

    def test_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.random(n), int(rng.integers(1, 4))) + labels * rng.random() * 0.3
            thr = sc.select_threshold_youden(scores, labels)
            t, j = youden_oracle(list(scores), list(labels))
            assert (thr.t_star, thr.J) == (t, j)

    def test_interleaved(self):
        scores = np.arange(10, dtype=float)
        labels = np.array([0, 1] * 5)
        thr = sc.select_threshold_youden(scores, labels)
        assert (thr.t_star, thr.J) == youden_oracle(list(scores), list(labels))
        assert abs(thr.J) <= 0.2 + 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        s, y = rng.random(50), rng.integers(0, 2, 50)
        y[:2] = (0, 1)
        a = sc.select_threshold_youden(s, y)
        b = sc.select_threshold_youden(3.0 * s, y)
        assert b.J == a.J and b.t_star == pytest.approx(3.0 * a.t_star, rel=1e-12)

    def test_J_range(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            y = rng.integers(0, 2, 20)
            y[:2] = (0, 1)
            assert -1 <= sc.select_threshold_youden(rng.random(20), y).J <= 1


class TestClassify:
    def test_strict(self):
        assert sc.classify([0.5], 0.5).tolist() == [0]
        assert sc.classify([0.1, 0.2], 0.5).tolist() == [0, 0]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-10, 10), st.floats(0, 5))
    def test_monotone(self, scores, t, bump):
        before = sc.classify(scores, t)
        raised = np.array(scores) + bump
        assert np.all(sc.classify(raised, t) >= before)


class TestBinarizeMap:
    def test_perfect_map(self):
        gt = np.zeros((32, 32), bool)
        gt[10:20, 5:15] = True
        pm = sc.binarize_map(gt.astype(float), "fixed(0.5)")
        assert np.array_equal(pm.mask, gt)

    def test_percentile(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m = rng.random((40, 40))
            assert sc.binarize_map(m, "percentile(99)").mask.mean() <= 0.01 + 1e-12

    def test_otsu_bimodal(self):
        m = np.full((32, 32), 0.05)
        m[8:16, 4:28] = 0.9
        pm = sc.binarize_map(m, "global_otsu")
        assert np.array_equal(pm.mask, m == 0.9) and not pm.degenerate

    def test_roi_restriction(self):
        m = np.random.default_rng(0).random((16, 16))
        roi = np.zeros((16, 16), bool)
        roi[4:8] = True
        assert not sc.binarize_map(m, "fixed(0.0)", roi).mask[~roi].any()

    def test_degenerate(self):
        pm = sc.binarize_map(np.zeros((16, 16)), "global_otsu")
        assert pm.degenerate and not pm.mask.any()

    def test_bad_method(self):
        with pytest.raises(ValueError):
            sc.binarize_map(np.zeros((4, 4)), "kmeans")
