"""Metric tests, each against an independent oracle: diagonal-covariance FID
closed form, single-window MS-SSIM constant-image formula, pair-enumerated
fairness recounts."""

import numpy as np
import pytest

from dermdiff import metrics
from dermdiff.metrics import (
    FairnessReport,
    GaussianStats,
    fairness_metrics,
    fid,
    fit_gaussian,
    mean_pairwise_msssim,
    ms_ssim,
    msssim_weights,
)


def diagonal_fid_closed_form(mu_a, var_a, mu_b, var_b):
    """Oracle: coordinate-wise Frechet distance for diagonal Gaussians."""
    mu_a, var_a = np.asarray(mu_a), np.asarray(var_a)
    mu_b, var_b = np.asarray(mu_b), np.asarray(var_b)
    return float(((mu_a - mu_b) ** 2).sum() + ((np.sqrt(var_a) - np.sqrt(var_b)) ** 2).sum())


def constant_msssim_oracle(va, vb, weights):
    """Oracle: MS-SSIM of two constant images straight from the formula.

    Variances vanish, so every contrast-structure term is C2/C2 = 1 and only
    the coarsest-scale luminance term survives.
    """
    c1 = 0.01**2
    lum = (2 * va * vb + c1) / (va**2 + vb**2 + c1)
    return lum ** weights[-1]


# ---------------------------------------------------------------------------
# fit_gaussian


def test_fit_gaussian_hand_case():
    stats = fit_gaussian([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_array_equal(stats.mean, [1.0, 0.0])
    np.testing.assert_array_equal(stats.cov, [[2.0, 0.0], [0.0, 0.0]])  # n-1 divisor
    assert stats.n == 2


def test_fit_gaussian_identical_vectors():
    stats = fit_gaussian([[1.0, 2.0]] * 5)
    np.testing.assert_array_equal(stats.cov, np.zeros((2, 2)))


def test_fit_gaussian_symmetry_exact():
    rng = np.random.default_rng(0)
    stats = fit_gaussian(rng.normal(size=(40, 6)))
    np.testing.assert_array_equal(stats.cov, stats.cov.T)


def test_fit_gaussian_needs_two():
    with pytest.raises(ValueError, match="at least 2"):
        fit_gaussian([[1.0, 2.0]])


# ---------------------------------------------------------------------------
# fid


def test_fid_identical_stats_zero():
    rng = np.random.default_rng(1)
    stats = fit_gaussian(rng.normal(size=(50, 8)))
    assert fid(stats, stats) < 1e-8


def test_fid_1d_closed_forms():
    a = GaussianStats(mean=np.array([0.0]), cov=np.array([[1.0]]), n=10)
    b = GaussianStats(mean=np.array([1.0]), cov=np.array([[1.0]]), n=10)
    assert abs(fid(a, b) - 1.0) < 1e-12
    c = GaussianStats(mean=np.array([0.0]), cov=np.array([[4.0]]), n=10)
    d = GaussianStats(mean=np.array([0.0]), cov=np.array([[1.0]]), n=10)
    assert abs(fid(c, d) - 1.0) < 1e-12  # 4 + 1 - 2*2


def test_fid_matches_diagonal_oracle_50_pairs():
    rng = np.random.default_rng(2)
    for _ in range(50):
        dim = int(rng.integers(1, 17))
        mu_a = rng.normal(size=dim)
        mu_b = rng.normal(size=dim)
        var_a = rng.uniform(0.1, 3.0, size=dim)
        var_b = rng.uniform(0.1, 3.0, size=dim)
        a = GaussianStats(mean=mu_a, cov=np.diag(var_a), n=100)
        b = GaussianStats(mean=mu_b, cov=np.diag(var_b), n=100)
        expected = diagonal_fid_closed_form(mu_a, var_a, mu_b, var_b)
        assert abs(fid(a, b) - expected) < 1e-8
        assert abs(fid(a, b) - fid(b, a)) < 1e-8


def test_fid_symmetric_full_covariance():
    rng = np.random.default_rng(3)
    a = fit_gaussian(rng.normal(size=(60, 12)))
    b = fit_gaussian(1.5 * rng.normal(size=(80, 12)) + 0.3)
    assert abs(fid(a, b) - fid(b, a)) < 1e-8
    assert fid(a, b) >= 0.0


def test_fid_dimension_mismatch():
    a = fit_gaussian(np.zeros((3, 2)) + np.eye(3, 2))
    b = fit_gaussian(np.eye(4, 3))
    with pytest.raises(ValueError, match="dimension"):
        fid(a, b)


def test_fid_warns_on_strongly_negative_eigenvalue():
    bad = GaussianStats(mean=np.zeros(2), cov=np.array([[1.0, 0.0], [0.0, -0.5]]), n=5)
    good = GaussianStats(mean=np.zeros(2), cov=np.eye(2), n=5)
    with pytest.warns(UserWarning, match="clamping"):
        value = fid(bad, good)
    assert value >= 0.0


# ---------------------------------------------------------------------------
# ms-ssim


def test_msssim_identity(msssim_images):
    for image in msssim_images[:5]:
        assert abs(ms_ssim(image, image) - 1.0) < 1e-9


def test_msssim_symmetry(msssim_images):
    rng = np.random.default_rng(4)
    a = msssim_images[0]
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ms_ssim(a, b) - ms_ssim(b, a)) < 1e-12


def test_msssim_constant_images_match_oracle():
    weights = msssim_weights(3)
    a = np.full((64, 64, 3), 0.25)
    b = np.full((64, 64, 3), 0.75)
    got = ms_ssim(a, b, scales=3)
    assert abs(got - constant_msssim_oracle(0.25, 0.75, weights)) < 1e-9


def test_msssim_monotone_under_noise(msssim_images):
    rng = np.random.default_rng(6)
    for i, image in enumerate(msssim_images):
        noise = rng.standard_normal(image.shape)
        values = [ms_ssim(image, image + s * noise) for s in (0.05, 0.1, 0.2, 0.4)]
        assert all(a > b for a, b in zip(values, values[1:])), (i, values)


def test_msssim_size_guard():
    small = np.zeros((32, 32))
    with pytest.raises(ValueError, match="44"):
        ms_ssim(small, small, scales=3)
    # auto scale selection downgrades instead
    assert ms_ssim(small, small) == pytest.approx(1.0, abs=1e-9)


def test_msssim_weights_table():
    assert msssim_weights(3) == (0.2096, 0.4659, 0.3245)
    assert msssim_weights(5) == metrics.MSSSIM_WEIGHTS_5
    assert abs(sum(msssim_weights(2)) - 1.0) < 1e-12


def test_msssim_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        ms_ssim(np.zeros((64, 64)), np.zeros((64, 32)))


def test_mean_pairwise_identical_set():
    images = [np.full((48, 48), 0.5)] * 4
    assert abs(mean_pairwise_msssim(images, n_pairs=10, seed=1) - 1.0) < 1e-9


def test_mean_pairwise_noise_images_low():
    rng = np.random.default_rng(7)
    images = [rng.random((48, 48)) for _ in range(12)]
    value = mean_pairwise_msssim(images, n_pairs=200, seed=2)
    assert value < 0.2


def test_mean_pairwise_deterministic(msssim_images):
    v1 = mean_pairwise_msssim(msssim_images, n_pairs=30, seed=3)
    v2 = mean_pairwise_msssim(msssim_images, n_pairs=30, seed=3)
    assert v1 == v2
    v3 = mean_pairwise_msssim(msssim_images, n_pairs=30, seed=4)
    assert v1 != v3


def test_mean_pairwise_needs_two_images():
    with pytest.raises(ValueError, match="at least 2"):
        mean_pairwise_msssim([np.zeros((48, 48))], n_pairs=5, seed=0)


# ---------------------------------------------------------------------------
# fairness


def _rows(per_group):
    rows = []
    for group, (tp, fn, fp, tn) in per_group.items():
        rows += [{"group": group, "true_label": "malignant", "predicted_label": "malignant"}] * tp
        rows += [{"group": group, "true_label": "malignant", "predicted_label": "benign"}] * fn
        rows += [{"group": group, "true_label": "benign", "predicted_label": "malignant"}] * fp
        rows += [{"group": group, "true_label": "benign", "predicted_label": "benign"}] * tn
    return rows


def brute_force_gaps(per_group):
    """Oracle: recompute the gaps from raw confusion counts."""
    accs, tprs, fprs = [], [], []
    for tp, fn, fp, tn in per_group.values():
        accs.append((tp + tn) / (tp + fn + fp + tn))
        tprs.append(tp / (tp + fn))
        fprs.append(fp / (fp + tn))
    return (max(accs) - min(accs), max(tprs) - min(tprs),
            max(max(tprs) - min(tprs), max(fprs) - min(fprs)))


def test_fairness_hand_case():
    # group A: TPR 0.9 FPR 0.2; group B: TPR 0.7 FPR 0.3
    per_group = {"A": (9, 1, 2, 8), "B": (7, 3, 3, 7)}
    report = fairness_metrics(_rows(per_group))
    assert abs(report.equal_opportunity_gap - 0.2) < 1e-12
    assert abs(report.equalized_odds_gap - 0.2) < 1e-12


def test_fairness_identical_groups_zero_gaps():
    per_group = {"A": (5, 2, 1, 7), "B": (5, 2, 1, 7), "C": (5, 2, 1, 7)}
    report = fairness_metrics(_rows(per_group))
    assert report.accuracy_parity_gap == 0.0
    assert report.equal_opportunity_gap == 0.0
    assert report.equalized_odds_gap == 0.0


def test_fairness_perfect_classifier_zero_gaps():
    per_group = {"A": (4, 0, 0, 6), "B": (9, 0, 0, 2)}
    report = fairness_metrics(_rows(per_group))
    assert report.accuracy_parity_gap == 0.0
    assert report.equal_opportunity_gap == 0.0
    assert report.equalized_odds_gap == 0.0


def test_fairness_random_tables_match_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(100):
        per_group = {
            g: tuple(int(v) for v in rng.integers(1, 20, size=4)) for g in ("A", "B", "C")
        }
        report = fairness_metrics(_rows(per_group))
        acc_gap, eo_gap, eq_gap = brute_force_gaps(per_group)
        assert report.accuracy_parity_gap == acc_gap
        assert report.equal_opportunity_gap == eo_gap
        assert report.equalized_odds_gap == eq_gap


def test_fairness_undefined_when_group_lacks_positives():
    per_group = {"A": (3, 1, 1, 5)}
    rows = _rows(per_group) + [{"group": "B", "true_label": "benign",
                                "predicted_label": "benign"}] * 4
    report = fairness_metrics(rows)
    assert report.equal_opportunity_gap is None
    assert report.equalized_odds_gap is None
    assert any("no positives" in f for f in report.flags)
    assert report.accuracy_parity_gap is not None


def test_fairness_empty_log():
    with pytest.raises(ValueError, match="empty"):
        fairness_metrics([])


def test_fairness_report_csv(tmp_path):
    report = fairness_metrics(_rows({"A": (9, 1, 2, 8), "B": (7, 3, 3, 7)}))
    path = metrics.write_fairness_report(tmp_path / "fair.csv", report)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "group,n,accuracy,tpr,fpr"
    assert lines[-1].startswith("gaps,")
