import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fald.metrics import (
    GaussianSummary,
    MetricsError,
    PredictiveRecord,
    RunningPredictiveAverage,
    classification_metrics,
    empirical_summary,
    predictive_average,
    sym_sqrt,
    w2_gaussian,
    w2_gaussian_parts,
)


from tests_support_w2 import w2_cholesky_oracle


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    m = a @ a.T + 0.1 * np.eye(d)
    return scale * m


def random_summary(rng, d):
    return GaussianSummary(rng.standard_normal(d), random_spd(rng, d))


# ---------------------------------------------------------------------------
# empirical summary


def test_identical_samples_zero_covariance():
    samples = np.tile(np.array([1.0, -2.0]), (5, 1))
    summary = empirical_summary(samples)
    assert np.array_equal(summary.cov, np.zeros((2, 2)))


def test_two_point_arithmetic():
    summary = empirical_summary(np.array([[0.0], [2.0]]))
    assert summary.mean[0] == pytest.approx(1.0)
    assert summary.cov[0, 0] == pytest.approx(2.0)  # divisor R - 1 = 1


def test_moment_recovery():
    rng = np.random.default_rng(0)
    mean = np.array([1.0, -0.5, 2.0])
    cov = random_spd(rng, 3)
    samples = rng.multivariate_normal(mean, cov, size=100_000)
    summary = empirical_summary(samples)
    assert np.linalg.norm(summary.cov - cov) / np.linalg.norm(cov) < 0.02
    assert np.linalg.norm(summary.mean - mean) < 0.05


def test_single_sample_rejected():
    with pytest.raises(MetricsError):
        empirical_summary(np.array([[1.0, 2.0]]))


# ---------------------------------------------------------------------------
# matrix square root


def test_sqrt_identity():
    assert np.allclose(sym_sqrt(np.eye(3)), np.eye(3))


def test_sqrt_diagonal():
    assert np.allclose(sym_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


def test_sqrt_self_consistency():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = random_spd(rng, 4)
        root = sym_sqrt(m)
        assert np.linalg.norm(root @ root - m) < 1e-9


def test_sqrt_rejects_asymmetric():
    with pytest.raises(MetricsError, match="asymmetric"):
        sym_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_sqrt_clamps_roundoff_negatives():
    m = np.array([[1e-14, 0.0], [0.0, -1e-14]])
    root = sym_sqrt(m)
    assert np.all(np.isfinite(root))


# ---------------------------------------------------------------------------
# Gaussian W2


def test_w2_identical_is_zero():
    rng = np.random.default_rng(1)
    s = random_summary(rng, 3)
    assert w2_gaussian(s, s) < 1e-9


def test_w2_one_dimensional_closed_form():
    a = GaussianSummary(np.array([0.0]), np.array([[1.0]]))
    b = GaussianSummary(np.array([1.0]), np.array([[1.0]]))
    assert w2_gaussian(a, b) == pytest.approx(1.0, abs=1e-12)


def test_w2_commuting_diagonal():
    a = GaussianSummary(np.zeros(2), np.diag([4.0, 1.0]))
    b = GaussianSummary(np.zeros(2), np.diag([1.0, 1.0]))
    assert w2_gaussian(a, b) == pytest.approx(1.0, abs=1e-9)


def test_w2_matches_cholesky_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = int(rng.integers(1, 6))
        a, b = random_summary(rng, d), random_summary(rng, d)
        assert abs(w2_gaussian(a, b) - w2_cholesky_oracle(a, b)) < 1e-8


def test_w2_symmetry():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b = random_summary(rng, 3), random_summary(rng, 3)
        assert abs(w2_gaussian(a, b) - w2_gaussian(b, a)) < 1e-9


def test_w2_rotation_invariance():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a, b = random_summary(rng, 3), random_summary(rng, 3)
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        ra = GaussianSummary(q @ a.mean, q @ a.cov @ q.T)
        rb = GaussianSummary(q @ b.mean, q @ b.cov @ q.T)
        assert abs(w2_gaussian(a, b) - w2_gaussian(ra, rb)) < 1e-8


def test_w2_identity_of_indiscernibles():
    rng = np.random.default_rng(10)
    a = random_summary(rng, 2)
    b = GaussianSummary(a.mean + 1e-8, a.cov * (1 + 1e-8))
    assert w2_gaussian(a, b) < 1e-6
    assert np.max(np.abs(a.mean - b.mean)) < 1e-4
    assert np.max(np.abs(a.cov - b.cov)) < 1e-4


def test_w2_dimension_mismatch():
    rng = np.random.default_rng(11)
    with pytest.raises(MetricsError, match="dimension"):
        w2_gaussian(random_summary(rng, 2), random_summary(rng, 3))


def test_w2_parts_decompose_total():
    rng = np.random.default_rng(12)
    a, b = random_summary(rng, 3), random_summary(rng, 3)
    total, mean_part, cov_part = w2_gaussian_parts(a, b)
    assert total == pytest.approx(np.hypot(mean_part, cov_part))


# ---------------------------------------------------------------------------
# classification metrics


def one_hot_records(labels, n_classes):
    out = []
    for y in labels:
        p = np.zeros(n_classes)
        p[y] = 1.0
        out.append(PredictiveRecord(p, y))
    return out


def test_perfect_one_hot_predictions():
    scored = classification_metrics(one_hot_records([0, 1, 2, 1], 3))
    assert scored.accuracy == 1.0
    assert scored.brier == 0.0
    assert scored.ece == pytest.approx(0.0)


def test_uniform_binary_brier():
    records = [PredictiveRecord(np.array([0.5, 0.5]), 0) for _ in range(10)]
    scored = classification_metrics(records)
    assert scored.brier == pytest.approx(0.5)
    assert scored.accuracy == 1.0  # argmax tie resolves to class 0


def test_argmax_tie_goes_to_lowest_index():
    scored = classification_metrics([PredictiveRecord(np.array([0.5, 0.5]), 1)])
    assert scored.accuracy == 0.0


def test_calibrated_predictor_low_ece():
    # construct records whose per-bin accuracy equals the stated confidence
    rng = np.random.default_rng(3)
    records = []
    for _ in range(10_000):
        conf = rng.uniform(0.55, 0.95)
        correct = rng.random() < conf
        probs = np.array([conf, 1 - conf]) if correct else np.array([1 - conf, conf])
        records.append(PredictiveRecord(probs, 0))
    scored = classification_metrics(records, ece_bins=10)
    assert scored.ece < 0.02


def test_metric_ranges():
    rng = np.random.default_rng(5)
    records = []
    for _ in range(500):
        p = rng.random(4)
        p /= p.sum()
        records.append(PredictiveRecord(p, int(rng.integers(4))))
    scored = classification_metrics(records)
    assert 0.0 <= scored.accuracy <= 1.0
    assert 0.0 <= scored.brier <= 2.0  # multiclass sum-of-squares convention
    assert 0.0 <= scored.ece <= 1.0


def test_invalid_probability_vector_rejected():
    with pytest.raises(MetricsError):
        PredictiveRecord(np.array([0.7, 0.7]), 0)
    with pytest.raises(MetricsError):
        PredictiveRecord(np.array([-0.1, 1.1]), 0)


def test_empty_records_rejected():
    with pytest.raises(MetricsError):
        classification_metrics([])


@given(st.integers(min_value=1, max_value=40))
@settings(max_examples=20, deadline=None)
def test_brier_bounded_for_any_simplex_input(seed):
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(50):
        p = rng.random(3)
        p /= p.sum()
        records.append(PredictiveRecord(p, int(rng.integers(3))))
    scored = classification_metrics(records)
    assert scored.brier <= 2.0 and scored.ece <= 1.0


# ---------------------------------------------------------------------------
# predictive averaging


def test_single_sample_average_is_itself():
    probs = np.array([[0.2, 0.8], [0.6, 0.4]])
    records = predictive_average([probs], [1, 0])
    assert np.allclose(records[0].probs, probs[0])


def test_two_sample_average():
    p = np.array([[0.2, 0.8]])
    q = np.array([[0.6, 0.4]])
    records = predictive_average([p, q], [0])
    assert np.allclose(records[0].probs, [0.4, 0.6])


def test_running_mean_matches_batch_mean():
    rng = np.random.default_rng(6)
    mats = []
    for _ in range(100):
        p = rng.random((20, 3))
        p /= p.sum(axis=1, keepdims=True)
        mats.append(p)
    acc = RunningPredictiveAverage()
    for m in mats:
        acc.add(m)
    assert np.max(np.abs(acc.mean() - np.mean(mats, axis=0))) < 1e-12


def test_shape_drift_rejected():
    acc = RunningPredictiveAverage()
    acc.add(np.full((2, 2), 0.5))
    with pytest.raises(MetricsError, match="drift"):
        acc.add(np.full((3, 2), 0.5))
