import numpy as np
import pytest

from wcrlab.errors import DegenerateGradientError
from wcrlab.estimators import EstimatorModel, make_ols, resolve_estimator
from wcrlab.sensitivity import cosensitivity_mc, eps_sensitivity_mc, sensitivity_mc


# ---------------------------------------------------------------------------
# exact values (deterministic gradients)
# ---------------------------------------------------------------------------

def test_gaussian_location_mean_is_one_over_n(families):
    rep = sensitivity_mc(
        families["location:gaussian"], 0.2, resolve_estimator("sample_mean"), n=40, reps=8, seed=1
    )
    assert rep.estimate == pytest.approx(1.0 / 40, abs=1e-15)
    assert rep.stderr == 0.0


def test_uniform_scale_max_is_one(families):
    rep = sensitivity_mc(
        families["scale:uniform"], 1.0, resolve_estimator("sample_max"), n=100, reps=1, seed=2
    )
    assert rep.estimate == 1.0


def test_laplace_median_parity(families):
    fam = families["location:laplace"]
    med = resolve_estimator("sample_median")
    even = sensitivity_mc(fam, 0.0, med, n=100, reps=5, seed=3)
    odd = sensitivity_mc(fam, 0.0, med, n=101, reps=5, seed=3)
    assert even.estimate == 0.5 and even.stderr == 0.0
    assert odd.estimate == 1.0 and odd.stderr == 0.0


def test_ols_cosensitivity_exact(families):
    fam = families["regression"]
    est = make_ols(fam.extra["design"])
    rep = cosensitivity_mc(fam, np.array([0.5, -1.0, 2.0]), est, n=50, reps=3, seed=4)
    w = fam.extra["design"]
    np.testing.assert_allclose(rep.estimate, np.linalg.inv(w.T @ w), atol=1e-12)
    assert np.all(rep.stderr < 1e-15)


def test_scalar_cosensitivity_reduces_to_sensitivity(families):
    fam = families["scale:uniform"]
    est = resolve_estimator("wpe_uniform_scale")
    a = sensitivity_mc(fam, 1.0, est, n=25, reps=20, seed=5)
    b = cosensitivity_mc(fam, 1.0, est, n=25, reps=20, seed=5)
    assert b.estimate.shape == (1, 1)
    assert float(b.estimate[0, 0]) == pytest.approx(float(a.estimate), abs=1e-15)


def test_gauss2_moments_cosensitivity_oracle(families):
    # brute-force Gaussian moments at mu = 0, sigma = 1:
    # E[(1, 2X)^T (1, 2X)] / n = [[1, 0], [0, 4]] / n
    n = 30
    rep = cosensitivity_mc(
        families["gauss2"], (0.0, 1.0), resolve_estimator("gauss2_moments"),
        n=n, reps=4000, seed=6,
    )
    oracle = np.array([[1.0, 0.0], [0.0, 4.0]]) / n
    assert np.all(np.abs(rep.estimate - oracle) < 4.0 * rep.stderr + 1e-12)


# ---------------------------------------------------------------------------
# noisy-perturbation sensitivity
# ---------------------------------------------------------------------------

def test_eps_sensitivity_linear_is_eps_free(families):
    fam = families["location:gaussian"]
    est = resolve_estimator("sample_mean")
    a = eps_sensitivity_mc(fam, 0.0, est, n=50, eps=1e-2, reps=200, seed=7)
    b = eps_sensitivity_mc(fam, 0.0, est, n=50, eps=1e-5, reps=200, seed=7)
    # same standardized noise draws, linear statistic: identical up to roundoff
    assert float(a.estimate) == pytest.approx(float(b.estimate), rel=1e-9)
    assert float(a.estimate) == pytest.approx(1.0 / 50, rel=0.4)


def test_eps_sensitivity_of_max_near_one(families):
    rep = eps_sensitivity_mc(
        families["scale:uniform"], 1.0, resolve_estimator("sample_max"),
        n=100, eps=1e-4, reps=5000, seed=8,
    )
    assert abs(float(rep.estimate) - 1.0) < 0.05


def test_eps_sweep_monotone_convergence(families):
    fam = families["scale:uniform"]
    est = resolve_estimator("wpe_uniform_scale")
    n = 1000
    limit = 3.0 / n - 3.0 / (4.0 * n**3)
    gaps, errs = [], []
    for eps in (1e-2, 1e-3, 1e-4):
        rep = eps_sensitivity_mc(fam, 1.0, est, n=n, eps=eps, reps=400, seed=9)
        gaps.append(abs(float(rep.estimate) - limit))
        errs.append(float(rep.stderr))
    assert gaps[0] + errs[0] > gaps[1] - errs[1]
    assert gaps[1] + errs[1] > gaps[2] - errs[2]
    assert gaps[2] < 0.05 * limit + 3 * errs[2]


def test_eps_must_be_positive(families):
    with pytest.raises(ValueError):
        eps_sensitivity_mc(
            families["scale:uniform"], 1.0, resolve_estimator("sample_max"),
            n=10, eps=0.0, reps=2, seed=0,
        )


# ---------------------------------------------------------------------------
# report contract
# ---------------------------------------------------------------------------

def test_reports_are_bit_reproducible(families):
    fam = families["gauss2"]
    est = resolve_estimator("gauss2_moments")
    a = cosensitivity_mc(fam, (0.1, 2.0), est, n=20, reps=50, seed=11)
    b = cosensitivity_mc(fam, (0.1, 2.0), est, n=20, reps=50, seed=11)
    np.testing.assert_array_equal(a.estimate, b.estimate)
    np.testing.assert_array_equal(a.stderr, b.stderr)


def test_report_shape_invariants(families):
    rep = cosensitivity_mc(
        families["gauss2"], (0.0, 1.0), resolve_estimator("gauss2_moments"),
        n=15, reps=100, seed=12,
    )
    np.testing.assert_allclose(rep.estimate, rep.estimate.T)
    assert np.all(np.diag(rep.estimate) >= 0)
    assert np.all(rep.stderr >= 0)
    eigs = np.linalg.eigvalsh(rep.estimate)
    assert np.min(eigs) >= -1e-12
    rows = rep.csv_rows()
    assert len(rows) == 6  # 4 matrix entries + 2 variance entries
    assert {r["metric"] for r in rows} >= {"cosensitivity[0,0]", "variance[1]"}


def test_variance_reported_alongside(families):
    rep = sensitivity_mc(
        families["location:gaussian"], 0.0, resolve_estimator("sample_mean"),
        n=30, reps=400, seed=13,
    )
    # for the Gaussian location mean, variance and sensitivity coincide at 1/n
    assert abs(float(rep.variance) - 1.0 / 30) < 4.0 * float(rep.variance_stderr)


def test_gaussian_poincare_inequality(families):
    fam = families["location:gaussian"]
    for est_id in ("sample_mean", "sample_median"):
        rep = sensitivity_mc(fam, 0.0, resolve_estimator(est_id), n=25, reps=600, seed=14)
        combined = float(rep.stderr) + float(rep.variance_stderr)
        assert float(rep.variance) <= float(rep.estimate) + 3.0 * combined + 1e-12


def test_degenerate_gradient_error(families):
    bad = EstimatorModel(
        id="nan_grad", k=1,
        value=lambda x: float(np.mean(x)),
        jacobians=lambda x: np.full((len(x), 1, 1), np.nan),
    )
    with pytest.raises(DegenerateGradientError):
        sensitivity_mc(families["location:gaussian"], 0.0, bad, n=5, reps=20, seed=15)
