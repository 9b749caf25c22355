import numpy as np
import pytest

from wcrlab.errors import PerturbationError
from wcrlab.estimators import (
    EstimatorModel,
    compose,
    finite_difference_jacobians,
    make_ols,
    make_phi_mean,
    resolve_estimator,
)
from wcrlab.rng import stream

FD_RTOL = 1e-5


def _design(rows=50, cols=3):
    t = np.linspace(0.0, 1.0, rows)
    return np.column_stack([np.ones(rows), t, t**2])[:, :cols]


# ---------------------------------------------------------------------------
# frozen example values
# ---------------------------------------------------------------------------

def test_sample_max_example(estimators):
    est = estimators["sample_max"]
    x = np.array([0.2, 0.9, 0.5])
    assert est.value(x) == 0.9
    np.testing.assert_array_equal(est.jacobians(x)[:, 0, 0], [0.0, 1.0, 0.0])


def test_sample_mean_jacobians(estimators):
    est = estimators["sample_mean"]
    x = np.array([0.1, -2.0, 0.5, 4.0])
    np.testing.assert_array_equal(est.jacobians(x)[:, 0, 0], np.full(4, 0.25))


def test_order_statistic_estimator_example(estimators):
    # (3 / (2 * 9)) * (1*1 + 3*2 + 5*3) = 11/3
    est = estimators["wpe_uniform_scale"]
    assert est.value(np.array([1.0, 2.0, 3.0])) == pytest.approx(11.0 / 3.0, abs=1e-14)
    jac = est.jacobians(np.array([2.0, 1.0, 3.0]))[:, 0, 0]
    np.testing.assert_allclose(jac, np.array([3.0, 1.0, 5.0]) * 1.5 / 9.0)


def test_median_gradients(estimators):
    est = estimators["sample_median"]
    np.testing.assert_array_equal(
        est.jacobians(np.array([1.0, 2.0, 3.0]))[:, 0, 0], [0.0, 1.0, 0.0]
    )
    jac = est.jacobians(np.array([4.0, 1.0, 3.0, 2.0]))[:, 0, 0]
    np.testing.assert_array_equal(jac, [0.0, 0.0, 0.5, 0.5])


def test_max_tie_goes_to_lowest_index(estimators):
    est = estimators["sample_max"]
    jac = est.jacobians(np.array([2.0, 5.0, 5.0]))[:, 0, 0]
    np.testing.assert_array_equal(jac, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_fd_sample_mean():
    est = resolve_estimator("sample_mean")
    jac = finite_difference_jacobians(est, np.array([0.3, 1.0, -2.0, 0.7]))
    np.testing.assert_allclose(jac[:, 0, 0], 0.25, atol=1e-10)


def test_fd_second_moment_example():
    est = resolve_estimator("second_moment_mean")
    jac = finite_difference_jacobians(est, np.array([1.0, -2.0]))
    np.testing.assert_allclose(jac[:, 0, 0], [1.0, -2.0], rtol=1e-8)


def test_fd_median_example():
    est = resolve_estimator("sample_median")
    jac = finite_difference_jacobians(est, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(jac[:, 0, 0], [0.0, 1.0, 0.0], atol=1e-10)


@pytest.mark.parametrize(
    "est_id",
    [
        "sample_mean",
        "ble_uniform_scale",
        "sample_max",
        "sample_median",
        "second_moment_mean",
        "sample_variance",
        "gauss2_moments",
        "wpe_uniform_scale",
        "wpe_uniform_scale_alt",
    ],
)
def test_fd_matches_analytic(est_id):
    est = resolve_estimator(est_id)
    x = stream(42, hash(est_id) % 512).standard_normal(9) + 3.0
    analytic = est.jacobians(x)
    fd = finite_difference_jacobians(est, x)
    np.testing.assert_allclose(fd, analytic, rtol=FD_RTOL, atol=1e-7)


def test_fd_matches_analytic_phi_mean(families):
    est = make_phi_mean(families["pareto"])
    x = families["pareto"].sampler(3.0, 8, stream(43, 0))
    np.testing.assert_allclose(
        finite_difference_jacobians(est, x), est.jacobians(x), rtol=1e-4
    )


def test_fd_perturbation_error():
    bad = EstimatorModel(
        id="sqrt_first", k=1,
        value=lambda x: float(np.sqrt(x[0])),
        jacobians=lambda x: None,
    )
    with np.errstate(invalid="ignore"):
        with pytest.raises(PerturbationError):
            finite_difference_jacobians(bad, np.array([0.0, 1.0]))


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------

def test_chain_rule_composition():
    base = resolve_estimator("second_moment_mean")
    comp = compose(base, g=lambda t: np.sqrt(t), dg=lambda t: 0.5 / np.sqrt(t))
    x = stream(44, 0).standard_normal(12) + 2.0
    fd = finite_difference_jacobians(comp, x)
    np.testing.assert_allclose(fd, comp.jacobians(x), rtol=1e-6)


def test_permutation_equivariance():
    rng = stream(45, 0)
    x = rng.standard_normal(11)
    perm = rng.permutation(11)
    for est_id in ("sample_max", "sample_median", "wpe_uniform_scale", "second_moment_mean"):
        est = resolve_estimator(est_id)
        np.testing.assert_array_equal(est.jacobians(x)[perm], est.jacobians(x[perm]))


def test_ols_jacobian_identity():
    w = _design()
    est = make_ols(w)
    x = stream(46, 0).standard_normal(50)
    jac = est.jacobians(x)[:, 0, :]  # (n, p)
    np.testing.assert_allclose(jac, w @ np.linalg.inv(w.T @ w), atol=1e-12)
    # independent of the response
    jac2 = est.jacobians(x + 5.0)[:, 0, :]
    np.testing.assert_array_equal(jac, jac2)


def test_resolver_parametric_ids(families):
    est = resolve_estimator("phi_mean:pareto")
    assert est.k == 1
    est = resolve_estimator("ols", families["regression"])
    assert est.k == 3
    with pytest.raises(Exception):
        resolve_estimator("nope")
