"""Statistics with per-sample Jacobians.

An :class:`EstimatorModel` is a statistic ``T_n`` together with the n matrices
``D_{x_i} T_n`` of shape (d, k).  Jacobians are analytic wherever a closed
form is known; :func:`finite_difference_jacobians` provides the fallback and
the cross-check used in tests.

Samples are arrays of shape (n,) for d = 1 or (n, d); ``jacobians`` returns a
single array of shape (n, d, k).
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, PerturbationError

__all__ = [
    "EstimatorModel",
    "register_builtin_estimators",
    "resolve_estimator",
    "finite_difference_jacobians",
    "with_finite_difference",
    "compose",
]

log = logging.getLogger(__name__)

_FD_STEP = float(np.cbrt(np.finfo(float).eps))  # ~6.06e-6


@dataclass
class EstimatorModel:
    id: str
    k: int
    value: Callable  # sample -> scalar or (k,)
    jacobians: Callable  # sample -> (n, d, k)
    gradient_kind: str = "analytic"  # or "finite-difference"
    target: Optional[str] = None  # description of the estimand it tracks


def _as2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _value_vec(est, x):
    return np.atleast_1d(np.asarray(est.value(x), dtype=float))


def finite_difference_jacobians(estimator, sample, step=None):
    """Central-difference per-sample Jacobians, shape (n, d, k).

    The step per coordinate is cbrt(machine epsilon) * (1 + |x_ij|) unless
    ``step`` overrides it.  A non-finite estimator value at a perturbed point
    raises :class:`PerturbationError` naming the offending sample.
    """
    x = np.asarray(sample, dtype=float)
    flat = x.ndim == 1
    x2 = _as2d(x)
    n, d = x2.shape
    out = np.empty((n, d, estimator.k))
    for i in range(n):
        for j in range(d):
            h = step if step is not None else _FD_STEP * (1.0 + abs(x2[i, j]))
            xp = x2.copy()
            xp[i, j] += h
            xm = x2.copy()
            xm[i, j] -= h
            vp = _value_vec(estimator, xp[:, 0] if flat else xp)
            vm = _value_vec(estimator, xm[:, 0] if flat else xm)
            if not (np.all(np.isfinite(vp)) and np.all(np.isfinite(vm))):
                raise PerturbationError(
                    f"{estimator.id}: non-finite value perturbing sample {i}, coord {j}",
                    index=(i, j),
                )
            out[i, j] = (vp - vm) / (2.0 * h)
    return out


def with_finite_difference(estimator):
    """Variant of ``estimator`` whose Jacobians come from central differences."""
    return replace(
        estimator,
        id=f"{estimator.id}|fd",
        jacobians=lambda x: finite_difference_jacobians(estimator, x),
        gradient_kind="finite-difference",
    )


def compose(estimator, g, dg, new_id=None, k=None):
    """The estimator g(T) with chain-rule Jacobians J_i Dg(T)."""
    k_out = k if k is not None else estimator.k

    def value(x):
        return np.asarray(g(_value_vec(estimator, x)), dtype=float)

    def jac(x):
        base = estimator.jacobians(x)  # (n, d, k_in)
        dgm = np.asarray(dg(_value_vec(estimator, x)), dtype=float).reshape(estimator.k, k_out)
        return np.einsum("ndk,kl->ndl", base, dgm)

    return EstimatorModel(
        id=new_id or f"{estimator.id}|composed",
        k=k_out,
        value=value,
        jacobians=jac,
        gradient_kind=estimator.gradient_kind,
        target=None,
    )


# ---------------------------------------------------------------------------
# Builtins
# ---------------------------------------------------------------------------

def _argmax_lowest(x):
    """Index of the maximum; exact ties go to the lowest index (logged)."""
    x = np.asarray(x)
    i = int(np.argmax(x))
    if np.count_nonzero(x == x[i]) > 1:
        log.info("tie at the sample maximum; gradient assigned to index %d", i)
    return i


def make_sample_mean(d=1):
    def jac(x):
        x2 = _as2d(x)
        n, dd = x2.shape
        return np.broadcast_to(np.eye(dd) / n, (n, dd, dd)).copy()

    return EstimatorModel(
        id="sample_mean",
        k=d,
        value=lambda x: (float(np.mean(x)) if _as2d(x).shape[1] == 1 else _as2d(x).mean(axis=0)),
        jacobians=jac,
        target="location parameter",
    )


def make_ble_uniform_scale():
    def jac(x):
        n = len(x)
        return np.full((n, 1, 1), 2.0 / n)

    return EstimatorModel(
        id="ble_uniform_scale",
        k=1,
        value=lambda x: 2.0 * float(np.mean(x)),
        jacobians=jac,
        target="uniform scale theta",
    )


def make_sample_max():
    def jac(x):
        n = len(x)
        out = np.zeros((n, 1, 1))
        out[_argmax_lowest(x), 0, 0] = 1.0
        return out

    return EstimatorModel(
        id="sample_max",
        k=1,
        value=lambda x: float(np.max(x)),
        jacobians=jac,
        target="uniform scale theta (MLE)",
    )


def make_sample_median():
    def value(x):
        return float(np.median(x))

    def jac(x):
        x = np.asarray(x, dtype=float)
        n = len(x)
        order = np.argsort(x, kind="stable")
        out = np.zeros((n, 1, 1))
        if n % 2 == 1:
            out[order[n // 2], 0, 0] = 1.0
        else:
            out[order[n // 2 - 1], 0, 0] = 0.5
            out[order[n // 2], 0, 0] = 0.5
        return out

    return EstimatorModel(
        id="sample_median",
        k=1,
        value=value,
        jacobians=jac,
        target="location parameter (Laplace MLE)",
    )


def make_second_moment_mean():
    def jac(x):
        x2 = _as2d(x)
        return (2.0 * x2 / len(x2))[:, :, None]

    return EstimatorModel(
        id="second_moment_mean",
        k=1,
        value=lambda x: float(np.mean(np.sum(_as2d(x) ** 2, axis=1))),
        jacobians=jac,
        target="squared scale (chi = theta^2)",
    )


def make_sample_variance():
    """Unbiased sample variance (divisor n - 1), d = 1."""

    def value(x):
        return float(np.var(np.asarray(x, dtype=float), ddof=1))

    def jac(x):
        x = np.asarray(x, dtype=float)
        n = len(x)
        return (2.0 * (x - x.mean()) / (n - 1.0))[:, None, None]

    return EstimatorModel(
        id="sample_variance",
        k=1,
        value=value,
        jacobians=jac,
        target="Gaussian variance sigma^2",
    )


def make_gauss2_moments():
    """Joint (mean, second moment); exactly efficient for (mu, mu^2 + sigma^2)."""

    def value(x):
        x = np.asarray(x, dtype=float)
        return np.array([x.mean(), np.mean(x**2)])

    def jac(x):
        x = np.asarray(x, dtype=float)
        n = len(x)
        out = np.empty((n, 1, 2))
        out[:, 0, 0] = 1.0 / n
        out[:, 0, 1] = 2.0 * x / n
        return out

    return EstimatorModel(
        id="gauss2_moments",
        k=2,
        value=value,
        jacobians=jac,
        target="(mu, mu^2 + sigma^2)",
    )


def make_phi_mean(family):
    """Mean of the transport-family potential: the exactly efficient statistic."""
    from .rng import stream

    st = family.structure
    if st is None:
        raise DomainError(f"family {family.id!r} has no transport structure")
    probe = family.sampler(family.check_theta_grid[0], 2, stream(0, 0))
    k = np.asarray(st.potential(probe)).shape[1]

    def value(x):
        return np.asarray(st.potential(x), dtype=float).mean(axis=0)

    def jac(x):
        d = np.asarray(st.dpotential(x), dtype=float)
        return d / len(d)

    return EstimatorModel(
        id=f"phi_mean:{family.id}",
        k=k,
        value=value,
        jacobians=jac,
        target="transport-family estimand chi + v",
    )


def make_ols(design):
    """Ordinary least squares for a fixed design matrix."""
    design = np.asarray(design, dtype=float)
    pinv = np.linalg.solve(design.T @ design, design.T)  # (p, n)
    p = design.shape[1]

    def value(x):
        return pinv @ np.asarray(x, dtype=float)

    def jac(x):
        n = len(x)
        if n != design.shape[0]:
            raise DomainError(f"ols: sample length {n} != design rows {design.shape[0]}")
        return pinv.T[:, None, :].reshape(n, 1, p).copy()

    return EstimatorModel(
        id="ols",
        k=p,
        value=value,
        jacobians=jac,
        target="regression coefficients",
    )


def _ranks(x):
    """Rank of each sample among the order statistics, 1-based, stable ties."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    r = np.empty(len(x), dtype=int)
    r[order] = np.arange(1, len(x) + 1)
    return r


def make_wpe_uniform_scale():
    """Order-statistic form of the uniform-scale projection estimator.

    T = (3 / (2 n^2)) sum_i (2i - 1) X_(i); the gradient at sample i depends
    only on its rank.
    """

    def value(x):
        xs = np.sort(np.asarray(x, dtype=float), kind="stable")
        n = len(xs)
        i = np.arange(1, n + 1)
        return float(1.5 / n**2 * np.dot(2 * i - 1, xs))

    def jac(x):
        n = len(x)
        r = _ranks(x)
        return (1.5 / n**2 * (2 * r - 1)).reshape(n, 1, 1).astype(float)

    return EstimatorModel(
        id="wpe_uniform_scale",
        k=1,
        value=value,
        jacobians=jac,
        target="uniform scale theta (projection)",
    )


def make_wpe_uniform_scale_alt():
    """The rank-weighted variant 3/(n(n-1)) sum_i i X_(i).

    Shares the projection estimator's asymptotic sensitivity; its finite-n
    mean carries a multiplicative (2n+1)/(2n-2) factor.
    """

    def value(x):
        xs = np.sort(np.asarray(x, dtype=float), kind="stable")
        n = len(xs)
        return float(3.0 / (n * (n - 1.0)) * np.dot(np.arange(1, n + 1), xs))

    def jac(x):
        n = len(x)
        r = _ranks(x)
        return (3.0 / (n * (n - 1.0)) * r).reshape(n, 1, 1).astype(float)

    return EstimatorModel(
        id="wpe_uniform_scale_alt",
        k=1,
        value=value,
        jacobians=jac,
        target="uniform scale theta (rank-weighted)",
    )


def make_wpe_1d(family, window=None):
    """Generic 1D projection estimator wrapper; see :mod:`wcrlab.wpe`."""
    from . import wpe as _wpe

    def value(x):
        fit = _wpe.wpe_1d(family, np.asarray(x, dtype=float), window=window)
        return np.atleast_1d(fit.theta_hat)

    def jac(x):
        x = np.asarray(x, dtype=float)
        fit = _wpe.wpe_1d(family, x, window=window)
        g = _wpe.wpe_gradients_1d(family, x, fit)  # (n, p)
        return g[:, None, :]

    return EstimatorModel(
        id=f"wpe1d:{family.id}",
        k=family.p,
        value=value,
        jacobians=jac,
        target="model parameter theta (projection)",
    )


def make_wpe_2d(family, window):
    """Planar projection estimator wrapper (value only; gradients are not exposed)."""
    from . import wpe as _wpe

    def value(x):
        fit = _wpe.wpe_2d(family, _as2d(x), window)
        return np.atleast_1d(fit.theta_hat)

    def jac(x):
        raise DomainError("per-sample gradients of the planar projection are not implemented")

    return EstimatorModel(
        id=f"wpe2d:{family.id}",
        k=family.p,
        value=value,
        jacobians=jac,
        target="model parameter theta (projection)",
    )


def register_builtin_estimators():
    ests = [
        make_sample_mean(),
        make_ble_uniform_scale(),
        make_sample_max(),
        make_sample_median(),
        make_second_moment_mean(),
        make_sample_variance(),
        make_gauss2_moments(),
        make_wpe_uniform_scale(),
        make_wpe_uniform_scale_alt(),
    ]
    return {e.id: e for e in ests}


def resolve_estimator(est_id, family=None, catalog=None):
    """Look up an estimator id, handling the parametric forms.

    ``phi_mean:<family>`` and ``wpe1d:<family>`` bind to the given (or named)
    family; ``ols`` takes its design from the paired regression family, and
    ``ols:<path.csv>`` loads one from disk.
    """
    catalog = catalog if catalog is not None else register_builtin_estimators()
    if est_id in catalog:
        return catalog[est_id]
    if est_id.startswith("phi_mean:") or est_id.startswith("wpe1d:"):
        from .families import resolve_family

        kind, fam_id = est_id.split(":", 1)
        fam = family if family is not None and family.id == fam_id else resolve_family(fam_id)
        return make_phi_mean(fam) if kind == "phi_mean" else make_wpe_1d(fam)
    if est_id == "ols":
        if family is None or "design" not in family.extra:
            raise DomainError("ols needs a regression family (or ols:<design.csv>)")
        return make_ols(family.extra["design"])
    if est_id.startswith("ols:"):
        design = np.loadtxt(est_id.split(":", 1)[1], delimiter=",", ndmin=2)
        return make_ols(design)
    raise DomainError(f"unknown estimator id {est_id!r}")
