"""Monte Carlo evaluation of sensitivity, cosensitivity, and their noisy analog.

Sensitivity is the expected squared gradient norm of a statistic over all
samples, E sum_i |grad_{x_i} T_n|^2: the instability of T_n under an
infinitesimal additive perturbation of the whole data set.  The cosensitivity
matrix E sum_i (D_{x_i} T_n)^T D_{x_i} T_n is its k x k matrix analog (the
matrix is k x k for a k-valued statistic).  The epsilon version perturbs with
actual Gaussian noise of scale epsilon and converges to the former as epsilon
shrinks.

Replicates draw from streams derived as (seed, replicate-index) and are folded
in index order, so results are bit-reproducible and independent of any
parallel schedule.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateGradientError
from .rng import stream

__all__ = [
    "SensitivityReport",
    "sensitivity_mc",
    "cosensitivity_mc",
    "eps_sensitivity_mc",
]

_MAX_BAD_FRACTION = 1e-3


@dataclass
class SensitivityReport:
    estimate: np.ndarray  # scalar () or (k, k)
    stderr: np.ndarray
    reps: int
    n: int
    seed: int
    family_id: str
    estimator_id: str
    theta: object
    metric: str
    epsilon: Optional[float] = None
    variance: Optional[np.ndarray] = None  # plain MC variance of T, same shape logic
    variance_stderr: Optional[np.ndarray] = None
    mean_value: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def csv_rows(self):
        """Serialize to (family, estimator, theta, n, reps, eps, metric, value, stderr, seed) rows."""
        rows = []

        def emit(metric, val, err):
            val = np.asarray(val, dtype=float)
            err = np.asarray(err, dtype=float)
            if val.ndim == 0:
                names_vals = [(metric, float(val), float(err))]
            elif val.ndim == 1:
                names_vals = [
                    (f"{metric}[{a}]" if val.size > 1 else metric, float(val[a]), float(err[a]))
                    for a in range(val.size)
                ]
            else:
                names_vals = [
                    (f"{metric}[{a},{b}]", float(val[a, b]), float(err[a, b]))
                    for a in range(val.shape[0])
                    for b in range(val.shape[1])
                ]
            for name, v, e in names_vals:
                rows.append(
                    {
                        "family": self.family_id,
                        "estimator": self.estimator_id,
                        "theta": _fmt_theta(self.theta),
                        "n": self.n,
                        "reps": self.reps,
                        "eps": "" if self.epsilon is None else repr(self.epsilon),
                        "metric": name,
                        "value": repr(v),
                        "stderr": repr(e),
                        "seed": self.seed,
                    }
                )

        emit(self.metric, self.estimate, self.stderr)
        if self.variance is not None:
            emit("variance", self.variance, self.variance_stderr)
        return rows


def _fmt_theta(theta):
    arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if arr.size == 1:
        return repr(float(arr[0]))
    return "[" + ",".join(repr(float(v)) for v in arr) + "]"


def _variance_of(values):
    """Replicate-level mean/variance of T with a stderr for the variance."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    reps = v.shape[0]
    mean = v.mean(axis=0)
    if reps < 2:
        zero = np.zeros_like(mean)
        return mean, zero, zero
    var = v.var(axis=0, ddof=1)
    centered = (v - mean) ** 2
    var_se = centered.std(axis=0, ddof=1) / math.sqrt(reps)
    return mean, var, var_se


def _run_replicates(family, theta, estimator, n, reps, seed, per_rep):
    """Shared replicate loop with degenerate-gradient accounting."""
    stats, values, bad = [], [], 0
    for r in range(reps):
        rng = stream(seed, r)
        x = family.sampler(theta, n, rng)
        s, tval = per_rep(x, rng)
        if s is None or not np.all(np.isfinite(np.atleast_1d(s))):
            bad += 1
            continue
        stats.append(s)
        values.append(tval)
    if bad > _MAX_BAD_FRACTION * reps:
        raise DegenerateGradientError(
            f"{estimator.id} on {family.id}: {bad}/{reps} replicates had undefined gradients"
        )
    return np.asarray(stats), np.asarray(values)


def _finish(stats, values, *, matrix, family, theta, estimator, n, reps, seed, metric, eps=None):
    used = stats.shape[0]
    est = stats.mean(axis=0)
    se = stats.std(axis=0, ddof=1) / math.sqrt(used) if used > 1 else np.zeros_like(est)
    if matrix:
        est = 0.5 * (est + est.T)
    mean, var, var_se = _variance_of(values)
    return SensitivityReport(
        estimate=est,
        stderr=se,
        reps=used,
        n=n,
        seed=seed,
        family_id=family.id,
        estimator_id=estimator.id,
        theta=theta,
        metric=metric,
        epsilon=eps,
        variance=var if var.size > 1 else var[0],
        variance_stderr=var_se if var_se.size > 1 else var_se[0],
        mean_value=mean if mean.size > 1 else mean[0],
    )


def sensitivity_mc(family, theta, estimator, n, reps, seed):
    """Monte Carlo sensitivity: mean over replicates of sum_i |grad_i T|^2."""

    def per_rep(x, rng):
        jac = estimator.jacobians(x)
        return float(np.sum(jac**2)), np.atleast_1d(estimator.value(x))

    stats, values = _run_replicates(family, theta, estimator, n, reps, seed, per_rep)
    return _finish(
        stats, values, matrix=False, family=family, theta=theta, estimator=estimator,
        n=n, reps=reps, seed=seed, metric="sensitivity",
    )


def cosensitivity_mc(family, theta, estimator, n, reps, seed):
    """Monte Carlo cosensitivity matrix: mean of sum_i (D_i T)^T (D_i T).

    The per-replicate matrices are kept in ``extras["replicate_stats"]`` so
    downstream consumers can propagate errors through spectral functions.
    """

    def per_rep(x, rng):
        jac = estimator.jacobians(x)  # (n, d, k)
        return np.einsum("nda,ndb->ab", jac, jac), np.atleast_1d(estimator.value(x))

    stats, values = _run_replicates(family, theta, estimator, n, reps, seed, per_rep)
    report = _finish(
        stats, values, matrix=True, family=family, theta=theta, estimator=estimator,
        n=n, reps=reps, seed=seed, metric="cosensitivity",
    )
    report.extras["replicate_stats"] = stats
    return report


def eps_sensitivity_mc(family, theta, estimator, n, eps, reps, seed):
    """Noisy-perturbation sensitivity |T(X + xi) - T(X)|^2 / eps^2.

    The Gaussian noise is drawn standard and scaled by eps, so for linear
    statistics the estimate is exactly independent of eps (same stream, same
    standardized draw).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")

    def per_rep(x, rng):
        shape = x.shape if hasattr(x, "shape") else (len(x),)
        z = rng.standard_normal(shape)
        t0 = np.atleast_1d(np.asarray(estimator.value(x), dtype=float))
        t1 = np.atleast_1d(np.asarray(estimator.value(x + eps * z), dtype=float))
        return float(np.sum((t1 - t0) ** 2)) / eps**2, t0

    stats, values = _run_replicates(family, theta, estimator, n, reps, seed, per_rep)
    return _finish(
        stats, values, matrix=False, family=family, theta=theta, estimator=estimator,
        n=n, reps=reps, seed=seed, metric="eps_sensitivity", eps=eps,
    )
