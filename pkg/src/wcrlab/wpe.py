"""Wasserstein projection estimation.

The projection estimator picks the parameter whose model law is closest to
the empirical measure in squared 2-Wasserstein distance.  In one dimension
the objective is an explicit quantile-space integral

    G_n(theta) = sum_i integral over ((i-1)/n, i/n] of (H(theta, u) - X_(i))^2,

with H the model quantile, so fitting reduces to safeguarded Newton on
dG_n/dtheta.  Per-sample gradients of the fit follow from differentiating the
first-order condition: with M = int grad H grad H^T + int (H - F_n^{-1})
hess H, sample i (of rank r) moves the fit by M^{-1} int_{(r-1)/n}^{r/n}
grad H du.  In the plane the objective is evaluated by the semi-discrete dual
solver and minimized in theta.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._quad import panel_nodes
from .errors import (
    DegenerateBaseError,
    DegenerateInformationError,
    DomainError,
    EstimationWindowError,
    HypothesisViolationError,
)
from .families import wasserstein_information
from .ot1d import EmpiricalQuantile, quantile_inner
from . import sdot2d

__all__ = [
    "WpeFit",
    "wpe_1d",
    "wpe_scale_closed_form",
    "wpe_gradients_1d",
    "wpe_asymptotic_covariance",
    "wpe_2d",
]

_ORDER = 8
_GRID_POINTS = 41


@dataclass
class WpeFit:
    theta_hat: object  # float (p = 1) or (p,) array
    objective: float
    first_order_residual: float
    iterations: int
    method: str


class _Objective1D:
    """Quantile-space objective and derivatives on the empirical panels."""

    def __init__(self, family, sample):
        self.family = family
        xs = np.sort(np.asarray(sample, dtype=float), kind="stable")
        self.xs = xs
        n = len(xs)
        nodes, weights = panel_nodes(np.arange(n + 1) / n, _ORDER)
        self.nodes = nodes.ravel()
        self.weights = weights.ravel()
        self.x_rep = np.repeat(xs, _ORDER)
        self.p = family.p

    def value(self, theta):
        q = np.asarray(self.family.quantile(theta, self.nodes), dtype=float)
        if not np.all(np.isfinite(q)):
            raise DomainError(f"{self.family.id}: non-finite quantile at theta={theta}")
        return float(np.sum(self.weights * (q - self.x_rep) ** 2))

    def _qg(self, theta):
        qg = np.asarray(self.family.quantile_grad(theta, self.nodes), dtype=float)
        return qg.reshape(len(self.nodes), self.p)

    def _qg2(self, theta):
        if self.family.quantile_grad2 is not None:
            out = np.asarray(self.family.quantile_grad2(theta, self.nodes), dtype=float)
            return out.reshape(len(self.nodes), self.p, self.p)
        h = 1e-4 * (1.0 + float(np.max(np.abs(np.atleast_1d(theta)))))
        out = np.empty((len(self.nodes), self.p, self.p))
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        for a in range(self.p):
            tp, tm = th.copy(), th.copy()
            tp[a] += h
            tm[a] -= h
            tp_arg = tp[0] if self.p == 1 else tp
            tm_arg = tm[0] if self.p == 1 else tm
            out[:, a, :] = (self._qg(tp_arg) - self._qg(tm_arg)) / (2.0 * h)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def grad(self, theta):
        q = np.asarray(self.family.quantile(theta, self.nodes), dtype=float)
        return 2.0 * np.einsum("m,m,mp->p", self.weights, q - self.x_rep, self._qg(theta))

    def hess(self, theta):
        q = np.asarray(self.family.quantile(theta, self.nodes), dtype=float)
        qg = self._qg(theta)
        h = 2.0 * np.einsum("m,ma,mb->ab", self.weights, qg, qg)
        h += 2.0 * np.einsum("m,m,mab->ab", self.weights, q - self.x_rep, self._qg2(theta))
        return h


def _default_window(family, sample):
    if family.pilot is None:
        raise EstimationWindowError(f"{family.id}: no pilot estimate; pass a window")
    pilot = family.pilot(np.asarray(sample, dtype=float))
    pilot_arr = np.atleast_1d(np.asarray(pilot, dtype=float))
    spread = float(np.std(np.asarray(sample, dtype=float))) + 1e-3
    half = np.maximum(0.5 * np.abs(pilot_arr), 0.25 * spread + 1e-6)
    lo, hi = pilot_arr - half, pilot_arr + half
    dlo, dhi = family.theta_domain
    inset = 1e-6 * (1.0 + np.abs(pilot_arr))
    lo = np.maximum(lo, np.asarray(dlo) + inset)
    hi = np.minimum(hi, np.asarray(dhi) - inset)
    if family.p == 1:
        return float(lo[0]), float(hi[0])
    return lo, hi


def _refine_scalar(obj, lo, hi, theta0, tol=1e-11, max_iter=80):
    """Safeguarded Newton on the scalar derivative inside a bracket."""
    glo, ghi = obj.grad(lo)[0], obj.grad(hi)[0]
    theta = float(theta0)
    for it in range(max_iter):
        g = obj.grad(theta)[0]
        if abs(g) < tol:
            return theta, abs(g), it
        if g > 0:
            hi, ghi = theta, g
        else:
            lo, glo = theta, g
        h = obj.hess(theta)[0, 0]
        step_ok = h > 0
        if step_ok:
            cand = theta - g / h
            step_ok = lo < cand < hi
        theta = cand if step_ok else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * (1.0 + abs(theta)):
            g = obj.grad(theta)[0]
            return theta, abs(g), it + 1
    g = obj.grad(theta)[0]
    return theta, abs(g), max_iter


def _golden(obj, lo, hi, tol=1e-12, max_iter=200):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = obj.value(c), obj.value(d)
    for it in range(max_iter):
        if b - a < tol * (1.0 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = obj.value(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = obj.value(d)
    theta = 0.5 * (a + b)
    return theta, abs(obj.grad(theta)[0]), it


def wpe_1d(family, sample, window=None):
    """Fit the projection estimator on the line.

    A coarse grid over the search window locates candidate basins; each is
    refined by safeguarded Newton on the derivative (falling back to golden
    section), and the best refined candidate wins.
    """
    if family.quantile is None or family.quantile_grad is None:
        raise DomainError(f"family {family.id!r} needs quantile and quantile_grad")
    obj = _Objective1D(family, sample)
    if family.p > 1:
        return _wpe_multid(family, obj, sample, window)
    lo, hi = window if window is not None else _default_window(family, sample)
    if not hi > lo:
        raise EstimationWindowError(f"empty window ({lo}, {hi})")
    grid = np.linspace(lo, hi, _GRID_POINTS)
    vals = np.array([obj.value(t) for t in grid])
    if not np.all(np.isfinite(vals)):
        raise DomainError("non-finite objective inside the window")
    interior = (vals[1:-1] <= vals[:-2]) & (vals[1:-1] <= vals[2:])
    candidates = [int(k) + 1 for k in np.flatnonzero(interior)]
    if not candidates:
        raise EstimationWindowError(
            f"no interior minimizer of the projection objective in ({lo:g}, {hi:g})"
        )
    candidates.sort(key=lambda k: vals[k])
    best = None
    for k in candidates[:3]:
        blo, bhi = grid[k - 1], grid[k + 1]
        theta, res, its = _refine_scalar(obj, blo, bhi, grid[k])
        if res > 1e-8:
            theta, res, its2 = _golden(obj, blo, bhi)
            its += its2
        val = obj.value(theta)
        if best is None or val < best[1]:
            best = (theta, val, res, its)
    theta, val, res, its = best
    return WpeFit(
        theta_hat=float(theta),
        objective=val,
        first_order_residual=float(res),
        iterations=its,
        method="grid+newton",
    )


def _wpe_multid(family, obj, sample, window):
    lo, hi = window if window is not None else _default_window(family, sample)
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    pilot = 0.5 * (lo + hi)
    starts = [pilot]
    for frac in (0.25, 0.75):
        starts.append(lo + frac * (hi - lo))
    best = None
    for s in starts:
        theta = s.copy()
        its = 0
        for _ in range(60):
            g = obj.grad(theta)
            if float(np.max(np.abs(g))) < 1e-11:
                break
            h = obj.hess(theta)
            try:
                step = np.linalg.solve(h, -g)
            except np.linalg.LinAlgError:
                step = -g
            t = 1.0
            base = obj.value(theta)
            while t > 1e-10:
                cand = theta + t * step
                if np.all(cand > lo) and np.all(cand < hi) and obj.value(cand) <= base:
                    break
                t *= 0.5
            theta = theta + t * step
            its += 1
        g = obj.grad(theta)
        val = obj.value(theta)
        if best is None or val < best[1]:
            best = (theta, val, float(np.max(np.abs(g))), its)
    theta, val, res, its = best
    return WpeFit(
        theta_hat=np.asarray(theta), objective=val, first_order_residual=res,
        iterations=its, method="multistart-newton",
    )


def wpe_scale_closed_form(base_quantile, sample):
    """Scale fit as a ratio of quantile inner products.

    T = <empirical quantile, base quantile> / <base quantile, base quantile>;
    for the uniform base this telescopes to the order-statistic form
    (3 / (2 n^2)) sum (2i - 1) X_(i).
    """
    emp = EmpiricalQuantile.from_sample(sample)
    denom = quantile_inner(base_quantile, base_quantile)
    if not denom > 0:
        raise DegenerateBaseError("base quantile has zero norm")
    return quantile_inner(emp, base_quantile) / denom


def wpe_gradients_1d(family, sample, fit):
    """Per-sample gradients of the fitted parameter, shape (n, p).

    Solves M g_i = int over the rank-i panel of grad H, with M assembled by
    the same panel quadrature as the objective.  Requires a converged fit and
    distinct sample values.
    """
    obj = _Objective1D(family, sample)
    x = np.asarray(sample, dtype=float)
    n = len(x)
    theta = fit.theta_hat if np.isscalar(fit.theta_hat) else np.asarray(fit.theta_hat)
    m_hat = 0.5 * obj.hess(theta)  # the objective carries a factor 2
    qg = obj._qg(theta).reshape(n, _ORDER, obj.p)
    w = obj.weights.reshape(n, _ORDER)
    panel_integrals = np.einsum("rq,rqp->rp", w, qg)  # (n, p) by rank
    try:
        sol = np.linalg.solve(m_hat, panel_integrals.T).T  # (n, p)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInformationError(f"singular projection information: {exc}") from exc
    ranks = np.empty(n, dtype=int)
    ranks[np.argsort(x, kind="stable")] = np.arange(n)
    return sol[ranks]


def wpe_asymptotic_covariance(family, theta, outer_panels=24):
    """Limiting covariance of the rescaled fit, J^{-1} B J^{-1}.

    B is the double integral of (min(u, v) - uv) against the outer product of
    a(u) = grad_theta quantile / density-at-quantile.  Needs a bounded support
    with density bounded below; the inner integral is split at the diagonal
    kink so plain panel quadrature converges fast.
    """
    if family.quantile is None or family.quantile_grad is None or family.density is None:
        raise DomainError(f"family {family.id!r} lacks quantile/density data")
    probe = np.array([1e-12, 1e-6, 0.5, 1.0 - 1e-6, 1.0 - 1e-12])
    dens_probe = np.asarray(family.density(theta, family.quantile(theta, probe)), dtype=float)
    if np.any(dens_probe < 1e-9) or not np.all(np.isfinite(family.quantile(theta, probe))):
        raise HypothesisViolationError(
            f"family {family.id!r}: support unbounded or density vanishing at theta={theta}"
        )

    p = family.p

    def a_fn(u):
        q = np.asarray(family.quantile(theta, u), dtype=float)
        dens = np.asarray(family.density(theta, q), dtype=float)
        return np.asarray(family.quantile_grad(theta, u), dtype=float).reshape(len(u), p) / dens[:, None]

    outer_nodes, outer_w = panel_nodes(np.linspace(0.0, 1.0, outer_panels + 1), _ORDER)
    ou = outer_nodes.ravel()
    ow = outer_w.ravel()
    a_out = a_fn(ou)  # (m, p)

    inner = np.empty((len(ou), p))
    for idx, u in enumerate(ou):
        lo_nodes, lo_w = panel_nodes(np.linspace(0.0, u, 9), _ORDER)
        hi_nodes, hi_w = panel_nodes(np.linspace(u, 1.0, 9), _ORDER)
        lv = lo_nodes.ravel()
        hv = hi_nodes.ravel()
        a_lo = a_fn(lv)
        a_hi = a_fn(hv)
        lo_int = np.einsum("m,m,mp->p", lo_w.ravel(), lv, a_lo)
        hi_int = np.einsum("m,m,mp->p", hi_w.ravel(), 1.0 - hv, a_hi)
        inner[idx] = (1.0 - u) * lo_int + u * hi_int
    b_mat = np.einsum("m,ma,mb->ab", ow, a_out, inner)
    b_mat = 0.5 * (b_mat + b_mat.T)
    j = wasserstein_information(family, theta)
    jinv_b = np.linalg.solve(j, b_mat)
    sigma = np.linalg.solve(j, jinv_b.T).T
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# Planar fits
# ---------------------------------------------------------------------------

def _require_distinct_sites(sample):
    sample = np.asarray(sample, dtype=float)
    if len(np.unique(sample.round(decimals=12), axis=0)) != len(sample):
        raise DomainError("planar fit requires distinct sample points")
    return sample


def wpe_2d(family, sample, window=None, tol=1e-8, solver_tol=None, theta_tol=1e-11):
    """Projection fit through the semi-discrete engine.

    For location-like families the support moves with theta, so the objective
    is evaluated by translating the sites over the base support and each
    coordinate is solved separately (the derivative in coordinate a is
    -sum_i grad_site_i[a]).  For density-parameterized scalar families the
    derivative in theta comes from the dual potential and a bracketing
    secant/bisection drives it to zero, warm-starting the dual weights.
    """
    sample = _require_distinct_sites(sample)
    n = len(sample)
    if solver_tol is None:
        solver_tol = 1e-9 / n

    if family.location_like:
        support = family.support_2d(None)
        theta = np.asarray(
            family.pilot(sample) if family.pilot is not None else sample.mean(axis=0),
            dtype=float,
        ).copy()
        state = {"b": None, "sites": None}
        total_iters = 0

        def deriv(coord, value):
            from .errors import DegenerateConfigurationError

            th = theta.copy()
            th[coord] = value
            sites = sample - th[None, :]
            b0 = state["b"]
            if b0 is not None:
                # translating all sites by v preserves the partition for
                # weights shifted by 2 v . x_i, which makes a sound warm start
                v = sites[0] - state["sites"][0]
                b0 = b0 + 2.0 * state["sites"] @ v
            try:
                res = sdot2d.solve_dual(family, th, support, sites, tol=solver_tol, b0=b0)
            except DegenerateConfigurationError:
                res = sdot2d.solve_dual(family, th, support, sites, tol=solver_tol)
            state["b"] = res.weights
            state["sites"] = sites
            grads = np.array(
                [sdot2d.grad_xi_w2sq(family, th, res, i) for i in range(n)]
            )
            return -float(grads[:, coord].sum()), res

        for coord in range(2):
            half = 0.05 * (1.0 + abs(float(theta[coord])))
            t0 = float(theta[coord]) - half
            t1 = float(theta[coord]) + half
            d0, _ = deriv(coord, t0)
            d1, _ = deriv(coord, t1)
            its = 2
            while abs(d1) > tol and its < 40 and d1 != d0:
                t2 = t1 - d1 * (t1 - t0) / (d1 - d0)
                t0, d0, t1 = t1, d1, t2
                d1, _ = deriv(coord, t1)
                its += 1
            theta[coord] = t1
            total_iters += its
        resid = max(abs(deriv(coord, theta[coord])[0]) for coord in range(2))
        final = sdot2d.solve_dual(
            family, theta, support, sample - theta[None, :], tol=solver_tol, b0=state["b"]
        )
        return WpeFit(
            theta_hat=theta,
            objective=final.w2sq,
            first_order_residual=resid,
            iterations=total_iters,
            method="location-secant",
        )

    if family.p != 1:
        raise DomainError("planar fits support scalar parameters only")
    if window is None:
        raise EstimationWindowError(f"{family.id}: planar fit needs an explicit window")
    lo, hi = float(window[0]), float(window[1])
    state = {"b": None, "evals": 0, "last": None}

    def deriv(th):
        res = sdot2d.solve_dual(
            family, th, family.support_2d(th), sample, tol=solver_tol, b0=state["b"]
        )
        state["b"] = res.weights
        state["evals"] += 1
        state["last"] = res
        return sdot2d.dtheta_w2sq(family, th, res)

    dlo = deriv(lo)
    dhi = deriv(hi)
    if not (np.isfinite(dlo) and np.isfinite(dhi)) or dlo * dhi > 0:
        raise EstimationWindowError(
            f"projection derivative does not change sign in ({lo:g}, {hi:g})"
        )
    from scipy.optimize import brentq

    theta = brentq(deriv, lo, hi, xtol=theta_tol, rtol=4e-16, maxiter=100)
    resid = abs(deriv(theta))
    final = state["last"]
    return WpeFit(
        theta_hat=float(theta),
        objective=final.w2sq,
        first_order_residual=resid,
        iterations=state["evals"],
        method="dual-bracket",
    )
