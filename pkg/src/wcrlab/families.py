"""Parametric statistical families with transport structure.

A :class:`FamilyModel` bundles everything the rest of the package needs from a
model ``{P_theta}``: sampling, densities, quantiles (for d = 1), the transport
linearization ``Phi_theta`` (the derivative of optimal transport maps in the
parameter), the estimand ``chi`` with its Jacobian, and, when known, a closed
form for the Wasserstein information matrix ``J(theta) = E[Phi^T Phi]``.

Conventions
-----------
* Scalar-parameter families (p = 1) take ``theta`` as a float; otherwise
  ``theta`` is array-like of length p.
* For d = 1, samples are arrays of shape (n,); for d >= 2, shape (n, d).
* ``chi(theta)`` returns shape (k,); ``dchi(theta)`` returns (p, k) with
  entry [a, b] = d chi_b / d theta_a.
* ``transport_linearization(theta, x)`` returns shape (m, d, p).
* Samplers never own RNG state; a numpy Generator is always passed in.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from ._quad import adaptive_integrate
from .errors import DomainError, IntegrationDivergedError, QuadratureError
from .rng import stream

__all__ = [
    "FamilyModel",
    "TransportFamilyStructure",
    "register_builtin_families",
    "resolve_family",
    "flow_map_family",
    "wasserstein_information",
    "wasserstein_information_mc",
    "transport_family_check",
    "reparameterize",
    "expect_potential",
    "shift_constant",
]


@dataclass
class TransportFamilyStructure:
    """Factored form of the transport linearization.

    For a transport family, ``Phi_theta(x) = Dphi(x) Lambda(theta)^{-1}
    (Dchi(theta))^T`` where ``Lambda(theta) = E_theta[(Dphi)^T Dphi]``.  The
    parameterization carried here may differ from the family's registered
    estimand (some families are experiment-targeted at a different chi), in
    which case ``chi``/``dchi`` are set explicitly.
    """

    potential: Callable  # x -> (m, k)
    dpotential: Callable  # x -> (m, d, k)
    lam: Callable  # theta -> (k, k)
    chi: Optional[Callable] = None  # theta -> (k,), defaults to family chi
    dchi: Optional[Callable] = None  # theta -> (p, k)
    expectation: Optional[Callable] = None  # theta -> E_theta[potential(X)], exact


@dataclass
class FamilyModel:
    id: str
    d: int
    p: int
    k: int
    theta_domain: tuple  # (lo, hi) arrays of length p; open box
    chi: Callable
    dchi: Callable
    sampler: Callable  # (theta, n, rng) -> samples
    density: Optional[Callable] = None  # (theta, x) -> (m,)
    cdf: Optional[Callable] = None  # d = 1 only
    quantile: Optional[Callable] = None  # d = 1 only
    transport_linearization: Optional[Callable] = None  # (theta, x) -> (m, d, p)
    info_closed_form: Optional[Callable] = None  # theta -> (p, p)
    quantile_grad: Optional[Callable] = None  # (theta, u) -> (m, p)
    quantile_grad2: Optional[Callable] = None  # (theta, u) -> (m, p, p)
    density_dtheta: Optional[Callable] = None  # (theta, x) -> (m,), p = 1 only
    structure: Optional[TransportFamilyStructure] = None
    pilot: Optional[Callable] = None  # sample -> rough theta estimate
    support_2d: Optional[Callable] = None  # theta -> (v, 2) ccw polygon
    location_like: bool = False  # theta acts on samples/sites by translation
    iid: bool = True  # False for fixed-design models
    check_theta_grid: tuple = ()
    extra: dict = field(default_factory=dict)

    def contains(self, theta):
        lo, hi = self.theta_domain
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        return bool(np.all(t > np.asarray(lo)) and np.all(t < np.asarray(hi)))


def _col(x):
    """Reshape a (m,) or (m, d) sample array to (m, d)."""
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# Wasserstein information
# ---------------------------------------------------------------------------

_EPS_CAP = 36.0  # exp(-36) is the last tail size distinguishable from 1 in double


def _quantile_square_integral(qg, p, tol=1e-10, qg_tail=None):
    """Integrate qg(u) qg(u)^T over (0, 1) with exponential endpoint maps.

    Splitting at 1/2 and substituting u = exp(-s) (resp. 1 - exp(-s)) turns
    integrable endpoint singularities (heavy tails, unbounded quantiles) into
    smooth decaying integrands.  ``qg_tail(t)``, when provided, evaluates the
    gradient at u = 1 - t from the exact tail probability; without it the
    upper range is capped where 1 - exp(-s) saturates, which is only valid
    for families whose gradient grows at most logarithmically there.
    """

    def outer_of(values):
        g = np.asarray(values, dtype=float).reshape(-1, p)
        return g[:, :, None] * g[:, None, :]

    def integrate(eval_at):
        def integrand(s):
            e = np.exp(-s)
            return outer_of(eval_at(e)) * e[:, None, None]

        hi = 45.0
        total = adaptive_integrate(integrand, math.log(2.0), hi, tol=tol)
        while hi < 2.0e6:
            chunk = adaptive_integrate(integrand, hi, 2.0 * hi, tol=tol)
            total = total + chunk
            if np.linalg.norm(chunk) < 0.01 * tol:
                return total
            hi *= 2.0
        raise QuadratureError("quantile-gradient integral has too heavy a tail")

    def integrate_capped(eval_at):
        def integrand(s):
            e = np.exp(-s)
            return outer_of(eval_at(e)) * e[:, None, None]

        return adaptive_integrate(integrand, math.log(2.0), _EPS_CAP, tol=tol)

    lower = integrate(lambda e: qg(e))
    if qg_tail is not None:
        upper = integrate(lambda e: qg_tail(e))
    else:
        upper = integrate_capped(lambda e: qg(1.0 - e))
    j = lower + upper
    return 0.5 * (j + j.T)


def wasserstein_information(family, theta, tol=1e-9):
    """Wasserstein information matrix J(theta) = E_theta[Phi^T Phi].

    Uses the registered closed form when available; otherwise, for d = 1,
    integrates the quantile-gradient outer product over (0, 1) with adaptive
    Gauss-Legendre panels.
    """
    if family.info_closed_form is not None:
        j = np.atleast_2d(np.asarray(family.info_closed_form(theta), dtype=float))
        return 0.5 * (j + j.T)
    if family.d == 1 and family.quantile_grad is not None:
        qg_tail = family.extra.get("quantile_grad_tail")
        return _quantile_square_integral(
            lambda u: family.quantile_grad(theta, u),
            family.p,
            tol=tol,
            qg_tail=None if qg_tail is None else (lambda t: qg_tail(theta, t)),
        )
    raise DomainError(
        f"family {family.id!r}: no closed form and no d=1 quantile gradient; "
        "use wasserstein_information_mc"
    )


def wasserstein_information_mc(family, theta, n=200_000, rng=None):
    """Monte Carlo estimate of J(theta) and its standard error (for d >= 2)."""
    if family.transport_linearization is None:
        raise DomainError(f"family {family.id!r} has no transport linearization")
    if rng is None:
        rng = stream(0, 0)
    x = family.sampler(theta, n, rng)
    phi = family.transport_linearization(theta, x)  # (n, d, p)
    outer = np.einsum("nda,ndb->nab", phi, phi)
    est = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / math.sqrt(n)
    return 0.5 * (est + est.T), se


# ---------------------------------------------------------------------------
# Transport-family structure checks
# ---------------------------------------------------------------------------

def _structure_chi_jacobian(family, theta):
    st = family.structure
    dchi = st.dchi if st.dchi is not None else family.dchi
    return np.asarray(dchi(theta), dtype=float).reshape(family.p, -1)


def factorization_residual(family, theta, x):
    """|Phi_theta(x) - Dphi(x) Lambda(theta)^{-1} Dchi(theta)^T| at given points."""
    st = family.structure
    phi = family.transport_linearization(theta, x)  # (m, d, p)
    dphi = np.asarray(st.dpotential(x), dtype=float)  # (m, d, k)
    lam = np.atleast_2d(np.asarray(st.lam(theta), dtype=float))
    dchi = _structure_chi_jacobian(family, theta)  # (p, k)
    factor = np.linalg.solve(lam, dchi.T)  # (k, p)
    recon = np.einsum("mdk,kp->mdp", dphi, factor)
    return np.linalg.norm((phi - recon).reshape(len(phi), -1), axis=1)


def transport_family_check(family, seed=0, n_x=8):
    """Check the factored form of the transport linearization.

    With a registered structure, evaluates the factorization residual on a
    32-point (theta, x) grid.  Without one (and p = k = 1), tests whether
    Phi_theta1(x) and Phi_theta2(x) stay parallel across sampled x, a
    necessary condition for the factored form; any angle above 1e-6 rad is a
    failure.
    """
    thetas = family.check_theta_grid
    if not thetas:
        raise DomainError(f"family {family.id!r} has no check grid")
    if family.structure is not None:
        worst = 0.0
        for i, th in enumerate(thetas):
            x = family.sampler(th, n_x, stream(seed, i))
            worst = max(worst, float(np.max(factorization_residual(family, th, x))))
        return {"is_transport_family": worst < 1e-8, "max_residual": worst}
    if family.p == 1 and family.k == 1 and family.transport_linearization is not None:
        th1, th2 = thetas[0], thetas[-1]
        x = family.sampler(th1, 2 * n_x, stream(seed, 0))
        v1 = family.transport_linearization(th1, x)[:, :, 0]
        v2 = family.transport_linearization(th2, x)[:, :, 0]
        dot = np.abs(np.sum(v1 * v2, axis=1))
        norms = np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1)
        ok = norms > 0
        cosang = np.clip(dot[ok] / norms[ok], -1.0, 1.0)
        angle = float(np.max(np.arccos(cosang))) if ok.any() else 0.0
        return {"is_transport_family": angle <= 1e-6, "max_residual": angle}
    return {"is_transport_family": False, "max_residual": math.inf}


def expect_potential(family, theta, tol=1e-9):
    """E_theta[phi(X)] for the structure potential, by quadrature when needed."""
    st = family.structure
    if st is None:
        raise DomainError(f"family {family.id!r} has no transport structure")
    if st.expectation is not None:
        return np.atleast_1d(np.asarray(st.expectation(theta), dtype=float))
    if family.d == 1 and family.quantile is not None:
        q_tail = family.extra.get("quantile_tail")

        def integrand_from(x_of_e):
            def integrand(s):
                e = np.exp(-s)
                x = x_of_e(e)
                vals = np.asarray(st.potential(x), dtype=float).reshape(len(x), -1)
                return vals * e[:, None]

            return integrand

        if q_tail is not None:
            upper = (integrand_from(lambda e: q_tail(theta, e)), None)
        else:
            upper = (integrand_from(lambda e: family.quantile(theta, 1.0 - e)), _EPS_CAP)
        lower = (integrand_from(lambda e: family.quantile(theta, e)), None)

        total = None
        for integrand, cap in (lower, upper):
            hi = 45.0 if cap is None else cap
            part = adaptive_integrate(integrand, math.log(2.0), hi, tol=tol)
            while cap is None and hi < 2.0e6:
                chunk = adaptive_integrate(integrand, hi, 2.0 * hi, tol=tol)
                part = part + chunk
                if np.linalg.norm(chunk) < 0.01 * tol:
                    break
                hi *= 2.0
            total = part if total is None else total + part
        return total
    raise DomainError(f"family {family.id!r}: cannot integrate the potential")


def shift_constant(family, theta=None):
    """The constant v with E_theta[phi(X)] = chi(theta) + v."""
    st = family.structure
    if theta is None:
        theta = family.check_theta_grid[0]
    chi = st.chi if st.chi is not None else family.chi
    return expect_potential(family, theta) - np.atleast_1d(np.asarray(chi(theta), dtype=float))


def reparameterize(family, h, dh, new_domain, new_id=None, check_grid=()):
    """Restrict a family by theta = h(xi).

    The transport linearization picks up a factor (Dh)^T and the structure
    parameterization composes with h; ``dh(xi)`` must have shape (l, p) for
    a new parameter of dimension l.
    """
    st = family.structure

    def dh_mat(xi):
        return np.asarray(dh(xi), dtype=float).reshape(-1, family.p)

    l_dim = dh_mat(check_grid[0] if check_grid else 1.0).shape[0]

    new_st = None
    if st is not None:
        base_chi = st.chi if st.chi is not None else family.chi
        base_dchi = st.dchi if st.dchi is not None else family.dchi
        new_st = replace(
            st,
            chi=lambda xi: base_chi(h(xi)),
            dchi=lambda xi: dh_mat(xi) @ np.asarray(base_dchi(h(xi)), dtype=float).reshape(family.p, -1),
            lam=lambda xi: st.lam(h(xi)),
            expectation=(None if st.expectation is None else (lambda xi: st.expectation(h(xi)))),
        )

    def lin(xi, x):
        phi = family.transport_linearization(h(xi), x)  # (m, d, p)
        return np.einsum("mdp,lp->mdl", phi, dh_mat(xi))

    return replace(
        family,
        id=new_id or f"{family.id}|reparam",
        p=l_dim,
        theta_domain=(np.atleast_1d(new_domain[0]), np.atleast_1d(new_domain[1])),
        chi=lambda xi: family.chi(h(xi)),
        dchi=lambda xi: dh_mat(xi) @ np.asarray(family.dchi(h(xi)), dtype=float).reshape(family.p, -1),
        sampler=lambda xi, n, rng: family.sampler(h(xi), n, rng),
        density=None if family.density is None else (lambda xi, x: family.density(h(xi), x)),
        cdf=None if family.cdf is None else (lambda xi, x: family.cdf(h(xi), x)),
        quantile=None if family.quantile is None else (lambda xi, u: family.quantile(h(xi), u)),
        transport_linearization=lin,
        info_closed_form=None,
        quantile_grad=None,
        quantile_grad2=None,
        structure=new_st,
        check_theta_grid=check_grid,
    )


# ---------------------------------------------------------------------------
# Builtin families
# ---------------------------------------------------------------------------

_GAUSS = "gaussian"
_LAPLACE = "laplace"


def _base_1d(kind):
    """Mean-zero unit bases used by the location family."""
    if kind == _GAUSS:
        return {
            "density": lambda z: np.exp(-0.5 * z**2) / math.sqrt(2 * math.pi),
            "cdf": ndtr,
            "quantile": ndtri,
            "sampler": lambda n, rng: rng.standard_normal(n),
        }
    if kind == _LAPLACE:
        # variance 2 (unit exponential scale)
        def q(u):
            u = np.asarray(u, dtype=float)
            return np.where(u < 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u)))

        return {
            "density": lambda z: 0.5 * np.exp(-np.abs(z)),
            "cdf": lambda z: np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z)),
            "quantile": q,
            "sampler": lambda n, rng: rng.laplace(0.0, 1.0, n),
        }
    raise DomainError(f"unknown base {kind!r}")


def make_location_family(base=_GAUSS, d=1):
    """Location family: X = theta + eps, eps i.i.d. from a mean-zero base.

    Transport maps between members are translations, so the linearization is
    the identity and J(theta) = I regardless of the base.
    """
    b = _base_1d(base)
    p = k = d

    def sampler(theta, n, rng):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        eps = np.column_stack([b["sampler"](n, rng) for _ in range(d)])
        out = eps + th[None, :]
        return out[:, 0] if d == 1 else out

    def lin(theta, x):
        m = len(np.atleast_1d(x)) if d == 1 else len(x)
        return np.broadcast_to(np.eye(d), (m, d, d)).copy()

    st = TransportFamilyStructure(
        potential=lambda x: _col(x),
        dpotential=lambda x: np.broadcast_to(np.eye(d), (len(_col(x)), d, d)).copy(),
        lam=lambda theta: np.eye(d),
        expectation=lambda theta: np.atleast_1d(np.asarray(theta, dtype=float)),
    )
    fam = FamilyModel(
        id=f"location:{base}" if d == 1 else f"location:{base}:{d}d",
        d=d,
        p=p,
        k=k,
        theta_domain=(np.full(p, -np.inf), np.full(p, np.inf)),
        chi=lambda theta: np.atleast_1d(np.asarray(theta, dtype=float)),
        dchi=lambda theta: np.eye(d),
        sampler=sampler,
        transport_linearization=lin,
        info_closed_form=lambda theta: np.eye(d),
        structure=st,
        pilot=lambda x: _col(x).mean(axis=0) if d > 1 else float(np.mean(x)),
        check_theta_grid=(
            tuple(np.full(d, v) for v in (-0.7, 0.0, 0.4, 1.3)) if d > 1 else (-0.7, 0.0, 0.4, 1.3)
        ),
    )
    if d == 1:
        fam.density = lambda theta, x: b["density"](np.asarray(x, dtype=float) - theta)
        fam.cdf = lambda theta, x: b["cdf"](np.asarray(x, dtype=float) - theta)
        fam.quantile = lambda theta, u: theta + b["quantile"](np.asarray(u, dtype=float))
        fam.quantile_grad = lambda theta, u: np.ones((len(np.atleast_1d(u)), 1))
        fam.quantile_grad2 = lambda theta, u: np.zeros((len(np.atleast_1d(u)), 1, 1))
    return fam


def make_uniform_scale_family():
    """The uniform-on-[0, theta] family with natural estimand chi(theta) = theta.

    Not normalized: the base U[0, 1] has second moment 1/3, so J(theta) = 1/3
    and the sensitivity bound for unbiased estimation of theta is 3/n.  The
    transport structure uses the potential |x|^2 / 2, whose parameterization
    is theta^2 / 6 rather than theta.
    """

    def quantile(theta, u):
        return theta * np.asarray(u, dtype=float)

    st = TransportFamilyStructure(
        potential=lambda x: 0.5 * np.sum(_col(x) ** 2, axis=1, keepdims=True),
        dpotential=lambda x: _col(x)[:, :, None],
        lam=lambda theta: np.array([[theta**2 / 3.0]]),
        chi=lambda theta: np.array([theta**2 / 6.0]),
        dchi=lambda theta: np.array([[theta / 3.0]]),
        expectation=lambda theta: np.array([theta**2 / 6.0]),
    )
    return FamilyModel(
        id="scale:uniform",
        d=1,
        p=1,
        k=1,
        theta_domain=(np.array([0.0]), np.array([np.inf])),
        chi=lambda theta: np.array([float(theta)]),
        dchi=lambda theta: np.array([[1.0]]),
        sampler=lambda theta, n, rng: theta * rng.random(n),
        density=lambda theta, x: np.where(
            (np.asarray(x) >= 0) & (np.asarray(x) <= theta), 1.0 / theta, 0.0
        ),
        cdf=lambda theta, x: np.clip(np.asarray(x, dtype=float) / theta, 0.0, 1.0),
        quantile=quantile,
        transport_linearization=lambda theta, x: (_col(x) / theta)[:, :, None],
        info_closed_form=lambda theta: np.array([[1.0 / 3.0]]),
        quantile_grad=lambda theta, u: np.asarray(u, dtype=float)[:, None],
        quantile_grad2=lambda theta, u: np.zeros((len(np.atleast_1d(u)), 1, 1)),
        structure=st,
        pilot=lambda x: 2.0 * float(np.mean(x)),
        check_theta_grid=(0.5, 1.0, 1.7, 2.5),
        extra={"scale_base_quantile": lambda u: np.asarray(u, dtype=float)},
    )


def make_unit_scale_family():
    """Scale family with a unit-second-moment base (uniform on [0, sqrt(3)]).

    P_theta is the base dilated by theta.  With E|X|^2 = theta^2 the efficient
    estimand is chi(theta) = theta^2, attained by the mean of |X|^2; the
    Wasserstein information for theta is 1.
    """
    r3 = math.sqrt(3.0)

    def quantile(theta, u):
        return theta * r3 * np.asarray(u, dtype=float)

    st = TransportFamilyStructure(
        potential=lambda x: np.sum(_col(x) ** 2, axis=1, keepdims=True),
        dpotential=lambda x: 2.0 * _col(x)[:, :, None],
        lam=lambda theta: np.array([[4.0 * theta**2]]),
        expectation=lambda theta: np.array([theta**2]),
    )
    return FamilyModel(
        id="scale:unit",
        d=1,
        p=1,
        k=1,
        theta_domain=(np.array([0.0]), np.array([np.inf])),
        chi=lambda theta: np.array([theta**2]),
        dchi=lambda theta: np.array([[2.0 * theta]]),
        sampler=lambda theta, n, rng: theta * r3 * rng.random(n),
        density=lambda theta, x: np.where(
            (np.asarray(x) >= 0) & (np.asarray(x) <= theta * r3), 1.0 / (theta * r3), 0.0
        ),
        cdf=lambda theta, x: np.clip(np.asarray(x, dtype=float) / (theta * r3), 0.0, 1.0),
        quantile=quantile,
        transport_linearization=lambda theta, x: (_col(x) / theta)[:, :, None],
        info_closed_form=lambda theta: np.array([[1.0]]),
        quantile_grad=lambda theta, u: r3 * np.asarray(u, dtype=float)[:, None],
        quantile_grad2=lambda theta, u: np.zeros((len(np.atleast_1d(u)), 1, 1)),
        structure=st,
        pilot=lambda x: float(np.sqrt(np.mean(np.asarray(x) ** 2))),
        check_theta_grid=(0.5, 1.0, 1.7, 2.5),
        extra={"scale_base_quantile": lambda u: r3 * np.asarray(u, dtype=float)},
    )


_PARETO_EDGE = 2.0 + 1e-3  # keep second moments of the potential finite


def make_pareto_family():
    """Pareto index family, density theta x^{-(theta+1)} on x >= 1.

    The transport linearization is -x log(x) / theta, so the family is a
    transport family for the potential x^2 log(x)/2 - x^2/4 and the estimand
    chi(theta) = (theta - 2)^{-2}; the matching shift constant is -1/4.
    """

    def quantile(theta, u):
        return (1.0 - np.asarray(u, dtype=float)) ** (-1.0 / theta)

    def quantile_grad(theta, u):
        u = np.asarray(u, dtype=float)
        x = quantile(theta, u)
        return (x * np.log1p(-u) / theta**2)[:, None]

    def quantile_grad2(theta, u):
        u = np.asarray(u, dtype=float)
        x = quantile(theta, u)
        l = np.log1p(-u)
        return (x * l * (l - 2.0 * theta) / theta**4)[:, None, None]

    def potential(x):
        x = _col(x)[:, 0]
        return (0.5 * x**2 * np.log(x) - 0.25 * x**2)[:, None]

    def expectation(theta):
        # E[phi(X)] via x = e^t: integral of phi(e^t) theta e^{-theta t} dt
        def integrand(t):
            e2 = np.exp((2.0 - theta) * t)
            return (0.5 * t - 0.25) * e2 * theta

        hi = 200.0 / max(theta - 2.0, 1e-3)
        return np.atleast_1d(adaptive_integrate(integrand, 0.0, hi, tol=1e-12))

    st = TransportFamilyStructure(
        potential=potential,
        dpotential=lambda x: (_col(x) * np.log(_col(x)))[:, :, None],
        lam=lambda theta: np.array([[2.0 * theta / (theta - 2.0) ** 3]]),
        expectation=expectation,
    )
    return FamilyModel(
        id="pareto",
        d=1,
        p=1,
        k=1,
        theta_domain=(np.array([_PARETO_EDGE]), np.array([np.inf])),
        chi=lambda theta: np.array([(theta - 2.0) ** -2]),
        dchi=lambda theta: np.array([[-2.0 * (theta - 2.0) ** -3]]),
        sampler=lambda theta, n, rng: (1.0 - rng.random(n)) ** (-1.0 / theta),
        density=lambda theta, x: np.where(
            np.asarray(x) >= 1.0, theta * np.asarray(x, dtype=float) ** (-(theta + 1.0)), 0.0
        ),
        cdf=lambda theta, x: np.where(
            np.asarray(x) >= 1.0, 1.0 - np.asarray(x, dtype=float) ** (-theta), 0.0
        ),
        quantile=quantile,
        transport_linearization=lambda theta, x: (
            -_col(x) * np.log(np.maximum(_col(x), 1e-300)) / theta
        )[:, :, None],
        info_closed_form=lambda theta: np.array([[2.0 / (theta * (theta - 2.0) ** 3)]]),
        quantile_grad=quantile_grad,
        quantile_grad2=quantile_grad2,
        structure=st,
        pilot=lambda x: max(float(np.mean(x)) / max(float(np.mean(x)) - 1.0, 1e-6), _PARETO_EDGE + 0.1),
        check_theta_grid=(2.5, 3.0, 3.5, 4.5),
        extra={
            # evaluations at u = 1 - t from the exact tail probability
            "quantile_grad_tail": lambda theta, t: (
                t ** (-1.0 / theta) * np.log(t) / theta**2
            )[:, None],
            "quantile_tail": lambda theta, t: t ** (-1.0 / theta),
        },
    )


def make_gauss2_family():
    """Gaussian family with theta = (mu, sigma^2), targeting (mu, mu^2 + sigma^2).

    The joint mean / second-moment statistic is exactly efficient for that
    estimand.  For this parameterization the quantile route gives
    J(theta) = diag(1, 1/(4 sigma^2)).
    """

    def unpack(theta):
        mu, var = float(theta[0]), float(theta[1])
        return mu, var, math.sqrt(var)

    def quantile(theta, u):
        mu, _, sd = unpack(theta)
        return mu + sd * ndtri(np.asarray(u, dtype=float))

    def quantile_grad(theta, u):
        _, _, sd = unpack(theta)
        z = ndtri(np.asarray(u, dtype=float))
        return np.column_stack([np.ones_like(z), z / (2.0 * sd)])

    def quantile_grad2(theta, u):
        _, _, sd = unpack(theta)
        z = ndtri(np.asarray(u, dtype=float))
        out = np.zeros((len(z), 2, 2))
        out[:, 1, 1] = -z / (4.0 * sd**3)
        return out

    def lin(theta, x):
        mu, var, _ = unpack(theta)
        x = _col(x)
        out = np.empty((len(x), 1, 2))
        out[:, 0, 0] = 1.0
        out[:, 0, 1] = (x[:, 0] - mu) / (2.0 * var)
        return out

    st = TransportFamilyStructure(
        potential=lambda x: np.column_stack([_col(x)[:, 0], _col(x)[:, 0] ** 2]),
        dpotential=lambda x: np.stack(
            [np.ones((len(_col(x)), 1)), 2.0 * _col(x)], axis=2
        ).reshape(len(_col(x)), 1, 2),
        lam=lambda theta: np.array(
            [
                [1.0, 2.0 * theta[0]],
                [2.0 * theta[0], 4.0 * (theta[1] + theta[0] ** 2)],
            ]
        ),
        expectation=lambda theta: np.array([theta[0], theta[1] + theta[0] ** 2]),
    )
    return FamilyModel(
        id="gauss2",
        d=1,
        p=2,
        k=2,
        theta_domain=(np.array([-np.inf, 0.0]), np.array([np.inf, np.inf])),
        chi=lambda theta: np.array([theta[0], theta[1] + theta[0] ** 2]),
        dchi=lambda theta: np.array([[1.0, 2.0 * theta[0]], [0.0, 1.0]]),
        sampler=lambda theta, n, rng: theta[0] + math.sqrt(theta[1]) * rng.standard_normal(n),
        density=lambda theta, x: np.exp(
            -0.5 * (np.asarray(x, dtype=float) - theta[0]) ** 2 / theta[1]
        )
        / math.sqrt(2 * math.pi * theta[1]),
        cdf=lambda theta, x: ndtr((np.asarray(x, dtype=float) - theta[0]) / math.sqrt(theta[1])),
        quantile=quantile,
        transport_linearization=lin,
        info_closed_form=lambda theta: np.diag([1.0, 1.0 / (4.0 * theta[1])]),
        quantile_grad=quantile_grad,
        quantile_grad2=quantile_grad2,
        structure=st,
        pilot=lambda x: np.array([float(np.mean(x)), max(float(np.var(x)), 1e-8)]),
        check_theta_grid=((0.0, 1.0), (0.5, 0.8), (-1.0, 2.0), (2.0, 0.5)),
        extra={
            "quantile_grad_tail": lambda theta, t: np.column_stack(
                [np.ones_like(t), -ndtri(t) / (2.0 * math.sqrt(theta[1]))]
            ),
        },
    )


def make_gaussian_correlation_family():
    """Centered bivariate Gaussians with unit variances and correlation theta.

    The linearization mixes coordinates through a theta-dependent matrix, so
    the factored (transport-family) form fails: no estimand of theta admits an
    unbiased estimator meeting the sensitivity bound.  J(theta) has no
    registered closed form; use the Monte Carlo route.
    """

    def sigma(theta):
        return np.array([[1.0, theta], [theta, 1.0]])

    def lin(theta, x):
        x = _col(x)
        m = np.array([[-theta, 1.0], [1.0, -theta]]) / (2.0 * (1.0 - theta**2))
        return (x @ m.T)[:, :, None]

    def density(theta, x):
        x = _col(x)
        det = 1.0 - theta**2
        q = (x[:, 0] ** 2 - 2.0 * theta * x[:, 0] * x[:, 1] + x[:, 1] ** 2) / det
        return np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))

    def sampler(theta, n, rng):
        a = math.sqrt((1.0 + theta) / 2.0)
        b = math.sqrt((1.0 - theta) / 2.0)
        z = rng.standard_normal((n, 2))
        return np.column_stack([a * z[:, 0] + b * z[:, 1], a * z[:, 0] - b * z[:, 1]])

    return FamilyModel(
        id="corr2d",
        d=2,
        p=1,
        k=1,
        theta_domain=(np.array([-1.0]), np.array([1.0])),
        chi=lambda theta: np.array([float(theta)]),
        dchi=lambda theta: np.array([[1.0]]),
        sampler=sampler,
        density=density,
        transport_linearization=lin,
        pilot=lambda x: float(np.clip(np.mean(_col(x)[:, 0] * _col(x)[:, 1]), -0.99, 0.99)),
        check_theta_grid=(-0.5, 0.0, 0.3, 0.6),
        extra={"sigma": sigma},
    )


def make_regression_family(design=None, n_rows=50, n_cols=3):
    """Fixed-design linear regression X_i = w_i . theta + eps_i.

    Observations are independent but not identically distributed; the
    sensitivity bound for unbiased estimation of theta is (W^T W)^{-1} with no
    1/n factor, attained by ordinary least squares.
    """
    if design is None:
        t = np.linspace(0.0, 1.0, n_rows)
        design = np.column_stack([np.ones(n_rows), t, t**2])[:, :n_cols]
    design = np.asarray(design, dtype=float)
    rows, p = design.shape
    gram = design.T @ design

    def sampler(theta, n, rng):
        if n != rows:
            raise DomainError(f"regression family needs n == {rows} (design rows)")
        th = np.asarray(theta, dtype=float).reshape(p)
        return design @ th + rng.standard_normal(rows)

    return FamilyModel(
        id="regression",
        d=1,
        p=p,
        k=p,
        theta_domain=(np.full(p, -np.inf), np.full(p, np.inf)),
        chi=lambda theta: np.asarray(theta, dtype=float).reshape(p),
        dchi=lambda theta: np.eye(p),
        sampler=sampler,
        info_closed_form=lambda theta: gram,  # total information, no 1/n
        iid=False,
        check_theta_grid=(np.zeros(p), np.full(p, 0.5)),
        extra={"design": design},
    )


def flow_map_family(potential_grad, fam_id, base=_GAUSS, d=1, h=1e-3, cdf=None, quantile=None,
                    quantile_grad=None, lam=None, expectation=None, check_grid=(-0.4, 0.1, 0.5, 0.9),
                    potential=None, density=None):
    """Family generated by flowing a base distribution along a gradient field.

    Samples are produced by drawing x from the base and integrating
    du/dt = grad_potential(u) for time theta with a fixed-step fourth-order
    Runge-Kutta scheme (negative theta flows along the negative field).  The
    transport linearization is the field itself, and the natural potential
    parameterization has derivative Lambda(theta) = E_theta|grad phi(X)|^2.
    """
    b = _base_1d(base)

    def rhs(u, sign):
        g = potential_grad(u)
        return sign * g

    def sampler(theta, n, rng):
        x0 = b["sampler"](n, rng) if d == 1 else np.column_stack(
            [b["sampler"](n, rng) for _ in range(d)]
        )
        t_total = abs(float(theta))
        if t_total == 0.0:
            return x0
        sign = 1.0 if theta > 0 else -1.0
        steps = max(1, int(math.ceil(t_total / h)))
        dt = t_total / steps
        u = _col(x0).copy()
        for _ in range(steps):
            k1 = rhs(u, sign)
            k2 = rhs(u + 0.5 * dt * k1, sign)
            k3 = rhs(u + 0.5 * dt * k2, sign)
            k4 = rhs(u + dt * k3, sign)
            u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(u)):
                bad = int(np.argwhere(~np.isfinite(u))[0][0])
                raise IntegrationDivergedError(
                    f"flow family {fam_id!r}: trajectory {bad} diverged at theta={theta}"
                )
        return u[:, 0] if d == 1 else u

    def lin(theta, x):
        return potential_grad(_col(x))[:, :, None]

    st = None
    if lam is not None:
        st = TransportFamilyStructure(
            potential=potential if potential is not None
            else (lambda x: np.full((len(_col(x)), 1), np.nan)),
            dpotential=lambda x: potential_grad(_col(x))[:, :, None],
            lam=lambda theta: np.array([[lam(theta)]]),
            chi=(lambda theta: np.atleast_1d(expectation(theta))) if expectation else None,
            dchi=lambda theta: np.array([[lam(theta)]]),
            expectation=(lambda theta: np.atleast_1d(expectation(theta))) if expectation else None,
        )
    return FamilyModel(
        id=fam_id,
        d=d,
        p=1,
        k=1,
        theta_domain=(np.array([-np.inf]), np.array([np.inf])),
        chi=lambda theta: np.array([float(theta)]),
        dchi=lambda theta: np.array([[1.0]]),
        sampler=sampler,
        density=density,
        cdf=cdf,
        quantile=quantile,
        quantile_grad=quantile_grad,
        transport_linearization=lin,
        info_closed_form=(lambda theta: np.array([[lam(theta)]])) if lam is not None else None,
        structure=st,
        check_theta_grid=check_grid,
    )


def make_flow_line():
    """Flow of grad phi = 1 from a standard normal: plain translation."""
    fam = flow_map_family(
        potential_grad=lambda u: np.ones_like(u),
        fam_id="flow:line",
        density=lambda theta, x: np.exp(-0.5 * (np.asarray(x, dtype=float) - theta) ** 2)
        / math.sqrt(2 * math.pi),
        cdf=lambda theta, x: ndtr(np.asarray(x, dtype=float) - theta),
        quantile=lambda theta, u: theta + ndtri(np.asarray(u, dtype=float)),
        quantile_grad=lambda theta, u: np.ones((len(np.atleast_1d(u)), 1)),
        lam=lambda theta: 1.0,
        expectation=lambda theta: float(theta),
        potential=lambda x: _col(x),
    )
    fam.pilot = lambda x: float(np.mean(x))
    return fam


def make_flow_quad():
    """Flow of grad phi = x from a standard normal: exponential dilation.

    The exact pushforward at time theta is N(0, e^{2 theta}); the registered
    cdf/quantile use that law, so sampler tests exercise the integrator
    against the exact flow.
    """

    def lam(theta):
        return math.exp(2.0 * theta)

    fam = flow_map_family(
        potential_grad=lambda u: u,
        fam_id="flow:quad",
        density=lambda theta, x: np.exp(
            -0.5 * (np.asarray(x, dtype=float) * math.exp(-theta)) ** 2
        )
        / (math.sqrt(2 * math.pi) * math.exp(theta)),
        cdf=lambda theta, x: ndtr(np.asarray(x, dtype=float) * math.exp(-theta)),
        quantile=lambda theta, u: math.exp(theta) * ndtri(np.asarray(u, dtype=float)),
        quantile_grad=lambda theta, u: math.exp(theta) * ndtri(np.asarray(u, dtype=float))[:, None],
        lam=lam,
        expectation=lambda theta: 0.5 * math.exp(2.0 * theta),
        potential=lambda x: 0.5 * np.sum(_col(x) ** 2, axis=1, keepdims=True),
    )
    fam.quantile_grad2 = lambda theta, u: (
        math.exp(theta) * ndtri(np.asarray(u, dtype=float))
    )[:, None, None]
    fam.pilot = lambda x: 0.5 * math.log(max(float(np.mean(np.asarray(x) ** 2)), 1e-12))
    return fam


def make_flow_zero():
    """Flow of the zero field: P_theta = P_0 for every theta."""
    return flow_map_family(
        potential_grad=lambda u: np.zeros_like(u),
        fam_id="flow:zero",
        cdf=lambda theta, x: ndtr(np.asarray(x, dtype=float)),
        quantile=lambda theta, u: ndtri(np.asarray(u, dtype=float)),
        quantile_grad=lambda theta, u: np.zeros((len(np.atleast_1d(u)), 1)),
    )


# ---------------------------------------------------------------------------
# Planar families on a fixed square support (for the semi-discrete engine)
# ---------------------------------------------------------------------------

_UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def make_uniform_square():
    """Uniform density on the unit square; theta is inert (d p/d theta = 0)."""
    return FamilyModel(
        id="unif2d",
        d=2,
        p=1,
        k=1,
        theta_domain=(np.array([-np.inf]), np.array([np.inf])),
        chi=lambda theta: np.array([float(theta)]),
        dchi=lambda theta: np.array([[1.0]]),
        sampler=lambda theta, n, rng: rng.random((n, 2)),
        density=lambda theta, pts: np.ones(len(_col(pts))),
        density_dtheta=lambda theta, pts: np.zeros(len(_col(pts))),
        transport_linearization=lambda theta, pts: np.zeros((len(_col(pts)), 2, 1)),
        support_2d=lambda theta: _UNIT_SQUARE.copy(),
        check_theta_grid=(0.0, 1.0),
    )


def make_tilted_square():
    """Linearly tilted density p_theta(x, y) = 1 + theta (1 - 2x) on the unit square.

    The x-marginal has closed-form cdf/quantile, which gives an analytic
    transport linearization Phi_theta = (-x(1-x)/p1(x), 0) vanishing on the
    vertical edges; the field therefore has zero flux through the support
    boundary and both mixed-derivative formulas apply.
    """

    def density(theta, pts):
        pts = _col(pts)
        return 1.0 + theta * (1.0 - 2.0 * pts[:, 0])

    def density_dtheta(theta, pts):
        pts = _col(pts)
        return 1.0 - 2.0 * pts[:, 0]

    def lin(theta, pts):
        pts = _col(pts)
        x = pts[:, 0]
        out = np.zeros((len(pts), 2, 1))
        out[:, 0, 0] = -x * (1.0 - x) / (1.0 + theta * (1.0 - 2.0 * x))
        return out

    def x_quantile(theta, u):
        u = np.asarray(u, dtype=float)
        if abs(theta) < 1e-12:
            return u
        disc = (1.0 + theta) ** 2 - 4.0 * theta * u
        return ((1.0 + theta) - np.sqrt(disc)) / (2.0 * theta)

    def sampler(theta, n, rng):
        return np.column_stack([x_quantile(theta, rng.random(n)), rng.random(n)])

    return FamilyModel(
        id="tilt2d",
        d=2,
        p=1,
        k=1,
        theta_domain=(np.array([-0.95]), np.array([0.95])),
        chi=lambda theta: np.array([float(theta)]),
        dchi=lambda theta: np.array([[1.0]]),
        sampler=sampler,
        density=density,
        density_dtheta=density_dtheta,
        transport_linearization=lin,
        support_2d=lambda theta: _UNIT_SQUARE.copy(),
        pilot=lambda x: float(np.clip(3.0 * (0.5 - np.mean(_col(x)[:, 0])), -0.9, 0.9)),
        check_theta_grid=(-0.6, -0.2, 0.3, 0.7),
    )


def make_truncated_gauss_scale():
    """Isotropic Gaussian of scale theta centered in the unit square, truncated.

    Densities stay bounded away from zero on the square for moderate theta, so
    the dual solve assumptions hold; the scale enters only through the density
    (no transport linearization is registered).
    """
    c = 0.5

    def _z1(theta):
        lo, hi = (0.0 - c) / theta, (1.0 - c) / theta
        return theta * math.sqrt(2 * math.pi) * (ndtr(hi) - ndtr(lo))

    def _dz1(theta):
        # d/dtheta of integral over [0,1] of exp(-(t-c)^2/(2 theta^2)) dt
        def integrand(t):
            r = (t - c) ** 2
            return np.exp(-0.5 * r / theta**2) * r / theta**3

        return float(adaptive_integrate(integrand, 0.0, 1.0, tol=1e-13))

    def density(theta, pts):
        pts = _col(pts)
        r2 = (pts[:, 0] - c) ** 2 + (pts[:, 1] - c) ** 2
        return np.exp(-0.5 * r2 / theta**2) / _z1(theta) ** 2

    def density_dtheta(theta, pts):
        pts = _col(pts)
        r2 = (pts[:, 0] - c) ** 2 + (pts[:, 1] - c) ** 2
        z1 = _z1(theta)
        return density(theta, pts) * (r2 / theta**3 - 2.0 * _dz1(theta) / z1)

    def sampler(theta, n, rng):
        lo, hi = ndtr(-c / theta), ndtr((1.0 - c) / theta)
        u = lo + (hi - lo) * rng.random((n, 2))
        return c + theta * ndtri(u)

    return FamilyModel(
        id="tgauss2",
        d=2,
        p=1,
        k=1,
        theta_domain=(np.array([0.05]), np.array([5.0])),
        chi=lambda theta: np.array([float(theta)]),
        dchi=lambda theta: np.array([[1.0]]),
        sampler=sampler,
        density=density,
        density_dtheta=density_dtheta,
        support_2d=lambda theta: _UNIT_SQUARE.copy(),
        check_theta_grid=(0.3, 0.45, 0.6),
    )


def make_location_square():
    """Planar location family: uniform base on the centered unit square.

    theta shifts the support, so squared-distance evaluations against an
    empirical measure translate the sites instead; the fitted location equals
    the sample mean coordinatewise.
    """
    base = _UNIT_SQUARE - 0.5

    def sampler(theta, n, rng):
        th = np.asarray(theta, dtype=float).reshape(2)
        return rng.random((n, 2)) - 0.5 + th[None, :]

    return FamilyModel(
        id="loc2d:square",
        d=2,
        p=2,
        k=2,
        theta_domain=(np.full(2, -np.inf), np.full(2, np.inf)),
        chi=lambda theta: np.asarray(theta, dtype=float).reshape(2),
        dchi=lambda theta: np.eye(2),
        sampler=sampler,
        density=lambda theta, pts: np.ones(len(_col(pts))),
        density_dtheta=None,
        transport_linearization=lambda theta, pts: np.broadcast_to(
            np.eye(2), (len(_col(pts)), 2, 2)
        ).copy(),
        info_closed_form=lambda theta: np.eye(2),
        support_2d=lambda theta: base.copy(),
        location_like=True,
        pilot=lambda x: _col(x).mean(axis=0),
        check_theta_grid=(np.zeros(2), np.array([0.3, -0.2])),
    )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def register_builtin_families():
    """Catalog of every builtin family, keyed by string id."""
    fams = [
        make_location_family(_GAUSS),
        make_location_family(_LAPLACE),
        make_location_family(_GAUSS, d=2),
        make_uniform_scale_family(),
        make_unit_scale_family(),
        make_pareto_family(),
        make_gauss2_family(),
        make_gaussian_correlation_family(),
        make_regression_family(),
        make_flow_line(),
        make_flow_quad(),
        make_flow_zero(),
        make_uniform_square(),
        make_tilted_square(),
        make_truncated_gauss_scale(),
        make_location_square(),
    ]
    return {f.id: f for f in fams}


def resolve_family(fam_id, catalog=None):
    catalog = catalog if catalog is not None else register_builtin_families()
    if fam_id not in catalog:
        raise DomainError(f"unknown family id {fam_id!r}")
    return catalog[fam_id]
