"""Gauss-Legendre panel quadrature helpers.

Everything here works on vectorized integrands: ``f(x)`` takes an array of
abscissae of shape (m,) (or (m, 2) for the planar rules) and returns an array
whose leading axis matches ``x``.  Trailing axes are allowed, so matrix-valued
integrands come through unchanged.
"""

from functools import lru_cache

import numpy as np

from .errors import QuadratureError

__all__ = [
    "leggauss",
    "panel_nodes",
    "fixed_panel_integrate",
    "adaptive_integrate",
    "segment_integrate",
    "triangle_rule_points",
    "triangle_integrate",
]


@lru_cache(maxsize=None)
def leggauss(order):
    """Nodes and weights of the order-``order`` Gauss-Legendre rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def panel_nodes(edges, order):
    """Quadrature nodes/weights for the panels defined by ``edges``.

    Parameters
    ----------
    edges : array of shape (m+1,)
        Panel boundaries, nondecreasing.
    order : int
        Gauss-Legendre order per panel.

    Returns
    -------
    (nodes, weights) : arrays of shape (m, order)
    """
    edges = np.asarray(edges, dtype=float)
    x, w = leggauss(order)
    a = edges[:-1, None]
    b = edges[1:, None]
    half = 0.5 * (b - a)
    nodes = a + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return nodes, weights


def fixed_panel_integrate(f, edges, order=8):
    """Integrate ``f`` over [edges[0], edges[-1]] with one GL rule per panel."""
    nodes, weights = panel_nodes(edges, order)
    vals = np.asarray(f(nodes.ravel()))
    vals = vals.reshape(nodes.shape + vals.shape[1:])
    wts = weights.reshape(weights.shape + (1,) * (vals.ndim - 2))
    return np.sum(vals * wts, axis=(0, 1))


def _gl_on(f, a, b, order):
    x, w = leggauss(order)
    half = 0.5 * (b - a)
    nodes = a + half * (x + 1.0)
    vals = np.asarray(f(nodes))
    wts = (half * w).reshape((-1,) + (1,) * (vals.ndim - 1))
    return np.sum(vals * wts, axis=0)


def adaptive_integrate(f, a, b, tol=1e-10, order=16, max_depth=60):
    """Adaptively refined Gauss-Legendre integration of a vectorized integrand.

    Panels are bisected wherever a whole-panel estimate disagrees with the sum
    of its two halves, so endpoint singularities get geometrically shrinking
    panels while smooth regions stay coarse.  Values may be vector or matrix
    valued; disagreement is measured in the Frobenius norm.

    Raises
    ------
    QuadratureError
        If some panel still disagrees at the maximum bisection depth.  The
        exception carries the last two estimates of the offending panel.
    """

    def recurse(lo, hi, whole, depth):
        mid = 0.5 * (lo + hi)
        left = _gl_on(f, lo, mid, order)
        right = _gl_on(f, mid, hi, order)
        err = np.linalg.norm(np.atleast_1d(left + right - whole))
        if err < tol * max(1.0, (hi - lo) / (b - a)):
            return left + right
        if depth >= max_depth:
            raise QuadratureError(
                f"adaptive quadrature stalled on [{lo}, {hi}] (err={err:.3e})",
                last_two=(whole, left + right),
            )
        return recurse(lo, mid, left, depth + 1) + recurse(mid, hi, right, depth + 1)

    if not b > a:
        probe = np.asarray(f(np.asarray([0.5 * (a + b)])))
        return np.zeros(probe.shape[1:]) if probe.ndim > 1 else 0.0
    return recurse(a, b, _gl_on(f, a, b, order), 0)


def segment_integrate(f, p0, p1, order=12):
    """Line integral of ``f`` along the segment p0->p1 (with respect to length)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    length = float(np.linalg.norm(p1 - p0))
    if length == 0.0:
        return 0.0
    x, w = leggauss(order)
    t = 0.5 * (x + 1.0)
    pts = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    vals = np.asarray(f(pts))
    wts = (0.5 * length * w).reshape((-1,) + (1,) * (vals.ndim - 1))
    return np.sum(vals * wts, axis=0)


@lru_cache(maxsize=None)
def triangle_rule_points():
    """Seven-point symmetric rule on the reference triangle, exact to degree 5."""
    a1 = 0.0597158717897698
    b1 = 0.4701420641051151
    a2 = 0.7974269853530873
    b2 = 0.1012865073234563
    bary = np.array(
        [
            [1 / 3, 1 / 3, 1 / 3],
            [a1, b1, b1],
            [b1, a1, b1],
            [b1, b1, a1],
            [a2, b2, b2],
            [b2, a2, b2],
            [b2, b2, a2],
        ]
    )
    w = np.array(
        [0.225]
        + [0.1323941527885062] * 3
        + [0.1259391805448271] * 3
    )
    return bary, w


def _triangles_integrate_once(tris, f):
    """Apply the 7-point rule on a stack of triangles of shape (t, 3, 2)."""
    bary, w = triangle_rule_points()
    pts = np.einsum("qk,tkd->tqd", bary, tris)
    flat = pts.reshape(-1, 2)
    vals = np.asarray(f(flat))
    vals = vals.reshape(pts.shape[:2] + vals.shape[1:])
    v0 = tris[:, 1] - tris[:, 0]
    v1 = tris[:, 2] - tris[:, 0]
    area = 0.5 * np.abs(v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0])
    wts = w.reshape((1, -1) + (1,) * (vals.ndim - 2))
    per_tri = np.sum(vals * wts, axis=1)
    return np.sum(per_tri * area.reshape((-1,) + (1,) * (per_tri.ndim - 1)), axis=0)


def _subdivide(tris):
    """Split each triangle into 4 by edge midpoints."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab = 0.5 * (a + b)
    bc = 0.5 * (b + c)
    ca = 0.5 * (c + a)
    return np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )


def triangle_integrate(tris, f, tol=1e-11, max_level=6):
    """Integrate ``f`` over a union of triangles, refining until stable.

    ``tris`` has shape (t, 3, 2).  Refinement is uniform: every triangle is
    split into four until two consecutive levels agree to ``tol`` (absolute,
    Frobenius for matrix values) or ``max_level`` is reached.
    """
    tris = np.asarray(tris, dtype=float)
    if tris.size == 0:
        return 0.0
    prev = _triangles_integrate_once(tris, f)
    for _ in range(max_level):
        tris = _subdivide(tris)
        cur = _triangles_integrate_once(tris, f)
        if np.linalg.norm(np.atleast_1d(cur - prev)) < tol:
            return cur
        prev = cur
    return prev
