"""Semi-discrete optimal transport in the plane.

Transporting an absolutely continuous measure on a convex polygon to n point
masses decomposes the support into Laguerre cells: site i owns the region
where the shifted squared distance |x - x_i|^2 - b_i is smallest.  The dual
weights b maximize the concave Kantorovich functional

    F(b) = (1/n) sum_i b_i + integral of min_i(|x - x_i|^2 - b_i) dP,

whose gradient entries are 1/n - mass(cell_i).  We solve it by a damped
Newton method: the Hessian couples neighboring cells through edge integrals
of the density, and steps are halved until no previously nonempty cell
vanishes.

Cells are produced by direct half-plane clipping of the support (O(n^2) per
diagram with distance pruning, appropriate at desk scale); each cell edge
remembers which neighbor cut it so interface integrals are available for the
Hessian and for the positional / parametric derivatives of the squared
distance.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._quad import leggauss, segment_integrate, triangle_integrate, triangle_rule_points
from .errors import (
    DegenerateConfigurationError,
    DegenerateSitesError,
    DomainError,
    NonConvergenceError,
)

__all__ = [
    "PowerDiagram",
    "DualSolveResult",
    "validate_support",
    "build_power_diagram",
    "cell_integral",
    "polygon_area",
    "solve_dual",
    "dtheta_w2sq",
    "grad_xi_w2sq",
    "db_dtheta",
    "mixed_derivative_xi_theta",
]

_BOUNDARY = -1  # edge label for pieces of the support boundary
_ITER_QUAD_LEVEL = 2  # fixed subdivision depth for in-iteration mass quadrature


@dataclass
class PowerDiagram:
    support: np.ndarray  # (v, 2) ccw convex polygon
    sites: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,), sum zero
    cells: list  # per site: (vertices (m, 2), edge_labels (m,)) or None


@dataclass
class DualSolveResult:
    diagram: PowerDiagram
    weights: np.ndarray
    masses: np.ndarray
    iterations: int
    grad_norm: float
    w2sq: float
    dual_value: float
    theta: object = None
    extras: dict = field(default_factory=dict)


def polygon_area(verts):
    v = np.asarray(verts, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def validate_support(verts):
    v = np.asarray(verts, dtype=float)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise DomainError("support must be a polygon with at least 3 vertices")
    area = polygon_area(v)
    if area <= 0:
        raise DomainError("support polygon must be counterclockwise with positive area")
    e = np.roll(v, -1, axis=0) - v
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.any(cross < -1e-12 * area):
        raise DomainError("support polygon must be convex")
    return v


def _clip(xs, ys, labels, ax, ay, c, new_label, eps):
    """Clip a convex polygon (python float lists) against {x : a . x <= c}."""
    m = len(xs)
    s = [ax * xs[k] + ay * ys[k] - c for k in range(m)]
    all_in = True
    any_in = False
    for v in s:
        if v > eps:
            all_in = False
        else:
            any_in = True
    if all_in:
        return xs, ys, labels
    if not any_in:
        return None, None, None
    ox, oy, ol = [], [], []
    for k in range(m):
        k2 = k + 1 if k + 1 < m else 0
        ina = s[k] <= eps
        inb = s[k2] <= eps
        if ina:
            ox.append(xs[k])
            oy.append(ys[k])
            ol.append(labels[k])
            if not inb:
                t = s[k] / (s[k] - s[k2])
                ox.append(xs[k] + t * (xs[k2] - xs[k]))
                oy.append(ys[k] + t * (ys[k2] - ys[k]))
                ol.append(new_label)
        elif inb:
            t = s[k] / (s[k] - s[k2])
            ox.append(xs[k] + t * (xs[k2] - xs[k]))
            oy.append(ys[k] + t * (ys[k2] - ys[k]))
            ol.append(labels[k])
    if len(ox) < 3:
        return None, None, None
    return ox, oy, ol


def _dedupe(xs, ys, labels, eps):
    """Drop zero-length edges (a merged vertex keeps the following edge label)."""
    m = len(xs)
    kx, ky, kl = [], [], []
    for k in range(m):
        nxt = k + 1 if k + 1 < m else 0
        if math.hypot(xs[nxt] - xs[k], ys[nxt] - ys[k]) > eps:
            kx.append(xs[k])
            ky.append(ys[k])
            kl.append(labels[k])
    if len(kx) < 3:
        return None
    return np.column_stack([kx, ky]), np.asarray(kl, dtype=int)


def build_power_diagram(support, sites, weights):
    """Laguerre cells of the given sites/weights, clipped to the support.

    The cell of site i is where |x - x_i|^2 - b_i is minimal, i.e. the
    intersection of the half-planes 2 x . (x_j - x_i) <= |x_j|^2 - |x_i|^2 +
    b_i - b_j over all j.  Empty cells are allowed and stored as None.
    Bisectors are processed by increasing site distance and skipped once they
    provably clear the current cell.
    """
    support = validate_support(support)
    sites = np.asarray(sites, dtype=float)
    b = np.asarray(weights, dtype=float)
    n = len(sites)
    if n != len(b):
        raise DomainError("weights must match sites")
    if n > 1:
        d2 = np.sum((sites[:, None, :] - sites[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        if np.min(d2) < 1e-24:
            raise DegenerateSitesError("duplicate sites")

    diam2 = float(np.max(np.sum((support[:, None] - support[None, :]) ** 2, axis=2)))
    scale = diam2 + (float(np.max(np.abs(b))) if n else 0.0)
    eps = 1e-13 * max(scale, 1.0)
    eps_merge = 1e-12 * max(math.sqrt(diam2), 1.0)
    norm2 = np.sum(sites**2, axis=1)
    spread = float(np.max(b) - np.min(b)) if n else 0.0

    sup_x = [float(v) for v in support[:, 0]]
    sup_y = [float(v) for v in support[:, 1]]
    sup_l = [_BOUNDARY] * len(support)

    cells = []
    for i in range(n):
        xi, yi = float(sites[i, 0]), float(sites[i, 1])
        xs, ys, labels = sup_x, sup_y, sup_l
        order = np.argsort(np.sum((sites - sites[i]) ** 2, axis=1), kind="stable")
        radius2 = max((x - xi) ** 2 + (y - yi) ** 2 for x, y in zip(xs, ys))
        for j in order[1:]:
            ux = float(sites[j, 0]) - xi
            uy = float(sites[j, 1]) - yi
            ulen = math.hypot(ux, uy)
            # all remaining bisectors stay beyond the current cell radius
            if 0.5 * ulen - 0.5 * spread / ulen > math.sqrt(radius2):
                break
            c = 0.5 * (norm2[j] - norm2[i] + b[i] - b[j])
            nxs, nys, nlabels = _clip(xs, ys, labels, 2.0 * ux, 2.0 * uy, 2.0 * c, int(j), eps)
            if nxs is None:
                xs = None
                break
            if nxs is not xs:
                xs, ys, labels = nxs, nys, nlabels
                radius2 = max((x - xi) ** 2 + (y - yi) ** 2 for x, y in zip(xs, ys))
        if xs is None:
            cells.append(None)
        else:
            cells.append(_dedupe(xs, ys, labels, eps_merge))
    return PowerDiagram(support=support, sites=sites, weights=b, cells=cells)


# ---------------------------------------------------------------------------
# Quadrature over cells
# ---------------------------------------------------------------------------

def cell_integral(cell, p, f=None, tol=1e-12):
    """Integral of f * p over a convex cell by fan triangulation.

    ``cell`` is a vertex array (or a (vertices, labels) pair); ``p`` and ``f``
    take (m, 2) point arrays.  Triangles are refined uniformly until two
    levels agree; a degenerate cell integrates to zero.
    """
    if cell is None:
        return 0.0
    verts = cell[0] if isinstance(cell, tuple) else np.asarray(cell, dtype=float)
    if verts is None or len(verts) < 3 or abs(polygon_area(verts)) < 1e-15:
        return 0.0
    centroid = verts.mean(axis=0)
    m = len(verts)
    tris = np.stack(
        [np.broadcast_to(centroid, (m, 2)), verts, np.roll(verts, -1, axis=0)], axis=1
    )

    if f is None:
        fn = p
    else:
        def fn(pts):
            fv = np.asarray(f(pts), dtype=float)
            pv = np.asarray(p(pts), dtype=float)
            return fv * (pv if fv.ndim == 1 else pv.reshape((-1,) + (1,) * (fv.ndim - 1)))

    return triangle_integrate(tris, fn, tol=tol)


def _fan_triangles(diagram):
    """All fan triangles of all cells: (tris (T, 3, 2), owner (T,))."""
    tris, owner = [], []
    for i, cell in enumerate(diagram.cells):
        if cell is None:
            continue
        verts = cell[0]
        centroid = verts.mean(axis=0)
        m = len(verts)
        stack = np.stack(
            [np.broadcast_to(centroid, (m, 2)), verts, np.roll(verts, -1, axis=0)], axis=1
        )
        tris.append(stack)
        owner.append(np.full(m, i))
    if not tris:
        return np.zeros((0, 3, 2)), np.zeros(0, dtype=int)
    return np.concatenate(tris), np.concatenate(owner)


def _subdivide_with_owner(tris, owner):
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
    tris4 = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    return tris4, np.concatenate([owner] * 4)


def _masses_fixed(diagram, dens, level=_ITER_QUAD_LEVEL):
    """Cell masses with a fixed-depth symmetric rule, batched across cells."""
    n = len(diagram.sites)
    tris, owner = _fan_triangles(diagram)
    if len(tris) == 0:
        return np.zeros(n)
    for _ in range(level):
        tris, owner = _subdivide_with_owner(tris, owner)
    bary, w = triangle_rule_points()
    pts = np.einsum("qk,tkd->tqd", bary, tris)
    vals = np.asarray(dens(pts.reshape(-1, 2)), dtype=float).reshape(len(tris), len(w))
    v0 = tris[:, 1] - tris[:, 0]
    v1 = tris[:, 2] - tris[:, 0]
    area = 0.5 * np.abs(v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0])
    per_tri = (vals @ w) * area
    out = np.zeros(n)
    np.add.at(out, owner, per_tri)
    return out


def _areas(diagram):
    n = len(diagram.sites)
    out = np.zeros(n)
    for i, cell in enumerate(diagram.cells):
        if cell is not None:
            out[i] = polygon_area(cell[0])
    return out


def _edge_list(diagram):
    """Unique interface segments: list of (i, j, a, b) with i < j."""
    edges = []
    for i, cell in enumerate(diagram.cells):
        if cell is None:
            continue
        verts, labels = cell
        m = len(verts)
        for k in range(m):
            j = int(labels[k])
            if j < 0 or j <= i:
                continue
            edges.append((i, j, verts[k], verts[(k + 1) % m]))
    return edges


def _edge_weight_matrix(diagram, dens, order=12):
    """Laplacian L = d(mass)/d(weights): off-diagonal -w_ij, diagonal sums.

    w_ij is the integral of p / (2 |x_i - x_j|) along the shared edge, the
    rate at which mass flows between the two cells as their weight gap moves
    the bisector; all edges are quadratured in one batch.
    """
    n = len(diagram.sites)
    lap = np.zeros((n, n))
    edges = _edge_list(diagram)
    if not edges:
        return lap
    x, w = leggauss(order)
    t = 0.5 * (x + 1.0)
    p0 = np.array([e[2] for e in edges])
    p1 = np.array([e[3] for e in edges])
    lengths = np.linalg.norm(p1 - p0, axis=1)
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    vals = np.asarray(dens(pts.reshape(-1, 2)), dtype=float).reshape(len(edges), order)
    seg = (vals @ w) * 0.5 * lengths
    for (i, j, _, _), integral, in zip(edges, seg):
        dist = float(np.linalg.norm(diagram.sites[i] - diagram.sites[j]))
        wij = integral / (2.0 * dist)
        lap[i, j] -= wij
        lap[j, i] -= wij
        lap[i, i] += wij
        lap[j, j] += wij
    return lap


def _reduced(lap):
    return lap[:-1, :-1] - lap[:-1, -1:]


def solve_dual(family, theta, support, sites, tol=None, max_iter=60, b0=None):
    """Damped Newton ascent of the semi-discrete dual.

    Requires the density to be bounded below on the support so the optimum
    has full-mass cells.  Converges when the mass residual ``max_i |1/n -
    m_i|`` drops below ``tol`` (default 1e-9 / n); steps are halved whenever a
    previously nonempty cell would vanish.
    """
    sites = np.asarray(sites, dtype=float)
    n = len(sites)
    if tol is None:
        tol = 1e-9 / n
    dens = lambda pts: family.density(theta, pts)
    b = np.zeros(n) if b0 is None else np.asarray(b0, dtype=float).copy()
    b -= b.mean()

    diagram = build_power_diagram(support, sites, b)
    masses = _masses_fixed(diagram, dens)

    # bootstrap: decaying supergradient ascent until every cell has mass
    # (sites outside the support, or a poor warm start, can begin empty)
    if n > 1 and any(c is None or m <= 0 for c, m in zip(diagram.cells, masses)):
        sup = np.asarray(support, dtype=float)
        diam2 = float(np.max(np.sum((sup[:, None] - sup[None, :]) ** 2, axis=2)))
        # lift starved cells gently and one-sidedly; increments well below the
        # per-cell weight scale hand them slivers of territory without
        # starving their neighbors in turn
        bump = 0.3 * diam2 / n
        for attempt in range(800):
            dead = np.array([(c is None) or (m <= 0) for c, m in zip(diagram.cells, masses)])
            if not dead.any():
                break
            b = b + np.where(dead, bump, 0.0)
            b -= b.mean()
            diagram = build_power_diagram(support, sites, b)
            masses = _masses_fixed(diagram, dens)
            if attempt % 60 == 59:
                bump *= 1.3
        else:
            raise DegenerateConfigurationError("could not find a starting point with full cells")

    iterations = 0
    grad = 1.0 / n - masses
    for iterations in range(1, max_iter + 1):
        if float(np.max(np.abs(grad))) < tol:
            break
        if n == 1:
            break
        lap = _edge_weight_matrix(diagram, dens)
        try:
            delta_red = np.linalg.solve(_reduced(lap), grad[:-1])
        except np.linalg.LinAlgError as exc:
            raise DegenerateConfigurationError(f"singular dual Hessian: {exc}") from exc
        delta = np.append(delta_red, -delta_red.sum())
        # the Newton direction satisfies dg/dt = -g, so the Euclidean residual
        # decreases for small steps; damp until it does and no cell vanishes
        gnorm2 = float(np.linalg.norm(grad))
        t = 1.0
        while True:
            trial = b + t * delta
            trial -= trial.mean()
            trial_diagram = build_power_diagram(support, sites, trial)
            alive = all(c is not None for c in trial_diagram.cells)
            if alive:
                trial_masses = _masses_fixed(trial_diagram, dens)
                alive = bool(np.all(trial_masses > 0.0))
            if alive:
                trial_grad = 1.0 / n - trial_masses
                tnorm2 = float(np.linalg.norm(trial_grad))
                if tnorm2 <= (1.0 - 0.1 * t) * gnorm2 or float(np.max(np.abs(trial_grad))) < tol:
                    break
            t *= 0.5
            if t < 1e-12:
                if float(np.max(np.abs(grad))) < max(50.0 * tol, 1e-10):
                    # at the quadrature-roundoff floor; the state is converged
                    # for every downstream purpose
                    t = None
                    break
                raise DegenerateConfigurationError("empty-cell deadlock in the damped step")
        if t is None:
            break
        b, diagram, masses, grad = trial, trial_diagram, trial_masses, trial_grad
    else:
        raise NonConvergenceError(
            f"dual solve did not reach tol={tol:g} in {max_iter} iterations",
            residual=float(np.max(np.abs(grad))),
        )

    sq = np.array(
        [
            cell_integral(cell, dens, lambda pts, s=site: np.sum((pts - s) ** 2, axis=1))
            for cell, site in zip(diagram.cells, sites)
        ]
    )
    w2sq = float(sq.sum())
    dual_value = float(b.mean() + np.sum(sq - b * masses))
    return DualSolveResult(
        diagram=diagram,
        weights=b,
        masses=masses,
        iterations=iterations,
        grad_norm=float(np.max(np.abs(grad))),
        w2sq=w2sq,
        dual_value=dual_value,
        theta=theta,
    )


def _density_dtheta(family, theta):
    if family.density_dtheta is not None:
        return lambda pts: family.density_dtheta(theta, pts)
    h = 1e-5 * (1.0 + abs(float(theta)))
    return lambda pts: (
        np.asarray(family.density(theta + h, pts), dtype=float)
        - np.asarray(family.density(theta - h, pts), dtype=float)
    ) / (2.0 * h)


def dtheta_w2sq(family, theta, result):
    """d/dtheta of the squared distance: integral of the dual potential against
    the density derivative, evaluated cellwise as (|x - x_i|^2 - b_i)."""
    dp = _density_dtheta(family, theta)
    total = 0.0
    for cell, site, bi in zip(result.diagram.cells, result.diagram.sites, result.weights):
        total += cell_integral(
            cell, dp, lambda pts, s=site, w=bi: np.sum((pts - s) ** 2, axis=1) - w
        )
    return float(total)


def grad_xi_w2sq(family, theta, result, i):
    """Gradient in site i: 2 (x_i m_i - integral of x over its cell)."""
    dens = lambda pts: family.density(theta, pts)
    cell = result.diagram.cells[i]
    first_moment = cell_integral(cell, dens, lambda pts: pts)
    first_moment = np.zeros(2) if np.isscalar(first_moment) else first_moment
    return 2.0 * (result.diagram.sites[i] * result.masses[i] - first_moment)


def db_dtheta(family, theta, result):
    """Sensitivity of the optimal dual weights to theta (implicit function rule).

    Differentiating the optimality system ``m_i(b(theta), theta) = 1/n`` gives
    L db/dtheta = -(d m/d theta at fixed b), solved in the sum-zero gauge.
    """
    dens = lambda pts: family.density(theta, pts)
    dp = _density_dtheta(family, theta)
    lap = _edge_weight_matrix(result.diagram, dens)
    q = np.array([cell_integral(cell, dp) for cell in result.diagram.cells])
    try:
        y_red = np.linalg.solve(_reduced(lap), -q[:-1])
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError(f"singular dual Hessian: {exc}") from exc
    return np.append(y_red, -y_red.sum())


def mixed_derivative_xi_theta(family, theta, result, i, db=None):
    """The site-by-parameter mixed derivative of the squared distance.

    When the family registers a transport linearization Phi with no flux
    through the support boundary, uses the volume term -2 int_{V_i} Phi p plus
    interface terms weighted by 2 Phi^T (x_j - x_i) + (db_j - db_i); otherwise
    falls back to the equivalent form in the density derivative.  Both need
    db/dtheta from the implicit-function system.
    """
    if db is None:
        db = db_dtheta(family, theta, result)
    diagram = result.diagram
    cell = diagram.cells[i]
    if cell is None:
        return np.zeros(2)
    dens = lambda pts: family.density(theta, pts)
    sites = diagram.sites
    verts, labels = cell
    m = len(verts)

    if family.transport_linearization is not None:
        phi = lambda pts: family.transport_linearization(theta, pts)[:, :, 0]
        vol = -2.0 * cell_integral(cell, dens, phi)
        vol = np.zeros(2) if np.isscalar(vol) else vol
        interface = np.zeros(2)
        for k in range(m):
            j = int(labels[k])
            if j < 0:
                continue
            a, bpt = verts[k], verts[(k + 1) % m]
            u = sites[j] - sites[i]
            dist = float(np.linalg.norm(u))

            def integrand(pts, u=u, j=j, dist=dist):
                ph = phi(pts)  # (m, 2)
                coef = 2.0 * ph @ u + (db[j] - db[i])
                return (
                    coef[:, None]
                    * (pts - sites[i])
                    / dist
                    * np.asarray(dens(pts), dtype=float)[:, None]
                )

            interface += segment_integrate(integrand, a, bpt)
        return vol + interface

    # density-derivative form: 2 int (x_i - x) dp - interface flux from moving bisectors
    dp = _density_dtheta(family, theta)
    vol = 2.0 * cell_integral(cell, dp, lambda pts: sites[i][None, :] - pts)
    vol = np.zeros(2) if np.isscalar(vol) else vol
    interface = np.zeros(2)
    for k in range(m):
        j = int(labels[k])
        if j < 0:
            continue
        a, bpt = verts[k], verts[(k + 1) % m]
        dist = float(np.linalg.norm(sites[j] - sites[i]))

        def integrand(pts, j=j, dist=dist):
            return (
                (sites[i][None, :] - pts)
                * ((db[j] - db[i]) / dist)
                * np.asarray(dens(pts), dtype=float)[:, None]
            )

        interface -= segment_integrate(integrand, a, bpt)
    return vol + interface
