import numpy as np
import pytest

from wcrlab.errors import DegenerateSitesError, DomainError, NonConvergenceError
from wcrlab.rng import stream
from wcrlab.sdot2d import (
    build_power_diagram,
    cell_integral,
    db_dtheta,
    dtheta_w2sq,
    grad_xi_w2sq,
    mixed_derivative_xi_theta,
    polygon_area,
    solve_dual,
)

FOUR_SITES = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


# ---------------------------------------------------------------------------
# diagram geometry
# ---------------------------------------------------------------------------

def test_single_site_owns_support(unit_square):
    diag = build_power_diagram(unit_square, np.array([[0.3, 0.6]]), np.zeros(1))
    verts, labels = diag.cells[0]
    assert polygon_area(verts) == pytest.approx(1.0)
    assert np.all(labels == -1)


def test_symmetric_quadrants(unit_square):
    diag = build_power_diagram(unit_square, FOUR_SITES, np.zeros(4))
    for i, site in enumerate(FOUR_SITES):
        verts, labels = diag.cells[i]
        assert polygon_area(verts) == pytest.approx(0.25, abs=1e-12)
        # bisectors are x = 1/2 and y = 1/2
        assert np.min(np.abs(verts - site[None, :])) >= 0.0
        for v in verts:
            assert (abs(v[0] - 0.5) < 1e-12 or v[0] in (0.0, 1.0)
                    or abs(v[1] - 0.5) < 1e-12 or v[1] in (0.0, 1.0))
        assert set(labels) - {-1} == {j for j in range(4) if j != i} - {3 - i}


def test_large_weight_gap_empties_a_cell(unit_square):
    sites = np.array([[0.2, 0.5], [0.8, 0.5]])
    # pushing the bisector past the left edge kills cell 0
    diag = build_power_diagram(unit_square, sites, np.array([-2.0, 2.0]))
    assert diag.cells[0] is None
    assert polygon_area(diag.cells[1][0]) == pytest.approx(1.0)


def test_duplicate_sites_raise(unit_square):
    with pytest.raises(DegenerateSitesError):
        build_power_diagram(unit_square, np.array([[0.5, 0.5], [0.5, 0.5]]), np.zeros(2))


def test_support_validation():
    with pytest.raises(DomainError):
        build_power_diagram(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]),
                            np.array([[0.5, 0.5]]), np.zeros(1))  # clockwise
    with pytest.raises(DomainError):
        build_power_diagram(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.5, 0.5]]),
                            np.zeros(1))


def test_cells_partition_support_and_minimize(unit_square):
    rng = stream(1, 0)
    sites = rng.random((12, 2))
    b = 0.05 * rng.standard_normal(12)
    b -= b.mean()
    diag = build_power_diagram(unit_square, sites, b)
    total = sum(polygon_area(c[0]) for c in diag.cells if c is not None)
    assert abs(total - 1.0) < 1e-9
    # random interior points belong to the cell with the minimal shifted cost
    pts = rng.random((200, 2))
    costs = np.sum((pts[:, None, :] - sites[None, :, :]) ** 2, axis=2) - b[None, :]
    owner = np.argmin(costs, axis=1)
    for p, i in zip(pts, owner):
        verts, _ = diag.cells[i]
        # point-in-convex-polygon with tolerance
        e = np.roll(verts, -1, axis=0) - verts
        rel = p[None, :] - verts
        cross = e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0]
        assert np.all(cross > -1e-9)


# ---------------------------------------------------------------------------
# cell integrals
# ---------------------------------------------------------------------------

def test_area_integral(unit_square):
    assert cell_integral(unit_square, lambda p: np.ones(len(p))) == pytest.approx(1.0)


def test_linear_exactness():
    tri = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    f = lambda p: 3.0 * p[:, 0] - p[:, 1] + 1.0
    centroid = tri.mean(axis=0)
    area = polygon_area(tri)
    got = cell_integral(tri, lambda p: np.ones(len(p)), f)
    assert got == pytest.approx(float(f(centroid[None, :])[0]) * area, abs=1e-12)


def test_quadrant_second_moment():
    # square of side 1/2 with the site at its center: 2 * integral (x-1/4)^2 = 1/96
    cell = np.array([[0.0, 0.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
    site = np.array([0.25, 0.25])
    val = cell_integral(cell, lambda p: np.ones(len(p)),
                        lambda p: np.sum((p - site) ** 2, axis=1))
    assert val == pytest.approx(1.0 / 96.0, abs=1e-14)


def test_empty_cell_integrates_to_zero():
    assert cell_integral(None, lambda p: np.ones(len(p))) == 0.0


# ---------------------------------------------------------------------------
# dual solve
# ---------------------------------------------------------------------------

def test_symmetric_four_site_solution(families, unit_square):
    res = solve_dual(families["unif2d"], 0.0, unit_square, FOUR_SITES)
    assert np.max(np.abs(res.weights)) < 1e-10
    assert res.w2sq == pytest.approx(1.0 / 24.0, abs=1e-8)
    np.testing.assert_allclose(res.masses, 0.25, atol=1e-10)
    assert abs(res.dual_value - res.w2sq) < 1e-8


def test_single_site_no_competition(families, unit_square):
    res = solve_dual(families["unif2d"], 0.0, unit_square, np.array([[0.3, 0.6]]))
    oracle = cell_integral(unit_square, lambda p: np.ones(len(p)),
                           lambda p: np.sum((p - np.array([0.3, 0.6])) ** 2, axis=1))
    assert res.w2sq == pytest.approx(oracle, abs=1e-12)
    assert res.weights[0] == 0.0


def test_two_symmetric_sites(families, unit_square):
    res = solve_dual(families["unif2d"], 0.0, unit_square,
                     np.array([[0.25, 0.5], [0.75, 0.5]]))
    np.testing.assert_allclose(res.weights, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.masses, 0.5, atol=1e-12)


@pytest.mark.parametrize("fam_id,theta,n,seed", [
    ("unif2d", 0.0, 9, 2),
    ("tilt2d", 0.4, 11, 3),
    ("tgauss2", 0.5, 14, 4),
])
def test_masses_reach_uniform(families, fam_id, theta, n, seed):
    fam = families[fam_id]
    sites = 0.1 + 0.8 * stream(seed, 0).random((n, 2))
    res = solve_dual(fam, theta, fam.support_2d(theta), sites)
    assert np.max(np.abs(res.masses - 1.0 / n)) < 1e-9 / n * 50 + 1e-10
    assert abs(res.dual_value - res.w2sq) < 1e-8


def test_descent_toward_barycenter(families, unit_square):
    fam = families["unif2d"]
    rng = stream(5, 0)
    for trial in range(20):
        sites = 0.15 + 0.7 * rng.random((6, 2))
        res = solve_dual(fam, 0.0, unit_square, sites)
        i = int(rng.integers(0, 6))
        g = grad_xi_w2sq(fam, 0.0, res, i)
        moved = sites.copy()
        moved[i] -= 1e-3 * g
        res2 = solve_dual(fam, 0.0, unit_square, moved, b0=res.weights)
        assert res2.w2sq <= res.w2sq + 1e-12


def test_nonconvergence_error(families, unit_square):
    sites = 0.1 + 0.8 * stream(6, 0).random((10, 2))
    with pytest.raises(NonConvergenceError):
        solve_dual(families["tgauss2"], 0.4, unit_square, sites, max_iter=1)


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------

def test_inert_parameter_gives_zero_derivatives(families, unit_square):
    fam = families["unif2d"]  # d p / d theta = 0 and Phi = 0
    sites = 0.2 + 0.6 * stream(7, 0).random((5, 2))
    res = solve_dual(fam, 0.0, unit_square, sites)
    assert dtheta_w2sq(fam, 0.0, res) == 0.0
    np.testing.assert_array_equal(db_dtheta(fam, 0.0, res), np.zeros(5))
    np.testing.assert_array_equal(mixed_derivative_xi_theta(fam, 0.0, res, 2), np.zeros(2))


def test_symmetric_gradients_vanish(families, unit_square):
    res = solve_dual(families["unif2d"], 0.0, unit_square, FOUR_SITES)
    for i in range(4):
        np.testing.assert_allclose(grad_xi_w2sq(families["unif2d"], 0.0, res, i),
                                   0.0, atol=1e-12)


def _fd_dtheta(fam, theta, support, sites, b0, h=1e-4):
    rp = solve_dual(fam, theta + h, support, sites, b0=b0)
    rm = solve_dual(fam, theta - h, support, sites, b0=b0)
    return (rp.w2sq - rm.w2sq) / (2.0 * h), rp, rm


@pytest.mark.parametrize("fam_id,theta,seed", [("tilt2d", 0.3, 8), ("tgauss2", 0.45, 9)])
def test_derivatives_match_finite_differences(families, fam_id, theta, seed):
    fam = families[fam_id]
    support = fam.support_2d(theta)
    sites = 0.12 + 0.76 * stream(seed, 0).random((8, 2))
    res = solve_dual(fam, theta, support, sites)
    fd, rp, rm = _fd_dtheta(fam, theta, support, sites, res.weights)
    assert abs(dtheta_w2sq(fam, theta, res) - fd) < 1e-6

    h = 1e-4
    i = 3
    fdg = np.zeros(2)
    for c in range(2):
        sp, sm = sites.copy(), sites.copy()
        sp[i, c] += h
        sm[i, c] -= h
        fdg[c] = (
            solve_dual(fam, theta, support, sp, b0=res.weights).w2sq
            - solve_dual(fam, theta, support, sm, b0=res.weights).w2sq
        ) / (2.0 * h)
    np.testing.assert_allclose(grad_xi_w2sq(fam, theta, res, i), fdg, atol=1e-6)

    mixed = mixed_derivative_xi_theta(fam, theta, res, i)
    fd_mixed = (grad_xi_w2sq(fam, theta + h, rp, i) - grad_xi_w2sq(fam, theta - h, rm, i)) / (2 * h)
    np.testing.assert_allclose(mixed, fd_mixed, atol=1e-5)


def test_both_mixed_forms_agree(families):
    # tilt2d has an analytic linearization AND an analytic density derivative
    from dataclasses import replace

    fam = families["tilt2d"]
    support = fam.support_2d(0.25)
    sites = 0.15 + 0.7 * stream(10, 0).random((7, 2))
    res = solve_dual(fam, 0.25, support, sites)
    db = db_dtheta(fam, 0.25, res)
    without_phi = replace(fam, transport_linearization=None)
    for i in range(7):
        a = mixed_derivative_xi_theta(fam, 0.25, res, i, db=db)
        b = mixed_derivative_xi_theta(without_phi, 0.25, res, i, db=db)
        np.testing.assert_allclose(a, b, atol=1e-9)
