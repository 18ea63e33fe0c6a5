"""Operator assembly and the algebraic identities of the inertial forms.

The identity tests use fields with homogeneous boundary values, matching the
hypotheses under which the integration-by-parts identities are exact for
conforming piecewise polynomials with exact quadrature.
"""

import numpy as np
import pytest

from emac2d.fespace import (FieldVector, cell_geometry, evaluate,
                            field_values_and_grads, interpolate,
                            triangle_rule)
from emac2d.forms import (FIX_FIRST, FIX_SECOND, FORM_KINDS, assemble_divergence,
                          assemble_mass, assemble_stiffness, assemble_trilinear,
                          eval_trilinear, pressure_mean_vector, trilinear_rhs)
from emac2d.mesh import Mesh, build_structured_mesh

from conftest import constant_velocity, random_velocity

TOL = 1e-12


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(20240817)


def quad_integral(mesh, values):
    """Direct degree-6 quadrature of pointwise values (T, nq)."""
    rule = triangle_rule(6)
    geo = cell_geometry(mesh)
    wd = rule.weights[None, :] * geo.det[:, None]
    return float(np.sum(wd * values))


def div_term(u, v, w):
    """((div u) v, w) by direct quadrature (oracle for the identities)."""
    rule = triangle_rule(6)
    _, ug = field_values_and_grads(u, rule)
    vv, _ = field_values_and_grads(v, rule)
    wv, _ = field_values_and_grads(w, rule)
    div_u = ug[..., 0, 0] + ug[..., 1, 1]
    return quad_integral(u.space.mesh, div_u * np.einsum("tqm,tqm->tq", vv, wv))


# ---------------------------------------------------------------------------
# Bilinear operators
# ---------------------------------------------------------------------------

def test_mass_row_sums_equal_area(th8):
    _, pres = th8
    M = assemble_mass(pres)
    ones = np.ones(pres.num_dofs)
    assert abs(ones @ (M @ ones) - 1.0) < 1e-14


def test_mass_symmetry_and_quadrature_oracle(th8, rng):
    vel, _ = th8
    M = assemble_mass(vel)
    assert abs(M - M.T).max() < 1e-14
    fld = random_velocity(vel, rng, zero_boundary=False)
    vals, _ = field_values_and_grads(fld)
    oracle = quad_integral(vel.mesh, np.einsum("tqm,tqm->tq", vals, vals))
    assert abs(fld.coeffs @ (M @ fld.coeffs) - oracle) < 1e-13 * max(1, oracle)


def test_stiffness_kernel_symmetry_oracle(th8, rng):
    vel, _ = th8
    K = assemble_stiffness(vel)
    assert abs(K - K.T).max() < 1e-14
    const = constant_velocity(vel, (1.0, -2.0))
    assert np.abs(K @ const.coeffs).max() < 1e-13
    fld = random_velocity(vel, rng, zero_boundary=False)
    _, grads = field_values_and_grads(fld)
    oracle = quad_integral(vel.mesh,
                           np.einsum("tqmn,tqmn->tq", grads, grads))
    assert abs(fld.coeffs @ (K @ fld.coeffs) - oracle) < 1e-12 * max(1, oracle)


def test_divergence_on_divergence_free_and_linear_fields(th8):
    vel, pres = th8
    B = assemble_divergence(vel, pres)
    rigid = interpolate(vel, lambda x, y, t: (-y, x))
    assert np.abs(B @ rigid.coeffs).max() < 1e-12
    vx = interpolate(vel, lambda x, y, t: (x, 0.0 * x))
    # (div v, 1) equals the domain area via the P1 partition of unity.
    assert abs((B @ vx.coeffs).sum() - 1.0) < 1e-13


def test_divergence_quadrature_oracle(th8, rng):
    vel, pres = th8
    B = assemble_divergence(vel, pres)
    fld = random_velocity(vel, rng, zero_boundary=False)
    rule = triangle_rule(6)
    _, g = field_values_and_grads(fld, rule)
    div = g[..., 0, 0] + g[..., 1, 1]
    geo = cell_geometry(vel.mesh)
    wd = rule.weights[None, :] * geo.det[:, None]
    pv = pres.element.values(rule.points)
    cellwise = np.einsum("tq,tq,qb->tb", wd, div, pv)
    oracle = np.bincount(pres.cell_dofs.ravel(), weights=cellwise.ravel(),
                         minlength=pres.num_dofs)
    assert np.abs(B @ fld.coeffs - oracle).max() < 1e-13


def test_assembly_independent_of_cell_order(mesh8, th8):
    vel, pres = th8
    perm = np.random.default_rng(0).permutation(mesh8.num_cells)
    shuffled = Mesh(mesh8.vertices, mesh8.cells[perm], mesh8.boundary_edges,
                    mesh8.boundary_tags)
    from emac2d.fespace import build_taylor_hood
    vel2, pres2 = build_taylor_hood(shuffled)
    assert abs(assemble_mass(vel) - assemble_mass(vel2)).max() < 1e-14
    assert abs(assemble_stiffness(vel) - assemble_stiffness(vel2)).max() < 1e-13
    assert abs(assemble_divergence(vel, pres)
               - assemble_divergence(vel2, pres2)).max() < 1e-14


# ---------------------------------------------------------------------------
# Trilinear evaluation
# ---------------------------------------------------------------------------

def test_conv_hand_integrated_value(th8):
    vel, _ = th8
    e1 = constant_velocity(vel, (1.0, 0.0))
    vx = interpolate(vel, lambda x, y, t: (x, 0.0 * x))
    assert abs(eval_trilinear("conv", e1, vx, e1) - 1.0) < 1e-13


@pytest.mark.parametrize("kind", FORM_KINDS)
def test_zero_first_argument(kind, th8, rng):
    vel, _ = th8
    v = random_velocity(vel, rng)
    w = random_velocity(vel, rng)
    zero = vel.zero_field()
    assert eval_trilinear(kind, zero, v, w) == 0.0


def test_skew_is_skew_symmetric(th8, rng):
    vel, _ = th8
    for _ in range(5):
        u = random_velocity(vel, rng, zero_boundary=False)
        w = random_velocity(vel, rng, zero_boundary=False)
        assert abs(eval_trilinear("skew", u, w, w)) < TOL


@pytest.mark.parametrize("kind", FORM_KINDS)
@pytest.mark.parametrize("slot", [FIX_FIRST, FIX_SECOND])
def test_assembly_matches_evaluation(kind, slot, th8, rng):
    vel, _ = th8
    wind = random_velocity(vel, rng, zero_boundary=False)
    c = random_velocity(vel, rng, zero_boundary=False)
    d = random_velocity(vel, rng, zero_boundary=False)
    N = assemble_trilinear(kind, slot, wind)
    got = d.coeffs @ (N @ c.coeffs)
    if slot == FIX_FIRST:
        want = eval_trilinear(kind, wind, c, d)
    else:
        want = eval_trilinear(kind, c, wind, d)
    assert abs(got - want) < TOL * max(1.0, abs(want))


@pytest.mark.parametrize("kind", FORM_KINDS)
@pytest.mark.parametrize("slot", [FIX_FIRST, FIX_SECOND])
def test_zero_wind_gives_zero_matrix(kind, slot, th8):
    vel, _ = th8
    N = assemble_trilinear(kind, slot, vel.zero_field())
    assert abs(N).max() == 0.0


@pytest.mark.parametrize("kind", FORM_KINDS)
def test_rhs_matches_evaluation(kind, th8, rng):
    vel, _ = th8
    u = random_velocity(vel, rng, zero_boundary=False)
    v = random_velocity(vel, rng, zero_boundary=False)
    w = random_velocity(vel, rng, zero_boundary=False)
    r = trilinear_rhs(kind, u, v)
    assert abs(w.coeffs @ r - eval_trilinear(kind, u, v, w)) < TOL


def test_emac_matrix_recovers_energy_identity(th8, rng):
    vel, _ = th8
    a = random_velocity(vel, rng)   # zero boundary
    N = assemble_trilinear("emac", FIX_FIRST, a)
    assert abs(a.coeffs @ (N @ a.coeffs)) < TOL


# ---------------------------------------------------------------------------
# Identities between the forms (20 random zero-boundary triples)
# ---------------------------------------------------------------------------

def triples(vel, rng, count=20):
    for _ in range(count):
        yield (random_velocity(vel, rng), random_velocity(vel, rng),
               random_velocity(vel, rng))


def test_identity_conv_integration_by_parts(th8, rng):
    vel, _ = th8
    for u, v, w in triples(vel, rng):
        lhs = eval_trilinear("conv", u, v, w)
        rhs = -eval_trilinear("conv", u, w, v) - div_term(u, v, w)
        assert abs(lhs - rhs) < TOL


def test_identity_conv_quadratic(th8, rng):
    vel, _ = th8
    for u, w, _ in triples(vel, rng, 10):
        lhs = eval_trilinear("conv", u, w, w)
        rhs = -0.5 * div_term(u, w, w)
        assert abs(lhs - rhs) < TOL


def test_identity_emac_via_conv_with_div(th8, rng):
    vel, _ = th8
    for u, v, w in triples(vel, rng):
        lhs = eval_trilinear("emac", u, v, w)
        rhs = (eval_trilinear("conv", v, u, w)
               + eval_trilinear("conv", w, u, v) + div_term(u, v, w))
        assert abs(lhs - rhs) < TOL


def test_identity_emac_via_conv_only(th8, rng):
    vel, _ = th8
    for u, v, w in triples(vel, rng):
        lhs = eval_trilinear("emac", u, v, w)
        rhs = (eval_trilinear("conv", v, u, w) + eval_trilinear("conv", w, u, v)
               - eval_trilinear("conv", u, v, w)
               - eval_trilinear("conv", u, w, v))
        assert abs(lhs - rhs) < TOL


def test_emac_energy_identity(th8, rng):
    vel, _ = th8
    for u, _, _ in triples(vel, rng):
        assert abs(eval_trilinear("emac", u, u, u)) < TOL


def test_emac_momentum_identity(th8, rng):
    vel, _ = th8
    e1 = constant_velocity(vel, (1.0, 0.0))
    e2 = constant_velocity(vel, (0.0, 1.0))
    for a, _, _ in triples(vel, rng):
        assert abs(eval_trilinear("emac", a, a, e1)) < TOL
        assert abs(eval_trilinear("emac", a, a, e2)) < TOL


def test_emac_angular_momentum_identity(th8, rng):
    vel, _ = th8
    phi = interpolate(vel, lambda x, y, t: (-y, x))
    for a, _, _ in triples(vel, rng):
        assert abs(eval_trilinear("emac", a, a, phi)) < TOL


def newton_combination(a, b, c):
    return (eval_trilinear("emac", a, b, c) + eval_trilinear("emac", b, a, c)
            - eval_trilinear("emac", a, a, c))


def test_newton_correction_cancellations(th8, rng):
    vel, _ = th8
    e1 = constant_velocity(vel, (1.0, 0.0))
    e2 = constant_velocity(vel, (0.0, 1.0))
    phi = interpolate(vel, lambda x, y, t: (-y, x))
    for a, b, _ in triples(vel, rng):
        for c in (e1, e2, phi):
            assert abs(newton_combination(a, b, c)) < TOL
        diff = FieldVector(vel, b.coeffs - a.coeffs)
        lhs = newton_combination(a, b, b)
        rhs = -eval_trilinear("emac", diff, diff, b)
        assert abs(lhs - rhs) < TOL


def test_emac_boundedness_smoke(th8, rng):
    # Finite-sample sanity: |b(u,v,w)| <= C |u|_1 |v|_1 |w|_1 with one fitted
    # constant over 100 random triples on a fixed mesh.
    from emac2d.diagnostics import h1_norm
    vel, _ = th8
    ratios = []
    for _ in range(100):
        u = random_velocity(vel, rng, zero_boundary=False)
        v = random_velocity(vel, rng, zero_boundary=False)
        w = random_velocity(vel, rng, zero_boundary=False)
        denom = h1_norm(u) * h1_norm(v) * h1_norm(w)
        ratios.append(abs(eval_trilinear("emac", u, v, w)) / denom)
    fitted = max(ratios)
    assert np.isfinite(fitted)
    assert fitted < 10.0


def test_trilinear_rejects_bad_input(th8, rng):
    vel, pres = th8
    u = random_velocity(vel, rng)
    with pytest.raises(ValueError):
        eval_trilinear("nope", u, u, u)
    with pytest.raises(ValueError):
        eval_trilinear("conv", u, u, FieldVector(pres, np.zeros(pres.num_dofs)))
    with pytest.raises(ValueError):
        assemble_trilinear("conv", "fix-third", u)


def test_trilinear_assembly_cell_order_independent(mesh8, th8, rng):
    vel, _ = th8
    perm = np.random.default_rng(1).permutation(mesh8.num_cells)
    shuffled = Mesh(mesh8.vertices, mesh8.cells[perm], mesh8.boundary_edges,
                    mesh8.boundary_tags)
    from emac2d.fespace import build_taylor_hood
    vel2, _ = build_taylor_hood(shuffled)
    wind = random_velocity(vel, rng, zero_boundary=False)
    wind2 = FieldVector(vel2, wind.coeffs.copy())
    N1 = assemble_trilinear("emac", FIX_FIRST, wind)
    N2 = assemble_trilinear("emac", FIX_FIRST, wind2)
    assert abs(N1 - N2).max() < 1e-13


def test_pressure_mean_vector_is_area(th8):
    _, pres = th8
    m = pressure_mean_vector(pres)
    assert abs(m.sum() - 1.0) < 1e-14
