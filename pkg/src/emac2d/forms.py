"""Bilinear operators and the five inertial trilinear forms.

Trilinear forms b(u, v, w) on the vector-P2 velocity space, with pointwise
integrands (gradients indexed as grad[i, j] = d u_i / d x_j):

    conv:  ((u . grad) v) . w
    emac:  (2 D(u) v) . w + ((div u) v) . w,   D(u) = (grad u + grad u^T)/2
    skew:  1/2 ((u . grad) v) . w - 1/2 ((u . grad) w) . v
    rota:  ((curl u) x v) . w   with scalar 2D curl and planar cross product
    dive:  (div (u x v-tensor)) . w = ((div u) v + (u . grad) v) . w

Every form supports evaluation (a number), linearized assembly with the wind
frozen in the first or second slot (a sparse matrix acting on the remaining
slot), and right-hand-side assembly against all test functions.

All integrals use rules that are exact for the integrands (degree 4 for
bilinear terms, degree 6 for trilinear ones), so the algebraic identities
between the forms hold to rounding error for discrete fields.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fespace import (BILINEAR_DEGREE, FUNCTIONAL_DEGREE, FeSpace,
                      FieldVector, cell_geometry, field_values_and_grads,
                      physical_grads, triangle_rule)

FORM_KINDS = ("conv", "emac", "skew", "rota", "dive")
FIX_FIRST = "fix-first"
FIX_SECOND = "fix-second"


def _check_kind(kind):
    if kind not in FORM_KINDS:
        raise ValueError(f"unknown form kind {kind!r}; expected one of "
                         f"{FORM_KINDS}")


def _quad_data(space, degree):
    """Quadrature weights times det J, basis values, physical gradients."""
    key = ("quad_data", degree)
    out = space.cache.get(key)
    if out is None:
        rule = triangle_rule(degree)
        geo = cell_geometry(space.mesh)
        wd = rule.weights[None, :] * geo.det[:, None]          # (T, nq)
        sv = space.element.values(rule.points)                 # (nq, nb)
        sg = physical_grads(space.mesh, space.element, rule)   # (T, nq, nb, 2)
        out = space.cache[key] = (rule, wd, sv, sg)
    return out


def _scatter(blocks, row_dofs, col_dofs, shape):
    """Accumulate per-cell dense blocks into a CSR matrix.

    Duplicate entries are summed in (row, col) order by scipy, which is
    independent of cell order up to floating-point association.
    """
    ni, nj = blocks.shape[1], blocks.shape[2]
    rows = np.repeat(row_dofs, nj, axis=1).ravel()
    cols = np.tile(col_dofs, (1, ni)).ravel()
    return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=shape).tocsr()


def _accumulate(space, cellwise):
    """Sum per-cell values (T, ndof_per_cell) into a global vector."""
    return np.bincount(space.cell_dofs.ravel(), weights=cellwise.ravel(),
                       minlength=space.num_dofs)


# ---------------------------------------------------------------------------
# Bilinear operators
# ---------------------------------------------------------------------------

def _scalar_mass(space):
    _, wd, sv, _ = _quad_data(space, BILINEAR_DEGREE)
    return np.einsum("tq,qi,qj->tij", wd, sv, sv)


def _scalar_stiffness(space):
    _, wd, _, sg = _quad_data(space, BILINEAR_DEGREE)
    return np.einsum("tq,tqid,tqjd->tij", wd, sg, sg)


def _block_scalar_operator(space, blocks):
    nb = space.element.num_basis
    scalar_dofs = space.cell_dofs[:, :nb]
    ns = space.num_scalar_dofs
    A = _scatter(blocks, scalar_dofs, scalar_dofs, (ns, ns))
    if space.components == 1:
        return A
    return sp.block_diag([A] * space.components, format="csr")


def assemble_mass(space):
    """L2 Gram matrix; symmetric positive definite."""
    return _block_scalar_operator(space, _scalar_mass(space))


def assemble_stiffness(space):
    """Gradient Gram matrix; symmetric, kernel = per-component constants."""
    return _block_scalar_operator(space, _scalar_stiffness(space))


def assemble_divergence(vel_space, pres_space):
    """Matrix B with B[q, v] = integral of (div v) q."""
    if vel_space.mesh is not pres_space.mesh:
        raise ValueError("velocity and pressure spaces must share a mesh")
    rule, wd, sv, sg = _quad_data(vel_space, BILINEAR_DEGREE)
    pv = pres_space.element.values(rule.points)                # (nq, 3)
    # blocks[t, p, c, j] = sum_q wd * psi_p * d phi_j / d x_c
    blocks = np.einsum("tq,qp,tqjc->tpcj", wd, pv, sg)
    T = vel_space.mesh.num_cells
    blocks = blocks.reshape(T, pres_space.element.num_basis, -1)
    return _scatter(blocks, pres_space.cell_dofs, vel_space.cell_dofs,
                    (pres_space.num_dofs, vel_space.num_dofs))


def assemble_load(space, f, t=0.0):
    """Load vector with entries integral of f . basis (degree-6 rule)."""
    from .fespace import _eval_function
    rule, wd, sv, _ = _quad_data(space, FUNCTIONAL_DEGREE)
    geo = cell_geometry(space.mesh)
    pts = geo.map_points(rule.points)
    vals = _eval_function(f, pts[..., 0], pts[..., 1], t, space.components)
    if space.components == 1:
        vals = (vals,)
    cellwise = np.concatenate(
        [np.einsum("tq,tq,qb->tb", wd, v, sv) for v in vals], axis=1)
    return _accumulate(space, cellwise)


def pressure_mean_vector(pres_space):
    """Vector m with m[q] = integral of basis q; m . p = integral of p_h."""
    rule, wd, sv, _ = _quad_data(pres_space, BILINEAR_DEGREE)
    return _accumulate(pres_space, np.einsum("tq,qb->tb", wd, sv))


# ---------------------------------------------------------------------------
# Trilinear forms: evaluation
# ---------------------------------------------------------------------------

def _pointwise(kind, uv, ug, vv, vg, wv, wg):
    """Trilinear integrand at quadrature points; arrays shaped (T, nq, ...)."""
    if kind == "conv":
        return np.einsum("tqn,tqmn,tqm->tq", uv, vg, wv)
    if kind == "emac":
        two_d = ug + ug.transpose(0, 1, 3, 2)
        div_u = ug[..., 0, 0] + ug[..., 1, 1]
        return (np.einsum("tqmn,tqn,tqm->tq", two_d, vv, wv)
                + div_u * np.einsum("tqm,tqm->tq", vv, wv))
    if kind == "skew":
        return 0.5 * (_pointwise("conv", uv, ug, vv, vg, wv, wg)
                      - _pointwise("conv", uv, ug, wv, wg, vv, vg))
    if kind == "rota":
        curl_u = ug[..., 1, 0] - ug[..., 0, 1]
        return curl_u * (vv[..., 0] * wv[..., 1] - vv[..., 1] * wv[..., 0])
    if kind == "dive":
        div_u = ug[..., 0, 0] + ug[..., 1, 1]
        return (_pointwise("conv", uv, ug, vv, vg, wv, wg)
                + div_u * np.einsum("tqm,tqm->tq", vv, wv))
    raise AssertionError(kind)


def _require_same_space(*fields):
    space = fields[0].space
    for f in fields[1:]:
        if f.space is not space:
            raise ValueError("all fields must live on the same space")
    if space.components != 2:
        raise ValueError("trilinear forms are defined on vector spaces")
    return space


def eval_trilinear(kind, u, v, w):
    """Value of the trilinear form for three discrete velocity fields."""
    _check_kind(kind)
    space = _require_same_space(u, v, w)
    rule, wd, _, _ = _quad_data(space, FUNCTIONAL_DEGREE)
    uv, ug = field_values_and_grads(u, rule)
    vv, vg = field_values_and_grads(v, rule)
    wv, wg = field_values_and_grads(w, rule)
    return float(np.sum(wd * _pointwise(kind, uv, ug, vv, vg, wv, wg)))


# ---------------------------------------------------------------------------
# Trilinear forms: linearized assembly
# ---------------------------------------------------------------------------

def _outer_value_blocks(wd, sv, coef):
    """Blocks[t, a, i, b, j] = sum_q wd phi_i phi_j coef[t, q, a, b].

    The cellwise 2x2 coefficient couples components; evaluated as one batched
    matrix product (the naive five-index contraction dominates assembly).
    """
    T, nq = wd.shape
    nb = sv.shape[1]
    pp = (sv[:, :, None] * sv[:, None, :]).reshape(nq, nb * nb)   # (q, ij)
    w = (wd[:, :, None] * coef.reshape(T, nq, 4)).transpose(0, 2, 1)
    out = np.matmul(w, pp).reshape(T, 2, 2, nb, nb)               # t a b i j
    return out.transpose(0, 1, 3, 2, 4)


def _grad_value_blocks(wd, sv, sg, av):
    """Blocks[t, a, i, b, j] = sum_q wd phi_i (d phi_j / d x_a) av_b."""
    T, nq = wd.shape
    nb = sv.shape[1]
    r = sg.reshape(T, nq, 2 * nb, 1) * av[:, :, None, :]          # (t,q,ja,b)
    r = r.reshape(T, nq, 4 * nb) * wd[:, :, None]
    out = np.matmul(r.transpose(0, 2, 1), sv)                     # (t, jab, i)
    out = out.reshape(T, nb, 2, 2, nb)                            # t j a b i
    return out.transpose(0, 2, 4, 3, 1)


def assemble_trilinear(kind, slot, wind, space=None):
    """Matrix N with v^T N u = b(wind, u, v) (fix-first) or b(u, wind, v).

    ``wind`` is the frozen field; the matrix acts on the remaining velocity
    slot, tested against all velocity test functions.
    """
    _check_kind(kind)
    if slot not in (FIX_FIRST, FIX_SECOND):
        raise ValueError(f"unknown slot {slot!r}")
    if space is None:
        space = wind.space
    if wind.space is not space or space.components != 2:
        raise ValueError("wind must live on the target vector space")

    rule, wd, sv, sg = _quad_data(space, FUNCTIONAL_DEGREE)
    av, ag = field_values_and_grads(wind, rule)       # (T,nq,2), (T,nq,2,2)
    T = space.mesh.num_cells
    # Blocks indexed [cell, test comp a, test scalar i, trial comp b,
    # trial scalar j]; the flattened (a*nb+i) ordering matches cell_dofs.
    blocks = np.zeros((T, 2, sv.shape[1], 2, sv.shape[1]))

    def diag(scalar_block):
        blocks[:, 0, :, 0, :] += scalar_block
        blocks[:, 1, :, 1, :] += scalar_block

    adv = np.einsum("tqd,tqjd->tqj", av, sg)          # (wind . grad) phi_j

    if kind in ("conv", "skew", "dive") and slot == FIX_FIRST:
        S = np.einsum("tq,qi,tqj->tij", wd, sv, adv)
        if kind == "skew":
            diag(0.5 * (S - S.transpose(0, 2, 1)))
        else:
            diag(S)
        if kind == "dive":
            div_a = ag[..., 0, 0] + ag[..., 1, 1]
            diag(np.einsum("tq,qi,qj->tij", wd * div_a, sv, sv))

    elif kind in ("conv", "skew", "dive") and slot == FIX_SECOND:
        grad_term = _outer_value_blocks(wd, sv, ag)
        if kind == "skew":
            # Second term couples the test gradient: swap the (a,i)/(b,j)
            # index pairs of the standard grad-value block.
            blocks += 0.5 * grad_term
            blocks -= 0.5 * _grad_value_blocks(wd, sv, sg, av) \
                .transpose(0, 3, 4, 1, 2)
        else:
            blocks += grad_term
            if kind == "dive":
                blocks += _grad_value_blocks(wd, sv, sg, av) \
                    .transpose(0, 3, 2, 1, 4)

    elif kind == "emac" and slot == FIX_FIRST:
        two_d = ag + ag.transpose(0, 1, 3, 2)
        coef = two_d.copy()
        div_a = ag[..., 0, 0] + ag[..., 1, 1]
        coef[..., 0, 0] += div_a
        coef[..., 1, 1] += div_a
        blocks += _outer_value_blocks(wd, sv, coef)

    elif kind == "emac" and slot == FIX_SECOND:
        diag(np.einsum("tq,qi,tqj->tij", wd, sv, adv))
        gv = _grad_value_blocks(wd, sv, sg, av)
        blocks += gv
        blocks += gv.transpose(0, 3, 2, 1, 4)

    elif kind == "rota" and slot == FIX_FIRST:
        curl_a = ag[..., 1, 0] - ag[..., 0, 1]
        R = np.einsum("tq,qi,qj->tij", wd * curl_a, sv, sv)
        blocks[:, 1, :, 0, :] += R                    # v1 w2 term
        blocks[:, 0, :, 1, :] -= R                    # -v2 w1 term

    elif kind == "rota" and slot == FIX_SECOND:
        # curl of the trial basis times (a1 w2 - a2 w1).
        curl_basis = np.stack([-sg[..., 1], sg[..., 0]], axis=2)  # (T,nq,2,nb)
        fac = np.stack([-av[..., 1], av[..., 0]], axis=2)         # (T,nq,2)
        blocks += np.einsum("tq,tqbj,tqa,qi->taibj", wd, curl_basis, fac, sv)

    nloc = blocks.shape[1] * blocks.shape[2]
    blocks = blocks.reshape(T, nloc, nloc)
    return _scatter(blocks, space.cell_dofs, space.cell_dofs,
                    (space.num_dofs, space.num_dofs))


def trilinear_rhs(kind, u, v):
    """Vector r with r_i = b(u, v, basis_i) for all velocity test functions."""
    _check_kind(kind)
    space = _require_same_space(u, v)
    rule, wd, sv, sg = _quad_data(space, FUNCTIONAL_DEGREE)
    uv, ug = field_values_and_grads(u, rule)
    vv, vg = field_values_and_grads(v, rule)

    # Integrand split into a factor against test values (iv) and, for skew,
    # one against test gradients (ig).
    if kind == "conv":
        iv = np.einsum("tqmn,tqn->tqm", vg, uv)
        ig = None
    elif kind == "emac":
        two_d = ug + ug.transpose(0, 1, 3, 2)
        div_u = ug[..., 0, 0] + ug[..., 1, 1]
        iv = np.einsum("tqmn,tqn->tqm", two_d, vv) + div_u[..., None] * vv
        ig = None
    elif kind == "skew":
        iv = 0.5 * np.einsum("tqmn,tqn->tqm", vg, uv)
        ig = -0.5 * np.einsum("tqm,tqn->tqmn", vv, uv)
    elif kind == "rota":
        curl_u = ug[..., 1, 0] - ug[..., 0, 1]
        iv = np.stack([-curl_u * vv[..., 1], curl_u * vv[..., 0]], axis=-1)
        ig = None
    elif kind == "dive":
        div_u = ug[..., 0, 0] + ug[..., 1, 1]
        iv = np.einsum("tqmn,tqn->tqm", vg, uv) + div_u[..., None] * vv
        ig = None

    cellwise = np.einsum("tq,tqm,qi->tmi", wd, iv, sv)
    if ig is not None:
        cellwise += np.einsum("tq,tqmn,tqin->tmi", wd, ig, sg)
    T = space.mesh.num_cells
    return _accumulate(space, cellwise.reshape(T, -1))
