"""Conserved quantities, error norms, pressure recoveries, rates, drag/lift.

All functionals are pure functions of their field arguments.  Pressure error
comparisons are made between zero-meaned representatives on both sides, which
removes the arbitrary gauge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fespace import (FUNCTIONAL_DEGREE, FeSpace, FieldVector, cell_geometry,
                      evaluate, field_values_and_grads, l2_project,
                      mass_matrix, triangle_rule)
from .forms import (_quad_data, assemble_divergence, assemble_stiffness,
                    eval_trilinear, pressure_mean_vector)


# ---------------------------------------------------------------------------
# Conserved quantities and norms
# ---------------------------------------------------------------------------

def energy(u):
    """Squared L2 norm of the velocity field."""
    M = mass_matrix(u.space)
    return float(u.coeffs @ (M @ u.coeffs))


def _component_load(space):
    """Integral of every scalar basis function (cached)."""
    out = space.cache.get("scalar_load")
    if out is None:
        rule, wd, sv, _ = _quad_data(space, FUNCTIONAL_DEGREE)
        ns = space.num_scalar_dofs
        nb = space.element.num_basis
        cellwise = np.einsum("tq,qb->tb", wd, sv)
        out = np.bincount(space.cell_dofs[:, :nb].ravel(),
                          weights=cellwise.ravel(), minlength=ns)
        space.cache["scalar_load"] = out
    return out


def momentum(u, axis):
    """Integral of one velocity component (axis 0 or 1)."""
    if u.space.components != 2:
        raise ValueError("momentum is defined for vector fields")
    ns = u.space.num_scalar_dofs
    ell = _component_load(u.space)
    return float(ell @ u.coeffs[axis * ns:(axis + 1) * ns])


def angular_momentum(u, pivot=(0.0, 0.0)):
    """Integral of (x - px) u2 - (y - py) u1 (scalar 2D angular momentum)."""
    if u.space.components != 2:
        raise ValueError("angular momentum is defined for vector fields")
    rule = triangle_rule(FUNCTIONAL_DEGREE)
    _, wd, _, _ = _quad_data(u.space, FUNCTIONAL_DEGREE)
    geo = cell_geometry(u.space.mesh)
    pts = geo.map_points(rule.points)
    vals, _ = field_values_and_grads(u, rule)
    integrand = ((pts[..., 0] - pivot[0]) * vals[..., 1]
                 - (pts[..., 1] - pivot[1]) * vals[..., 0])
    return float(np.sum(wd * integrand))


def l2_norm(u):
    return float(np.sqrt(max(energy(u), 0.0)))


def h1_norm(u):
    """Full H1 norm sqrt(||u||^2 + ||grad u||^2)."""
    K = u.space.cache.get("stiffness")
    if K is None:
        K = u.space.cache["stiffness"] = assemble_stiffness(u.space)
    return float(np.sqrt(max(energy(u) + u.coeffs @ (K @ u.coeffs), 0.0)))


def domain_area(mesh):
    return float(mesh.cell_areas().sum())


def domain_center(mesh):
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return (0.5 * float(lo[0] + hi[0]), 0.5 * float(lo[1] + hi[1]))


# ---------------------------------------------------------------------------
# Pressure recoveries
# ---------------------------------------------------------------------------

def _zero_mean(p):
    m = pressure_mean_vector(p.space)
    shift = (m @ p.coeffs) / float(m.sum())
    return FieldVector(p.space, p.coeffs - shift)


def recover_primal_pressure(p_h, u_h):
    """Primal pressure from an EMAC pressure: project p + |u|^2 / 2, zero-mean.

    The squared speed is quartic on each cell, so it is L2-projected onto the
    P1 pressure space before zero-meaning.
    """
    pres, vel = p_h.space, u_h.space
    rule = triangle_rule(FUNCTIONAL_DEGREE)
    _, wd, _, _ = _quad_data(vel, FUNCTIONAL_DEGREE)
    pv = pres.element.values(rule.points)
    uvals, _ = field_values_and_grads(u_h, rule)
    pvals, _ = field_values_and_grads(p_h, rule)
    total = pvals[..., 0] + 0.5 * np.einsum("tqm,tqm->tq", uvals, uvals)
    cellwise = np.einsum("tq,tq,qb->tb", wd, total, pv)
    b = np.bincount(pres.cell_dofs.ravel(), weights=cellwise.ravel(),
                    minlength=pres.num_dofs)
    M = mass_matrix(pres)
    solve = pres.cache.get("mass_factor")
    if solve is None:
        import scipy.sparse.linalg as spla
        solve = pres.cache["mass_factor"] = spla.factorized(M.tocsc())
    return _zero_mean(FieldVector(pres, solve(b)))


def emac_pressure_exact(pressure, velocity, mesh):
    """Exact EMAC pressure p - |u|^2 / 2 + lambda(t) / area as a callable.

    lambda(t) is the integral of |u|^2 / 2 over the domain, computed by
    quadrature on the given mesh and divided by the domain area so the result
    has the same mean as p.  The returned callable is vectorized in (x, y)
    and caches lambda per time value.
    """
    rule = triangle_rule(FUNCTIONAL_DEGREE)
    geo = cell_geometry(mesh)
    pts = geo.map_points(rule.points)
    wd = rule.weights[None, :] * geo.det[:, None]
    area = domain_area(mesh)
    cache = {}

    def lam(t):
        if t not in cache:
            u1, u2 = velocity(pts[..., 0], pts[..., 1], t)
            cache[t] = 0.5 * float(np.sum(wd * (u1 ** 2 + u2 ** 2)))
        return cache[t]

    def p_emac(x, y, t):
        u1, u2 = velocity(x, y, t)
        return pressure(x, y, t) - 0.5 * (u1 ** 2 + u2 ** 2) + lam(t) / area

    return p_emac


# ---------------------------------------------------------------------------
# Error norms
# ---------------------------------------------------------------------------

def error_norms(u_h, p_h, exact, t):
    """Errors against exact formulas evaluated at quadrature points.

    Returns a dict with L2 and H1 velocity errors, and L2 errors of the
    recovered primal pressure and of the discrete EMAC pressure, both against
    zero-meaned exact counterparts.

    The primal-pressure error uses the pointwise representative
    p_h + |u_h|^2 / 2 at quadrature points (no projection onto the pressure
    space), matching the stated recovery formula as a function.
    """
    vel, pres = u_h.space, p_h.space
    mesh = vel.mesh
    rule = triangle_rule(FUNCTIONAL_DEGREE)
    _, wd, _, _ = _quad_data(vel, FUNCTIONAL_DEGREE)
    geo = cell_geometry(mesh)
    pts = geo.map_points(rule.points)
    x, y = pts[..., 0], pts[..., 1]
    area = domain_area(mesh)

    uvals, ugrads = field_values_and_grads(u_h, rule)
    e1, e2 = exact.velocity(x, y, t)
    du = np.stack([uvals[..., 0] - e1, uvals[..., 1] - e2], axis=-1)
    (g1x, g1y), (g2x, g2y) = exact.velocity_gradient(x, y, t)
    dg = np.stack([ugrads[..., 0, 0] - g1x, ugrads[..., 0, 1] - g1y,
                   ugrads[..., 1, 0] - g2x, ugrads[..., 1, 1] - g2y], axis=-1)
    l2_sq = float(np.sum(wd * (du ** 2).sum(axis=-1)))
    h1_sq = l2_sq + float(np.sum(wd * (dg ** 2).sum(axis=-1)))

    # Primal pressure: pointwise recovery from the discrete EMAC pressure,
    # compared with the zero-meaned exact pressure.
    phvals_raw, _ = field_values_and_grads(p_h, rule)
    primal = phvals_raw[..., 0] + 0.5 * np.einsum("tqm,tqm->tq", uvals, uvals)
    primal = primal - float(np.sum(wd * primal)) / area
    pex = exact.pressure(x, y, t)
    pex = pex - float(np.sum(wd * pex)) / area
    err_pp_sq = float(np.sum(wd * (primal - pex) ** 2))

    # EMAC pressure: discrete pressure as-is (zero-meaned) against the
    # zero-meaned exact EMAC pressure.
    p_emac_fn = emac_pressure_exact(exact.pressure, exact.velocity, mesh)
    pe = p_emac_fn(x, y, t)
    pe = pe - float(np.sum(wd * pe)) / area
    ph = _zero_mean(p_h)
    phvals, _ = field_values_and_grads(ph, rule)
    err_pe_sq = float(np.sum(wd * (phvals[..., 0] - pe) ** 2))

    return {
        "err_l2_u": np.sqrt(l2_sq),
        "err_h1_u": np.sqrt(h1_sq),
        "err_l2_p_primal": np.sqrt(err_pp_sq),
        "err_l2_p_emac": np.sqrt(err_pe_sq),
    }


# ---------------------------------------------------------------------------
# Convergence rates
# ---------------------------------------------------------------------------

@dataclass
class RateTable:
    """Rows of (h, errors) with observed convergence rates against h."""

    rows: list
    error_keys: tuple

    def column(self, key):
        return [row[key] for row in self.rows]

    def format(self):
        keys = list(self.error_keys)
        head = ["1/h", "1/H", "dt"]
        for k in keys:
            head += [k, "rate"]
        lines = ["  ".join(f"{h:>14s}" for h in head)]
        for row in self.rows:
            cells = [f"{1.0 / row['h']:14.6g}",
                     f"{1.0 / row['H']:14.6g}" if row.get("H") else " " * 14,
                     f"{row['dt']:14.6g}" if row.get("dt") else " " * 14]
            for k in keys:
                cells.append(f"{row[k]:14.6e}")
                r = row.get("rate_" + k)
                cells.append(f"{r:14.2f}" if r is not None else " " * 14)
            lines.append("  ".join(cells))
        return "\n".join(lines)


def convergence_rates(rows, error_keys=None):
    """Attach observed rates log(e_prev/e) / log(h_prev/h) to table rows.

    Rows are dicts carrying ``h`` and error columns; rates are defined from
    the second row on.  Nonpositive errors are rejected.
    """
    rows = [dict(r) for r in rows]
    if error_keys is None:
        error_keys = tuple(k for k in rows[0] if k.startswith("err_"))
    for row in rows:
        for k in error_keys:
            if not row[k] > 0.0:
                raise ValueError(f"nonpositive error {k}={row[k]!r}")
    for prev, row in zip(rows, rows[1:]):
        ratio = np.log(prev["h"] / row["h"])
        for k in error_keys:
            row["rate_" + k] = float(np.log(prev[k] / row[k]) / ratio)
    for k in error_keys:
        rows[0].setdefault("rate_" + k, None)
    return RateTable(rows, tuple(error_keys))


# ---------------------------------------------------------------------------
# Cylinder benchmark functionals
# ---------------------------------------------------------------------------

def build_cylinder_test_field(space, tag, direction):
    """Discrete field equal to ``direction`` on the tagged boundary DOFs.

    All other DOFs (interior and other boundaries) are zero; the field is a
    member of the discrete space by construction.
    """
    if tag not in space.dirichlet:
        raise ValueError(f"boundary tag {tag} not present in the mesh")
    ns = space.num_scalar_dofs
    coeffs = np.zeros(space.num_dofs)
    dofs = space.dirichlet[tag]
    comp = dofs // ns
    coeffs[dofs] = np.where(comp == 0, direction[0], direction[1])
    return FieldVector(space, coeffs)


def drag_lift(u_h, p_h, v_d, v_l, nu, form="emac",
              diameter=0.1, mean_velocity=1.0):
    """Volume-integral drag and lift coefficients.

    c = -2 / (D Ubar^2) [ nu (grad u, grad v) + b(u, u, v) - (p, div v) ]
    for test fields v that equal the unit direction on the cylinder boundary
    and vanish on all other boundaries.  Gauge shifts of p do not change the
    value because the test fields have zero net boundary flux.
    """
    vel, pres = u_h.space, p_h.space
    K = vel.cache.get("stiffness")
    if K is None:
        K = vel.cache["stiffness"] = assemble_stiffness(vel)
    B = vel.cache.get(("div", id(pres)))
    if B is None:
        B = vel.cache[("div", id(pres))] = assemble_divergence(vel, pres)
    scale = -2.0 / (diameter * mean_velocity ** 2)

    def functional(v):
        visc = nu * float(v.coeffs @ (K @ u_h.coeffs))
        inert = eval_trilinear(form, u_h, u_h, v)
        pdiv = float(p_h.coeffs @ (B @ v.coeffs))
        return scale * (visc + inert - pdiv)

    return functional(v_d), functional(v_l)


def pressure_difference(p_h, front, back):
    """Point-evaluation pressure difference p(front) - p(back)."""
    return float(evaluate(p_h, front) - evaluate(p_h, back))


# ---------------------------------------------------------------------------
# Per-step diagnostics series
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsSeries:
    """Per-step records with a fixed column order and run metadata."""

    columns: tuple
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, key):
        return np.array([row[key] for row in self.rows], dtype=float)

    def to_csv(self, path):
        """Write metadata comments, a header row and one row per step.

        Floats are written with 17 significant digits, so equal runs produce
        byte-identical files.
        """
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key in sorted(self.meta):
                fh.write(f"# {key} = {self.meta[key]}\n")
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(row[c]) for c in self.columns) + "\n")


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


class SeriesRecorder:
    """Collects the standard per-step record for a simulation run.

    ``extra`` is an optional ``(columns, fn)`` pair; ``fn(state)`` must
    return a dict with those columns (used for drag/lift/pressure probes).
    """

    def __init__(self, problem, cfg, extra=None):
        self.problem = problem
        self.cfg = cfg
        self.extra = extra
        self.pivot = problem.angular_pivot or domain_center(problem.mesh_fine)
        columns = ["step", "t", "energy", "momentum_x", "momentum_y",
                   "angular_momentum", "angular_momentum_origin",
                   "linear_residual", "newton_iterations", "newton_residual"]
        if problem.exact is not None:
            columns += ["err_l2_u", "err_h1_u",
                        "err_l2_p_primal", "err_l2_p_emac"]
        if extra is not None:
            columns += list(extra[0])
        self.columns = tuple(columns)
        self.rows = []

    def record(self, state, info):
        row = {
            "step": len(self.rows),
            "t": state.t,
            "energy": energy(state.u),
            "momentum_x": momentum(state.u, 0),
            "momentum_y": momentum(state.u, 1),
            "angular_momentum": angular_momentum(state.u, self.pivot),
            "angular_momentum_origin": angular_momentum(state.u, (0.0, 0.0)),
            "linear_residual": info.linear_residual,
            "newton_iterations": info.newton_iterations,
            "newton_residual": info.newton_residual,
        }
        if self.problem.exact is not None:
            row.update(error_norms(state.u, state.p, self.problem.exact,
                                   state.t))
        if self.extra is not None:
            row.update(self.extra[1](state))
        self.rows.append(row)
        return row["energy"]

    def finish(self, status):
        meta = {
            "problem": self.problem.name,
            "method": self.cfg.method,
            "form": self.cfg.form,
            "time_scheme": self.cfg.time_scheme,
            "nu": _fmt(self.cfg.nu),
            "dt": _fmt(self.cfg.dt),
            "t_end": _fmt(self.cfg.t_end),
            "angular_pivot": f"({_fmt(self.pivot[0])}, {_fmt(self.pivot[1])})",
            "status": status,
        }
        return DiagnosticsSeries(self.columns, self.rows, meta)
