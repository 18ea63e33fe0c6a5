"""Time stepping for the one-level nonlinear and two-level linearized schemes.

All schemes discretize the weak form

    (du/dt, v) + nu (grad u, grad v) + b(u, u, v) - (div v, p) = (f, v),
    (div u, q) = 0,

with BDF1 or BDF2 in time (BDF2 bootstrapped by one BDF1 step).  The one-level
scheme solves the nonlinear system by Newton's method; the two-level schemes
advance a coarse one-level solution and then do a single linear fine-mesh
solve whose inertial term is frozen (Stokes correction) or linearized (Newton
correction) at the prolonged coarse solution.

With the sign convention above, the discrete pressure of an EMAC run
approximates the gauge-fixed EMAC pressure (primal pressure minus half the
squared speed plus a constant); see the diagnostics module for recoveries.

Velocity Dirichlet conditions are imposed by DOF elimination; the pressure
gauge (zero mean) by a scalar Lagrange multiplier row.  The linear reference
path is a sparse direct factorization with one step of iterative refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import FeSpace, FieldVector, build_taylor_hood, interpolate, \
    l2_project, prolongate
from .forms import (FIX_FIRST, FIX_SECOND, FORM_KINDS, assemble_divergence,
                    assemble_load, assemble_mass, assemble_stiffness,
                    assemble_trilinear, pressure_mean_vector, trilinear_rhs)

METHODS = ("one-level", "two-level-stokes", "two-level-newton")
TIME_SCHEMES = ("bdf1", "bdf2")


class SolverError(RuntimeError):
    """Linear or nonlinear solve failure."""


class NewtonError(SolverError):
    """Newton iteration did not reach the residual tolerance."""


@dataclass
class SchemeConfig:
    """Time-stepping and solver parameters."""

    nu: float
    dt: float
    t_end: float
    time_scheme: str = "bdf2"
    method: str = "two-level-newton"
    form: str = "emac"
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    linear_tol: float = 1e-10
    initial_projection: str = "l2"   # "l2" | "interpolate"

    def __post_init__(self):
        if self.dt <= 0 or self.t_end < self.dt:
            raise ValueError("need dt > 0 and t_end >= dt")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if self.time_scheme not in TIME_SCHEMES:
            raise ValueError(f"time_scheme must be one of {TIME_SCHEMES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.form not in FORM_KINDS:
            raise ValueError(f"form must be one of {FORM_KINDS}")
        if self.newton_tol <= 0 or self.newton_max_iter <= 0:
            raise ValueError("Newton settings must be positive")

    @property
    def num_steps(self):
        return int(np.floor(self.t_end / self.dt + 1e-9))


@dataclass
class FlowState:
    """Discrete velocity/pressure at one time level (plus BDF2 history)."""

    u: FieldVector
    p: FieldVector
    t: float
    u_prev: FieldVector | None = None


@dataclass
class StepInfo:
    """Solver report for one accepted step."""

    linear_residual: float = 0.0
    newton_iterations: int = 0
    newton_residual: float = 0.0

    def merge(self, other):
        return StepInfo(
            max(self.linear_residual, other.linear_residual),
            max(self.newton_iterations, other.newton_iterations),
            max(self.newton_residual, other.newton_residual))


@dataclass
class SaddlePointSystem:
    """Assembled velocity/pressure block system with constraint data."""

    A: sp.spmatrix
    B: sp.spmatrix
    f_u: np.ndarray
    g_p: np.ndarray
    vel_space: FeSpace
    pres_space: FeSpace
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray


class SaddleSolver:
    """Direct solver for the bordered, Dirichlet-reduced saddle system

        [[A_ff, -B_f^T, 0], [B_f, 0, m], [0, m^T, 0]] [u, p, lam] = rhs,

    where ``m`` holds pressure basis integrals: the multiplier absorbs any
    mean component of the continuity data and the last row fixes the
    pressure mean to zero.

    The bordered matrix has a dense row and column, which destroys sparse LU
    fill-in, so it is never factored directly.  Instead: interior velocity
    test functions have zero net divergence (1^T B_f = 0 exactly), so
    summing the continuity rows yields lam = 1^T g / area in closed form;
    after moving ``lam m`` to the right the continuity data is consistent
    and one continuity row may be replaced by a single-entry pressure pin
    without changing the solution.  That sparse system is factored once and
    reused; residuals are still verified against the full bordered matrix.
    """

    def __init__(self, A, B, vel_space, pres_space, dirichlet_dofs,
                 mean_vector=None):
        nu_dofs = vel_space.num_dofs
        self.vel_space = vel_space
        self.pres_space = pres_space
        self.dirichlet = np.asarray(dirichlet_dofs, dtype=np.int64)
        self.free = np.setdiff1d(np.arange(nu_dofs), self.dirichlet)
        if mean_vector is None:
            mean_vector = pressure_mean_vector(pres_space)
        self.mean = mean_vector
        self.area = float(mean_vector.sum())

        A = A.tocsr()
        self.A_fd = A[self.free][:, self.dirichlet].tocsr()
        self.B_d = B[:, self.dirichlet].tocsr()
        A_ff = A[self.free][:, self.free].tocsr()
        B_f = B[:, self.free].tocsr()
        self.n_free = len(self.free)
        n_p = pres_space.num_dofs

        m_col = sp.csr_matrix(mean_vector[:, None])
        self.bordered = sp.bmat([[A_ff, -B_f.T, None],
                                 [B_f, None, m_col],
                                 [None, m_col.T, None]], format="csr")

        # Pinned core: continuity row `pin` replaced by e_pin^T p = 0.
        self.pin = int(np.argmax(mean_vector))
        keep = np.ones(n_p, dtype=bool)
        keep[self.pin] = False
        self.keep = keep
        B_rows = sp.vstack([B_f[:self.pin],
                            sp.csr_matrix((1, self.n_free)),
                            B_f[self.pin + 1:]], format="csr")
        pin_block = sp.coo_matrix(([1.0], ([self.pin], [self.pin])),
                                  shape=(n_p, n_p))
        core = sp.bmat([[A_ff, -B_f.T], [B_rows, pin_block]], format="csc")
        self.lu = spla.splu(core)
        self.core = core.tocsr()

    def _core_solve(self, f_red, g_con):
        rhs = np.concatenate([f_red, g_con])
        rhs[self.n_free + self.pin] = 0.0
        x = self.lu.solve(rhs)
        # One pass of iterative refinement on the pinned core.
        x += self.lu.solve(rhs - self.core @ x)
        return x

    def solve(self, f_u, g_p, dirichlet_values, tol=1e-10):
        """Solve for (velocity, pressure); returns zero-mean pressure.

        Raises :class:`SolverError` if the relative residual of the full
        bordered system exceeds ``tol``.
        """
        f_red = f_u[self.free] - self.A_fd @ dirichlet_values
        g_red = g_p - self.B_d @ dirichlet_values
        lam = g_red.sum() / self.area
        x = self._core_solve(f_red, g_red - lam * self.mean)

        p = x[self.n_free:]
        p = p - (self.mean @ p) / self.area
        full = np.concatenate([x[:self.n_free], p, [lam]])
        rhs = np.concatenate([f_red, g_red, [0.0]])
        scale = max(np.linalg.norm(rhs), 1.0)
        res = np.linalg.norm(rhs - self.bordered @ full) / scale
        if not np.isfinite(res) or res > tol:
            raise SolverError(
                f"saddle-point solve residual {res:.3e} above {tol:.1e}")

        u = np.zeros(self.vel_space.num_dofs)
        u[self.free] = x[:self.n_free]
        u[self.dirichlet] = dirichlet_values
        return (FieldVector(self.vel_space, u),
                FieldVector(self.pres_space, p),
                float(res))


def solve_saddle_point(system, tol=1e-10):
    """One-shot solve of a :class:`SaddlePointSystem`.

    Returns ``(velocity, pressure, info)`` with the pressure shifted to zero
    mean and ``info['linear_residual']`` the reduced-system relative residual.
    """
    solver = SaddleSolver(system.A, system.B, system.vel_space,
                          system.pres_space, system.dirichlet_dofs)
    u, p, res = solver.solve(system.f_u, system.g_p,
                             system.dirichlet_values, tol=tol)
    return u, p, {"linear_residual": res}


# ---------------------------------------------------------------------------
# Boundary data
# ---------------------------------------------------------------------------

def _zero_bc(x, y, t):
    z = np.zeros_like(x)
    return (z, z)


def dirichlet_data(space, bc, t):
    """Dirichlet DOFs and values at time ``t``.

    ``bc`` is None (homogeneous), a vector callable ``g(x, y, t)`` applied on
    every tag, or a dict mapping boundary tags to callables (missing tags are
    homogeneous).  Tags are processed in sorted order; values of later tags
    win on shared corner DOFs.
    """
    ns = space.num_scalar_dofs
    dofs = space.dirichlet_dofs()
    values = np.zeros(len(dofs))
    lookup = {d: i for i, d in enumerate(dofs)}
    for tag in sorted(space.dirichlet):
        if bc is None:
            g = _zero_bc
        elif callable(bc):
            g = bc
        else:
            g = bc.get(tag)
            if g is None:
                g = _zero_bc
        tag_dofs = space.dirichlet[tag]
        pts = space.dof_points[tag_dofs % ns]
        comp = tag_dofs // ns
        u1, u2 = g(pts[:, 0], pts[:, 1], t)
        vals = np.where(comp == 0, u1, u2)
        values[[lookup[d] for d in tag_dofs]] = vals
    return dofs, values


# ---------------------------------------------------------------------------
# Per-space-pair workspace
# ---------------------------------------------------------------------------

class _Workspace:
    """Constant operators and factorization cache for one space pair."""

    def __init__(self, vel_space, pres_space):
        self.vel = vel_space
        self.pres = pres_space
        self.M = assemble_mass(vel_space)
        self.K = assemble_stiffness(vel_space)
        self.B = assemble_divergence(vel_space, pres_space)
        self.mean = pressure_mean_vector(pres_space)
        self.dirichlet = vel_space.dirichlet_dofs()
        self.solver_cache = {}

    def constant_solver(self, key, A):
        solver = self.solver_cache.get(key)
        if solver is None:
            solver = SaddleSolver(A, self.B, self.vel, self.pres,
                                  self.dirichlet, self.mean)
            self.solver_cache[key] = solver
        return solver


def workspace(vel_space, pres_space):
    key = ("workspace", id(pres_space))
    ws = vel_space.cache.get(key)
    if ws is None:
        ws = vel_space.cache[key] = _Workspace(vel_space, pres_space)
    return ws


def _bdf_terms(ws, cfg, state):
    """Mass coefficient and history vector of the current BDF step."""
    dt = cfg.dt
    if cfg.time_scheme == "bdf2" and state.u_prev is not None:
        c0 = 1.5 / dt
        hist = ws.M @ ((4.0 * state.u.coeffs - state.u_prev.coeffs)
                       / (2.0 * dt))
        guess = 2.0 * state.u.coeffs - state.u_prev.coeffs
    else:
        c0 = 1.0 / dt
        hist = ws.M @ (state.u.coeffs / dt)
        guess = state.u.coeffs.copy()
    return c0, hist, guess


def _forcing_vector(ws, forcing, t):
    if forcing is None:
        return np.zeros(ws.vel.num_dofs)
    return assemble_load(ws.vel, forcing, t)


# ---------------------------------------------------------------------------
# One-level nonlinear step
# ---------------------------------------------------------------------------

def step_one_level(state, cfg, forcing=None, bc=None):
    """Advance one step of the nonlinear scheme by Newton's method.

    The trilinear term b(u, u, v) is linearized about the iterate w as
    b(w, u, v) + b(u, w, v) - b(w, w, v); the initial guess is u^n (BDF1) or
    the extrapolation 2 u^n - u^{n-1} (BDF2).  Returns ``(state, StepInfo)``
    or raises :class:`NewtonError` with the last residual.
    """
    vel, pres = state.u.space, state.p.space
    ws = workspace(vel, pres)
    t1 = state.t + cfg.dt
    c0, hist, guess = _bdf_terms(ws, cfg, state)
    F = _forcing_vector(ws, forcing, t1) + hist
    gdofs, gvals = dirichlet_data(vel, bc, t1)
    scale = max(1.0, np.linalg.norm(F))

    u = guess
    u[gdofs] = gvals
    p = state.p.coeffs.copy()
    A_lin = (c0 * ws.M + cfg.nu * ws.K).tocsr()
    free = np.setdiff1d(np.arange(vel.num_dofs), gdofs)
    ones_p = np.ones(pres.num_dofs)

    def residual(u_vec, p_vec):
        uf = FieldVector(vel, u_vec)
        r_u = (A_lin @ u_vec + trilinear_rhs(cfg.form, uf, uf)
               - ws.B.T @ p_vec - F)
        r_p = ws.B @ u_vec
        r_p = r_p - ones_p * (ones_p @ r_p) / len(ones_p)
        return np.sqrt((r_u[free] ** 2).sum() + (r_p ** 2).sum()) / scale

    info = StepInfo()
    res = residual(u, p)
    for it in range(cfg.newton_max_iter):
        if res <= cfg.newton_tol:
            break
        wind = FieldVector(vel, u)
        A = (A_lin
             + assemble_trilinear(cfg.form, FIX_FIRST, wind)
             + assemble_trilinear(cfg.form, FIX_SECOND, wind))
        rhs_u = F + trilinear_rhs(cfg.form, wind, wind)
        solver = SaddleSolver(A, ws.B, vel, pres, gdofs, ws.mean)
        u_new, p_new, lin_res = solver.solve(rhs_u, np.zeros(pres.num_dofs),
                                             gvals, tol=cfg.linear_tol)
        u, p = u_new.coeffs, p_new.coeffs
        info.linear_residual = max(info.linear_residual, lin_res)
        info.newton_iterations = it + 1
        res = residual(u, p)
    info.newton_residual = res
    if res > cfg.newton_tol:
        raise NewtonError(
            f"Newton stalled at t={t1:.6g}: residual {res:.3e} after "
            f"{info.newton_iterations} iterations")
    new_state = FlowState(FieldVector(vel, u), FieldVector(pres, p), t1,
                          u_prev=state.u)
    return new_state, info


def solve_steady_flow(vel_space, pres_space, nu, form="emac", bc=None,
                      forcing=None, newton_tol=1e-10, max_iter=30,
                      linear_tol=1e-10):
    """Steady-state solve by Newton's method from a Stokes initial guess.

    Returns ``(u, p, StepInfo)``.  Suitable for moderate Reynolds numbers
    where plain Newton converges from the Stokes solution.
    """
    ws = workspace(vel_space, pres_space)
    F = _forcing_vector(ws, forcing, 0.0)
    gdofs, gvals = dirichlet_data(vel_space, bc, 0.0)
    scale = max(1.0, np.linalg.norm(F))
    free = np.setdiff1d(np.arange(vel_space.num_dofs), gdofs)
    ones_p = np.ones(pres_space.num_dofs)
    A_visc = (nu * ws.K).tocsr()

    solver0 = SaddleSolver(A_visc, ws.B, vel_space, pres_space, gdofs,
                           ws.mean)
    u_f, p_f, lin_res = solver0.solve(F, np.zeros(pres_space.num_dofs),
                                      gvals, tol=linear_tol)
    u, p = u_f.coeffs, p_f.coeffs
    info = StepInfo(linear_residual=lin_res)

    def residual(u_vec, p_vec):
        uf = FieldVector(vel_space, u_vec)
        r_u = (A_visc @ u_vec + trilinear_rhs(form, uf, uf)
               - ws.B.T @ p_vec - F)
        r_p = ws.B @ u_vec
        r_p = r_p - ones_p * (ones_p @ r_p) / len(ones_p)
        return np.sqrt((r_u[free] ** 2).sum() + (r_p ** 2).sum()) / scale

    res = residual(u, p)
    for it in range(max_iter):
        if res <= newton_tol:
            break
        wind = FieldVector(vel_space, u)
        A = (A_visc + assemble_trilinear(form, FIX_FIRST, wind)
             + assemble_trilinear(form, FIX_SECOND, wind))
        rhs_u = F + trilinear_rhs(form, wind, wind)
        solver = SaddleSolver(A, ws.B, vel_space, pres_space, gdofs, ws.mean)
        u_f, p_f, lin_res = solver.solve(rhs_u, np.zeros(pres_space.num_dofs),
                                         gvals, tol=linear_tol)
        u, p = u_f.coeffs, p_f.coeffs
        info.linear_residual = max(info.linear_residual, lin_res)
        info.newton_iterations = it + 1
        res = residual(u, p)
    info.newton_residual = res
    if res > newton_tol:
        raise NewtonError(
            f"steady Newton stalled: residual {res:.3e} after "
            f"{info.newton_iterations} iterations")
    return (FieldVector(vel_space, u), FieldVector(pres_space, p), info)


# ---------------------------------------------------------------------------
# Two-level steps
# ---------------------------------------------------------------------------

def _fine_step(fine, cfg, forcing, bc, wind, newton_correction):
    """Single linear fine-mesh solve with the inertial term at ``wind``."""
    vel, pres = fine.u.space, fine.p.space
    ws = workspace(vel, pres)
    t1 = fine.t + cfg.dt
    c0, hist, _ = _bdf_terms(ws, cfg, fine)
    F = _forcing_vector(ws, forcing, t1) + hist
    gdofs, gvals = dirichlet_data(vel, bc, t1)

    tri_ww = trilinear_rhs(cfg.form, wind, wind)
    if newton_correction:
        A = (c0 * ws.M + cfg.nu * ws.K
             + assemble_trilinear(cfg.form, FIX_FIRST, wind)
             + assemble_trilinear(cfg.form, FIX_SECOND, wind))
        rhs_u = F + tri_ww
        solver = SaddleSolver(A, ws.B, vel, pres, gdofs, ws.mean)
    else:
        # Frozen inertial term: the matrix is wind-independent, so its
        # factorization is reused across steps.
        A = (c0 * ws.M + cfg.nu * ws.K).tocsr()
        rhs_u = F - tri_ww
        solver = ws.constant_solver(("stokes", c0, cfg.nu), A)
    u, p, lin_res = solver.solve(rhs_u, np.zeros(pres.num_dofs), gvals,
                                 tol=cfg.linear_tol)
    state = FlowState(u, p, t1, u_prev=fine.u)
    return state, StepInfo(linear_residual=lin_res)


def step_two_level_stokes(coarse, fine, cfg, forcing=None, bc=None):
    """Coarse nonlinear step, then a fine Stokes solve with the inertial
    term frozen at the prolonged coarse solution (right-hand side only)."""
    coarse1, info_c = step_one_level(coarse, cfg, forcing, bc)
    wind = prolongate(coarse1.u, fine.u.space)
    fine1, info_f = _fine_step(fine, cfg, forcing, bc, wind,
                               newton_correction=False)
    return coarse1, fine1, info_c.merge(info_f)


def step_two_level_newton(coarse, fine, cfg, forcing=None, bc=None):
    """Coarse nonlinear step, then a fine solve carrying the first-order
    linearization of the inertial term about the prolonged coarse solution."""
    coarse1, info_c = step_one_level(coarse, cfg, forcing, bc)
    wind = prolongate(coarse1.u, fine.u.space)
    fine1, info_f = _fine_step(fine, cfg, forcing, bc, wind,
                               newton_correction=True)
    return coarse1, fine1, info_c.merge(info_f)


# ---------------------------------------------------------------------------
# Simulation driver
# ---------------------------------------------------------------------------

@dataclass
class SimulationResult:
    """Final states and per-step diagnostics of one run."""

    fine: FlowState
    coarse: FlowState | None
    series: "DiagnosticsSeries"
    states: list = field(default_factory=list)
    status: str = "completed"


def initial_state(vel_space, pres_space, velocity, cfg, t=0.0):
    """Project or interpolate the initial velocity; zero initial pressure."""
    if velocity is None:
        u0 = vel_space.zero_field()
    elif cfg.initial_projection == "interpolate":
        u0 = interpolate(vel_space, velocity, t)
    else:
        u0 = l2_project(vel_space, velocity, t)
    return FlowState(u0, pres_space.zero_field(), t)


def run_simulation(problem, cfg, store_states=False, blowup_energy=None,
                   progress=None, extra_records=None):
    """March a problem from t = 0 to t_end, recording diagnostics each step.

    BDF2 runs bootstrap with one BDF1 step.  If ``blowup_energy`` is set and
    the fine energy exceeds it (or stops being finite), the run terminates
    gracefully with ``status="blowup"``.  Solver failures abort with the
    step index attached.  ``extra_records`` is an optional
    ``(columns, fn)`` pair adding experiment-specific columns per step.
    """
    from .diagnostics import DiagnosticsSeries, SeriesRecorder

    two_level = cfg.method != "one-level"
    vel_h, pres_h = build_taylor_hood(problem.mesh_fine)
    fine = initial_state(vel_h, pres_h, problem.initial_velocity, cfg)
    coarse = None
    if two_level:
        if problem.mesh_coarse is None:
            raise ValueError(f"method {cfg.method!r} needs a coarse mesh")
        vel_H, pres_H = build_taylor_hood(problem.mesh_coarse)
        coarse = initial_state(vel_H, pres_H, problem.initial_velocity, cfg)

    recorder = SeriesRecorder(problem, cfg, extra=extra_records)
    recorder.record(fine, StepInfo())
    states = [fine] if store_states else []
    status = "completed"

    for n in range(cfg.num_steps):
        try:
            if cfg.method == "one-level":
                fine, info = step_one_level(fine, cfg, problem.forcing,
                                            problem.dirichlet)
            elif cfg.method == "two-level-stokes":
                coarse, fine, info = step_two_level_stokes(
                    coarse, fine, cfg, problem.forcing, problem.dirichlet)
            else:
                coarse, fine, info = step_two_level_newton(
                    coarse, fine, cfg, problem.forcing, problem.dirichlet)
        except SolverError as exc:
            raise SolverError(f"step {n + 1}: {exc}") from exc
        energy_now = recorder.record(fine, info)
        if store_states:
            states.append(fine)
        if progress is not None:
            progress(n + 1, cfg.num_steps, fine)
        if blowup_energy is not None and not (energy_now <= blowup_energy):
            status = "blowup"
            break

    series = recorder.finish(status)
    return SimulationResult(fine, coarse, series, states, status)
