"""Benchmark problem definitions: exact solutions, forcings, boundary data.

All field callables are vectorized with signature ``f(x, y, t)``; vector
fields return a pair of arrays, gradients return a nested pair
``((du1/dx, du1/dy), (du2/dx, du2/dy))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import (Mesh, TAG_CYLINDER, TAG_INFLOW, TAG_OUTFLOW, TAG_WALL,
                   build_cylinder_channel_mesh, build_structured_mesh,
                   refine_uniform)

PI = np.pi


@dataclass
class ExactSolution:
    """Closed-form solution used for boundary data and error norms."""

    velocity: Callable
    velocity_gradient: Callable
    pressure: Callable


@dataclass
class Problem:
    """Domain, data and (optionally) the exact solution of one flow problem."""

    name: str
    mesh_fine: Mesh
    mesh_coarse: Optional[Mesh] = None
    forcing: Optional[Callable] = None
    dirichlet: object = None          # None | callable | {tag: callable}
    initial_velocity: Optional[Callable] = None
    exact: Optional[ExactSolution] = None
    angular_pivot: Optional[tuple] = None   # None: domain bounding-box center


# ---------------------------------------------------------------------------
# Manufactured convergence problem on the unit square
# ---------------------------------------------------------------------------

def manufactured_solution():
    """Time-periodic vortex pair with zero boundary velocity.

    u = (sin^2(pi x) sin(2 pi y), -sin^2(pi y) sin(2 pi x)) (1 + sin(pi t)),
    p = (1 + sin(pi t)) cos(pi x) cos(pi y).
    """
    def s(t):
        return 1.0 + np.sin(PI * t)

    def velocity(x, y, t):
        return (np.sin(PI * x) ** 2 * np.sin(2 * PI * y) * s(t),
                -np.sin(PI * y) ** 2 * np.sin(2 * PI * x) * s(t))

    def velocity_gradient(x, y, t):
        st = s(t)
        d1x = PI * np.sin(2 * PI * x) * np.sin(2 * PI * y) * st
        d1y = 2 * PI * np.sin(PI * x) ** 2 * np.cos(2 * PI * y) * st
        d2x = -2 * PI * np.sin(PI * y) ** 2 * np.cos(2 * PI * x) * st
        d2y = -PI * np.sin(2 * PI * y) * np.sin(2 * PI * x) * st
        return ((d1x, d1y), (d2x, d2y))

    def pressure(x, y, t):
        return s(t) * np.cos(PI * x) * np.cos(PI * y)

    return ExactSolution(velocity, velocity_gradient, pressure)


def manufactured_forcing(nu):
    """Closed-form f = du/dt + (u . grad) u - nu Lap(u) + grad p.

    Hand-derived from :func:`manufactured_solution`; cross-checked against a
    finite-difference application of the operator in the test suite.
    """
    def forcing(x, y, t):
        st = 1.0 + np.sin(PI * t)
        ds = PI * np.cos(PI * t)
        sx, sy = np.sin(PI * x), np.sin(PI * y)
        s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
        c2x, c2y = np.cos(2 * PI * x), np.cos(2 * PI * y)

        u1 = sx ** 2 * s2y * st
        u2 = -sy ** 2 * s2x * st
        d1x = PI * s2x * s2y * st
        d1y = 2 * PI * sx ** 2 * c2y * st
        d2x = -2 * PI * sy ** 2 * c2x * st
        d2y = -PI * s2y * s2x * st

        lap1 = (2 * PI ** 2 * c2x * s2y - 4 * PI ** 2 * sx ** 2 * s2y) * st
        lap2 = (4 * PI ** 2 * sy ** 2 * s2x - 2 * PI ** 2 * c2y * s2x) * st
        px = -PI * sx * np.cos(PI * y) * st
        py = -PI * np.cos(PI * x) * sy * st

        f1 = ds * sx ** 2 * s2y + u1 * d1x + u2 * d1y - nu * lap1 + px
        f2 = -ds * sy ** 2 * s2x + u1 * d2x + u2 * d2y - nu * lap2 + py
        return (f1, f2)

    return forcing


def finite_difference_forcing(exact, nu, h_first=1e-6, h_second=1e-4):
    """f = du/dt + (u . grad) u - nu Lap(u) + grad p by central differences.

    First derivatives use step ``h_first``; the Laplacian uses the larger
    ``h_second`` (a second difference with step 1e-6 is dominated by
    rounding in double precision).  Independent check for closed-form
    forcings.
    """
    u, p = exact.velocity, exact.pressure

    def forcing(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)

        def vec(fx):
            a, b = fx
            return np.stack([np.broadcast_to(a, x.shape),
                             np.broadcast_to(b, x.shape)])

        u0 = vec(u(x, y, t))
        dudt = (vec(u(x, y, t + h_first)) - vec(u(x, y, t - h_first))) \
            / (2 * h_first)
        dudx = (vec(u(x + h_first, y, t)) - vec(u(x - h_first, y, t))) \
            / (2 * h_first)
        dudy = (vec(u(x, y + h_first, t)) - vec(u(x, y - h_first, t))) \
            / (2 * h_first)
        conv = u0[0] * dudx + u0[1] * dudy
        lap = ((vec(u(x + h_second, y, t)) + vec(u(x - h_second, y, t))
                + vec(u(x, y + h_second, t)) + vec(u(x, y - h_second, t))
                - 4 * u0) / h_second ** 2)
        gp = np.stack([
            (p(x + h_first, y, t) - p(x - h_first, y, t)) / (2 * h_first),
            (p(x, y + h_first, t) - p(x, y - h_first, t)) / (2 * h_first)])
        f = dudt + conv - nu * lap + gp
        return (f[0], f[1])

    return forcing


def convergence_problem(n_fine, n_coarse, nu=1.0):
    """Manufactured-solution problem on nested structured unit-square meshes."""
    exact = manufactured_solution()
    return Problem(
        name=f"manufactured-{n_fine}-{n_coarse}",
        mesh_fine=build_structured_mesh(n_fine),
        mesh_coarse=build_structured_mesh(n_coarse),
        forcing=manufactured_forcing(nu),
        dirichlet=None,                  # exact solution vanishes on walls
        initial_velocity=exact.velocity,
        exact=exact,
    )


# ---------------------------------------------------------------------------
# Lattice vortex
# ---------------------------------------------------------------------------

def lattice_vortex_solution(nu):
    """Array of counter-rotating vortices with touching edges.

    u = (sin(2 pi x) sin(2 pi y), cos(2 pi x) cos(2 pi y)) exp(-8 nu pi^2 t);
    an exact Navier-Stokes solution with f = 0 and pressure
    p = (cos(4 pi x) - cos(4 pi y)) / 4 * exp(-16 nu pi^2 t) (zero mean).
    Total momentum and angular momentum are zero for all time.
    """
    def decay(t):
        return np.exp(-8.0 * nu * PI ** 2 * t)

    def velocity(x, y, t):
        d = decay(t)
        return (np.sin(2 * PI * x) * np.sin(2 * PI * y) * d,
                np.cos(2 * PI * x) * np.cos(2 * PI * y) * d)

    def velocity_gradient(x, y, t):
        d = decay(t)
        a = 2 * PI
        d1x = a * np.cos(a * x) * np.sin(a * y) * d
        d1y = a * np.sin(a * x) * np.cos(a * y) * d
        d2x = -a * np.sin(a * x) * np.cos(a * y) * d
        d2y = -a * np.cos(a * x) * np.sin(a * y) * d
        return ((d1x, d1y), (d2x, d2y))

    def pressure(x, y, t):
        return 0.25 * (np.cos(4 * PI * x) - np.cos(4 * PI * y)) * decay(t) ** 2

    return ExactSolution(velocity, velocity_gradient, pressure)


def lattice_vortex_problem(n_fine=36, n_coarse=18, nu=1e-7):
    """Lattice vortex on the unit square with exact Dirichlet data."""
    exact = lattice_vortex_solution(nu)
    return Problem(
        name=f"lattice-vortex-{n_fine}-{n_coarse}",
        mesh_fine=build_structured_mesh(n_fine),
        mesh_coarse=build_structured_mesh(n_coarse),
        forcing=None,
        dirichlet=exact.velocity,
        initial_velocity=exact.velocity,
        exact=exact,
    )


# ---------------------------------------------------------------------------
# Flow past a cylinder
# ---------------------------------------------------------------------------

CHANNEL_LENGTH = 2.2
CHANNEL_HEIGHT = 0.41
CYLINDER_CENTER = (0.2, 0.2)
CYLINDER_DIAMETER = 0.1
FRONT_POINT = (0.15, 0.2)
BACK_POINT = (0.25, 0.2)


def inflow_profile(max_velocity, ramp_time=1.0):
    """Parabolic channel profile, smoothly ramped from rest.

    u(y) = 4 U y (H - y) / H^2 with peak ``max_velocity``; the mean inflow
    velocity is 2/3 of the peak.  For t < ramp_time the profile is scaled by
    t / ramp_time to avoid an impulsive pressure shock.
    """
    H = CHANNEL_HEIGHT

    def profile(x, y, t):
        ramp = min(1.0, t / ramp_time) if ramp_time > 0 else 1.0
        u1 = 4.0 * max_velocity * y * (H - y) / H ** 2 * ramp
        return (u1, np.zeros_like(np.asarray(y, dtype=float)))

    return profile


def cylinder_problem(n_angular=32, n_radial=4, spacing=0.03, refine=1,
                     nu=1e-3, max_inflow=1.5, ramp_time=1.0, mesh=None):
    """Channel flow past a cylinder with prescribed in/outflow profile.

    The coarse mesh (generated, or ``mesh`` if given, e.g. loaded from a
    file) is uniformly refined ``refine`` times to build the nested fine
    mesh.  ``max_inflow=1.5`` gives mean inflow velocity 1 (Reynolds number
    100 on the cylinder diameter); ``max_inflow=0.3`` gives the steady
    regime at Reynolds number 20.
    """
    coarse = mesh if mesh is not None else build_cylinder_channel_mesh(
        n_angular=n_angular, n_radial=n_radial, spacing=spacing)
    fine = coarse
    for _ in range(refine):
        fine = refine_uniform(fine)
    profile = inflow_profile(max_inflow, ramp_time)
    bc = {TAG_WALL: None, TAG_CYLINDER: None,
          TAG_INFLOW: profile, TAG_OUTFLOW: profile}
    bc = {tag: g for tag, g in bc.items() if g is not None}
    return Problem(
        name=f"cylinder-a{n_angular}-r{n_radial}-ref{refine}",
        mesh_fine=fine,
        mesh_coarse=coarse if refine > 0 else None,
        forcing=None,
        dirichlet=bc,
        initial_velocity=None,
        exact=None,
    )
