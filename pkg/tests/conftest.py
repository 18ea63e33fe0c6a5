import numpy as np
import pytest

from emac2d.fespace import FieldVector, build_taylor_hood
from emac2d.mesh import build_structured_mesh


@pytest.fixture(scope="session")
def mesh8():
    return build_structured_mesh(8)


@pytest.fixture(scope="session")
def th8(mesh8):
    """Taylor-Hood pair on the n=8 unit square."""
    return build_taylor_hood(mesh8)


def random_velocity(space, rng, zero_boundary=True, scale=1.0):
    """Random coefficient field, optionally vanishing on the whole boundary."""
    coeffs = rng.uniform(-scale, scale, space.num_dofs)
    if zero_boundary:
        coeffs[space.dirichlet_dofs()] = 0.0
    return FieldVector(space, coeffs)


def constant_velocity(space, direction):
    ns = space.num_scalar_dofs
    return FieldVector(space, np.concatenate([
        np.full(ns, float(direction[0])), np.full(ns, float(direction[1]))]))
