"""Reference elements, quadrature, Taylor-Hood spaces and field operations.

The velocity space is vector-valued continuous P2, the pressure space scalar
continuous P1, both on the same triangulation.  Vector DOFs use a blocked
layout: the first ``V + E`` coefficients are the x component, the next
``V + E`` the y component.  P2 midpoint DOFs are numbered by the mesh's
lexicographic edge table, so DOF numbering is reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, refine_uniform  # noqa: F401  (re-export convenience)


# ---------------------------------------------------------------------------
# Quadrature on the reference triangle (0,0)-(1,0)-(0,1)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Symmetric Gauss rule on the reference triangle.

    ``points`` are (n, 2) reference coordinates, ``weights`` sum to the
    reference area 1/2, and every polynomial of total degree at most
    ``degree`` is integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)


def _orbit3(w, a):
    b = 0.5 * (1.0 - a)
    return [(w, bc) for bc in ((a, b, b), (b, a, b), (b, b, a))]


def _orbit6(w, a, b):
    c = 1.0 - a - b
    return [(w, perm) for perm in sorted(set(itertools.permutations((a, b, c))))]


def _make_rule(groups, degree):
    pts = np.array([[l2, l3] for _, (l1, l2, l3) in groups])
    wts = 0.5 * np.array([w for w, _ in groups])
    return QuadratureRule(pts, wts, degree)


# Dunavant (1985) degree-4 (6 points) and degree-6 (12 points) rules.
_RULES = {
    1: QuadratureRule(np.array([[1 / 3, 1 / 3]]), np.array([0.5]), 1),
    2: _make_rule(_orbit3(1 / 3, 2 / 3), 2),
    4: _make_rule(_orbit3(0.223381589678011, 0.108103018168070)
                  + _orbit3(0.109951743655322, 0.816847572980459), 4),
    6: _make_rule(_orbit3(0.050844906370207, 0.873821971016996)
                  + _orbit3(0.116786275726379, 0.501426509658179)
                  + _orbit6(0.082851075618374,
                            0.053145049844816, 0.310352451033785), 6),
}

# Degree-4 exactness covers every bilinear form here (P2 x P2 mass has
# degree 4); degree 6 covers trilinear and functional integrands (three P2
# factors with one gradient have degree 5, drag/lift integrands likewise).
BILINEAR_DEGREE = 4
FUNCTIONAL_DEGREE = 6


def triangle_rule(degree):
    """Smallest shipped rule exact for polynomials of the given degree."""
    for d in sorted(_RULES):
        if d >= degree:
            return _RULES[d]
    raise ValueError(f"no quadrature rule of degree {degree}")


# ---------------------------------------------------------------------------
# Reference elements
# ---------------------------------------------------------------------------

class ReferenceElement:
    """Lagrange basis on the reference triangle.

    Attributes
    ----------
    degree : int
        1 or 2.
    nodes : (n, 2) array
        Nodal points; basis functions are 1 at their own node, 0 at the
        others.  P2 ordering: the three vertices, then the midpoint of the
        edge opposite each vertex.
    """

    def __init__(self, degree):
        if degree == 1:
            self.nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        elif degree == 2:
            self.nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                                   [0.5, 0.5], [0.0, 0.5], [0.5, 0.0]])
        else:
            raise ValueError("only degrees 1 and 2 are supported")
        self.degree = degree
        self.nodes.setflags(write=False)

    @property
    def num_basis(self):
        return len(self.nodes)

    def values(self, points):
        """Basis values at reference points; shape (npts, nbasis)."""
        x, y = np.asarray(points).T
        l0, l1, l2 = 1.0 - x - y, x, y
        if self.degree == 1:
            return np.stack([l0, l1, l2], axis=-1)
        return np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1),
                         l2 * (2 * l2 - 1),
                         4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1], axis=-1)

    def grads(self, points):
        """Reference gradients at reference points; shape (npts, nbasis, 2)."""
        pts = np.asarray(points)
        x, y = pts.T
        one = np.ones_like(x)
        zero = np.zeros_like(x)
        if self.degree == 1:
            g = [(-one, -one), (one, zero), (zero, one)]
        else:
            l0, l1, l2 = 1.0 - x - y, x, y
            g = [(1 - 4 * l0, 1 - 4 * l0),
                 (4 * l1 - 1, zero),
                 (zero, 4 * l2 - 1),
                 (4 * l2, 4 * l1),
                 (-4 * l2, 4 * (l0 - l2)),
                 (4 * (l0 - l1), -4 * l1)]
        return np.stack([np.stack(gi, axis=-1) for gi in g], axis=-2)


REF_P1 = ReferenceElement(1)
REF_P2 = ReferenceElement(2)


# ---------------------------------------------------------------------------
# Cell geometry (affine maps), cached per mesh
# ---------------------------------------------------------------------------

class CellGeometry:
    """Affine map data for every cell: Jacobians, inverses, determinants."""

    def __init__(self, mesh):
        p0 = mesh.vertices[mesh.cells[:, 0]]
        d1 = mesh.vertices[mesh.cells[:, 1]] - p0
        d2 = mesh.vertices[mesh.cells[:, 2]] - p0
        self.origin = p0
        self.jac = np.stack([d1, d2], axis=-1)        # (T, 2, 2)
        self.det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        inv = np.empty_like(self.jac)                 # J^{-T}, for gradients
        inv[:, 0, 0] = d2[:, 1]
        inv[:, 0, 1] = -d1[:, 1]
        inv[:, 1, 0] = -d2[:, 0]
        inv[:, 1, 1] = d1[:, 0]
        self.inv_t = inv / self.det[:, None, None]

    def map_points(self, ref_points):
        """Physical coordinates of reference points; (T, npts, 2)."""
        return (self.origin[:, None, :]
                + np.einsum("tij,qj->tqi", self.jac, ref_points))


def cell_geometry(mesh):
    geo = mesh.cache.get("geometry")
    if geo is None:
        geo = mesh.cache["geometry"] = CellGeometry(mesh)
    return geo


def physical_grads(mesh, element, rule):
    """Physical basis gradients at quadrature points; (T, nq, nbasis, 2)."""
    key = ("pgrads", element.degree, rule.degree)
    out = mesh.cache.get(key)
    if out is None:
        geo = cell_geometry(mesh)
        ref = element.grads(rule.points)              # (nq, nb, 2)
        out = np.einsum("tij,qbj->tqbi", geo.inv_t, ref)
        mesh.cache[key] = out
    return out


# ---------------------------------------------------------------------------
# Finite element spaces and fields
# ---------------------------------------------------------------------------

class FeSpace:
    """Scalar or vector Lagrange space on a mesh.

    Attributes
    ----------
    mesh : Mesh
    family : str
        ``"vector-p2"`` or ``"scalar-p1"`` (``"scalar-p2"`` also works).
    element : ReferenceElement
    components : int
    num_scalar_dofs : int
        V + E for P2, V for P1.
    num_dofs : int
        components * num_scalar_dofs.
    cell_dofs : (T, components * nbasis) int array
        Global DOFs per cell; vector spaces list all x-component DOFs first.
    dof_points : (num_scalar_dofs, 2) array
        Nodal coordinate of each scalar DOF.
    dirichlet : dict[int, np.ndarray]
        For each boundary tag, the (sorted) global DOFs on edges of that tag.
    """

    def __init__(self, mesh, family):
        degree = 2 if family.endswith("p2") else 1
        components = 2 if family.startswith("vector") else 1
        element = REF_P1 if degree == 1 else REF_P2

        V, E = mesh.num_vertices, mesh.num_edges
        if degree == 1:
            ns = V
            scalar_cell_dofs = mesh.cells.copy()
            dof_points = mesh.vertices.copy()
        else:
            ns = V + E
            scalar_cell_dofs = np.hstack([mesh.cells, V + mesh.cell_edges])
            mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                          + mesh.vertices[mesh.edges[:, 1]])
            dof_points = np.vstack([mesh.vertices, mids])

        if components == 1:
            cell_dofs = scalar_cell_dofs
        else:
            cell_dofs = np.hstack([scalar_cell_dofs, scalar_cell_dofs + ns])

        dirichlet = {}
        for tag in np.unique(mesh.boundary_tags):
            sel = mesh.boundary_tags == tag
            dofs = [np.unique(mesh.boundary_edges[sel])]
            if degree == 2:
                dofs.append(V + mesh.boundary_edge_index[sel])
            scalar = np.unique(np.concatenate(dofs))
            if components == 2:
                scalar = np.concatenate([scalar, scalar + ns])
            dirichlet[int(tag)] = scalar

        self.mesh = mesh
        self.family = family
        self.element = element
        self.components = components
        self.num_scalar_dofs = ns
        self.num_dofs = components * ns
        self.cell_dofs = cell_dofs
        self.dof_points = dof_points
        self.dirichlet = dirichlet
        self.cell_dofs.setflags(write=False)
        self.dof_points.setflags(write=False)
        self.cache = {}

    def dirichlet_dofs(self, tags=None):
        """Union of Dirichlet DOFs over the given tags (default: all)."""
        if tags is None:
            tags = sorted(self.dirichlet)
        if not tags:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([self.dirichlet[t] for t in tags]))

    def zero_field(self):
        return FieldVector(self, np.zeros(self.num_dofs))

    def __repr__(self):
        return f"FeSpace({self.family}, ndof={self.num_dofs})"


@dataclass
class FieldVector:
    """Coefficient vector of a finite element function."""

    space: FeSpace
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.num_dofs,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape} does not match "
                f"space with {self.space.num_dofs} DOFs")

    def copy(self):
        return FieldVector(self.space, self.coeffs.copy())

    def cellwise(self):
        """Coefficients gathered per cell: (T, components, nbasis)."""
        space = self.space
        gathered = self.coeffs[space.cell_dofs]
        T = space.mesh.num_cells
        return gathered.reshape(T, space.components, space.element.num_basis)


def build_taylor_hood(mesh):
    """Vector-P2 velocity and scalar-P1 pressure spaces on one mesh.

    The pair is cached on the mesh, so repeated calls share assembled
    operators and factorizations.
    """
    pair = mesh.cache.get("taylor_hood")
    if pair is None:
        pair = mesh.cache["taylor_hood"] = (FeSpace(mesh, "vector-p2"),
                                            FeSpace(mesh, "scalar-p1"))
    return pair


def _eval_function(f, x, y, t, components):
    out = f(x, y, t)
    if components == 1:
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape)
    u1, u2 = out
    return (np.broadcast_to(np.asarray(u1, dtype=float), x.shape),
            np.broadcast_to(np.asarray(u2, dtype=float), x.shape))


def interpolate(space, f, t=0.0):
    """Nodal interpolation of ``f(x, y, t)`` (vectorized callable).

    Scalar spaces expect ``f`` returning an array, vector spaces a pair
    ``(u1, u2)`` of arrays.
    """
    x, y = space.dof_points.T
    vals = _eval_function(f, x, y, t, space.components)
    if space.components == 1:
        return FieldVector(space, np.array(vals, dtype=float))
    return FieldVector(space, np.concatenate(vals))


def mass_matrix(space):
    """Gram matrix of basis L2 inner products (cached on the space)."""
    from .forms import assemble_mass
    M = space.cache.get("mass")
    if M is None:
        M = space.cache["mass"] = assemble_mass(space)
    return M


def l2_project(space, f, t=0.0, tol=1e-12):
    """L2 projection of ``f(x, y, t)`` onto the space.

    Solves the mass-matrix system with a direct factorization and verifies
    the relative residual is below ``tol``.
    """
    rule = triangle_rule(FUNCTIONAL_DEGREE)
    geo = cell_geometry(space.mesh)
    pts = geo.map_points(rule.points)
    phi = space.element.values(rule.points)           # (nq, nb)
    wdet = rule.weights[None, :] * geo.det[:, None]   # (T, nq)

    vals = _eval_function(f, pts[..., 0], pts[..., 1], t, space.components)
    if space.components == 1:
        vals = (vals,)
    ns = space.num_scalar_dofs
    scalar_dofs = space.cell_dofs[:, :space.element.num_basis]
    b = np.zeros(space.num_dofs)
    for c, v in enumerate(vals):
        cellwise = np.einsum("tq,tq,qb->tb", wdet, v, phi)
        np.add.at(b, c * ns + scalar_dofs, cellwise)

    M = mass_matrix(space)
    solve = space.cache.get("mass_factor")
    if solve is None:
        solve = space.cache["mass_factor"] = spla.factorized(M.tocsc())
    coeffs = solve(b)
    res = np.linalg.norm(M @ coeffs - b)
    scale = max(np.linalg.norm(b), 1e-300)
    if res > tol * max(scale, 1.0):
        raise RuntimeError(
            f"l2_project: mass solve residual {res / scale:.2e} above {tol}")
    return FieldVector(space, coeffs)


# ---------------------------------------------------------------------------
# Point location and evaluation
# ---------------------------------------------------------------------------

class PointLocator:
    """Uniform-bin point-in-cell search over a triangulation."""

    def __init__(self, mesh, bins_per_cell=2.0):
        self.mesh = mesh
        verts = mesh.vertices
        self.lo = verts.min(axis=0)
        self.hi = verts.max(axis=0)
        span = np.maximum(self.hi - self.lo, 1e-300)
        n = max(1, int(np.sqrt(bins_per_cell * mesh.num_cells)))
        self.shape = (n, n)
        self.scale = np.array([n, n]) / span

        corners = verts[mesh.cells]                   # (T, 3, 2)
        lo_bin = self._bin_of(corners.min(axis=1) - 1e-12 * span)
        hi_bin = self._bin_of(corners.max(axis=1) + 1e-12 * span)
        buckets = {}
        for t in range(mesh.num_cells):
            for i in range(lo_bin[t, 0], hi_bin[t, 0] + 1):
                for j in range(lo_bin[t, 1], hi_bin[t, 1] + 1):
                    buckets.setdefault((i, j), []).append(t)
        self.buckets = {k: np.array(v, dtype=np.int64)
                        for k, v in buckets.items()}
        self.geo = cell_geometry(mesh)

    def _bin_of(self, pts):
        idx = ((pts - self.lo) * self.scale).astype(np.int64)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def locate(self, points, tol=1e-10):
        """Containing cell and barycentric coordinates for each point.

        Points on shared edges resolve to the most interior candidate cell;
        points outside the mesh raise ValueError.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        cells = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        bins = self._bin_of(points)
        order = np.lexsort((bins[:, 1], bins[:, 0]))
        for key, grp in itertools.groupby(order, key=lambda k: tuple(bins[k])):
            cand = self.buckets.get(key)
            idx = np.fromiter(grp, dtype=np.int64)
            if cand is None:
                continue
            # Barycentric coordinates of each point in each candidate cell;
            # J^{-1} is the transpose of the stored J^{-T}.
            rel = points[idx][:, None, :] - self.geo.origin[cand][None, :, :]
            ref = np.einsum("cji,pcj->pci", self.geo.inv_t[cand], rel)
            lam = np.stack([1.0 - ref[..., 0] - ref[..., 1],
                            ref[..., 0], ref[..., 1]], axis=-1)
            quality = lam.min(axis=-1)                # (npts, ncand)
            best = quality.argmax(axis=1)
            ok = quality[np.arange(len(idx)), best] >= -tol
            cells[idx[ok]] = cand[best[ok]]
            bary[idx[ok]] = lam[np.arange(len(idx)), best][ok]
        if (cells < 0).any():
            p = points[np.nonzero(cells < 0)[0][0]]
            raise ValueError(f"point {tuple(p)} is outside the mesh")
        return cells, bary


def point_locator(mesh):
    loc = mesh.cache.get("locator")
    if loc is None:
        loc = mesh.cache["locator"] = PointLocator(mesh)
    return loc


def evaluate(fld, points):
    """Evaluate a field at physical points.

    Returns an (n,) array for scalar fields or (n, 2) for vector fields;
    a single point yields a scalar / length-2 array.
    """
    single = np.asarray(points).ndim == 1
    points = np.atleast_2d(np.asarray(points, dtype=float))
    space = fld.space
    cells, bary = point_locator(space.mesh).locate(points)
    ref = bary[:, 1:]
    phi = space.element.values(ref)                   # (n, nb)
    cw = fld.cellwise()[cells]                        # (n, comps, nb)
    out = np.einsum("ncb,nb->nc", cw, phi)
    if space.components == 1:
        out = out[:, 0]
    return out[0] if single else out


def field_values_and_grads(fld, rule=None):
    """Values and gradients at quadrature points of every cell.

    Returns ``(values, grads)`` with shapes (T, nq, comps) and
    (T, nq, comps, 2); ``grads[..., i, j]`` is d(component i)/d(x_j).
    """
    space = fld.space
    if rule is None:
        rule = triangle_rule(FUNCTIONAL_DEGREE)
    phi = space.element.values(rule.points)
    gphi = physical_grads(space.mesh, space.element, rule)
    cw = fld.cellwise()                               # (T, comps, nb)
    vals = np.einsum("tcb,qb->tqc", cw, phi)
    grads = np.einsum("tcb,tqbj->tqcj", cw, gphi)
    return vals, grads


# ---------------------------------------------------------------------------
# Coarse-to-fine prolongation (nested spaces)
# ---------------------------------------------------------------------------

def _is_descendant(fine_mesh, coarse_mesh):
    m = fine_mesh
    while m is not None:
        if m is coarse_mesh:
            return True
        m = m.parent
    return False


def transfer_matrix(coarse_space, fine_space):
    """Sparse scalar interpolation operator from coarse to fine DOFs.

    Valid whenever the fine mesh covers the coarse one with nested cells
    (uniform descendants, or structured meshes whose resolutions divide);
    each fine nodal point is evaluated in its containing coarse cell, which
    reproduces the coarse function exactly.  Nesting is verified once, on a
    random coarse field at random sample points.
    """
    key = ("transfer", id(coarse_space))
    P = fine_space.cache.get(key)
    if P is not None:
        return P
    try:
        cells, bary = point_locator(coarse_space.mesh).locate(
            fine_space.dof_points)
    except ValueError as exc:
        raise ValueError(
            "prolongate: fine node outside the coarse mesh "
            f"(meshes are not nested): {exc}") from None
    phi = coarse_space.element.values(bary[:, 1:])    # (nf, nb)
    nb = coarse_space.element.num_basis
    cols = coarse_space.cell_dofs[cells][:, :nb]
    rows = np.repeat(np.arange(fine_space.num_scalar_dofs), nb)
    P = sp.coo_matrix(
        (phi.ravel(), (rows, cols.ravel())),
        shape=(fine_space.num_scalar_dofs, coarse_space.num_scalar_dofs))
    P = P.tocsr()

    if not _is_descendant(fine_space.mesh, coarse_space.mesh):
        _verify_nesting(coarse_space, fine_space, P)
    fine_space.cache[key] = P
    return P


def _verify_nesting(coarse_space, fine_space, P):
    """Spot-check that the transfer reproduces coarse functions exactly."""
    rng = np.random.default_rng(0)
    cc = rng.standard_normal(coarse_space.num_scalar_dofs)
    lo = coarse_space.mesh.vertices.min(axis=0)
    hi = coarse_space.mesh.vertices.max(axis=0)
    pts = lo + (hi - lo) * rng.random((20, 2)) * 0.98 + 0.01 * (hi - lo)
    scalar_family = "scalar-p" + str(coarse_space.element.degree)
    cf = FieldVector(FeSpace(coarse_space.mesh, scalar_family), cc)
    ff = FieldVector(FeSpace(fine_space.mesh, scalar_family), P @ cc)
    err = np.abs(evaluate(cf, pts) - evaluate(ff, pts)).max()
    if err > 1e-10 * max(1.0, np.abs(cc).max()):
        raise ValueError(
            f"prolongate: meshes are not nested (transfer error {err:.2e})")


def prolongate(coarse_field, fine_space):
    """Represent a coarse-space field exactly in a nested fine space."""
    coarse_space = coarse_field.space
    if coarse_space.components != fine_space.components or \
            coarse_space.element.degree != fine_space.element.degree:
        raise ValueError("prolongate requires matching element families")
    P = transfer_matrix(coarse_space, fine_space)
    nc = coarse_space.num_scalar_dofs
    nf = fine_space.num_scalar_dofs
    out = np.empty(fine_space.num_dofs)
    for c in range(fine_space.components):
        out[c * nf:(c + 1) * nf] = P @ coarse_field.coeffs[c * nc:(c + 1) * nc]
    return FieldVector(fine_space, out)
