"""Conforming triangular meshes: structured builds, uniform refinement, file I/O.

Meshes are immutable after construction.  Vertex, cell and edge arrays are
plain numpy arrays; the unique edge table is sorted lexicographically so that
edge numbering (and hence P2 midpoint DOF numbering) is reproducible across
runs.
"""

from __future__ import annotations

import warnings

import numpy as np

# Boundary tag identifiers and their roles.
TAG_WALL = 1
TAG_INFLOW = 2
TAG_OUTFLOW = 3
TAG_CYLINDER = 4

TAG_ROLES = {
    TAG_WALL: "dirichlet-wall",
    TAG_INFLOW: "inflow",
    TAG_OUTFLOW: "outflow",
    TAG_CYLINDER: "cylinder",
}


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class MeshFileError(ValueError):
    """Malformed mesh file; message carries the offending line number."""


class Mesh:
    """Immutable conforming triangulation of a planar domain.

    Attributes
    ----------
    vertices : (V, 2) float array
        Vertex coordinates.
    cells : (T, 3) int array
        Vertex index triples, counter-clockwise.
    edges : (E, 2) int array
        Unique undirected edges as sorted vertex pairs, in lexicographic
        order.
    cell_edges : (T, 3) int array
        For each cell, the edge table index of the edge opposite each local
        vertex.
    boundary_edges : (B, 2) int array
        Sorted vertex pairs of boundary edges.
    boundary_tags : (B,) int array
        Integer tag per boundary edge; tags partition the boundary.
    boundary_edge_index : (B,) int array
        Edge table index of each boundary edge.
    parent : Mesh or None
        Mesh this one was refined from.
    parent_cells : (T,) int array or None
        For refined meshes, the parent cell containing each cell.
    """

    def __init__(self, vertices, cells, boundary_edges, boundary_tags,
                 parent=None, parent_cells=None):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        boundary_tags = np.ascontiguousarray(boundary_tags, dtype=np.int64)

        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be a (V, 2) array")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError("cells must be a (T, 3) array")
        if boundary_edges.shape != (len(boundary_tags), 2):
            raise MeshError("boundary_edges and boundary_tags must align")
        nv = len(vertices)
        if cells.size and (cells.min() < 0 or cells.max() >= nv):
            raise MeshError("cell vertex index out of range")

        self.vertices = vertices
        self.cells = cells

        areas = _signed_areas(vertices, cells)
        bad = np.nonzero(areas <= 0.0)[0]
        if bad.size:
            raise MeshError(
                f"{bad.size} cell(s) with non-positive area "
                f"(first: cell {bad[0]}); cells must be counter-clockwise")

        # Unique undirected edge table; np.unique sorts lexicographically,
        # which fixes a deterministic edge numbering.
        pairs = cells[:, [1, 2, 2, 0, 0, 1]].reshape(-1, 3, 2)
        pairs = np.sort(pairs, axis=2).reshape(-1, 2)
        self.edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        self.cell_edges = inverse.reshape(-1, 3)

        counts = np.bincount(self.cell_edges.ravel(),
                             minlength=len(self.edges))
        if counts.max(initial=0) > 2:
            raise MeshError("non-manifold edge (shared by more than 2 cells)")
        hull = np.nonzero(counts == 1)[0]

        used = np.zeros(nv, dtype=bool)
        used[cells.ravel()] = True
        if not used.all():
            raise MeshError(
                f"dangling vertex {np.nonzero(~used)[0][0]} "
                "(not referenced by any cell)")

        given = np.sort(boundary_edges, axis=1)
        self.boundary_edge_index = _lookup_edges(self.edges, given)
        if np.any(counts[self.boundary_edge_index] != 1):
            raise MeshError("tagged edge is not a boundary edge")
        if len(np.unique(self.boundary_edge_index)) != len(given):
            raise MeshError("duplicate boundary edge tag")
        if len(given) != len(hull):
            raise MeshError(
                f"boundary tags cover {len(given)} of {len(hull)} "
                "boundary edges")
        self.boundary_edges = given
        self.boundary_tags = boundary_tags

        self.parent = parent
        if parent_cells is not None:
            parent_cells = np.ascontiguousarray(parent_cells, dtype=np.int64)
            if parent is None or parent_cells.shape != (len(cells),):
                raise MeshError("parent_cells requires a parent mesh "
                                "and one entry per cell")
        self.parent_cells = parent_cells

        for arr in (self.vertices, self.cells, self.edges, self.cell_edges,
                    self.boundary_edges, self.boundary_tags,
                    self.boundary_edge_index):
            arr.setflags(write=False)
        self.cache = {}

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_edges(self):
        return len(self.edges)

    def cell_areas(self):
        """Areas of all cells (positive by the orientation invariant)."""
        return _signed_areas(self.vertices, self.cells)

    def euler_characteristic(self):
        """V - E + T; 1 for a simply connected domain, 0 with one hole."""
        return self.num_vertices - self.num_edges + self.num_cells

    def boundary_vertices(self, tag=None):
        """Vertex indices on the boundary, optionally restricted to a tag."""
        sel = self.boundary_edges
        if tag is not None:
            sel = sel[self.boundary_tags == tag]
        return np.unique(sel)

    def __repr__(self):
        return (f"Mesh(V={self.num_vertices}, T={self.num_cells}, "
                f"E={self.num_edges}, B={len(self.boundary_edges)})")


def _signed_areas(vertices, cells):
    p0 = vertices[cells[:, 0]]
    d1 = vertices[cells[:, 1]] - p0
    d2 = vertices[cells[:, 2]] - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _lookup_edges(edge_table, pairs):
    """Map sorted vertex pairs to their edge table rows (or raise)."""
    nv = int(edge_table.max(initial=0)) + 1
    keys = edge_table[:, 0] * nv + edge_table[:, 1]
    wanted = pairs[:, 0] * nv + pairs[:, 1]
    pos = np.searchsorted(keys, wanted)
    ok = (pos < len(keys))
    ok &= keys[np.minimum(pos, len(keys) - 1)] == wanted
    if not ok.all():
        bad = pairs[np.nonzero(~ok)[0][0]]
        raise MeshError(f"edge {tuple(bad)} not present in the mesh")
    return pos


def build_structured_mesh(n, rect=(0.0, 0.0, 1.0, 1.0), tag=TAG_WALL):
    """Uniform n-by-n triangulation of a rectangle with SWNE diagonals.

    Each grid square is split by the diagonal running from its southwest to
    its northeast corner.  All boundary edges carry ``tag``.

    Parameters
    ----------
    n : int
        Cells per side, at least 1.
    rect : (x0, y0, x1, y1)
        Axis-aligned rectangle.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    x0, y0, x1, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate rectangle")

    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = vid(ii, jj).ravel()
    b = vid(ii + 1, jj).ravel()
    c = vid(ii + 1, jj + 1).ravel()
    d = vid(ii, jj + 1).ravel()
    # SWNE split: lower triangle (a, b, c), upper triangle (a, c, d).
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = np.column_stack([a, b, c])
    cells[1::2] = np.column_stack([a, c, d])

    k = np.arange(n)
    bedges = np.concatenate([
        np.column_stack([vid(k, 0), vid(k + 1, 0)]),
        np.column_stack([vid(n, k), vid(n, k + 1)]),
        np.column_stack([vid(k, n), vid(k + 1, n)]),
        np.column_stack([vid(0, k), vid(0, k + 1)]),
    ])
    tags = np.full(len(bedges), tag, dtype=np.int64)
    return Mesh(vertices, cells, bedges, tags)


def refine_uniform(mesh):
    """Split every cell into 4 congruent children via edge midpoints.

    The child mesh keeps a parent link; boundary children inherit their
    parent edge's tag.  Midpoint vertices are numbered V + edge index, so
    refinement is deterministic.
    """
    V = mesh.num_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                  + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])

    v0, v1, v2 = mesh.cells.T
    m0, m1, m2 = (V + mesh.cell_edges).T
    T = mesh.num_cells
    children = np.empty((4 * T, 3), dtype=np.int64)
    children[0::4] = np.column_stack([v0, m2, m1])
    children[1::4] = np.column_stack([v1, m0, m2])
    children[2::4] = np.column_stack([v2, m1, m0])
    children[3::4] = np.column_stack([m0, m1, m2])
    parent_cells = np.repeat(np.arange(T), 4)

    a, b = mesh.boundary_edges.T
    m = V + mesh.boundary_edge_index
    bedges = np.vstack([np.column_stack([a, m]), np.column_stack([m, b])])
    tags = np.concatenate([mesh.boundary_tags, mesh.boundary_tags])
    return Mesh(vertices, children, bedges, tags,
                parent=mesh, parent_cells=parent_cells)


def mesh_size(mesh):
    """Largest cell diameter, i.e. the longest edge in the mesh."""
    d = mesh.vertices[mesh.edges[:, 0]] - mesh.vertices[mesh.edges[:, 1]]
    return float(np.sqrt((d ** 2).sum(axis=1)).max())


def load_mesh(path):
    """Read a mesh from the plain-text format written by :func:`save_mesh`.

    Format (UTF-8, ``#`` starts a comment, whitespace-separated)::

        V T B
        x y        (V vertex lines)
        i j k      (T cell lines, 0-based vertex indices)
        i j tag    (B tagged boundary edge lines)

    Clockwise cells are reoriented with a warning.  Topology problems
    (dangling vertices, non-manifold or mistagged edges) raise
    :class:`MeshError`.
    """
    tokens = []  # (line_number, fields)
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens.append((ln, line.split()))

    def take(what, nfields, cast):
        if not tokens:
            raise MeshFileError(f"{path}: unexpected end of file ({what})")
        ln, fields = tokens.pop(0)
        if len(fields) != nfields:
            raise MeshFileError(
                f"{path}: line {ln}: expected {nfields} fields for {what}, "
                f"got {len(fields)}")
        try:
            return [cast(f) for f in fields]
        except ValueError:
            raise MeshFileError(
                f"{path}: line {ln}: could not parse {what}") from None

    nv, nt, nb = take("header 'V T B'", 3, int)
    vertices = np.array([take("vertex", 2, float) for _ in range(nv)],
                        dtype=float).reshape(nv, 2)
    cells = np.array([take("cell", 3, int) for _ in range(nt)],
                     dtype=np.int64).reshape(nt, 3)
    bdata = np.array([take("boundary edge", 3, int) for _ in range(nb)],
                     dtype=np.int64).reshape(nb, 3)
    if tokens:
        raise MeshFileError(
            f"{path}: line {tokens[0][0]}: trailing data after "
            f"{nv + nt + nb + 1} expected records")

    areas = _signed_areas(vertices, cells)
    cw = areas < 0.0
    if cw.any():
        warnings.warn(
            f"{path}: reoriented {int(cw.sum())} clockwise cell(s)",
            stacklevel=2)
        cells[cw] = cells[cw][:, [0, 2, 1]]
    return Mesh(vertices, cells, bdata[:, :2], bdata[:, 2])


def save_mesh(mesh, path, header=""):
    """Write a mesh in the plain-text format read by :func:`load_mesh`."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        fh.write(f"{mesh.num_vertices} {mesh.num_cells} "
                 f"{len(mesh.boundary_edges)}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.cells:
            fh.write(f"{i} {j} {k}\n")
        for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{i} {j} {tag}\n")


def build_cylinder_channel_mesh(n_angular=32, n_radial=4, spacing=0.03,
                                length=2.2, height=0.41,
                                center=(0.2, 0.2), radius=0.05,
                                collar=0.15):
    """Channel with a polygonal circular hole (flow-past-a-cylinder domain).

    A structured annulus of ``n_radial`` layers connects the circle
    (``n_angular`` segments, tag ``TAG_CYLINDER``) to a square collar of
    half-width ``collar``; the rest of the channel is a tensor grid with
    SWNE diagonals, graded to match the collar node spacing.  The left edge
    is tagged ``TAG_INFLOW``, the right ``TAG_OUTFLOW``, top and bottom
    ``TAG_WALL``.

    ``n_angular`` must be a multiple of 8 so that the collar corners and the
    circle points at angles 0 and pi (front and back of the cylinder) are
    mesh vertices.
    """
    if n_angular % 8 != 0:
        raise ValueError("n_angular must be a multiple of 8")
    cx, cy = center
    if not (radius < collar and collar < min(cx, cy, height - cy)
            and collar < length - cx):
        raise ValueError("collar must fit between the circle and the channel")

    theta = 2.0 * np.pi * np.arange(n_angular) / n_angular
    ct, st = np.cos(theta), np.sin(theta)
    scale = collar / np.maximum(np.abs(ct), np.abs(st))
    ring0 = np.column_stack([cx + radius * ct, cy + radius * st])
    ringK = np.column_stack([cx + scale * ct, cy + scale * st])

    key_of = {}
    verts = []

    def add(p):
        key = (round(p[0], 12), round(p[1], 12))
        if key not in key_of:
            key_of[key] = len(verts)
            verts.append((float(p[0]), float(p[1])))
        return key_of[key]

    cells = []
    bedges = []

    def split_quad(a, b, c, d, flip):
        # CCW quad (a, b, c, d); the default diagonal a-c is mirrored to
        # b-d below the cylinder axis so that a domain symmetric about
        # y = cy gets an exactly mirror-symmetric triangulation.
        if flip:
            cells.append((a, b, d))
            cells.append((b, c, d))
        else:
            cells.append((a, b, c))
            cells.append((a, c, d))

    # Annulus between circle and collar.
    rings = []
    for k in range(n_radial + 1):
        t = k / n_radial
        rings.append([add(p) for p in (1.0 - t) * ring0 + t * ringK])
    for k in range(n_radial):
        lo, hi = rings[k], rings[k + 1]
        for j in range(n_angular):
            j1 = (j + 1) % n_angular
            mid_angle = 2.0 * np.pi * (j + 0.5) / n_angular
            # CCW quad: inner j, outer j, outer j+1, inner j+1.
            split_quad(lo[j], hi[j], hi[j1], lo[j1], np.sin(mid_angle) < 0)
    for j in range(n_angular):
        bedges.append((rings[0][j], rings[0][(j + 1) % n_angular],
                       TAG_CYLINDER))

    # Tensor grid outside the collar, graded to the collar node coordinates.
    def graded(lo, hi, inner):
        left = np.linspace(lo, inner[0],
                           max(1, round((inner[0] - lo) / spacing)) + 1)
        right = np.linspace(inner[-1], hi,
                            max(1, round((hi - inner[-1]) / spacing)) + 1)
        return np.concatenate([left[:-1], inner, right[1:]])

    xs_collar = np.unique(np.round(ringK[np.abs(ringK[:, 1] - (cy - collar))
                                         < 1e-12, 0], 12))
    ys_collar = np.unique(np.round(ringK[np.abs(ringK[:, 0] - (cx - collar))
                                         < 1e-12, 1], 12))
    XS = graded(0.0, length, xs_collar)
    YS = graded(0.0, height, ys_collar)

    inside = lambda lo, hi, a, b: (lo > a - 1e-12) and (hi < b + 1e-12)
    for i in range(len(XS) - 1):
        for j in range(len(YS) - 1):
            if inside(XS[i], XS[i + 1], cx - collar, cx + collar) and \
               inside(YS[j], YS[j + 1], cy - collar, cy + collar):
                continue  # interior of the collar is the annulus' job
            a = add((XS[i], YS[j]))
            b = add((XS[i + 1], YS[j]))
            c = add((XS[i + 1], YS[j + 1]))
            d = add((XS[i], YS[j + 1]))
            split_quad(a, b, c, d, 0.5 * (YS[j] + YS[j + 1]) < cy)
            if j == 0:
                bedges.append((a, b, TAG_WALL))
            if j == len(YS) - 2:
                bedges.append((d, c, TAG_WALL))
            if i == 0:
                bedges.append((a, d, TAG_INFLOW))
            if i == len(XS) - 2:
                bedges.append((b, c, TAG_OUTFLOW))

    bedges = np.array(bedges, dtype=np.int64)
    return Mesh(np.array(verts), np.array(cells, dtype=np.int64),
                bedges[:, :2], bedges[:, 2])
