"""
Triangular meshes of the unit square and nested-mesh transfer.

This module defines :class:`Mesh`, an immutable P1 triangulation with
boundary classification, and :class:`ControlRegion`, the element set on which
the distributed control acts. Built-in meshes are uniform grids split along
the lower-left to upper-right diagonal; :func:`refine_uniform` produces the
nested sequence used by the convergence studies and :func:`prolongation`
interpolates coarse P1 fields onto the refined mesh.

Example
-------
>>> from coupled_stabilization.mesh import build_unit_square_mesh, refine_uniform
>>> mesh = build_unit_square_mesh(2)
>>> mesh.n_interior
9
>>> refine_uniform(mesh).triangles.shape[0]
128
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from coupled_stabilization.config import RegionSpec
from coupled_stabilization.exceptions import MeshError

LOGGER = logging.getLogger("coupled_stabilization.mesh")

BOUNDARY_TOL = 1e-12
NESTING_TOL = 1e-14


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _unique_edges(triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Deduplicate the edges of a triangulation.

    Returns
    -------
    edges : ndarray, shape (ne, 2)
        Sorted vertex pairs, lexicographically ordered.
    tri_edges : ndarray, shape (nt, 3)
        Edge id of the edges ``(v0, v1)``, ``(v1, v2)``, ``(v2, v0)``.
    counts : ndarray, shape (ne,)
        Number of triangles sharing each edge (1 on the boundary).
    """
    local = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    local = np.sort(local, axis=1)
    edges, inverse, counts = np.unique(
        local, axis=0, return_inverse=True, return_counts=True
    )
    return edges, inverse.reshape(-1, 3), counts


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Immutable P1 triangulation.

    Attributes
    ----------
    vertices : ndarray, shape (nv, 2)
        Vertex coordinates.
    triangles : ndarray, shape (nt, 3)
        Counter-clockwise vertex indices of each triangle.
    boundary : ndarray of bool, shape (nv,)
        ``True`` for vertices on the domain boundary (Dirichlet nodes).
    h : float
        Mesh size. Grid spacing ``2**-level`` for built-in meshes, maximum
        triangle diameter for meshes read from file.
    level : int or None
        Refinement level of built-in meshes, ``None`` otherwise.

    Notes
    -----
    Arrays are made read-only on construction. Unknowns of the discrete
    problems are the interior vertices in increasing index order, see
    :attr:`interior_nodes`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    h: float
    level: Optional[int] = None
    interior_nodes: np.ndarray = field(init=False, repr=False)
    dof_map: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        boundary = np.ascontiguousarray(self.boundary, dtype=bool)
        interior = np.flatnonzero(~boundary)
        dof_map = np.full(vertices.shape[0], -1, dtype=np.int64)
        dof_map[interior] = np.arange(interior.size)
        for name, arr in (
            ("vertices", vertices),
            ("triangles", triangles),
            ("boundary", boundary),
            ("interior_nodes", interior),
            ("dof_map", dof_map),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def n_interior(self) -> int:
        return int(self.interior_nodes.size)

    @property
    def areas(self) -> np.ndarray:
        """Signed triangle areas (all positive for a valid mesh)."""
        return _signed_areas(self.vertices, self.triangles)

    @property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


def build_unit_square_mesh(level: int) -> Mesh:
    """
    Uniform triangulation of the unit square.

    Parameters
    ----------
    level : int
        Refinement level (>= 1). The grid has ``2**level`` cells per side.

    Returns
    -------
    Mesh
        ``(2**level + 1)**2`` vertices, ``2 * 4**level`` triangles and
        ``(2**level - 1)**2`` interior nodes, ``h = 2**-level``.

    Raises
    ------
    MeshError
        If ``level < 1`` (no interior node).

    Examples
    --------
    >>> build_unit_square_mesh(1).n_interior
    1
    """
    if int(level) != level or level < 1:
        raise MeshError(f"level must be an integer >= 1, got {level!r}")
    level = int(level)
    cells = 2**level
    coords = np.linspace(0.0, 1.0, cells + 1)
    xx, yy = np.meshgrid(coords, coords)  # row j holds y = coords[j]
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(cells), np.arange(cells))
    v00 = (j * (cells + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + cells + 1
    v11 = v01 + 1
    # lower-left to upper-right diagonal, both halves counter-clockwise
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    on_edge = (
        (np.abs(vertices) <= BOUNDARY_TOL) | (np.abs(vertices - 1.0) <= BOUNDARY_TOL)
    ).any(axis=1)
    mesh = Mesh(vertices, triangles, on_edge, h=2.0**-level, level=level)
    LOGGER.debug(
        "unit square level %d: %d vertices, %d triangles, %d interior",
        level,
        mesh.n_vertices,
        mesh.n_triangles,
        mesh.n_interior,
    )
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """
    Red refinement: split every triangle into four through edge midpoints.

    The coarse vertices keep their indices and coordinates; midpoint vertices
    are appended in the edge order of :func:`_unique_edges`. A midpoint is a
    boundary vertex exactly when its edge belongs to a single triangle.

    Parameters
    ----------
    mesh : Mesh
        Mesh to refine.

    Returns
    -------
    Mesh
        Refined mesh with half the mesh size and ``level + 1``.
    """
    edges, tri_edges, counts = _unique_edges(mesh.triangles)
    nv = mesh.n_vertices
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    boundary = np.concatenate([mesh.boundary, counts == 1])

    a, b, c = mesh.triangles.T
    m_ab = nv + tri_edges[:, 0]
    m_bc = nv + tri_edges[:, 1]
    m_ca = nv + tri_edges[:, 2]
    children = np.stack(
        [
            np.column_stack([a, m_ab, m_ca]),
            np.column_stack([m_ab, b, m_bc]),
            np.column_stack([m_ca, m_bc, c]),
            np.column_stack([m_ab, m_bc, m_ca]),
        ],
        axis=1,
    ).reshape(-1, 3)

    level = None if mesh.level is None else mesh.level + 1
    return Mesh(vertices, children, boundary, h=0.5 * mesh.h, level=level)


def prolongation(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """
    P1 interpolation from a coarse mesh to its uniform refinement.

    Parameters
    ----------
    coarse : Mesh
        Coarse mesh.
    fine : Mesh
        ``refine_uniform(coarse)``.

    Returns
    -------
    scipy.sparse.csr_matrix, shape (fine.n_interior, coarse.n_interior)
        Maps interior nodal coefficients. Coincident nodes get weight 1,
        midpoints 1/2 from each interior parent (boundary parents carry the
        homogeneous Dirichlet value 0 and drop out).

    Raises
    ------
    MeshError
        If ``fine`` is not the uniform refinement of ``coarse``.
    """
    nv_c = coarse.n_vertices
    edges, _, _ = _unique_edges(coarse.triangles)
    if (
        fine.n_triangles != 4 * coarse.n_triangles
        or fine.n_vertices != nv_c + edges.shape[0]
    ):
        raise MeshError("meshes are not nested: sizes do not match a refinement")
    if not np.allclose(fine.vertices[:nv_c], coarse.vertices, rtol=0, atol=NESTING_TOL):
        raise MeshError("meshes are not nested: coarse vertices moved")
    midpoints = 0.5 * (coarse.vertices[edges[:, 0]] + coarse.vertices[edges[:, 1]])
    if not np.allclose(fine.vertices[nv_c:], midpoints, rtol=0, atol=NESTING_TOL):
        raise MeshError("meshes are not nested: midpoints do not match")

    ne = edges.shape[0]
    rows = np.concatenate([np.arange(nv_c), nv_c + np.arange(ne), nv_c + np.arange(ne)])
    cols = np.concatenate([np.arange(nv_c), edges[:, 0], edges[:, 1]])
    vals = np.concatenate([np.ones(nv_c), np.full(2 * ne, 0.5)])
    full = sp.csr_matrix((vals, (rows, cols)), shape=(fine.n_vertices, nv_c))
    reduced = full[fine.interior_nodes][:, coarse.interior_nodes].tocsr()
    reduced.sort_indices()
    return reduced


def load_mesh(path) -> Mesh:
    """
    Read a mesh from the node/element text format.

    The file holds a header ``nv nt``, then ``nv`` lines ``x y flag`` with
    ``flag`` 1 for boundary vertices, then ``nt`` lines ``i j k`` of 0-based
    vertex indices. Clockwise triangles are reoriented.

    Parameters
    ----------
    path : str or Path
        File to read.

    Returns
    -------
    Mesh
        Mesh with ``h`` equal to the largest edge length and ``level=None``.

    Raises
    ------
    MeshError
        On malformed content, out-of-range or unused vertex indices,
        degenerate or repeated triangles.
    """
    path = Path(path)
    try:
        tokens = path.read_text().split()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    try:
        nv, nt = int(tokens[0]), int(tokens[1])
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: header must be 'nv nt'") from exc
    expected = 2 + 3 * nv + 3 * nt
    if nv < 3 or nt < 1 or len(tokens) != expected:
        raise MeshError(
            f"{path}: expected {expected} tokens for {nv} vertices and "
            f"{nt} triangles, found {len(tokens)}"
        )
    try:
        node_block = np.array(tokens[2 : 2 + 3 * nv], dtype=float).reshape(nv, 3)
        tri_block = np.array(tokens[2 + 3 * nv :], dtype=np.int64).reshape(nt, 3)
    except ValueError as exc:
        raise MeshError(f"{path}: non-numeric entry ({exc})") from exc

    flags = node_block[:, 2]
    if not np.isin(flags, (0.0, 1.0)).all():
        raise MeshError(f"{path}: boundary flags must be 0 or 1")
    if tri_block.min() < 0 or tri_block.max() >= nv:
        raise MeshError(f"{path}: triangle references a vertex outside 0..{nv - 1}")
    if np.setdiff1d(np.arange(nv), tri_block).size:
        raise MeshError(f"{path}: vertices not used by any triangle")
    if np.unique(np.sort(tri_block, axis=1), axis=0).shape[0] != nt:
        raise MeshError(f"{path}: repeated triangle")

    vertices = node_block[:, :2]
    areas = _signed_areas(vertices, tri_block)
    if np.any(np.abs(areas) <= BOUNDARY_TOL):
        raise MeshError(f"{path}: degenerate triangle with zero area")
    clockwise = areas < 0
    if clockwise.any():
        LOGGER.info("%s: reoriented %d clockwise triangles", path, clockwise.sum())
        tri_block[clockwise] = tri_block[clockwise][:, [0, 2, 1]]

    edges, _, _ = _unique_edges(tri_block)
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    return Mesh(vertices, tri_block, flags.astype(bool), h=float(lengths.max()))


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` in the format read by :func:`load_mesh`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [
        f"{x!r} {y!r} {int(flag)}"
        for (x, y), flag in zip(mesh.vertices.tolist(), mesh.boundary)
    ]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class ControlRegion:
    """
    Element-aligned control set.

    Attributes
    ----------
    element_ids : ndarray of int
        Sorted indices of the triangles forming the region.
    is_full_domain : bool
        ``True`` when the region is the whole mesh.
    """

    element_ids: np.ndarray
    is_full_domain: bool = False

    def __post_init__(self) -> None:
        ids = np.unique(np.asarray(self.element_ids, dtype=np.int64))
        if ids.size == 0:
            raise MeshError("control region is empty")
        ids.setflags(write=False)
        object.__setattr__(self, "element_ids", ids)

    def validate(self, mesh: Mesh) -> None:
        """Check the ids against ``mesh``."""
        if self.element_ids[0] < 0 or self.element_ids[-1] >= mesh.n_triangles:
            raise MeshError("control region references triangles outside the mesh")
        if self.is_full_domain and self.element_ids.size != mesh.n_triangles:
            raise MeshError("full-domain region does not cover every triangle")

    @classmethod
    def full(cls, mesh: Mesh) -> "ControlRegion":
        return cls(np.arange(mesh.n_triangles), is_full_domain=True)

    @classmethod
    def from_rectangle(
        cls, mesh: Mesh, x0: float, x1: float, y0: float, y1: float
    ) -> "ControlRegion":
        """Triangles whose barycenter lies in ``[x0, x1] x [y0, y1]``."""
        bc = mesh.barycenters
        inside = (bc[:, 0] >= x0) & (bc[:, 0] <= x1) & (bc[:, 1] >= y0) & (bc[:, 1] <= y1)
        ids = np.flatnonzero(inside)
        if ids.size == 0:
            raise MeshError(f"rectangle {(x0, x1, y0, y1)} contains no triangle")
        return cls(ids, is_full_domain=ids.size == mesh.n_triangles)

    @classmethod
    def from_spec(cls, mesh: Mesh, spec: RegionSpec) -> "ControlRegion":
        if spec.kind == "full":
            return cls.full(mesh)
        return cls.from_rectangle(mesh, *spec.bounds)
