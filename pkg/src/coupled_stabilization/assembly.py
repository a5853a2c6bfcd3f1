"""
P1 finite element assembly for the coupled parabolic system.

Element matrices are computed for all triangles at once and scattered into
:mod:`scipy.sparse` matrices; boundary vertices are then removed so that the
unknowns are the interior nodal values (homogeneous Dirichlet condition).

The semi-discrete system reads ``M Y' = A Y + B u`` with

.. code-block:: text

    M = [[G, 0], [0, G]]
    A = [[-eta0 K + (omega - nu0) G,  -eta1 G],
         [G,  -beta0 K + (-kappa + omega - nu0) G]]
    B = [[G_O], [0]]

and ``Y = (y_1 .. y_n, z_1 .. z_n)``.

Example
-------
>>> from coupled_stabilization.config import ModelParams
>>> from coupled_stabilization.mesh import ControlRegion, build_unit_square_mesh
>>> mesh = build_unit_square_mesh(1)
>>> system = assemble_block_system(mesh, ModelParams.example(), ControlRegion.full(mesh))
>>> system.A.toarray()
array([[-0.875, -0.625],
       [ 0.125, -0.2  ]])
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from coupled_stabilization.config import ModelParams, ScalarField
from coupled_stabilization.exceptions import MeshError, NumericalError
from coupled_stabilization.mesh import ControlRegion, Mesh

LOGGER = logging.getLogger("coupled_stabilization.assembly")

_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0

# six-point rule, exact for degree 4: barycentric (a, a, 1 - 2a) and weights
_DUNAVANT4 = (
    (0.445948490915965, 0.223381589678011),
    (0.091576213509771, 0.109951743655322),
)


def _gradients(mesh: Mesh, elements: np.ndarray):
    """Areas and barycentric-coordinate gradients, shapes (ne,) and (ne, 3, 2)."""
    p = mesh.vertices[mesh.triangles[elements]]
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * (
        (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
        - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    )
    dx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]])
    dy = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]])
    grads = np.stack([dx, dy], axis=-1) / (2.0 * area)[:, None, None]
    return area, grads


def _scatter(mesh: Mesh, elements: np.ndarray, local: np.ndarray, reduced: bool):
    """Sum element matrices ``local`` (ne, 3, 3) into a CSR matrix."""
    tri = mesh.triangles[elements]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    nv = mesh.n_vertices
    full = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    if reduced:
        interior = mesh.interior_nodes
        full = full[interior][:, interior].tocsr()
    full.sort_indices()
    return full


def element_mass(mesh: Mesh, elements: Optional[np.ndarray] = None) -> np.ndarray:
    """Element mass matrices ``area / 12 * [[2,1,1],[1,2,1],[1,1,2]]``."""
    if elements is None:
        elements = np.arange(mesh.n_triangles)
    area, _ = _gradients(mesh, elements)
    return area[:, None, None] * _LOCAL_MASS


def element_stiffness(mesh: Mesh, elements: Optional[np.ndarray] = None) -> np.ndarray:
    """Element stiffness matrices ``area * grad(phi_i) . grad(phi_j)``."""
    if elements is None:
        elements = np.arange(mesh.n_triangles)
    area, grads = _gradients(mesh, elements)
    return area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)


def assemble_mass(mesh: Mesh, reduced: bool = True) -> sp.csr_matrix:
    """
    Scalar P1 mass matrix ``G_ij = <phi_i, phi_j>``.

    Parameters
    ----------
    mesh : Mesh
        Triangulation.
    reduced : bool, default=True
        Restrict to interior nodes. ``False`` keeps every vertex (the entries
        then sum to the domain area).

    Returns
    -------
    scipy.sparse.csr_matrix
        Symmetric positive definite matrix with sorted column indices.
    """
    elements = np.arange(mesh.n_triangles)
    return _scatter(mesh, elements, element_mass(mesh, elements), reduced)


def assemble_stiffness(mesh: Mesh, reduced: bool = True) -> sp.csr_matrix:
    """Scalar P1 stiffness matrix ``K_ij = <grad phi_i, grad phi_j>``."""
    elements = np.arange(mesh.n_triangles)
    return _scatter(mesh, elements, element_stiffness(mesh, elements), reduced)


def assemble_control_mass(mesh: Mesh, region: ControlRegion) -> sp.csr_matrix:
    """
    Mass matrix restricted to the control region, ``<chi_O phi_j, phi_i>``.

    Returns exactly :func:`assemble_mass` when the region is the whole domain.

    Raises
    ------
    MeshError
        If the region is empty or does not fit the mesh.
    """
    region.validate(mesh)
    if region.is_full_domain:
        return assemble_mass(mesh)
    elements = region.element_ids
    return _scatter(mesh, elements, element_mass(mesh, elements), reduced=True)


@dataclass(frozen=True, eq=False)
class BlockSystem:
    """
    Sparse matrices of ``M Y' = A Y + B u``.

    Attributes
    ----------
    n : int
        Number of interior nodes; the state has ``2 n`` entries.
    M : scipy.sparse.csr_matrix
        Block mass ``diag(G, G)``.
    A : scipy.sparse.csr_matrix
        Shifted coupled operator.
    B : scipy.sparse.csr_matrix
        Control injection ``[G_O; 0]`` of shape ``(2 n, n)``.
    G, K, G_O : scipy.sparse.csr_matrix
        Scalar mass, stiffness and control-region mass.
    params : ModelParams
        Coefficients used for ``A``.
    """

    n: int
    M: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix
    G: sp.csr_matrix
    K: sp.csr_matrix
    G_O: sp.csr_matrix
    params: ModelParams

    @property
    def size(self) -> int:
        return 2 * self.n

    def split(self, state: np.ndarray):
        """View a state vector as its ``(y, z)`` halves."""
        return state[: self.n], state[self.n :]


def assemble_block_system(
    mesh: Mesh, params: ModelParams, region: ControlRegion
) -> BlockSystem:
    """
    Assemble the coupled semi-discrete system on ``mesh``.

    Parameters
    ----------
    mesh : Mesh
        Triangulation with at least one interior node.
    params : ModelParams
        Model coefficients including the shift ``omega``.
    region : ControlRegion
        Support of the distributed control.

    Returns
    -------
    BlockSystem
        Matrices with the y-unknowns first and the z-unknowns second.
    """
    if mesh.n_interior == 0:
        raise MeshError("mesh has no interior node")
    G = assemble_mass(mesh)
    K = assemble_stiffness(mesh)
    G_O = assemble_control_mass(mesh, region)
    p = params
    A = sp.bmat(
        [
            [-p.eta0 * K + (p.omega - p.nu0) * G, -p.eta1 * G],
            [G, -p.beta0 * K + (-p.kappa + p.omega - p.nu0) * G],
        ],
        format="csr",
    )
    M = sp.block_diag([G, G], format="csr")
    B = sp.vstack([G_O, sp.csr_matrix(G_O.shape)], format="csr")
    for mat in (A, M, B):
        mat.sort_indices()
    LOGGER.debug("assembled block system with n=%d on h=%g", mesh.n_interior, mesh.h)
    return BlockSystem(mesh.n_interior, M, A, B, G, K, G_O, params)


def _edge_midpoint_load(mesh: Mesh, f: ScalarField) -> np.ndarray:
    """Moments ``<f, phi_i>`` over all vertices by the edge-midpoint rule."""
    p = mesh.vertices[mesh.triangles]
    mids = 0.5 * (p + np.roll(p, -1, axis=1))  # midpoints of (0,1), (1,2), (2,0)
    values = np.asarray(f(mids[..., 0], mids[..., 1]), dtype=float)
    values = np.broadcast_to(values, mids.shape[:2])
    # vertex k touches the midpoints of edges k and k-1 with value 1/2
    local = 0.5 * (values + np.roll(values, 1, axis=1))
    local *= (mesh.areas / 3.0)[:, None]
    return np.bincount(
        mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices
    )


def load_vector(mesh: Mesh, f: ScalarField) -> np.ndarray:
    """Interior moments ``<f, phi_i>`` (degree-2 exact quadrature)."""
    return _edge_midpoint_load(mesh, f)[mesh.interior_nodes]


def l2_project_initial(mesh: Mesh, y0: ScalarField, z0: ScalarField) -> np.ndarray:
    """
    L2 projection of initial data onto the discrete space.

    Parameters
    ----------
    mesh : Mesh
        Triangulation.
    y0, z0 : callable
        Vectorized functions ``f(x1, x2)``.

    Returns
    -------
    ndarray, shape (2 n,)
        Coefficients ``c`` with ``M c = (<y0, phi_i>; <z0, phi_i>)``.

    Raises
    ------
    NumericalError
        If the mass matrix cannot be factorized.
    """
    G = assemble_mass(mesh)
    try:
        lu = splu(G.tocsc())
    except RuntimeError as exc:
        raise NumericalError(f"mass matrix factorization failed: {exc}") from exc
    y = lu.solve(load_vector(mesh, y0))
    z = lu.solve(load_vector(mesh, z0))
    return np.concatenate([y, z])


def interior_to_vertices(mesh: Mesh, coeffs: np.ndarray) -> np.ndarray:
    """Extend interior coefficients by zero to all vertices."""
    full = np.zeros(mesh.n_vertices)
    full[mesh.interior_nodes] = coeffs
    return full


def l2_error(mesh: Mesh, coeffs: np.ndarray, f: ScalarField) -> float:
    """
    L2 distance between the P1 field ``coeffs`` and the function ``f``.

    Uses a six-point rule exact for polynomials of degree 4 on every triangle.
    """
    nodal = interior_to_vertices(mesh, coeffs)[mesh.triangles]
    p = mesh.vertices[mesh.triangles]
    total = np.zeros(mesh.n_triangles)
    for a, weight in _DUNAVANT4:
        b = 1.0 - 2.0 * a
        for bary in ((a, a, b), (a, b, a), (b, a, a)):
            lam = np.asarray(bary)
            x = np.einsum("k,eki->ei", lam, p)
            uh = nodal @ lam
            diff = uh - np.asarray(f(x[:, 0], x[:, 1]), dtype=float)
            total += weight * diff**2
    return float(np.sqrt(np.sum(total * mesh.areas)))


def export_matrix_market(directory, matrices: Dict[str, object]) -> None:
    """Write each matrix to ``<directory>/<name>.mtx``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, matrix in matrices.items():
        target = directory / f"{name}.mtx"
        scipy.io.mmwrite(str(target), matrix, precision=17)
        LOGGER.info("wrote %s", target)
