"""
Riccati-based feedback on the unstable subspace, plus full-order solves.

Pipeline for a stabilizing feedback:

1. :func:`project_system` computes ``Au = Xi^T A E``, ``Bu = Xi^T B`` and
   ``Qu = E^T M E`` from an :class:`~coupled_stabilization.spectral.UnstableBasis`.
2. :func:`solve_projected_are` solves the small dense algebraic Riccati
   equation by the Hamiltonian Schur method (``scipy.linalg.solve_continuous_are``).
3. :func:`feedback_gain` returns ``K = (Bu^T P) (Xi^T M)`` in factored form.

:func:`newton_kleinman` is an independent solver used to cross-check the
Schur method, and :func:`solve_full_discrete_are` solves the mass-weighted
full-order equation on coarse meshes.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as la

from coupled_stabilization.assembly import (
    BlockSystem,
    assemble_block_system,
    export_matrix_market,
    l2_project_initial,
)
from coupled_stabilization.config import ModelParams, RegionSpec, ScalarField
from coupled_stabilization.exceptions import (
    DimensionError,
    NonDichotomicError,
    NotStabilizableError,
    NumericalError,
    RiccatiError,
)
from coupled_stabilization.mesh import ControlRegion, build_unit_square_mesh
from coupled_stabilization.spectral import UnstableBasis
from coupled_stabilization.tables import ConvergenceTable

LOGGER = logging.getLogger("coupled_stabilization.riccati")

COND_LIMIT = 1e12
DICHOTOMY_TOL = 1e-10
FULL_ORDER_LIMIT = 600


@dataclass(frozen=True, eq=False)
class ProjectedSystem:
    """
    Unstable-subspace system ``c' = Au c + Bu u`` with state weight ``Qu``.

    Attributes
    ----------
    Au : ndarray, shape (2 n_u, 2 n_u)
    Bu : ndarray, shape (2 n_u, n_c)
    Qu : ndarray, shape (2 n_u, 2 n_u)
        Symmetric positive definite Gram matrix ``E^T M E``.
    coordinates : ndarray, shape (2 n_u, 2 n), optional
        ``Xi^T M``, mapping a coefficient vector to its unstable coordinates.
    """

    Au: np.ndarray
    Bu: np.ndarray
    Qu: np.ndarray
    coordinates: Optional[np.ndarray] = None

    def __post_init__(self):
        k = self.Au.shape[0]
        if self.Au.shape != (k, k) or self.Qu.shape != (k, k) or self.Bu.shape[0] != k:
            raise DimensionError(
                f"inconsistent shapes Au {self.Au.shape}, Bu {self.Bu.shape}, Qu {self.Qu.shape}"
            )

    @property
    def count(self) -> int:
        return self.Au.shape[0]


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """
    Stabilizing solution of the projected Riccati equation.

    Attributes
    ----------
    P : ndarray
        Symmetric positive semidefinite solution.
    residual_norm : float
        Frobenius norm of the equation residual.
    closed_loop_eigs : List[complex]
        Spectrum of the stabilized projected matrix.
    transposed : bool
        ``True`` for the form ``Au P + P Au^T - P Bu Bu^T P + Qu = 0``.
    """

    P: np.ndarray
    residual_norm: float
    closed_loop_eigs: List[complex] = field(default_factory=list)
    transposed: bool = False


@dataclass(frozen=True, eq=False)
class FeedbackGain:
    """
    Feedback ``K = left_factor @ right_factor`` of rank at most ``2 n_u``.

    ``left_factor`` is ``Bu^T P`` (``n_c x 2 n_u``) and ``right_factor``
    is ``Xi^T M`` (``2 n_u x 2 n``).
    """

    left_factor: np.ndarray
    right_factor: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.right_factor.shape[0]

    def as_dense(self) -> np.ndarray:
        return self.left_factor @ self.right_factor

    def control(self, state: np.ndarray) -> np.ndarray:
        """``u = -K Y``."""
        return -(self.left_factor @ (self.right_factor @ state))

    @classmethod
    def zero(cls, n_controls: int, size: int) -> "FeedbackGain":
        return cls(np.zeros((n_controls, 0)), np.zeros((0, size)))


@dataclass(frozen=True, eq=False)
class FullRiccatiSolution:
    """
    Full-order mass-weighted Riccati solution ``S = M P``.

    Attributes
    ----------
    S : ndarray, shape (2 n, 2 n)
    residual_norm : float
        Residual relative to ``||M||_F``.
    gain : ndarray, shape (n, 2 n)
        ``G_O^{-1} B^T M^{-1} S`` on the control support, zero elsewhere.
    """

    S: np.ndarray
    residual_norm: float
    gain: np.ndarray


def _symmetrize(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.T)


def project_system(system: BlockSystem, basis: UnstableBasis) -> ProjectedSystem:
    """
    Galerkin projection on the unstable subspace.

    Parameters
    ----------
    system : BlockSystem
        Full system.
    basis : UnstableBasis
        Biorthonormal bases ``E`` and ``Xi`` with ``count >= 1``.

    Returns
    -------
    ProjectedSystem

    Raises
    ------
    DimensionError
        For an empty basis.
    RiccatiError
        If ``E`` or ``Xi`` is numerically rank deficient.
    """
    if basis.count == 0:
        raise DimensionError("cannot project on an empty unstable basis")
    E, Xi = basis.E, basis.Xi
    for name, mat in (("E", E), ("Xi", Xi)):
        cond = np.linalg.cond(mat)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise RiccatiError(f"basis {name} is rank deficient (condition {cond:.3e})")
    Au = Xi.T @ (system.A @ E)
    Bu = np.asarray((system.B.T @ Xi).T)
    Qu = _symmetrize(E.T @ (system.M @ E))
    coordinates = np.asarray((system.M @ Xi).T)
    LOGGER.info("projected system of size %d, eig(Au) = %s", basis.count, np.linalg.eigvals(Au))
    return ProjectedSystem(Au, Bu, Qu, coordinates)


def check_stabilizable(a: np.ndarray, b: np.ndarray, tol: float = 1e-10) -> None:
    """
    PBH test: every left eigenvector of ``a`` with ``Re >= 0`` must see ``b``.

    Raises
    ------
    NotStabilizableError
    """
    values, left = la.eig(a, left=True, right=False)
    scale = max(np.linalg.norm(b), 1.0)
    for value, w in zip(values, left.T):
        if value.real < 0:
            continue
        seen = np.linalg.norm(w.conj() @ b) / np.linalg.norm(w)
        if seen <= tol * scale:
            raise NotStabilizableError(
                f"mode {value:.6g} is not reachable by the control (|w^H B| = {seen:.3e})"
            )


def _check_dichotomy(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> None:
    hamiltonian = np.block([[a, -b @ b.T], [-q, -a.T]])
    values = np.linalg.eigvals(hamiltonian)
    closest = float(np.min(np.abs(values.real)))
    if closest <= DICHOTOMY_TOL:
        raise NonDichotomicError(
            f"Hamiltonian matrix has eigenvalues on the imaginary axis (|Re| = {closest:.3e})"
        )


def solve_projected_are(ps: ProjectedSystem, transposed: bool = False) -> RiccatiSolution:
    """
    Solve the projected algebraic Riccati equation.

    With ``transposed=False`` the equation is
    ``Au^T P + P Au - P Bu Bu^T P + Qu = 0`` and ``Au - Bu Bu^T P`` is
    stable. ``transposed=True`` solves ``Au P + P Au^T - P Bu Bu^T P + Qu = 0``
    and stabilizes ``Au^T - Bu Bu^T P``.

    Parameters
    ----------
    ps : ProjectedSystem
        Small dense system.
    transposed : bool, default=False
        Orientation of the equation.

    Returns
    -------
    RiccatiSolution

    Raises
    ------
    NotStabilizableError
        If an unstable mode cannot be reached by the control.
    NonDichotomicError
        If the Hamiltonian matrix has eigenvalues on the imaginary axis.
    RiccatiError
        If the solver fails or the solution does not stabilize.

    Examples
    --------
    >>> ps = ProjectedSystem(np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]))
    >>> float(solve_projected_are(ps).P[0, 0])
    1.0
    """
    a = ps.Au.T if transposed else ps.Au
    b, q = ps.Bu, _symmetrize(ps.Qu)
    check_stabilizable(a, b)
    _check_dichotomy(a, b, q)
    try:
        P = la.solve_continuous_are(a, b, q, np.eye(b.shape[1]))
    except (la.LinAlgError, ValueError) as exc:
        raise RiccatiError(f"Riccati solver failed: {exc}") from exc
    P = _symmetrize(P)

    residual = np.linalg.norm(a.T @ P + P @ a - P @ b @ b.T @ P + q, "fro")
    bound = 1e-8 * (np.linalg.norm(a) * np.linalg.norm(P) + np.linalg.norm(q))
    if residual > bound:
        raise RiccatiError(f"Riccati residual {residual:.3e} exceeds {bound:.3e}")
    closed = np.linalg.eigvals(a - b @ b.T @ P)
    if np.any(closed.real >= 0):
        raise RiccatiError(f"solution is not stabilizing: closed-loop eigenvalues {closed}")
    LOGGER.info("Riccati residual %.3e, closed-loop eigenvalues %s", residual, closed)
    return RiccatiSolution(P, float(residual), [complex(v) for v in closed], transposed)


def feedback_gain(
    solution: RiccatiSolution, ps: ProjectedSystem, basis: Optional[UnstableBasis] = None
) -> FeedbackGain:
    """
    Factored feedback ``K = (Bu^T P) (Xi^T M)``.

    ``ps.coordinates`` supplies ``Xi^T M``; without it ``basis.Xi^T`` is used
    (identity mass).
    """
    if ps.coordinates is not None:
        right = ps.coordinates
    elif basis is not None:
        right = basis.Xi.T
    else:
        raise DimensionError("feedback needs the projected coordinates or the basis")
    left = ps.Bu.T @ solution.P
    return FeedbackGain(left, np.asarray(right))


def newton_kleinman(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    tol: float = 1e-13,
    max_iter: int = 60,
) -> np.ndarray:
    """
    Newton-Kleinman iteration for ``a^T X + X a - X b b^T X + q = 0``.

    The initial stabilizing gain follows Bass' construction:
    ``(a + beta I) Z + Z (a + beta I)^T = 2 b b^T`` with ``beta = ||a||_F + 1``
    and ``K_0 = b^T Z^{-1}``. Each step solves the Lyapunov equation
    ``(a - b K)^T X + X (a - b K) = -(q + K^T K)`` (Bartels-Stewart).

    Raises
    ------
    RiccatiError
        If the initial gain is not stabilizing or the iteration stalls.
    """
    n = a.shape[0]
    beta = np.linalg.norm(a, "fro") + 1.0
    shifted = a + beta * np.eye(n)
    Z = _symmetrize(la.solve_continuous_lyapunov(shifted, 2.0 * b @ b.T))
    try:
        K = b.T @ la.inv(Z)
    except la.LinAlgError as exc:
        raise RiccatiError("Bass initialization failed: (a, b) is not controllable") from exc
    if np.any(np.linalg.eigvals(a - b @ K).real >= 0):
        raise RiccatiError("initial gain is not stabilizing")

    X = np.zeros_like(a)
    for it in range(1, max_iter + 1):
        closed = a - b @ K
        X_new = _symmetrize(la.solve_continuous_lyapunov(closed.T, -(q + K.T @ K)))
        change = np.linalg.norm(X_new - X, "fro")
        X, K = X_new, b.T @ X_new
        if change <= tol * max(np.linalg.norm(X, "fro"), 1.0):
            LOGGER.debug("Newton-Kleinman converged in %d iterations", it)
            return X
    raise RiccatiError(f"Newton-Kleinman did not converge in {max_iter} iterations")


def solve_weighted_are(
    A: np.ndarray, M: np.ndarray, B: np.ndarray, R: np.ndarray
) -> FullRiccatiSolution:
    """
    Solve ``A^T M^-1 S + S M^-1 A - S M^-1 B R^-1 B^T M^-1 S + M = 0``.

    With ``M = L L^T`` and ``S = L S~ L^T`` this is the standard equation
    ``A~^T S~ + S~ A~ - S~ B~ R^-1 B~^T S~ + I = 0`` where
    ``A~ = L^-1 A L^-T`` and ``B~ = L^-1 B``.

    Parameters
    ----------
    A, M : ndarray, shape (N, N)
        Dense operator and symmetric positive definite mass.
    B : ndarray, shape (N, m)
        Control injection.
    R : ndarray, shape (m, m)
        Symmetric positive definite control Gram matrix.

    Returns
    -------
    FullRiccatiSolution
        ``gain`` is ``R^-1 B^T M^-1 S`` (``m x N``).
    """
    try:
        L = la.cholesky(M, lower=True)
    except la.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization of the mass matrix failed: {exc}") from exc
    size = A.shape[0]
    A_t = la.solve_triangular(L, la.solve_triangular(L, A.T, lower=True).T, lower=True)
    B_t = la.solve_triangular(L, B, lower=True)
    _check_dichotomy(A_t, B_t @ la.cholesky(la.inv(R), lower=True), np.eye(size))
    try:
        S_t = la.solve_continuous_are(A_t, B_t, np.eye(size), R)
    except (la.LinAlgError, ValueError) as exc:
        raise RiccatiError(f"full-order Riccati solver failed: {exc}") from exc
    S = _symmetrize(L @ S_t @ L.T)

    MinvS = la.cho_solve((L, True), S)
    MinvB = la.cho_solve((L, True), B)
    residual = A.T @ MinvS + MinvS.T @ A - MinvS.T @ B @ la.solve(R, MinvB.T @ S) + M
    rel = float(np.linalg.norm(residual, "fro") / np.linalg.norm(M, "fro"))
    gain = la.solve(R, MinvB.T @ S)
    return FullRiccatiSolution(S, rel, gain)


def solve_full_discrete_are(system: BlockSystem) -> FullRiccatiSolution:
    """
    Full-order Riccati equation in the L2 inner product of the discrete space.

    The control space is ``L2(O)``: ``B`` and ``G_O`` are restricted to the
    nodes where ``G_O`` has a nonzero diagonal. Meshes with ``2 n > 600``
    are rejected.

    Raises
    ------
    DimensionError
        Above the size cap.
    NumericalError
        If the mass matrix is not positive definite.
    """
    if system.size > FULL_ORDER_LIMIT:
        raise DimensionError(
            f"full-order Riccati limited to 2n <= {FULL_ORDER_LIMIT}, got {system.size}"
        )
    support = np.flatnonzero(system.G_O.diagonal() > 0)
    R = system.G_O[support][:, support].toarray()
    B = system.B[:, support].toarray()
    solution = solve_weighted_are(system.A.toarray(), system.M.toarray(), B, R)
    gain = np.zeros((system.n, system.size))
    gain[support] = solution.gain
    LOGGER.info("full-order Riccati of size %d, relative residual %.3e", system.size, solution.residual_norm)
    return FullRiccatiSolution(solution.S, solution.residual_norm, gain)


def riccati_cost_study(
    levels: Sequence[int],
    params: ModelParams,
    region: RegionSpec,
    y0: ScalarField,
    z0: ScalarField,
) -> ConvergenceTable:
    """
    Optimal costs ``Y0^T S_h Y0`` of the full-order solutions per level.

    ``cost_difference`` is ``|J_h - J_2h|`` (blank on the first row) with its
    observed order.
    """
    table = ConvergenceTable()
    previous = None
    for level in levels:
        mesh = build_unit_square_mesh(level)
        system = assemble_block_system(mesh, params, ControlRegion.from_spec(mesh, region))
        Y0 = l2_project_initial(mesh, y0, z0)
        solution = solve_full_discrete_are(system)
        cost = float(Y0 @ solution.S @ Y0)
        LOGGER.info("level %d: optimal cost %.8g", level, cost)
        errors = {} if previous is None else {"cost_difference": abs(cost - previous)}
        table.add_row(mesh.h, errors, {"cost": cost, "residual": solution.residual_norm})
        previous = cost
    return table.compute_orders()


def dump_projected(directory, ps: ProjectedSystem, solution: RiccatiSolution, level: int) -> None:
    """MatrixMarket dump of ``Au, Bu, Qu, P`` with a level suffix."""
    export_matrix_market(
        directory,
        {
            f"Au_L{level}": ps.Au,
            f"Bu_L{level}": ps.Bu,
            f"Qu_L{level}": ps.Qu,
            f"P_L{level}": solution.P,
        },
    )
