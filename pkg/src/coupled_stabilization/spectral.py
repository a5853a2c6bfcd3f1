"""
Spectra of the coupled operator and of its finite element pencil.

Exact eigenvalues follow from the eigenvalues ``lambda_{m,n} = (m^2 + n^2) pi^2``
of the Dirichlet Laplacian: each ``lambda`` yields the pair

.. code-block:: text

    Lambda^± = -((eta0 + beta0) lambda + kappa + 2 nu0) / 2
               ± sqrt(((beta0 - eta0) lambda + kappa)^2 - 4 eta1) / 2

shifted by ``omega``. Discrete eigenpairs are those of the pencil
``A v = Lambda M v`` (right) and ``A^T xi = Lambda M xi`` (left), computed
densely (QZ) for small systems and by shift-invert Arnoldi otherwise.

Example
-------
>>> from coupled_stabilization.config import ModelParams
>>> plus, minus = exact_coupled_eigs(ModelParams.example(), exact_laplacian_eig(1, 1))
>>> round(plus.real, 5), round(plus.imag, 5)
(6.73471, 1.68153)
"""

import cmath
import logging
import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigs

from coupled_stabilization.assembly import BlockSystem, assemble_block_system
from coupled_stabilization.config import ModelParams
from coupled_stabilization.exceptions import EigenSolverError, IncompletePairError
from coupled_stabilization.mesh import ControlRegion, build_unit_square_mesh
from coupled_stabilization.tables import ConvergenceTable
from coupled_stabilization.timestepper import ClosedLoopOperator, ShiftedSolver

LOGGER = logging.getLogger("coupled_stabilization.spectral")

DENSE_LIMIT = 600
RESIDUAL_WARN = 1e-10
RESIDUAL_FAIL = 1e-8
PAIR_TOL = 1e-6

EigTarget = Tuple[int, int, str]


@dataclass(frozen=True, eq=False)
class EigenPair:
    """
    Eigenvalue of the pencil ``(A, M)`` with right and left eigenvectors.

    Attributes
    ----------
    value : complex
        Eigenvalue ``Lambda``.
    right_vector : ndarray of complex, shape (2 n,)
        ``A v = Lambda M v``, normalized to ``v^H M v = 1`` with its largest
        entry real and positive.
    left_vector : ndarray of complex, shape (2 n,)
        ``A^T xi = Lambda M xi``, scaled so that ``xi^T M v = 1``.
    residual : float
        Largest relative residual of the two vectors.
    """

    value: complex
    right_vector: np.ndarray
    left_vector: np.ndarray
    residual: float


@dataclass(frozen=True, eq=False)
class UnstableBasis:
    """
    Real bases of the unstable right and left eigenspaces.

    Attributes
    ----------
    E : ndarray, shape (2 n, count)
        Right basis; a complex pair contributes ``(Re v, Im v)``, a real
        eigenvalue its eigenvector.
    Xi : ndarray, shape (2 n, count)
        Left basis in the same column layout, scaled so that
        ``Xi^T M E = I``.
    count : int
        Number of unstable eigenvalues (columns).
    eigenvalues : List[complex]
        Unstable eigenvalues, conjugates included.
    widths : List[int]
        Columns per mode (2 for a complex pair, 1 for a real eigenvalue).
    """

    E: np.ndarray
    Xi: np.ndarray
    count: int
    eigenvalues: List[complex] = field(default_factory=list)
    widths: List[int] = field(default_factory=list)

    def left_modes(self) -> List[np.ndarray]:
        """Complex left eigenvectors (one per mode) rebuilt from ``Xi``."""
        modes, col = [], 0
        for width in self.widths:
            if width == 2:
                modes.append(self.Xi[:, col] - 1j * self.Xi[:, col + 1])
            else:
                modes.append(self.Xi[:, col].astype(complex))
            col += width
        return modes


@dataclass(frozen=True)
class HautusReport:
    """Outcome of :func:`hautus_check`; ``ratios`` has one entry per mode."""

    stabilizable: bool
    ratios: Tuple[float, ...]
    eigenvalues: Tuple[complex, ...]

    def __bool__(self) -> bool:
        return self.stabilizable


def exact_laplacian_eig(m: int, n: int) -> float:
    """Dirichlet Laplacian eigenvalue ``(m^2 + n^2) pi^2`` on the unit square."""
    if m < 1 or n < 1:
        raise ValueError(f"mode numbers must be >= 1, got ({m}, {n})")
    return (m * m + n * n) * math.pi**2


def exact_coupled_eigs(params: ModelParams, lam: float) -> Tuple[complex, complex]:
    """
    Eigenvalues of the shifted coupled operator attached to ``lam``.

    Parameters
    ----------
    params : ModelParams
        Model coefficients (the shift ``omega`` is added).
    lam : float
        Positive Laplacian eigenvalue.

    Returns
    -------
    (complex, complex)
        ``(Lambda^+ + omega, Lambda^- + omega)``; complex conjugates when the
        discriminant is negative, ``Lambda^+`` carrying the non-negative
        imaginary part.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    p = params
    center = -0.5 * ((p.eta0 + p.beta0) * lam + p.kappa + 2.0 * p.nu0)
    disc = ((p.beta0 - p.eta0) * lam + p.kappa) ** 2 - 4.0 * p.eta1
    root = 0.5 * cmath.sqrt(disc)
    return complex(center + p.omega + root), complex(center + p.omega - root)


def exact_target(params: ModelParams, target: EigTarget) -> complex:
    """Exact eigenvalue for a target ``(m, n, '+' | '-')``."""
    m, n, sign = target
    plus, minus = exact_coupled_eigs(params, exact_laplacian_eig(m, n))
    return plus if sign == "+" else minus


def spectral_abscissa_bound(system: BlockSystem) -> float:
    """
    Upper bound of ``Re Lambda`` over the pencil, from the symmetric part of ``A``.

    ``K`` is positive definite, so ``x^T A x <= (omega - nu0 + |1 - eta1| / 2) x^T M x``.
    """
    p = system.params
    return p.omega - p.nu0 + 0.5 * abs(1.0 - p.eta1)


def _normalize_right(v: np.ndarray, M) -> np.ndarray:
    v = v / np.sqrt(abs(np.vdot(v, M @ v)))
    idx = int(np.argmax(np.round(np.abs(v), 12)))
    return v * (np.conj(v[idx]) / abs(v[idx]))


def _relative_residual(A, M, vec: np.ndarray, value: complex) -> float:
    av = A @ vec
    scale = np.linalg.norm(av) or np.linalg.norm(M @ vec) or 1.0
    return float(np.linalg.norm(av - value * (M @ vec)) / scale)


def _order(values: np.ndarray, which: str, target: Optional[float]) -> np.ndarray:
    if which == "nearest":
        return np.argsort(np.abs(values - target), kind="stable")
    # conjugate pairs share the rounded real part; positive imaginary first
    return np.lexsort((-values.imag, -np.round(values.real, 10)))


def _pencil_eigs(
    A,
    M,
    count: int,
    which: str,
    target: Optional[float],
    sigma: float,
    opinv: Optional[LinearOperator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Selected eigenvalues and right eigenvectors of ``(A, M)``."""
    size = M.shape[0]
    if size <= DENSE_LIMIT:
        A_dense = A.toarray() if sp.issparse(A) else np.asarray(A)
        values, vectors = la.eig(A_dense, M.toarray())
    else:
        k = min(size - 2, max(2 * count, count + 10))
        v0 = np.full(size, 1.0 / math.sqrt(size))
        try:
            values, vectors = eigs(
                A, k=k, M=M, sigma=sigma, which="LM", v0=v0, OPinv=opinv
            )
        except ArpackNoConvergence as exc:
            residual = max(
                (
                    _relative_residual(A, M, exc.eigenvectors[:, i], val)
                    for i, val in enumerate(exc.eigenvalues)
                ),
                default=float("nan"),
            )
            raise EigenSolverError(
                f"shift-invert Arnoldi did not converge ({len(exc.eigenvalues)} "
                f"of {k} eigenvalues, residual {residual:.3e})",
                residual=residual,
            ) from exc
    keep = _order(values, which, target)[:count]
    return values[keep], vectors[:, keep]


def _match_left(values: np.ndarray, left_values: np.ndarray) -> List[int]:
    """Greedy proximity matching of right to left eigenvalues."""
    used: set = set()
    matches = []
    for value in values:
        dist = np.abs(left_values - value)
        # prefer same sign of imaginary part on ties with the conjugate
        dist = dist + 1e-12 * (np.sign(left_values.imag) != np.sign(value.imag))
        for j in np.argsort(dist, kind="stable"):
            if int(j) not in used:
                break
        j = int(j)
        if dist[j] > PAIR_TOL * max(1.0, abs(value)):
            raise EigenSolverError(
                f"no left eigenvalue matches {value:.6g} (closest {left_values[j]:.6g})"
            )
        used.add(j)
        matches.append(j)
    return matches


def discrete_eigs(
    system: BlockSystem,
    count: int,
    which: Literal["largest-real", "nearest"] = "largest-real",
    target: Optional[float] = None,
) -> List[EigenPair]:
    """
    Eigenpairs of the pencil ``(A, M)`` with left vectors from ``(A^T, M)``.

    Parameters
    ----------
    system : BlockSystem
        Assembled system.
    count : int
        Number of eigenpairs, ``1 <= count <= 2 n``.
    which : {"largest-real", "nearest"}
        Rightmost eigenvalues, or those nearest to the real ``target``.
    target : float, optional
        Shift for ``which="nearest"``.

    Returns
    -------
    List[EigenPair]
        Sorted by descending real part (positive imaginary part first within
        a conjugate pair).

    Raises
    ------
    EigenSolverError
        On non-convergence or relative residuals above ``1e-8``.
    """
    size = system.size
    if not 1 <= count <= size:
        raise ValueError(f"count must lie in 1..{size}, got {count}")
    if which == "nearest":
        if target is None:
            raise ValueError("which='nearest' needs a target")
        sigma = float(target)
    else:
        sigma = spectral_abscissa_bound(system) + 1.0

    A, M = system.A, system.M
    values, right = _pencil_eigs(A, M, count, which, target, sigma)
    AT = A.T.tocsr()
    left_count = min(size, count + 2) if size <= DENSE_LIMIT else count + 2
    left_values, left = _pencil_eigs(AT, M, min(left_count, size), which, target, sigma)
    matches = _match_left(values, left_values)

    pairs = []
    for i in _order(values, "largest-real", None):
        value = complex(values[i])
        v = _normalize_right(right[:, i], M)
        xi = left[:, matches[i]]
        scale = xi @ (M @ v)
        if abs(scale) < 1e-12 * np.linalg.norm(xi):
            LOGGER.warning("left/right vectors nearly M-orthogonal at %s", value)
            xi = xi / np.sqrt(abs(np.vdot(xi, M @ xi)))
        else:
            xi = xi / scale
        residual = max(
            _relative_residual(A, M, v, value), _relative_residual(AT, M, xi, value)
        )
        if residual > RESIDUAL_FAIL:
            raise EigenSolverError(
                f"eigenpair {value:.6g} has residual {residual:.3e}", residual=residual
            )
        if residual > RESIDUAL_WARN:
            LOGGER.warning("eigenpair %s has residual %.3e", value, residual)
        pairs.append(EigenPair(value, v, xi, residual))
    return pairs


def unstable_basis(pairs: Sequence[EigenPair], tol: float = 1e-9) -> UnstableBasis:
    """
    Real right/left bases of the eigenvectors with ``Re Lambda > -tol``.

    Parameters
    ----------
    pairs : sequence of EigenPair
        Output of :func:`discrete_eigs` (descending real part).
    tol : float, default=1e-9
        Instability threshold.

    Returns
    -------
    UnstableBasis
        Empty matrices (``count=0``) when nothing is unstable.

    Raises
    ------
    IncompletePairError
        If an unstable complex eigenvalue lacks its conjugate in ``pairs``.
    """
    unstable = [p for p in pairs if p.value.real > -tol]
    size = pairs[0].right_vector.size if pairs else 0
    e_cols, xi_cols, values, widths = [], [], [], []
    consumed = set()
    for i, pair in enumerate(unstable):
        if i in consumed:
            continue
        value = pair.value
        if abs(value.imag) <= 1e-10 * max(1.0, abs(value)):
            e_cols.append(pair.right_vector.real)
            xi_cols.append(pair.left_vector.real)
            values.append(complex(value.real, 0.0))
            widths.append(1)
            consumed.add(i)
            continue
        partner = next(
            (
                j
                for j, other in enumerate(unstable)
                if j != i
                and j not in consumed
                and abs(other.value - value.conjugate()) <= PAIR_TOL * max(1.0, abs(value))
            ),
            None,
        )
        if partner is None:
            raise IncompletePairError(
                f"unstable eigenvalue {value:.6g} has no conjugate partner"
            )
        lead = pair if value.imag > 0 else unstable[partner]
        v, xi = lead.right_vector, lead.left_vector
        # with xi^T M v = 1, (2 Re xi, -2 Im xi) is M-biorthonormal to (Re v, Im v)
        e_cols += [v.real, v.imag]
        xi_cols += [2.0 * xi.real, -2.0 * xi.imag]
        values += [lead.value, lead.value.conjugate()]
        widths.append(2)
        consumed.update((i, partner))

    if not e_cols:
        return UnstableBasis(np.zeros((size, 0)), np.zeros((size, 0)), 0)
    E = np.column_stack(e_cols)
    Xi = np.column_stack(xi_cols)
    return UnstableBasis(E, Xi, E.shape[1], values, widths)


def hautus_check(
    system: BlockSystem, basis: UnstableBasis, tol: float = 1e-3
) -> HautusReport:
    """
    Hautus test on the unstable left eigenvectors.

    For every mode ``xi = (xi_y, xi_z)`` the ratio
    ``sqrt(xi_y^H G_O xi_y) / sqrt(xi^H M xi)`` measures the part of ``xi``
    seen by the adjoint control operator. The pair is declared stabilizable
    when every ratio exceeds ``tol``.
    """
    if basis.count == 0:
        LOGGER.warning("empty unstable basis: Hautus test holds vacuously")
        return HautusReport(True, (), ())
    ratios = []
    for xi in basis.left_modes():
        xi_y = xi[: system.n]
        seen = abs(np.vdot(xi_y, system.G_O @ xi_y))
        total = abs(np.vdot(xi, system.M @ xi))
        ratios.append(float(np.sqrt(seen / total)) if total > 0 else 0.0)
    modes = []
    col = 0
    for width in basis.widths:
        modes.append(basis.eigenvalues[col])
        col += width
    ok = all(r > tol for r in ratios)
    LOGGER.info("Hautus ratios %s -> %s", ", ".join(f"{r:.4g}" for r in ratios), ok)
    return HautusReport(ok, tuple(ratios), tuple(modes))


def closed_loop_eigs(op: ClosedLoopOperator, count: int, sigma: float) -> np.ndarray:
    """
    Rightmost eigenvalues of the closed-loop pencil ``(A - U V, M)``.

    Parameters
    ----------
    op : ClosedLoopOperator
        Open or closed-loop operator.
    count : int
        Number of eigenvalues.
    sigma : float
        Real shift to the right of the expected spectrum (used by the
        sparse path, where ``(A - U V - sigma M)^{-1}`` is applied through
        the low-rank solver).

    Returns
    -------
    ndarray of complex
        Sorted by descending real part.
    """
    size = op.size
    count = min(count, size)
    if size <= DENSE_LIMIT:
        values, _ = _pencil_eigs(op.dense(), op.M, count, "largest-real", None, sigma)
        return values
    solver = ShiftedSolver(op, mass_coeff=sigma, step=1.0)
    opinv = LinearOperator((size, size), matvec=lambda b: -solver.solve(b), dtype=float)
    A_op = LinearOperator((size, size), matvec=op.apply, dtype=float)
    values, _ = _pencil_eigs(A_op, op.M, count, "largest-real", None, sigma, opinv=opinv)
    return values


def eig_convergence_study(
    params: ModelParams,
    levels: Sequence[int],
    targets: Sequence[EigTarget] = ((1, 1, "+"), (1, 1, "-"), (1, 2, "+")),
    count: int = 8,
) -> ConvergenceTable:
    """
    Errors ``|Lambda_exact - Lambda_h|`` of selected eigenvalues per level.

    Each exact target is matched to the nearest of the ``count`` rightmost
    discrete eigenvalues.

    Returns
    -------
    ConvergenceTable
        Values ``re_<label>``, ``im_<label>`` and errors ``abs_error_<label>``
        with ``label = "<m><n><p|m>"``.
    """
    table = ConvergenceTable()
    exact = {t: exact_target(params, t) for t in targets}
    for level in levels:
        mesh = build_unit_square_mesh(level)
        system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
        pairs = discrete_eigs(system, min(count, system.size))
        computed = np.array([p.value for p in pairs])
        values, errors = {}, {}
        for target in targets:
            label = target_label(target)
            approx = computed[int(np.argmin(np.abs(computed - exact[target])))]
            values[f"re_{label}"] = float(approx.real)
            values[f"im_{label}"] = float(approx.imag)
            errors[f"abs_error_{label}"] = float(abs(exact[target] - approx))
        table.add_row(mesh.h, errors, values)
        LOGGER.info(
            "level %d: %s",
            level,
            ", ".join(f"{k}={v:.5f}" for k, v in errors.items()),
        )
    return table.compute_orders()


def target_label(target: EigTarget) -> str:
    m, n, sign = target
    return f"{m}{n}{'p' if sign == '+' else 'm'}"
