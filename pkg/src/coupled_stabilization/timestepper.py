"""
Time integration of ``M Y' = (A - B K) Y`` by backward Euler and BDF2.

The first step uses backward Euler, every later step BDF2:

.. code-block:: text

    (M - dt A_cl) Y_1 = M Y_0
    (3/2 M - dt A_cl) Y_{k+2} = M (2 Y_{k+1} - Y_k / 2)

with ``A_cl = A - U V`` where ``U = B (B_u^T P)`` and ``V = Xi^T M`` have
only ``2 n_u`` columns / rows. The sparse part ``c M - dt A`` is factorized
once per scheme and the low-rank term is handled with the
Sherman-Morrison-Woodbury formula.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from coupled_stabilization.assembly import BlockSystem
from coupled_stabilization.exceptions import (
    DimensionError,
    NumericalError,
    SimulationError,
)
from coupled_stabilization.helpers.helper import save_checkpoint, write_csv
from coupled_stabilization.tables import format_number

LOGGER = logging.getLogger("coupled_stabilization.timestepper")


@dataclass(frozen=True, eq=False)
class ClosedLoopOperator:
    """
    Pencil ``(A - U V, M)``; without ``U`` and ``V`` it is the open loop.

    Attributes
    ----------
    M, A : scipy.sparse.csr_matrix
        Mass and open-loop operator, ``2 n x 2 n``.
    U : ndarray, shape (2 n, r), optional
        Left low-rank factor (``B`` times the gain's left factor).
    V : ndarray, shape (r, 2 n), optional
        Right low-rank factor.
    dense_feedback : bool
        Solve with the explicitly assembled dense ``A - U V`` instead of the
        low-rank correction.
    """

    M: sp.csr_matrix
    A: sp.csr_matrix
    U: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    dense_feedback: bool = False

    def __post_init__(self):
        if (self.U is None) != (self.V is None):
            raise DimensionError("low-rank factors U and V must be given together")
        if self.U is not None:
            size = self.M.shape[0]
            if self.U.shape[0] != size or self.V.shape[1] != size:
                raise DimensionError(
                    f"factors {self.U.shape} x {self.V.shape} do not match size {size}"
                )
            if self.U.shape[1] != self.V.shape[0]:
                raise DimensionError("inner dimensions of U and V differ")

    @classmethod
    def open_loop(cls, system: BlockSystem) -> "ClosedLoopOperator":
        return cls(system.M, system.A)

    @classmethod
    def from_gain(
        cls, system: BlockSystem, gain, dense_feedback: bool = False
    ) -> "ClosedLoopOperator":
        """Closed loop ``A - B K`` for a gain with ``K = left_factor @ right_factor``."""
        if gain is None:
            return cls(system.M, system.A, dense_feedback=dense_feedback)
        U = np.asarray(system.B @ gain.left_factor)
        V = np.asarray(gain.right_factor)
        return cls(system.M, system.A, U, V, dense_feedback)

    @property
    def size(self) -> int:
        return self.M.shape[0]

    @property
    def rank(self) -> int:
        return 0 if self.U is None else self.U.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``A_cl x``."""
        out = self.A @ x
        if self.rank:
            out = out - self.U @ (self.V @ x)
        return out

    def dense(self) -> np.ndarray:
        out = self.A.toarray()
        if self.rank:
            out -= self.U @ self.V
        return out


class ShiftedSolver:
    """
    Repeated solves with ``c M - dt A_cl``.

    The sparse matrix ``C = c M - dt A`` is LU-factorized once; with a
    feedback of rank ``r`` the ``r x r`` capacitance matrix
    ``H = I + dt V C^{-1} U`` is factorized as well, and

    .. code-block:: text

        x = y - dt W H^{-1} V y,   y = C^{-1} b,   W = C^{-1} U.

    Attributes
    ----------
    factorizations : int
        Number of sparse or dense LU factorizations performed.
    """

    def __init__(self, op: ClosedLoopOperator, mass_coeff: float, step: float):
        if step <= 0:
            raise ValueError(f"time step must be positive, got {step}")
        self.op = op
        self.mass_coeff = float(mass_coeff)
        self.step = float(step)
        self.factorizations = 0
        self._lu = None
        self._dense_lu = None
        self._W = None
        self._H_lu = None
        self._factorize()

    def _factorize(self):
        op, c, dt = self.op, self.mass_coeff, self.step
        if op.dense_feedback:
            matrix = c * op.M.toarray() - dt * op.dense()
            self._dense_lu = la.lu_factor(matrix, check_finite=True)
            self.factorizations += 1
            if np.any(np.diag(self._dense_lu[0]) == 0):
                raise NumericalError(f"singular matrix {c:g} M - {dt:g} A_cl")
            return
        C = (c * op.M - dt * op.A).tocsc()
        try:
            self._lu = splu(C)
        except RuntimeError as exc:
            raise NumericalError(f"factorization of {c:g} M - {dt:g} A failed: {exc}") from exc
        self.factorizations += 1
        if op.rank:
            self._W = self._lu.solve(np.asarray(op.U, dtype=float))
            H = np.eye(op.rank) + dt * (op.V @ self._W)
            self._H_lu = la.lu_factor(H)
            if np.any(np.diag(self._H_lu[0]) == 0):
                raise NumericalError("singular capacitance matrix in low-rank solve")

    def matches(self, mass_coeff: float, step: float) -> bool:
        return self.mass_coeff == mass_coeff and self.step == step

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``(c M - dt A_cl) x = rhs``."""
        if self._dense_lu is not None:
            return la.lu_solve(self._dense_lu, rhs)
        y = self._lu.solve(rhs)
        if self._W is not None:
            y = y - self.step * (self._W @ la.lu_solve(self._H_lu, self.op.V @ y))
        return y


def _solver(op, solver, mass_coeff, dt) -> ShiftedSolver:
    if solver is None:
        return ShiftedSolver(op, mass_coeff, dt)
    if solver.op is not op or not solver.matches(mass_coeff, dt):
        raise ValueError("solver was factorized for a different operator or step")
    return solver


def be_first_step(
    op: ClosedLoopOperator,
    Y0: np.ndarray,
    dt: float,
    solver: Optional[ShiftedSolver] = None,
) -> np.ndarray:
    """
    Backward Euler step ``(M - dt A_cl) Y1 = M Y0``.

    Parameters
    ----------
    op : ClosedLoopOperator
        Operator pencil.
    Y0 : ndarray, shape (2 n,)
        Current state.
    dt : float
        Positive step.
    solver : ShiftedSolver, optional
        Reusable factorization of ``M - dt A_cl``.

    Returns
    -------
    ndarray
        ``Y1``.

    Examples
    --------
    >>> import scipy.sparse as sp
    >>> op = ClosedLoopOperator(sp.identity(1, format="csr"), -sp.identity(1, format="csr"))
    >>> float(be_first_step(op, np.array([1.1]), 0.1)[0])
    1.0
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    return _solver(op, solver, 1.0, dt).solve(op.M @ Y0)


def bdf2_step(
    op: ClosedLoopOperator,
    Y_n: np.ndarray,
    Y_n1: np.ndarray,
    dt: float,
    solver: Optional[ShiftedSolver] = None,
) -> np.ndarray:
    """BDF2 step ``(3/2 M - dt A_cl) Y_{n+2} = M (2 Y_{n+1} - Y_n / 2)``."""
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    return _solver(op, solver, 1.5, dt).solve(op.M @ (2.0 * Y_n1 - 0.5 * Y_n))


def discrete_l2_norm(G_block, coeffs: np.ndarray) -> float:
    """
    ``sqrt(c^T G c)``; ``G`` is ``diag(G, G)`` for states and ``G_O`` for controls.

    Raises
    ------
    DimensionError
        If ``coeffs`` does not match ``G_block``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim != 1 or coeffs.size != G_block.shape[0]:
        raise DimensionError(
            f"vector of size {coeffs.size} for a {G_block.shape[0]}x{G_block.shape[1]} matrix"
        )
    return float(np.sqrt(max(coeffs @ (G_block @ coeffs), 0.0)))


def discrete_h1_norm(G, K, coeffs: np.ndarray) -> float:
    """
    ``sqrt(c^T (G + K) c)`` for one scalar field.

    A stacked state ``(y, z)`` of twice the size is accepted and measured
    as ``sqrt(|y|_1^2 + |z|_1^2)``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    n = G.shape[0]
    if K.shape != G.shape:
        raise DimensionError(f"mass {G.shape} and stiffness {K.shape} differ")
    if coeffs.ndim != 1 or coeffs.size not in (n, 2 * n):
        raise DimensionError(f"vector of size {coeffs.size} for {n} unknowns per field")
    total = 0.0
    for part in coeffs.reshape(-1, n):
        total += part @ (G @ part) + part @ (K @ part)
    return float(np.sqrt(max(total, 0.0)))


@dataclass
class TimeSeries:
    """
    Energies and checkpoints of one simulation.

    Attributes
    ----------
    times : ndarray
        ``k dt`` for ``k = 0 .. n_steps``.
    state_energy : ndarray
        ``sqrt(Y^T M Y)`` per time.
    control_energy : ndarray
        ``sqrt(u^T G_O u)`` per time, zero for the open loop.
    checkpoints : List[Tuple[float, ndarray]]
        State vectors at the requested times (snapped to the nearest step).
    factorizations : Dict[str, int]
        LU factorizations per scheme (``"be"`` and ``"bdf2"``).
    final_state : ndarray, optional
        State at the last step.
    """

    times: np.ndarray
    state_energy: np.ndarray
    control_energy: np.ndarray
    checkpoints: List[Tuple[float, np.ndarray]] = field(default_factory=list)
    factorizations: Dict[str, int] = field(default_factory=dict)
    final_state: Optional[np.ndarray] = None

    def checkpoint_at(self, time: float) -> np.ndarray:
        """State stored at the checkpoint nearest to ``time``."""
        if not self.checkpoints:
            raise KeyError("no checkpoint recorded")
        _, state = min(self.checkpoints, key=lambda item: abs(item[0] - time))
        return state

    def energy_at(self, time: float) -> float:
        return float(self.state_energy[int(np.argmin(np.abs(self.times - time)))])

    def to_csv(self, path, precision: str = "short") -> Path:
        """Write ``t, state_energy, control_energy``."""
        rows = (
            [format_number(t, precision), format_number(s, precision), format_number(c, precision)]
            for t, s, c in zip(self.times, self.state_energy, self.control_energy)
        )
        return write_csv(path, ["t", "state_energy", "control_energy"], rows)

    def save_checkpoints(self, directory, stem: str) -> List[Path]:
        """One ``<stem>_t<time>.npy`` file per checkpoint."""
        return [
            save_checkpoint(Path(directory) / f"{stem}_t{t:.6g}.npy", state)
            for t, state in self.checkpoints
        ]


def _checkpoint_steps(times: Sequence[float], dt: float, n_steps: int) -> Dict[int, float]:
    steps = {}
    for t in times:
        k = int(round(t / dt))
        if k < 0 or k > n_steps:
            raise ValueError(f"checkpoint time {t} outside [0, {n_steps * dt}]")
        steps[k] = t
    return steps


def simulate(
    system: BlockSystem,
    gain,
    Y0: np.ndarray,
    dt: float,
    t_final: float,
    checkpoint_times: Sequence[float] = (),
    dense_feedback: bool = False,
) -> TimeSeries:
    """
    Run backward Euler once, then BDF2 up to ``t_final``.

    Parameters
    ----------
    system : BlockSystem
        Assembled matrices.
    gain : FeedbackGain or None
        Feedback ``u = -K Y``; ``None`` simulates the open loop.
    Y0 : ndarray, shape (2 n,)
        Initial coefficients.
    dt : float
        Time step (> 0).
    t_final : float
        Final time (>= dt); rounded to the nearest multiple of ``dt``.
    checkpoint_times : sequence of float
        Times whose states are stored.
    dense_feedback : bool, default=False
        Use the assembled dense closed-loop matrix instead of the low-rank
        correction (reference path for small systems).

    Returns
    -------
    TimeSeries

    Raises
    ------
    SimulationError
        When a state stops being finite.
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if t_final < dt:
        raise ValueError(f"t_final={t_final} is shorter than one step dt={dt}")
    Y0 = np.asarray(Y0, dtype=float)
    if Y0.shape != (system.size,):
        raise DimensionError(f"initial state of shape {Y0.shape}, expected ({system.size},)")

    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * t_final:
        LOGGER.warning("t_final=%g is not a multiple of dt=%g; stopping at %g", t_final, dt, n_steps * dt)
    wanted = _checkpoint_steps(checkpoint_times, dt, n_steps)

    op = ClosedLoopOperator.from_gain(system, gain, dense_feedback)
    M, G_O = system.M, system.G_O

    def control(Y):
        if gain is None:
            return None
        return -(gain.left_factor @ (gain.right_factor @ Y))

    times = dt * np.arange(n_steps + 1)
    state_energy = np.zeros(n_steps + 1)
    control_energy = np.zeros(n_steps + 1)
    checkpoints = []

    def record(k, Y):
        if not np.all(np.isfinite(Y)):
            raise SimulationError(
                f"non-finite state at t={times[k]:g} (step {k})", time=times[k], step=k
            )
        state_energy[k] = discrete_l2_norm(M, Y)
        u = control(Y)
        if u is not None:
            control_energy[k] = discrete_l2_norm(G_O, u)
        if k in wanted:
            checkpoints.append((float(times[k]), Y.copy()))

    record(0, Y0)
    be = ShiftedSolver(op, 1.0, dt)
    Y_prev, Y = Y0, be_first_step(op, Y0, dt, be)
    record(1, Y)
    bdf2 = ShiftedSolver(op, 1.5, dt) if n_steps > 1 else None
    for k in range(2, n_steps + 1):
        Y_prev, Y = Y, bdf2_step(op, Y_prev, Y, dt, bdf2)
        record(k, Y)
        if k % 500 == 0:
            LOGGER.debug("step %d/%d, energy %.6g", k, n_steps, state_energy[k])

    factorizations = {"be": be.factorizations, "bdf2": bdf2.factorizations if bdf2 else 0}
    LOGGER.info(
        "simulated %d steps (%s loop, rank %d): energy %.6g -> %.6g",
        n_steps,
        "closed" if gain is not None else "open",
        op.rank,
        state_energy[0],
        state_energy[-1],
    )
    return TimeSeries(
        times, state_energy, control_energy, checkpoints, factorizations, Y.copy()
    )
