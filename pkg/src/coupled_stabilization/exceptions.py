"""
Exception hierarchy for the stabilization toolkit.

Everything raised on purpose by the package derives from
:class:`StabilizationError`. The command-line front end maps
:class:`ConfigurationError` to exit code 2 and :class:`NumericalError` to
exit code 3.
"""

from typing import Optional


class StabilizationError(Exception):
    """Base class of all package errors."""


class ConfigurationError(StabilizationError, ValueError):
    """Invalid or inconsistent user configuration."""


class MeshError(StabilizationError, ValueError):
    """Malformed mesh input or non-nested mesh pair."""


class DimensionError(StabilizationError, ValueError):
    """Vector or matrix with an unexpected shape."""


class NumericalError(StabilizationError, ArithmeticError):
    """A numerical kernel failed or produced an unusable result."""


class EigenSolverError(NumericalError):
    """
    Eigensolver did not converge.

    Parameters
    ----------
    message : str
        Human-readable description.
    residual : float, optional
        Largest relative residual attained before giving up.
    """

    def __init__(self, message: str, residual: Optional[float] = None) -> None:
        super().__init__(message)
        self.residual = residual


class IncompletePairError(NumericalError):
    """An unstable complex eigenvalue arrived without its conjugate partner."""


class RiccatiError(NumericalError):
    """Riccati solve failed."""


class NonDichotomicError(RiccatiError):
    """The Hamiltonian matrix has eigenvalues on the imaginary axis."""


class NotStabilizableError(RiccatiError):
    """The (projected) pair fails the Hautus test."""


class SimulationError(NumericalError):
    """
    Time integration produced a non-finite state.

    Parameters
    ----------
    message : str
        Human-readable description.
    time : float
        Simulation time at which the state blew up.
    step : int
        Step index at which the state blew up.
    """

    def __init__(self, message: str, time: float, step: int) -> None:
        super().__init__(message)
        self.time = time
        self.step = step
