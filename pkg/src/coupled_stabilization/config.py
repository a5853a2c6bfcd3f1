"""
Configuration models for the coupled parabolic stabilization experiments.

Model coefficients, control region and run settings are validated pydantic
models. Experiment files are INI documents read with :mod:`configparser`:

.. code-block:: ini

    [model]
    eta0 = 1.0
    beta0 = 0.8
    kappa = 1.0
    nu0 = 0.0
    eta1 = 5.0
    omega = 25.0

    [discretization]
    levels = 2..6

    [time]
    dt = 0.001
    t_final = 2.0
    eval_time = 0.1

    [control]
    region = full

    [initial_data]
    y0 = polynomial-bump
    z0 = sine

    [output]
    output_dir = results

Example
-------
>>> from coupled_stabilization.config import ModelParams
>>> ModelParams.example().omega
25.0
"""

import configparser
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic import field_validator, model_validator

from coupled_stabilization.exceptions import ConfigurationError

ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]


def polynomial_bump(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """x1 (1 - x1) x2 (1 - x2); L2 norm 1/30 on the unit square."""
    return x1 * (1.0 - x1) * x2 * (1.0 - x2)


def sine(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """sin(pi x1) sin(pi x2); L2 norm 1/2 on the unit square."""
    return np.sin(np.pi * x1) * np.sin(np.pi * x2)


def zero(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(x1, dtype=float))


INITIAL_DATA: Dict[str, ScalarField] = {
    "polynomial-bump": polynomial_bump,
    "sine": sine,
    "zero": zero,
}


class ModelParams(BaseModel):
    """
    Coefficients of the coupled parabolic system.

    Attributes
    ----------
    eta0 : float
        Diffusion of ``y`` (> 0).
    beta0 : float
        Diffusion of ``z`` (> 0).
    kappa : float
        Decoupling rate in the ``z`` equation (> 0).
    nu0 : float
        Zeroth-order coefficient shared by both equations.
    eta1 : float
        Coupling strength of ``z`` in the ``y`` equation.
    omega : float
        Spectral shift; the feedback targets decay rate ``-omega``.

    Notes
    -----
    The sign condition ``nu0 - (|eta1| + 1) / 2 > 0`` used by the theory is
    not enforced: the reference experiment violates it on purpose and
    compensates with the shift ``omega``.
    """

    model_config = ConfigDict(frozen=True)

    eta0: float = Field(..., gt=0)
    beta0: float = Field(..., gt=0)
    kappa: float = Field(..., gt=0)
    nu0: float = 0.0
    eta1: float = 0.0
    omega: float = 0.0

    @classmethod
    def example(cls) -> "ModelParams":
        """Parameters of the reference numerical experiment."""
        return cls(eta0=1.0, beta0=0.8, kappa=1.0, nu0=0.0, eta1=5.0, omega=25.0)

    def shifted(self, omega: float) -> "ModelParams":
        """Copy with a different spectral shift."""
        return self.model_copy(update={"omega": float(omega)})


class RegionSpec(BaseModel):
    """
    Control region description, realized on a mesh by
    :meth:`coupled_stabilization.mesh.ControlRegion.from_spec`.

    ``kind="full"`` means the whole domain. ``kind="rectangle"`` keeps the
    triangles whose barycenters lie in ``[x0, x1] x [y0, y1]``.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["full", "rectangle"] = "full"
    bounds: Optional[Tuple[float, float, float, float]] = None

    @model_validator(mode="after")
    def _check_bounds(self) -> "RegionSpec":
        if self.kind == "rectangle":
            if self.bounds is None:
                raise ValueError("rectangle region needs bounds x0, x1, y0, y1")
            x0, x1, y0, y1 = self.bounds
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate rectangle {self.bounds}")
        return self


class ExperimentConfig(BaseModel):
    """
    Settings shared by every ``stab`` subcommand.

    Attributes
    ----------
    params : ModelParams
        Model coefficients.
    levels : List[int]
        Ascending refinement levels, each >= 1 (``h = 2**-level``).
    dt : float
        Time step (> 0).
    t_final : float
        Final simulation time.
    eval_time : float
        Time at which inter-level errors are measured, ``0 < eval_time <= t_final``.
    region : RegionSpec
        Control region.
    initial_data : Tuple[str, str]
        Registry names of ``(y0, z0)``; see :data:`INITIAL_DATA`.
    output_dir : Path
        Directory receiving CSV output.
    unstable_tol : float
        Eigenvalues with ``Re > -unstable_tol`` count as unstable.
    hautus_tol : float
        Minimum normalized control-observability ratio per unstable mode.
    precision : {"short", "full"}
        CSV number format: 6 significant digits or round-trip precision.
    """

    model_config = ConfigDict(frozen=True)

    params: ModelParams = Field(default_factory=ModelParams.example)
    levels: List[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6])
    dt: float = Field(1e-3, gt=0)
    t_final: float = Field(2.0, gt=0)
    eval_time: float = Field(0.1, gt=0)
    region: RegionSpec = Field(default_factory=RegionSpec)
    initial_data: Tuple[str, str] = ("polynomial-bump", "sine")
    output_dir: Path = Path("results")
    unstable_tol: float = Field(1e-9, ge=0)
    hautus_tol: float = Field(1e-3, ge=0)
    precision: Literal["short", "full"] = "short"

    @field_validator("levels")
    @classmethod
    def _check_levels(cls, levels: List[int]) -> List[int]:
        if not levels:
            raise ValueError("at least one level is required")
        if any(level < 1 for level in levels):
            raise ValueError(f"levels must be >= 1, got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must be strictly ascending, got {levels}")
        return levels

    @field_validator("initial_data")
    @classmethod
    def _check_initial_data(cls, names: Tuple[str, str]) -> Tuple[str, str]:
        for name in names:
            if name not in INITIAL_DATA:
                known = ", ".join(sorted(INITIAL_DATA))
                raise ValueError(f"unknown initial data {name!r} (known: {known})")
        return names

    @model_validator(mode="after")
    def _check_times(self) -> "ExperimentConfig":
        if self.t_final < self.dt:
            raise ValueError("t_final must be at least one time step")
        if self.eval_time > self.t_final:
            raise ValueError("eval_time must not exceed t_final")
        return self

    def initial_fields(self) -> Tuple[ScalarField, ScalarField]:
        """Resolve ``initial_data`` names to callables."""
        y0, z0 = self.initial_data
        return INITIAL_DATA[y0], INITIAL_DATA[z0]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Validated copy with some fields replaced (``None`` values ignored)."""
        changes = {k: v for k, v in changes.items() if v is not None}
        if not changes:
            return self
        try:
            return ExperimentConfig(**{**self.model_dump(), **changes})
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc


def _parse_levels(text: str) -> List[int]:
    """Accept ``"2, 3, 4"`` or ``"2..6"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(part) for part in text.split("..", 1))
        return list(range(lo, hi + 1))
    return [int(part) for part in text.replace(",", " ").split()]


def _parse_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in text.replace(",", " ").split())


def load_config(path) -> ExperimentConfig:
    """
    Read and validate an INI experiment file.

    Parameters
    ----------
    path : str or Path
        Location of the INI file. Missing sections and keys take the defaults
        of :class:`ExperimentConfig`.

    Returns
    -------
    ExperimentConfig
        Validated configuration.

    Raises
    ------
    ConfigurationError
        If the file is missing, unparsable, or violates a constraint.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")

    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc

    raw: Dict[str, object] = {}
    try:
        if parser.has_section("model"):
            defaults = ModelParams.example().model_dump()
            model = {k: float(v) for k, v in parser.items("model")}
            raw["params"] = {**defaults, **model}
        if parser.has_option("discretization", "levels"):
            raw["levels"] = _parse_levels(parser.get("discretization", "levels"))
        if parser.has_section("time"):
            for key in ("dt", "t_final", "eval_time"):
                if parser.has_option("time", key):
                    raw[key] = parser.getfloat("time", key)
        if parser.has_section("control"):
            kind = parser.get("control", "region", fallback="full").strip()
            bounds = parser.get("control", "rectangle", fallback=None)
            raw["region"] = {
                "kind": kind,
                "bounds": _parse_floats(bounds) if bounds else None,
            }
            for key in ("unstable_tol", "hautus_tol"):
                if parser.has_option("control", key):
                    raw[key] = parser.getfloat("control", key)
        if parser.has_section("initial_data"):
            raw["initial_data"] = (
                parser.get("initial_data", "y0", fallback="polynomial-bump").strip(),
                parser.get("initial_data", "z0", fallback="sine").strip(),
            )
        if parser.has_section("output"):
            if parser.has_option("output", "output_dir"):
                out = Path(parser.get("output", "output_dir").strip())
                raw["output_dir"] = out if out.is_absolute() else path.parent / out
            if parser.has_option("output", "precision"):
                raw["precision"] = parser.get("output", "precision").strip()
    except (ValueError, configparser.Error) as exc:
        raise ConfigurationError(f"invalid value in {path}: {exc}") from exc

    try:
        return ExperimentConfig(**raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration {path}:\n{exc}") from exc
