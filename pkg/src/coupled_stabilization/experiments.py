"""
Experiment drivers behind the ``stab`` subcommands.

Each ``cmd_*`` function takes a validated
:class:`~coupled_stabilization.config.ExperimentConfig`, runs the
corresponding study, writes its CSV file into ``config.output_dir``, prints
a summary table and returns the result.

The stabilizing feedback of one mesh is built by :func:`synthesize_feedback`:

1. rightmost eigenpairs of the pencil and the unstable basis,
2. Hautus test on the unstable left eigenvectors,
3. projection and projected Riccati equation,
4. factored gain ``K = (Bu^T P) (Xi^T M)``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from coupled_stabilization.assembly import (
    BlockSystem,
    assemble_block_system,
    l2_project_initial,
)
from coupled_stabilization.config import ExperimentConfig
from coupled_stabilization.exceptions import ConfigurationError, NotStabilizableError
from coupled_stabilization.helpers.helper import load_checkpoint, print_table, write_csv
from coupled_stabilization.mesh import (
    ControlRegion,
    Mesh,
    build_unit_square_mesh,
    prolongation,
    refine_uniform,
)
from coupled_stabilization.riccati import (
    FeedbackGain,
    ProjectedSystem,
    RiccatiSolution,
    dump_projected,
    feedback_gain,
    project_system,
    riccati_cost_study,
    solve_projected_are,
)
from coupled_stabilization.spectral import (
    HautusReport,
    UnstableBasis,
    closed_loop_eigs,
    discrete_eigs,
    eig_convergence_study,
    exact_coupled_eigs,
    exact_laplacian_eig,
    hautus_check,
    spectral_abscissa_bound,
    unstable_basis,
)
from coupled_stabilization.tables import ConvergenceTable, compute_order, format_number
from coupled_stabilization.timestepper import (
    ClosedLoopOperator,
    TimeSeries,
    discrete_h1_norm,
    discrete_l2_norm,
    simulate,
)

__all__ = [
    "LevelSetup",
    "Stabilization",
    "build_level",
    "synthesize_feedback",
    "cmd_eigs",
    "cmd_simulate",
    "cmd_convergence",
    "cmd_cost",
    "cmd_spectrum",
    "cmd_riccati",
    "compute_order",
    "open_writer",
]

LOGGER = logging.getLogger("coupled_stabilization.experiments")

EIG_TARGETS = ((1, 1, "+"), (1, 1, "-"), (1, 2, "+"))


# -------------------- helpers --------------------


def open_writer(logdir: Optional[Path]):
    """TensorBoard ``SummaryWriter`` under ``logdir`` or ``None``."""
    if logdir is None:
        return None
    try:
        from torch.utils.tensorboard import SummaryWriter
    except ImportError as exc:
        raise ConfigurationError(
            "--tb-logdir needs torch and tensorboard (pip install -r requirements.txt)"
        ) from exc
    Path(logdir).mkdir(parents=True, exist_ok=True)
    return SummaryWriter(log_dir=str(logdir))


def _log_table(writer, tag: str, table: ConvergenceTable, levels: Sequence[int]) -> None:
    if writer is None:
        return
    for level, row in zip(levels, table.rows):
        for name, value in row.errors.items():
            writer.add_scalar(f"{tag}/{name}", value, level)
        for name, order in row.orders.items():
            if order is not None:
                writer.add_scalar(f"{tag}/{name}_order", order, level)


def _show(table: ConvergenceTable, title: str, precision: str) -> None:
    print_table(table.header(), table.records(precision), title=title)


# -------------------- pipeline --------------------


@dataclass(frozen=True, eq=False)
class LevelSetup:
    """Mesh, assembled system and projected initial state of one level."""

    level: int
    mesh: Mesh
    system: BlockSystem
    Y0: np.ndarray


@dataclass(frozen=True, eq=False)
class Stabilization:
    """
    Intermediate products of :func:`synthesize_feedback`.

    ``projected`` and ``solution`` are ``None`` when nothing is unstable.
    """

    basis: UnstableBasis
    hautus: HautusReport
    gain: FeedbackGain
    projected: Optional[ProjectedSystem] = None
    solution: Optional[RiccatiSolution] = None


def build_level(config: ExperimentConfig, level: int, mesh: Optional[Mesh] = None) -> LevelSetup:
    """Assemble the system of ``level`` (on ``mesh`` if given)."""
    mesh = mesh if mesh is not None else build_unit_square_mesh(level)
    region = ControlRegion.from_spec(mesh, config.region)
    system = assemble_block_system(mesh, config.params, region)
    y0, z0 = config.initial_fields()
    Y0 = l2_project_initial(mesh, y0, z0)
    LOGGER.info("level %d: h=%g, %d interior nodes", level, mesh.h, mesh.n_interior)
    return LevelSetup(level, mesh, system, Y0)


def _unstable_pairs(system: BlockSystem, tol: float):
    """Enough rightmost eigenpairs to contain every unstable one."""
    count = min(system.size, 10)
    while True:
        pairs = discrete_eigs(system, count)
        if pairs[-1].value.real <= -tol or count == system.size:
            return pairs
        count = min(system.size, 2 * count)


def synthesize_feedback(
    system: BlockSystem,
    config: ExperimentConfig,
    dump_dir: Optional[Path] = None,
    level: Optional[int] = None,
) -> Stabilization:
    """
    Build the stabilizing feedback of ``system``.

    Raises
    ------
    NotStabilizableError
        If the Hautus test fails for an unstable mode.
    """
    pairs = _unstable_pairs(system, config.unstable_tol)
    basis = unstable_basis(pairs, config.unstable_tol)
    LOGGER.info("%d unstable eigenvalue(s): %s", basis.count, basis.eigenvalues)
    report = hautus_check(system, basis, config.hautus_tol)
    if basis.count == 0:
        LOGGER.warning("no unstable eigenvalue: running with K = 0 (open loop)")
        return Stabilization(basis, report, FeedbackGain.zero(system.n, system.size))
    if not report:
        worst = min(report.ratios)
        raise NotStabilizableError(
            f"Hautus test failed: control region sees {worst:.3e} of an unstable "
            f"mode (tolerance {config.hautus_tol:g}); enlarge the control region"
        )
    projected = project_system(system, basis)
    solution = solve_projected_are(projected)
    gain = feedback_gain(solution, projected, basis)
    if dump_dir is not None:
        dump_projected(dump_dir, projected, solution, level if level is not None else 0)
    return Stabilization(basis, report, gain, projected, solution)


# -------------------- commands --------------------


def cmd_eigs(config: ExperimentConfig, writer=None) -> ConvergenceTable:
    """Eigenvalue errors and orders for the targets ``(1,1,+)``, ``(1,1,-)``, ``(1,2,+)``."""
    table = eig_convergence_study(config.params, config.levels, EIG_TARGETS)
    table.to_csv(config.output_dir / "eigs.csv", config.precision)
    _log_table(writer, "eigs", table, config.levels)
    _show(table, "eigenvalue errors", config.precision)
    return table


def cmd_simulate(
    config: ExperimentConfig,
    controlled: bool,
    level: Optional[int] = None,
    dump_dir: Optional[Path] = None,
    writer=None,
    initial_state: Optional[Path] = None,
    state_dir: Optional[Path] = None,
) -> TimeSeries:
    """
    Simulate one level up to ``t_final`` and write ``energy_<kind>_L<level>.csv``.

    ``level`` defaults to the finest configured level. ``initial_state``
    replaces the projected initial data by a saved coefficient vector (a
    ``.npy`` file from an earlier run on the same level). With ``state_dir``
    the states at ``eval_time`` and ``t_final`` are saved as
    ``state_<kind>_L<level>_t<time>.npy``.
    """
    level = level if level is not None else config.levels[-1]
    setup = build_level(config, level)
    Y0 = setup.Y0
    if initial_state is not None:
        try:
            Y0 = load_checkpoint(initial_state)
        except (FileNotFoundError, ValueError) as exc:
            raise ConfigurationError(f"cannot read initial state {initial_state}: {exc}") from exc
        LOGGER.info("level %d: starting from %s", level, initial_state)
    gain = None
    if controlled:
        gain = synthesize_feedback(setup.system, config, dump_dir, level).gain
    marks = (0.0, config.eval_time, config.t_final)
    series = simulate(
        setup.system,
        gain,
        Y0,
        config.dt,
        config.t_final,
        checkpoint_times=marks[1:] if state_dir is not None else (),
    )

    kind = "controlled" if controlled else "uncontrolled"
    series.to_csv(config.output_dir / f"energy_{kind}_L{level}.csv", config.precision)
    if state_dir is not None:
        series.save_checkpoints(state_dir, f"state_{kind}_L{level}")
    if writer is not None:
        for step, (s, c) in enumerate(zip(series.state_energy, series.control_energy)):
            writer.add_scalar(f"{kind}_L{level}/state_energy", s, step)
            if controlled:
                writer.add_scalar(f"{kind}_L{level}/control_energy", c, step)
    print_table(
        ["t", "state_energy", "control_energy"],
        [
            [
                format_number(t, config.precision),
                format_number(series.energy_at(t), config.precision),
                format_number(
                    series.control_energy[int(np.argmin(np.abs(series.times - t)))],
                    config.precision,
                ),
            ]
            for t in marks
        ],
        title=f"{kind} run, level {level}",
    )
    return series


def _nested_meshes(levels: Sequence[int]) -> Dict[int, Mesh]:
    """Meshes ``min(levels) .. max(levels)`` built by successive refinement."""
    meshes = {levels[0]: build_unit_square_mesh(levels[0])}
    for level in range(levels[0] + 1, levels[-1] + 1):
        meshes[level] = refine_uniform(meshes[level - 1])
    return meshes


def _chain_prolongation(meshes: Dict[int, Mesh], coarse: int, fine: int):
    P = None
    for level in range(coarse, fine):
        step = prolongation(meshes[level], meshes[level + 1])
        P = step if P is None else step @ P
    return P


def cmd_convergence(
    config: ExperimentConfig, controlled: bool = True, writer=None
) -> ConvergenceTable:
    """
    Inter-level errors at ``eval_time`` and their orders.

    Each configured level is compared with the next solved level (the
    finest configured level is compared with one extra refinement): the
    coarse state is prolonged to the fine mesh and the differences are
    measured there in L2 and H1 for ``y`` and ``z``, and in ``L2(O)`` for
    the control ``u = -K Y``. Rows are labelled by the coarse ``h``.
    """
    solved = list(config.levels) + [config.levels[-1] + 1]
    meshes = _nested_meshes(solved)
    states: Dict[int, np.ndarray] = {}
    controls: Dict[int, np.ndarray] = {}
    systems: Dict[int, BlockSystem] = {}
    for level in solved:
        setup = build_level(config, level, meshes[level])
        gain = None
        if controlled:
            gain = synthesize_feedback(setup.system, config).gain
        series = simulate(
            setup.system,
            gain,
            setup.Y0,
            config.dt,
            config.eval_time,
            checkpoint_times=[config.eval_time],
        )
        state = series.checkpoint_at(config.eval_time)
        states[level] = state
        systems[level] = setup.system
        if gain is not None:
            controls[level] = gain.control(state)

    table = ConvergenceTable()
    for coarse, fine in zip(solved, solved[1:]):
        P = _chain_prolongation(meshes, coarse, fine)
        fine_sys = systems[fine]
        n = fine_sys.n
        coarse_y, coarse_z = systems[coarse].split(states[coarse])
        fine_y, fine_z = fine_sys.split(states[fine])
        dy = P @ coarse_y - fine_y
        dz = P @ coarse_z - fine_z
        errors = {
            "err_L2_y": discrete_l2_norm(fine_sys.G, dy),
            "err_H1_y": discrete_h1_norm(fine_sys.G, fine_sys.K, dy),
            "err_L2_z": discrete_l2_norm(fine_sys.G, dz),
            "err_H1_z": discrete_h1_norm(fine_sys.G, fine_sys.K, dz),
        }
        if controlled:
            du = P @ controls[coarse] - controls[fine]
            errors["err_L2_u"] = discrete_l2_norm(fine_sys.G_O, du)
        table.add_row(meshes[coarse].h, errors)
        LOGGER.info("levels %d/%d (n=%d): %s", coarse, fine, n, errors)
    table.compute_orders()

    name = "table2.csv" if controlled else "table2_uncontrolled.csv"
    table.to_csv(config.output_dir / name, config.precision)
    _log_table(writer, "convergence" if controlled else "convergence_uncontrolled", table, config.levels)
    _show(table, f"inter-level errors at t={config.eval_time:g}", config.precision)
    return table


def running_cost(series: TimeSeries) -> float:
    """Trapezoidal ``int (|Y|^2 + |u|^2) dt`` over the simulated window."""
    integrand = series.state_energy**2 + series.control_energy**2
    return float(trapezoid(integrand, series.times))


def cmd_cost(config: ExperimentConfig, writer=None) -> ConvergenceTable:
    """Finite-horizon cost of the controlled run per level with inter-level differences."""
    table = ConvergenceTable()
    previous = None
    for level in config.levels:
        setup = build_level(config, level)
        gain = synthesize_feedback(setup.system, config).gain
        series = simulate(setup.system, gain, setup.Y0, config.dt, config.t_final)
        cost = running_cost(series)
        LOGGER.info("level %d: J = %.8g", level, cost)
        errors = {} if previous is None else {"cost_difference": abs(cost - previous)}
        table.add_row(setup.mesh.h, errors, {"cost": cost})
        previous = cost
        if writer is not None:
            writer.add_scalar("cost/J", cost, level)
    table.compute_orders()
    table.to_csv(config.output_dir / "cost.csv", config.precision)
    _show(table, f"cost over [0, {config.t_final:g}]", config.precision)
    return table


def cmd_spectrum(
    config: ExperimentConfig, level: Optional[int] = None, count: int = 20, modes: int = 5
) -> Dict[str, np.ndarray]:
    """
    Exact, open-loop and closed-loop eigenvalues on one level (``spectrum_L<level>.csv``).

    Exact values use ``m, n = 1 .. modes``; the discrete ones are the
    ``count`` rightmost eigenvalues before and after stabilization.
    """
    level = level if level is not None else config.levels[-1]
    setup = build_level(config, level)
    system = setup.system
    exact = []
    for m in range(1, modes + 1):
        for n in range(1, modes + 1):
            exact.extend(exact_coupled_eigs(config.params, exact_laplacian_eig(m, n)))
    exact = np.array(sorted(exact, key=lambda v: (-v.real, -v.imag)))
    count = min(count, system.size)
    open_loop = np.array([p.value for p in discrete_eigs(system, count)])
    gain = synthesize_feedback(system, config).gain
    op = ClosedLoopOperator.from_gain(system, gain)
    closed = closed_loop_eigs(op, count, spectral_abscissa_bound(system) + 1.0)

    spectra = {"exact": exact, "open_loop": open_loop, "closed_loop": closed}
    rows = []
    for kind, values in spectra.items():
        for index, value in enumerate(values):
            rows.append(
                [
                    kind,
                    str(index),
                    format_number(value.real, config.precision),
                    format_number(value.imag, config.precision),
                ]
            )
    write_csv(config.output_dir / f"spectrum_L{level}.csv", ["kind", "index", "re", "im"], rows)
    print_table(
        ["kind", "rightmost re", "im"],
        [
            [kind, format_number(v[0].real), format_number(v[0].imag)]
            for kind, v in spectra.items()
        ],
        title=f"spectrum, level {level}",
    )
    return spectra


def cmd_riccati(config: ExperimentConfig, levels: Sequence[int] = (1, 2, 3)) -> ConvergenceTable:
    """Optimal full-order costs on coarse levels and their Cauchy differences."""
    y0, z0 = config.initial_fields()
    table = riccati_cost_study(levels, config.params, config.region, y0, z0)
    table.to_csv(config.output_dir / "riccati.csv", config.precision)
    _show(table, "full-order Riccati cost", config.precision)
    return table