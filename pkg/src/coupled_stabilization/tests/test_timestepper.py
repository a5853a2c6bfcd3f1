import numpy as np
import pytest
import scipy.sparse as sp

from coupled_stabilization.assembly import (
    assemble_block_system,
    assemble_mass,
    assemble_stiffness,
    l2_project_initial,
)
from coupled_stabilization.config import polynomial_bump, sine, zero
from coupled_stabilization.exceptions import DimensionError, SimulationError
from coupled_stabilization.helpers.helper import load_checkpoint
from coupled_stabilization.mesh import ControlRegion, build_unit_square_mesh
from coupled_stabilization.riccati import feedback_gain, project_system, solve_projected_are
from coupled_stabilization.spectral import discrete_eigs, unstable_basis
from coupled_stabilization.timestepper import (
    ClosedLoopOperator,
    ShiftedSolver,
    bdf2_step,
    be_first_step,
    discrete_h1_norm,
    discrete_l2_norm,
    simulate,
)


def _scalar_op(a: float) -> ClosedLoopOperator:
    return ClosedLoopOperator(sp.identity(1, format="csr"), sp.csr_matrix([[a]]))


def _gain(system):
    basis = unstable_basis(discrete_eigs(system, 6))
    ps = project_system(system, basis)
    return feedback_gain(solve_projected_are(ps), ps, basis)


def _initial_state(system, mesh):
    return l2_project_initial(mesh, polynomial_bump, sine)


# ------------- 1. Single steps -----------------


def test_backward_euler_scalar():
    """Test Case 1.1: y' = -y, dt = 0.1 gives Y1 = Y0 / 1.1."""
    Y1 = be_first_step(_scalar_op(-1.0), np.array([2.0]), 0.1)
    assert Y1[0] == pytest.approx(2.0 / 1.1)


def test_bdf2_scalar():
    """Test Case 1.2: (3/2 + dt) Y2 = 2 Y1 - Y0 / 2 for y' = -y."""
    Y2 = bdf2_step(_scalar_op(-1.0), np.array([1.0]), np.array([0.8]), 0.5)
    assert Y2[0] == pytest.approx((2 * 0.8 - 0.5 * 1.0) / 2.0)


def test_bdf2_without_dynamics():
    """Test Case 1.3: with A = 0 the step is (4 Y1 - Y0) / 3."""
    Y2 = bdf2_step(_scalar_op(0.0), np.array([1.0]), np.array([0.8]), 0.1)
    assert Y2[0] == pytest.approx((4 * 0.8 - 1.0) / 3.0)


def test_non_positive_step_rejected():
    """Test Case 1.4: dt <= 0 is an error."""
    with pytest.raises(ValueError):
        be_first_step(_scalar_op(-1.0), np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        ShiftedSolver(_scalar_op(-1.0), 1.0, -0.1)


def test_solver_reuse_checks_step():
    """Test Case 1.5: a factorization for another step is refused."""
    op = _scalar_op(-1.0)
    solver = ShiftedSolver(op, 1.0, 0.1)
    with pytest.raises(ValueError):
        be_first_step(op, np.array([1.0]), 0.2, solver)


def test_second_order_in_time():
    """Test Case 1.6: halving dt divides the error at t = 1 by about 4."""
    op = _scalar_op(-1.0)
    errors = []
    for dt in (0.1, 0.05, 0.025):
        Y_prev, Y = np.array([1.0]), be_first_step(op, np.array([1.0]), dt)
        for _ in range(2, int(round(1.0 / dt)) + 1):
            Y_prev, Y = Y, bdf2_step(op, Y_prev, Y, dt)
        errors.append(abs(Y[0] - np.exp(-1.0)))

    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((ratios > 3.2) & (ratios < 4.8))


def test_closed_loop_second_order_in_time(params):
    """Test Case 1.7: closed-loop self-convergence ratio at level 3 lies in [3.2, 4.8]."""
    mesh = build_unit_square_mesh(3)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    gain = _gain(system)
    Y0 = _initial_state(system, mesh)
    finals = [simulate(system, gain, Y0, dt, 0.4).final_state for dt in (0.02, 0.01, 0.005)]

    coarse = discrete_l2_norm(system.M, finals[0] - finals[1])
    fine = discrete_l2_norm(system.M, finals[1] - finals[2])
    assert 3.2 <= coarse / fine <= 4.8


# ------------- 2. Low-rank solves -----------------


def test_low_rank_matches_dense(level3_system):
    """Test Case 2.1: Woodbury and dense closed-loop solves agree."""
    system = level3_system
    gain = _gain(system)
    Y0 = np.linspace(-1.0, 1.0, system.size)
    woodbury = simulate(system, gain, Y0, 1e-3, 0.02)
    dense = simulate(system, gain, Y0, 1e-3, 0.02, dense_feedback=True)

    np.testing.assert_allclose(woodbury.final_state, dense.final_state, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(woodbury.state_energy, dense.state_energy, rtol=1e-10)


def test_closed_loop_operator_apply(level3_system):
    """Test Case 2.2: apply agrees with the assembled dense matrix."""
    op = ClosedLoopOperator.from_gain(level3_system, _gain(level3_system))
    x = np.cos(np.arange(level3_system.size))

    assert op.rank == 2
    np.testing.assert_allclose(op.apply(x), op.dense() @ x, atol=1e-10)


def test_mismatched_factors_rejected(level3_system):
    """Test Case 2.3: U without V, or with wrong shapes, is refused."""
    s = level3_system
    with pytest.raises(DimensionError):
        ClosedLoopOperator(s.M, s.A, U=np.ones((s.size, 2)))
    with pytest.raises(DimensionError):
        ClosedLoopOperator(s.M, s.A, U=np.ones((s.size, 2)), V=np.ones((3, s.size)))


# ------------- 3. Simulation -----------------


def test_one_factorization_per_scheme(level3_system):
    """Test Case 3.1: each scheme is factorized exactly once."""
    series = simulate(level3_system, _gain(level3_system), np.ones(level3_system.size), 1e-3, 0.05)

    assert series.factorizations == {"be": 1, "bdf2": 1}
    assert series.times.size == 51
    assert series.times[-1] == pytest.approx(0.05)


def test_zero_state_stays_zero(level3_system):
    """Test Case 3.2: zero initial data gives zero energies."""
    series = simulate(level3_system, _gain(level3_system), np.zeros(level3_system.size), 1e-3, 0.01)

    np.testing.assert_array_equal(series.state_energy, 0.0)
    np.testing.assert_array_equal(series.control_energy, 0.0)


def test_non_finite_state_raises(level3_system):
    """Test Case 3.3: a NaN state stops the run with its time and step."""
    Y0 = np.ones(level3_system.size)
    Y0[3] = np.nan
    with pytest.raises(SimulationError) as info:
        simulate(level3_system, None, Y0, 1e-3, 0.01)
    assert info.value.step == 0
    assert info.value.time == 0.0


def test_wrong_initial_shape(level3_system):
    """Test Case 3.4: the initial state must have 2 n entries."""
    with pytest.raises(DimensionError):
        simulate(level3_system, None, np.ones(3), 1e-3, 0.01)


def test_open_loop_energy_grows(params):
    """Test Case 3.5: without feedback the level-5 energy increases on [0.02, 0.1]."""
    mesh = build_unit_square_mesh(5)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    series = simulate(system, None, _initial_state(system, mesh), 1e-3, 0.1)

    window = series.state_energy[20:]
    assert np.all(np.diff(window) > 0)
    np.testing.assert_array_equal(series.control_energy, 0.0)


def test_closed_loop_energy_decays(params):
    """Test Case 3.6: with feedback the level-3 energy decays on [0, 1]."""
    mesh = build_unit_square_mesh(3)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    series = simulate(system, _gain(system), _initial_state(system, mesh), 1e-3, 1.0)

    assert series.state_energy[-1] < 0.05 * series.state_energy[0]
    assert series.control_energy[0] > 0
    assert series.control_energy[-1] < series.control_energy[0]


@pytest.mark.slow
def test_closed_loop_energy_decays_fine_mesh(params):
    """Test Case 3.7: same decay on the level-5 mesh."""
    mesh = build_unit_square_mesh(5)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    series = simulate(system, _gain(system), _initial_state(system, mesh), 1e-3, 1.0)

    assert series.state_energy[-1] < 0.05 * series.state_energy[0]


def test_checkpoints_snap_to_steps(level3_system, tmp_path):
    """Test Case 3.8: checkpoints land on the nearest step and can be saved."""
    series = simulate(
        level3_system, None, np.ones(level3_system.size), 1e-3, 0.02, checkpoint_times=[0.0104]
    )
    t, state = series.checkpoints[0]

    assert t == pytest.approx(0.01)
    assert series.checkpoint_at(0.0104) is state
    paths = series.save_checkpoints(tmp_path, "run")
    np.testing.assert_array_equal(load_checkpoint(paths[0]), state)
    with pytest.raises(ValueError):
        simulate(level3_system, None, np.ones(level3_system.size), 1e-3, 0.02, checkpoint_times=[1.0])


def test_energy_csv(level3_system, tmp_path):
    """Test Case 3.9: the energy file has one row per time."""
    series = simulate(level3_system, None, np.ones(level3_system.size), 1e-3, 0.005)
    lines = series.to_csv(tmp_path / "energy.csv").read_text().splitlines()

    assert lines[0] == "t,state_energy,control_energy"
    assert len(lines) == 1 + 6
    assert lines[1].startswith("0,")


# ------------- 4. Discrete norms -----------------


def test_norms_of_the_level_one_hat():
    """Test Case 4.1: |phi|_L2 = sqrt(1/8) and |phi|_H1 = sqrt(1/8 + 4)."""
    mesh = build_unit_square_mesh(1)
    G, K = assemble_mass(mesh), assemble_stiffness(mesh)

    assert discrete_l2_norm(G, np.array([1.0])) == pytest.approx(np.sqrt(0.125))
    assert discrete_h1_norm(G, K, np.array([1.0])) == pytest.approx(np.sqrt(4.125))


def test_norm_dimension_checks():
    """Test Case 4.2: vectors of the wrong size are rejected."""
    mesh = build_unit_square_mesh(2)
    G, K = assemble_mass(mesh), assemble_stiffness(mesh)
    with pytest.raises(DimensionError):
        discrete_l2_norm(G, np.ones(3))
    with pytest.raises(DimensionError):
        discrete_h1_norm(G, K, np.ones(5))


def test_h1_dominates_l2():
    """Test Case 4.3: the H1 norm is never below the L2 norm; stacked states add up."""
    mesh = build_unit_square_mesh(3)
    G, K = assemble_mass(mesh), assemble_stiffness(mesh)
    y = l2_project_initial(mesh, polynomial_bump, zero)[: mesh.n_interior]
    z = l2_project_initial(mesh, sine, zero)[: mesh.n_interior]

    assert discrete_h1_norm(G, K, y) >= discrete_l2_norm(G, y)
    stacked = discrete_h1_norm(G, K, np.concatenate([y, z]))
    assert stacked == pytest.approx(np.hypot(discrete_h1_norm(G, K, y), discrete_h1_norm(G, K, z)))
