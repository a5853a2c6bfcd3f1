import logging

import numpy as np
import pytest
import scipy.linalg as la

from coupled_stabilization import spectral
from coupled_stabilization.assembly import assemble_block_system
from coupled_stabilization.config import ModelParams
from coupled_stabilization.exceptions import EigenSolverError, IncompletePairError
from coupled_stabilization.mesh import ControlRegion, build_unit_square_mesh
from coupled_stabilization.riccati import feedback_gain, project_system, solve_projected_are
from coupled_stabilization.spectral import (
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
from coupled_stabilization.timestepper import ClosedLoopOperator


def _decoupled_system(level, omega=25.0):
    params = ModelParams.example().model_copy(update={"eta1": 0.0, "omega": omega})
    mesh = build_unit_square_mesh(level)
    return assemble_block_system(mesh, params, ControlRegion.full(mesh))


def _laplacian_pencil_eigs(system):
    """Ascending eigenvalues of the scalar pencil (K, G)."""
    return la.eigh(system.K.toarray(), system.G.toarray(), eigvals_only=True)


# ------------- 1. Exact eigenvalues -----------------


def test_laplacian_eigenvalues():
    """Test Case 1.1: lambda_{m,n} = (m^2 + n^2) pi^2."""
    assert exact_laplacian_eig(1, 1) == pytest.approx(2 * np.pi**2)
    assert exact_laplacian_eig(1, 2) == pytest.approx(5 * np.pi**2)
    with pytest.raises(ValueError):
        exact_laplacian_eig(0, 1)


def test_reference_exact_eigenvalues(params):
    """Test Case 1.2: first complex pair 6.73471 +- 1.68153i and real eigenvalue -16.08341."""
    plus, minus = exact_coupled_eigs(params, exact_laplacian_eig(1, 1))
    real_plus, _ = exact_coupled_eigs(params, exact_laplacian_eig(1, 2))

    assert plus.real == pytest.approx(6.73471, abs=5e-6)
    assert plus.imag == pytest.approx(1.68153, abs=5e-6)
    assert minus == pytest.approx(plus.conjugate())
    assert real_plus.imag == 0.0
    assert real_plus.real == pytest.approx(-16.08341, abs=5e-6)


def test_shift_moves_eigenvalues(params):
    """Test Case 1.3: the shift omega is added to both eigenvalues."""
    lam = exact_laplacian_eig(2, 3)
    base = exact_coupled_eigs(params.shifted(0.0), lam)
    shifted = exact_coupled_eigs(params, lam)

    for a, b in zip(base, shifted):
        assert b - a == pytest.approx(params.omega)


def test_vieta_relations():
    """Test Case 1.4: sum and product of the unshifted pair match the 2x2 symbol on 100 draws."""
    rng = np.random.default_rng(7)
    for _ in range(100):
        eta0, beta0, kappa = rng.uniform(0.1, 5.0, size=3)
        nu0 = rng.uniform(0.0, 2.0)
        eta1 = rng.uniform(-10.0, 10.0)
        lam = rng.uniform(1.0, 500.0)
        params = ModelParams(eta0=eta0, beta0=beta0, kappa=kappa, nu0=nu0, eta1=eta1)
        plus, minus = exact_coupled_eigs(params, lam)

        a, b = eta0 * lam + nu0, beta0 * lam + kappa + nu0
        assert abs((plus + minus) + (a + b)) <= 1e-10 * (a + b)
        assert abs(plus * minus - (a * b + eta1)) <= 1e-10 * (a * b + abs(eta1))


# ------------- 2. Discrete eigenpairs -----------------


def test_rightmost_pair_at_level_three(level3_system, params):
    """Test Case 2.1: the two rightmost eigenvalues form a conjugate pair left of the exact one."""
    pairs = discrete_eigs(level3_system, 4)
    exact, _ = exact_coupled_eigs(params, exact_laplacian_eig(1, 1))

    assert len(pairs) == 4
    assert pairs[0].value.imag > 0
    assert pairs[1].value == pytest.approx(pairs[0].value.conjugate())
    assert 5.0 < pairs[0].value.real < exact.real
    reals = [p.value.real for p in pairs]
    assert reals == sorted(reals, reverse=True)


def test_eigenpair_normalization(level3_system):
    """Test Case 2.2: v^H M v = 1, largest entry real positive and xi^T M v = 1."""
    M, A = level3_system.M, level3_system.A
    for pair in discrete_eigs(level3_system, 2):
        v, xi = pair.right_vector, pair.left_vector
        assert np.vdot(v, M @ v).real == pytest.approx(1.0)
        k = np.argmax(np.abs(v))
        assert abs(v[k].imag) < 1e-12 and v[k].real > 0
        assert xi @ (M @ v) == pytest.approx(1.0)
        assert pair.residual < 1e-8
        np.testing.assert_allclose(A @ v, pair.value * (M @ v), atol=1e-9)
        np.testing.assert_allclose(A.T @ xi, pair.value * (M @ xi), atol=1e-9 * np.abs(xi).max())


def test_sparse_path_matches_dense(level3_system, monkeypatch):
    """Test Case 2.3: shift-invert Arnoldi agrees with the dense QZ path."""
    dense = [p.value for p in discrete_eigs(level3_system, 4)]
    monkeypatch.setattr(spectral, "DENSE_LIMIT", 10)
    sparse = [p.value for p in discrete_eigs(level3_system, 4)]

    np.testing.assert_allclose(sparse, dense, rtol=1e-9)


def test_nearest_requires_target(level3_system):
    """Test Case 2.4: which='nearest' needs a target; counts are bounded."""
    with pytest.raises(ValueError):
        discrete_eigs(level3_system, 2, which="nearest")
    with pytest.raises(ValueError):
        discrete_eigs(level3_system, 0)
    pairs = discrete_eigs(level3_system, 1, which="nearest", target=-16.0)
    values = [p.value for p in discrete_eigs(level3_system, 8)]
    assert pairs[0].value == pytest.approx(min(values, key=lambda v: abs(v + 16.0)))


def test_spectrum_is_conjugate_symmetric(params):
    """Test Case 2.5: the full level-2 spectrum is closed under conjugation."""
    mesh = build_unit_square_mesh(2)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    values = np.array([p.value for p in discrete_eigs(system, system.size)])

    assert values.size == system.size
    for value in values:
        gap = np.min(np.abs(values - np.conj(value)))
        assert gap <= 1e-10 * max(1.0, abs(value))


def test_decoupled_pencil_is_union_of_scalar_pencils():
    """Test Case 2.6: with eta1 = 0 the eigenvalues are those of the two diagonal blocks."""
    system = _decoupled_system(3)
    p = system.params
    mu = _laplacian_pencil_eigs(system)
    union = np.concatenate(
        [p.omega - p.nu0 - p.eta0 * mu, p.omega - p.nu0 - p.kappa - p.beta0 * mu]
    )
    want = np.sort(union)[::-1][:8]
    got = np.array([pair.value for pair in discrete_eigs(system, 8)])

    np.testing.assert_allclose(got.imag, 0.0, atol=1e-10)
    np.testing.assert_allclose(got.real, want, rtol=1e-9, atol=1e-9)


def test_large_residual_rejected(level3_system, monkeypatch):
    """Test Case 2.7: an eigenpair residual above 1e-8 is an eigensolver failure."""
    monkeypatch.setattr(spectral, "_relative_residual", lambda *args: 5e-8)
    with pytest.raises(EigenSolverError) as info:
        discrete_eigs(level3_system, 2)
    assert info.value.residual == pytest.approx(5e-8)


# ------------- 3. Unstable basis -----------------


def test_unstable_basis_reference(level3_system):
    """Test Case 3.1: two unstable eigenvalues, biorthonormal bases, Au reproduces them."""
    pairs = discrete_eigs(level3_system, 6)
    basis = unstable_basis(pairs)
    M, A = level3_system.M, level3_system.A

    assert basis.count == 2
    assert basis.widths == [2]
    np.testing.assert_allclose(basis.Xi.T @ (M @ basis.E), np.eye(2), atol=1e-10)
    Au = basis.Xi.T @ (A @ basis.E)
    got = np.sort_complex(np.linalg.eigvals(Au))
    want = np.sort_complex(np.array([pairs[0].value, pairs[1].value]))
    np.testing.assert_allclose(got, want, rtol=1e-9)
    # span(E) is invariant: A E = M E Au
    np.testing.assert_allclose(A @ basis.E, M @ basis.E @ Au, atol=1e-9)


def test_unstable_count_per_level(params):
    """Test Case 3.2: exactly two unstable eigenvalues on levels 2 to 4."""
    for level in (2, 3, 4):
        mesh = build_unit_square_mesh(level)
        system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
        assert unstable_basis(discrete_eigs(system, 6)).count == 2


def test_missing_conjugate_rejected(level3_system):
    """Test Case 3.3: an unstable complex eigenvalue without its partner is an error."""
    pairs = discrete_eigs(level3_system, 1)
    with pytest.raises(IncompletePairError):
        unstable_basis(pairs)


def test_no_unstable_eigenvalue_without_shift():
    """Test Case 3.4: with omega = 0 the basis is empty."""
    params = ModelParams.example().shifted(0.0)
    mesh = build_unit_square_mesh(2)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    basis = unstable_basis(discrete_eigs(system, 4))

    assert basis.count == 0
    assert basis.E.shape == (system.size, 0)


def test_single_real_unstable_eigenvalue():
    """Test Case 3.5: one real unstable eigenvalue gives a one-column real basis."""
    mu1 = _laplacian_pencil_eigs(_decoupled_system(3))[0]
    # z-block eigenvalue omega - 1 - 0.8 mu1 = 0.5, y-block omega - mu1 < 0
    system = _decoupled_system(3, omega=0.8 * mu1 + 1.5)
    basis = unstable_basis(discrete_eigs(system, 6))

    assert basis.count == 1
    assert basis.widths == [1]
    assert basis.E.shape == (system.size, 1)
    assert np.isrealobj(basis.E) and np.isrealobj(basis.Xi)
    assert basis.eigenvalues[0].real == pytest.approx(0.5, abs=1e-9)
    assert basis.eigenvalues[0].imag == 0.0
    np.testing.assert_allclose(basis.Xi.T @ (system.M @ basis.E), [[1.0]], atol=1e-10)


@pytest.mark.slow
@pytest.mark.parametrize("level", [5, 6])
def test_unstable_count_on_fine_meshes(params, level):
    """Test Case 3.6: the fine meshes still have exactly two unstable eigenvalues."""
    mesh = build_unit_square_mesh(level)
    system = assemble_block_system(mesh, params, ControlRegion.full(mesh))
    basis = unstable_basis(discrete_eigs(system, 6))

    assert basis.count == 2
    assert basis.widths == [2]


# ------------- 4. Hautus test -----------------


def test_hautus_reference(level3_system):
    """Test Case 4.1: full-domain control sees both unstable modes."""
    basis = unstable_basis(discrete_eigs(level3_system, 6))
    report = hautus_check(level3_system, basis)

    assert report
    assert len(report.ratios) == 1
    assert all(r >= 1e-3 for r in report.ratios)


def test_hautus_invisible_mode(level3_system):
    """Test Case 4.2: a left vector without y-component fails the test."""
    n = level3_system.n
    xi = np.concatenate([np.zeros(n), np.ones(n)])
    basis = UnstableBasis(np.eye(2 * n, 1), xi[:, None], 1, [1.0 + 0j], [1])
    report = hautus_check(level3_system, basis)

    assert not report
    assert report.ratios == (0.0,)


def test_hautus_empty_basis_warns(level3_system, caplog):
    """Test Case 4.3: an empty basis passes with a warning."""
    basis = UnstableBasis(np.zeros((level3_system.size, 0)), np.zeros((level3_system.size, 0)), 0)
    with caplog.at_level(logging.WARNING, logger="coupled_stabilization.spectral"):
        assert hautus_check(level3_system, basis)
    assert "empty unstable basis" in caplog.text


# ------------- 5. Convergence of eigenvalues -----------------


def test_eigenvalue_convergence_orders(params):
    """Test Case 5.1: eigenvalue errors decay with order close to 2."""
    table = eig_convergence_study(params, [2, 3, 4])

    assert [row.h for row in table.rows] == [0.25, 0.125, 0.0625]
    for label in ("11p", "11m", "12p"):
        errors = table.column(f"abs_error_{label}")
        assert errors[0] > errors[1] > errors[2] > 0
        assert table.order_column(f"abs_error_{label}")[0] is None
        assert 1.7 < table.order_column(f"abs_error_{label}")[-1] < 2.3


def test_single_level_has_no_order(params):
    """Test Case 5.2: one level gives errors only."""
    table = eig_convergence_study(params, [2])

    assert len(table.rows) == 1
    assert all(order is None for order in table.rows[0].orders.values())


# ------------- 6. Closed-loop eigenvalues -----------------


def test_closed_loop_sparse_path_matches_dense(level3_system, monkeypatch):
    """Test Case 6.1: shift-invert through the low-rank solver agrees with dense QZ."""
    basis = unstable_basis(discrete_eigs(level3_system, 6))
    ps = project_system(level3_system, basis)
    gain = feedback_gain(solve_projected_are(ps), ps, basis)
    op = ClosedLoopOperator.from_gain(level3_system, gain)
    sigma = spectral_abscissa_bound(level3_system) + 1.0

    dense = closed_loop_eigs(op, 4, sigma)
    monkeypatch.setattr(spectral, "DENSE_LIMIT", 50)
    sparse = closed_loop_eigs(op, 4, sigma)

    assert dense[0].real < 0
    assert dense[1] == pytest.approx(dense[0].conjugate())
    np.testing.assert_allclose(sparse, dense, rtol=1e-8)
