import numpy as np
import pytest

from lnareduce.exceptions import StiffnessError
from lnareduce.moments import (
    DeterministicPath, MomentTrajectory, OriginalMomentState, OriginalMomentSystem,
    ReducedMomentState, ReducedMomentSystem, check_moment_invariants, integrate,
    original_layout, original_moment_rhs, original_path, qss_consistency_residual, reduced_layout,
    reduced_moment_rhs, reduced_path,
)

OU_EXACT = 1.0 - np.exp(-2.0)


def ou_rhs(t, y):
    return np.array([-y[0], -2.0 * y[1] + 2.0])


def test_ou_second_moment_oracle():
    traj = integrate(ou_rhs, [0.0, 0.0], (0.0, 1.0))
    assert traj.states[-1, 1] == pytest.approx(OU_EXACT, abs=1e-8)
    assert traj.states[-1, 0] == 0.0


def test_tighter_tolerance_reduces_error():
    errors = [abs(integrate(ou_rhs, [0.0, 0.0], (0.0, 1.0), rtol=r, atol=r * 1e-2).states[-1, 1] - OU_EXACT)
              for r in (1e-3, 1e-5, 1e-7)]
    assert errors[0] >= errors[1] >= errors[2]


def test_output_times_are_hit_exactly():
    t_eval = np.linspace(0.0, 2.0, 9)
    traj = integrate(ou_rhs, [1.0, 0.0], (0.0, 2.0), t_eval=t_eval)
    np.testing.assert_array_equal(traj.times, t_eval)
    np.testing.assert_allclose(traj.states[:, 0], np.exp(-t_eval), rtol=1e-7)


def test_zero_rhs_is_constant():
    traj = integrate(lambda t, y: np.zeros_like(y), [1.0, -2.0, 3.0], (0.0, 10.0), t_eval=[0.0, 5.0, 10.0])
    np.testing.assert_array_equal(traj.states, np.tile([1.0, -2.0, 3.0], (3, 1)))


def test_step_underflow_is_stiffness_error():
    with pytest.raises(StiffnessError):
        integrate(lambda t, y: -1e20 * y, [1.0], (0.0, 1.0))


@pytest.mark.parametrize("rtol, atol", [(0.0, 1e-10), (1e-8, -1.0)])
def test_tolerances_must_be_positive(rtol, atol):
    with pytest.raises(ValueError):
        integrate(ou_rhs, [0.0, 0.0], (0.0, 1.0), rtol=rtol, atol=atol)


def _zero_original_state():
    return OriginalMomentState.deterministic(np.zeros(2), np.zeros(1), np.zeros(2), np.zeros(1))


def test_original_rhs_at_zero(sp):
    d = original_moment_rhs(sp, _zero_original_state(), 0.0)
    np.testing.assert_allclose(d.x, [2.0, 0.0])
    np.testing.assert_allclose(d.z, [0.0])
    np.testing.assert_allclose(d.m_x, [0.0, 0.0])
    np.testing.assert_allclose(d.M_xx, [[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(d.M_zz, [[0.0]])


def test_reduced_rhs_at_zero(reduced):
    d = reduced_moment_rhs(reduced, ReducedMomentState.deterministic(np.zeros(2), np.zeros(2)), 0.0)
    np.testing.assert_allclose(d.xbar, [2.0, 0.0])
    np.testing.assert_allclose(d.m_x, [0.0, 0.0])
    np.testing.assert_allclose(d.M_xx, [[2.0, 0.0], [0.0, 0.0]])


def test_first_moments_are_linear(sp):
    s = OriginalMomentState(np.array([60.0, 5.0]), np.array([20.0]), np.array([1.0, 2.0]),
                            np.zeros((2, 2)), np.array([0.5]), np.zeros((1, 2)), np.zeros((1, 1)))
    scaled = OriginalMomentState(s.x, s.z, 3.0 * s.m_x, s.M_xx, 3.0 * s.m_z, s.M_zx, s.M_zz)
    d1, d3 = original_moment_rhs(sp, s, 0.0), original_moment_rhs(sp, scaled, 0.0)
    np.testing.assert_allclose(d3.m_x, 3.0 * d1.m_x, rtol=1e-12)
    np.testing.assert_allclose(d3.m_z, 3.0 * d1.m_z, rtol=1e-12)


def test_qss_consistency_at_random_points(sp, reduced):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = np.array([rng.uniform(0.0, 200.0), rng.uniform(0.0, 50.0)])
        m = rng.normal(size=2)
        L = rng.normal(size=(2, 2))
        M = L @ L.T + np.outer(m, m)
        assert qss_consistency_residual(sp, reduced, x, rng.uniform(0.0, 50.0), m, M)["max"] < 1e-9


def test_qss_consistency_with_zero_moments(sp, reduced):
    res = qss_consistency_residual(sp, reduced, np.array([80.0, 4.0]), 0.0, np.zeros(2), np.zeros((2, 2)))
    assert res["max"] < 1e-12


def test_qss_residual_is_linear_in_cross_moment_offset(sp, reduced):
    args = (sp, reduced, np.array([80.0, 4.0]), 0.0, np.zeros(2), np.eye(2))
    delta = np.array([[0.1, 0.2]])
    r1 = qss_consistency_residual(*args, M_zx_offset=delta)["max"]
    r2 = qss_consistency_residual(*args, M_zx_offset=2.0 * delta)["max"]
    assert r1 > 1e-3
    assert r2 == pytest.approx(2.0 * r1, rel=1e-6)


def test_original_moments_stay_symmetric_psd(sp, reduced):
    psi_x0 = np.array([1.0, 1.0])
    psi_z0 = reduced.gamma2(np.zeros(2), 0.0) @ psi_x0
    state = OriginalMomentState.deterministic(np.zeros(2), np.zeros(1), psi_x0, psi_z0)
    traj = OriginalMomentSystem(sp).integrate(state, (0.0, 5.0), np.linspace(0.0, 5.0, 11))
    assert check_moment_invariants(traj) == []
    assert np.all(np.diff(traj.block("x")[:, 0]) > 0)


def test_reduced_moments_and_columns(sp, reduced):
    state = ReducedMomentState.deterministic(np.zeros(2), np.zeros(2))
    traj = ReducedMomentSystem(reduced).integrate(state, (0.0, 5.0), np.linspace(0.0, 5.0, 6))
    assert check_moment_invariants(traj) == []
    frame = traj.to_frame(sp.slow_names)
    assert list(frame.columns) == ["t", "v", "g", "m[0]", "m[1]", "M[0][0]", "M[0][1]", "M[1][1]"]
    assert len(frame) == 6
    np.testing.assert_allclose(traj.slow_covariance()[-1], traj.block("M_xx")[-1])


def test_original_columns(sp):
    traj = MomentTrajectory([0.0], _zero_original_state().to_vector()[None, :],
                            OriginalMomentSystem(sp).layout)
    assert list(traj.to_frame(sp.slow_names, sp.fast_names).columns) == [
        "t", "v", "g", "c", "m[0]", "m[1]", "M[0][0]", "M[0][1]", "M[1][1]",
        "m_z[0]", "M_zx[0][0]", "M_zx[0][1]", "M_zz[0][0]",
    ]


def test_invariant_checker_flags_asymmetry():
    layout = reduced_layout(2)
    state = layout.pack({"xbar": [0, 0], "m_x": [0, 0], "M_xx": [[1.0, 0.5], [0.0, 1.0]]})
    traj = MomentTrajectory([0.0], state[None, :], layout)
    assert any("not symmetric" in v for v in check_moment_invariants(traj))


def test_deterministic_path_interpolates_linearly():
    path = DeterministicPath([0.0, 1.0], [[0.0], [2.0]], [[0.0], [4.0]])
    x, z = path.at(0.25)
    np.testing.assert_allclose(x, [0.5])
    np.testing.assert_allclose(z, [1.0])


def test_original_path_approaches_reduced_path(sp, reduced):
    grid = np.linspace(0.0, 10.0, 11)
    full = original_path(sp, np.zeros(2), np.zeros(1), (0.0, 10.0), grid, epsilon=0.01)
    slow = reduced_path(reduced, np.zeros(2), (0.0, 10.0), grid)
    gap = np.max(np.abs(full.x - slow.x))
    assert 0.0 < gap < 0.1 * np.max(np.abs(slow.x))


@pytest.mark.slow
def test_slow_moments_self_converge_in_epsilon(sp, reduced):
    grid = np.linspace(0.0, 50.0, 201)
    psi_x0 = np.array([1.0, 1.0])
    psi_z0 = reduced.gamma2(np.zeros(2), 0.0) @ psi_x0
    state = OriginalMomentState.deterministic(np.zeros(2), np.zeros(1), psi_x0, psi_z0)
    M = [OriginalMomentSystem(sp.with_epsilon(e)).integrate(state, (0.0, 50.0), grid).block("M_xx")
         for e in (0.04, 0.02, 0.01)]
    d1 = np.max(np.linalg.norm(M[0] - M[1], axis=(1, 2)))
    d2 = np.max(np.linalg.norm(M[1] - M[2], axis=(1, 2)))
    assert 1.5 <= d1 / d2 <= 2.5


def test_states_unpack_what_they_pack():
    s = OriginalMomentState(np.array([60.0, 5.0]), np.array([20.0]), np.array([1.0, 2.0]),
                            np.array([[3.0, 0.5], [0.5, 4.0]]), np.array([-1.0]),
                            np.array([[0.25, -0.75]]), np.array([[2.0]]))
    back = OriginalMomentState.from_vector(s.to_vector(), 2, 1)
    for name in ("x", "z", "m_x", "M_xx", "m_z", "M_zx", "M_zz"):
        np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
    r = ReducedMomentState.from_vector(np.arange(8.0), 2)
    np.testing.assert_array_equal(r.xbar, [0.0, 1.0])
    np.testing.assert_array_equal(r.M_xx, [[4.0, 5.0], [6.0, 7.0]])
    assert original_layout(2, 1) is original_layout(2, 1)
    assert original_layout(2, 1).size == len(s.to_vector()) == 2 + 1 + 2 + 4 + 1 + 2 + 1
