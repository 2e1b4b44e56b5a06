import numpy as np
import pytest

from lnareduce.exceptions import DomainError, ModelValidationError, StructuralError, TransformError
from lnareduce.lna import (
    LnaModel, TransformMatrices, assemble_lna, central_difference_gradient, sp_blocks, transform_to_sp,
)
from lnareduce.network import ReactionNetwork


def _fd_jacobian(fun, y, h=1e-6):
    y = np.asarray(y, dtype=float)
    cols = []
    for j in range(len(y)):
        step = h * max(1.0, abs(y[j]))
        up, down = y.copy(), y.copy()
        up[j] += step
        down[j] -= step
        cols.append((fun(up) - fun(down)) / (2 * step))
    return np.column_stack(cols)


def test_jacobian_matches_finite_differences(network):
    lna = LnaModel(network)
    y = np.array([30.0, 10.0, 5.0])
    fd = _fd_jacobian(lambda u: lna.drift(u, 0.0), y)
    np.testing.assert_allclose(lna.jacobian(y, 0.0), fd, rtol=1e-6, atol=1e-8)


def test_fast_rates_carry_inverse_epsilon(network):
    lna = LnaModel(network)
    y = np.array([30.0, 10.0, 5.0])
    a = lna.propensities(y, 0.0)
    expected = network.stoichiometry @ (a * np.array([1, 1, 20, 20, 1, 1]))
    np.testing.assert_allclose(lna.drift(y, 0.0), expected)


def test_diffusion_columns(network):
    lna = LnaModel(network)
    y = np.array([10.0, 5.0, 2.0])
    sigma = lna.diffusion(y, 0.0, epsilon=1.0)
    a = lna.propensities(y, 0.0)
    for i, r in enumerate(network.reactions):
        np.testing.assert_allclose(sigma[:, i], r.stoich * np.sqrt(a[i]))
    np.testing.assert_allclose(lna.diffusion_matrix(y, 0.0, 1.0), sigma @ sigma.T)


def test_negative_propensity_is_domain_error(network):
    lna = LnaModel(network)
    y = np.array([250.0, 0.0, 0.0])
    assert lna.raw_propensities(y, 0.0)[0] < 0
    with pytest.raises(DomainError) as info:
        lna.propensities(y, 0.0)
    assert info.value.reaction == "phosphorylation"


def test_roundoff_negative_propensity_is_clamped(network):
    y = np.array([200.0 + 1e-11, 0.0, 0.0])
    assert LnaModel(network).propensities(y, 0.0)[0] == 0.0


def test_central_difference_gradient():
    grad = central_difference_gradient(lambda y, t: y[0] ** 2 * y[1], np.array([3.0, 2.0]), 0.0)
    np.testing.assert_allclose(grad, [12.0, 9.0], rtol=1e-7)


def test_assemble_rejects_invalid_network(network):
    bad = ReactionNetwork(network.species_names, network.reactions, epsilon=0.0)
    with pytest.raises(ModelValidationError):
        assemble_lna(bad)


def test_transform_shape_mismatch():
    with pytest.raises(TransformError):
        TransformMatrices([[1, 0, 0], [0, 1, 0]], [[0, 0, 1], [1, 0, 0]])


def test_singular_transform(network):
    tm = TransformMatrices([[1, 1, 0], [0, 0, 1]], [[1, 1, 0]])
    with pytest.raises(TransformError) as info:
        transform_to_sp(LnaModel(network), tm, network)
    assert info.value.condition_number is None or info.value.condition_number > 1e12


def test_fast_reaction_must_not_move_slow_coordinates(network):
    tm = TransformMatrices([[1, 0, 0], [0, 0, 1]], [[0, 1, 0]])
    with pytest.raises(StructuralError) as info:
        transform_to_sp(LnaModel(network), tm, network)
    assert info.value.reaction == "binding"


def test_blocks_at_zero(sp):
    b = sp.blocks(np.zeros(2), np.zeros(1), 0.0, 0.0)
    np.testing.assert_allclose(b.f_x, [2.0, 0.0])
    np.testing.assert_allclose(b.f_z, [0.0])
    np.testing.assert_allclose(b.A1, [[-0.21, 0.0], [0.0, -0.1]])
    np.testing.assert_allclose(b.A2, [[0.2], [0.1]])
    np.testing.assert_allclose(b.B1, [[0.2, 0.0]])
    np.testing.assert_allclose(b.B2, [[-0.4]])
    np.testing.assert_allclose(b.sigma_x @ b.sigma_x.T, [[2.0, 0.0], [0.0, 0.0]])
    assert b.sigma_z.shape == (1, 6)
    assert np.all(b.sigma_z == 0.0)


def test_jacobian_blocks_match_finite_differences(sp):
    x, z, eps = np.array([60.0, 5.0]), np.array([20.0]), 0.05
    A1, A2, B1, B2 = sp.jacobian_blocks(x, z, 0.0, eps)
    fx = lambda u: sp.f_x(u[:2], u[2:], 0.0)
    fz = lambda u: sp.f_z(u[:2], u[2:], 0.0, eps)
    u = np.concatenate([x, z])
    np.testing.assert_allclose(np.hstack([A1, A2]), _fd_jacobian(fx, u), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(np.hstack([B1, B2]), _fd_jacobian(fz, u), rtol=1e-6, atol=1e-9)


def test_sigma_z_vanishes_at_zero_epsilon(sp):
    x, z = np.array([60.0, 5.0]), np.array([20.0])
    assert np.all(sp.sigma_z(x, z, 0.0, 0.0) == 0.0)
    fast = sp.sigma_z(x, z, 0.0, 1e-6)
    S = fast @ fast.T / 1e-6
    a = sp.lna.propensities(sp.to_original(x, z), 0.0)
    assert S[0, 0] == pytest.approx(a[2] + a[3], rel=1e-9)


def test_coordinates_round_trip(sp):
    y = np.array([40.0, 20.0, 5.0])
    x, z = sp.from_original(y)
    np.testing.assert_allclose(x, [60.0, 5.0])
    np.testing.assert_allclose(z, [20.0])
    np.testing.assert_allclose(sp.to_original(x, z), y)


def test_with_epsilon(sp):
    other = sp.with_epsilon(0.01)
    assert other.epsilon == 0.01
    x, z = np.array([60.0, 5.0]), np.array([20.0])
    np.testing.assert_allclose(other.f_x(x, z, 0.0), sp.f_x(x, z, 0.0))


def _random_states(params, count, seed):
    """(x, z) = ((v, g), (c,)) with 0 <= c <= min(v, p_tot) and v <= X_tot."""
    rng = np.random.default_rng(seed)
    states = []
    for _ in range(count):
        v = rng.uniform(0.0, params.X_tot)
        c = rng.uniform(0.0, min(v, params.p_tot))
        states.append((np.array([v, rng.uniform(0.0, 50.0)]), np.array([c])))
    return states


def test_slow_and_fast_drift_match_rate_equations(sp, params):
    p = params
    k2Y = p.k2 * p.Y
    for x, z in _random_states(p, 10, 5):
        v, g = x
        c = z[0]
        np.testing.assert_allclose(
            sp.f_x(x, z, 0.0), [p.k1 * p.Z(0.0) * (p.X_tot - v) - k2Y * (v - c), p.beta * c - p.delta * g],
            rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(
            sp.f_z(x, z, 0.0), [(k2Y / p.kd) * (v - c) * (p.p_tot - c) - k2Y * c], rtol=1e-10, atol=1e-12)


def test_sigma_z_scaling_in_epsilon(sp):
    x, z = np.array([60.0, 5.0]), np.array([20.0])
    m_s = sp.m_s
    ref = sp.sigma_z(x, z, 0.0, 1e-1)
    for eps in (1e-2, 1e-3):
        sig = sp.sigma_z(x, z, 0.0, eps)
        np.testing.assert_allclose(sig[:, :m_s] / eps, ref[:, :m_s] / 1e-1, rtol=1e-10, atol=0.0)
        np.testing.assert_allclose(sig[:, m_s:] / np.sqrt(eps), ref[:, m_s:] / np.sqrt(1e-1), rtol=1e-10, atol=0.0)


def test_slow_diffusion_is_positive_semidefinite(sp, params):
    for x, z in _random_states(params, 10, 6):
        sig = sp.sigma_x(x, z, 0.0)
        assert np.linalg.eigvalsh(sig @ sig.T).min() >= -1e-12


def test_jacobian_blocks_match_finite_differences_at_random_points(sp, params):
    eps = 0.05
    for x, z in _random_states(params, 10, 7):
        A1, A2, B1, B2 = sp.jacobian_blocks(x, z, 0.0, eps)
        u = np.concatenate([x, z])
        fx = lambda w: sp.f_x(w[:2], w[2:], 0.0)
        fz = lambda w: sp.f_z(w[:2], w[2:], 0.0, eps)
        np.testing.assert_allclose(np.hstack([A1, A2]), _fd_jacobian(fx, u), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(np.hstack([B1, B2]), _fd_jacobian(fz, u), rtol=1e-6, atol=1e-8)


def test_sp_blocks_agree_with_separate_evaluators(sp):
    x, z, eps = np.array([60.0, 5.0]), np.array([20.0]), 0.05
    b = sp_blocks(sp, x, z, 0.0, eps)
    for got, want in zip((b.A1, b.A2, b.B1, b.B2), sp.jacobian_blocks(x, z, 0.0, eps)):
        np.testing.assert_allclose(got, want, rtol=1e-14)
    np.testing.assert_allclose(b.f_x, sp.f_x(x, z, 0.0), rtol=1e-14)
    np.testing.assert_allclose(b.f_z, sp.f_z(x, z, 0.0, eps), rtol=1e-14)
    np.testing.assert_allclose(b.sigma_x, sp.sigma_x(x, z, 0.0), rtol=1e-14)
    np.testing.assert_allclose(b.sigma_z, sp.sigma_z(x, z, 0.0, eps), rtol=1e-14)
