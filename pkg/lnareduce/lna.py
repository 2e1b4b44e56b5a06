"""
Linear Noise Approximation of a reaction network and its singularly
perturbed form under a linear change of coordinates x = A_x y, z = A_z y.

Drift and Jacobians use raw propensity values (they are polynomials and
stay meaningful slightly outside the physical domain, which finite
differences and Newton iterates need).  Noise columns take square roots and
therefore go through the checked path: values in [-1e-12, 0) are clamped to
zero, anything more negative is a DomainError.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import DomainError, ModelValidationError, StructuralError, TransformError
from .network import validate_network

LOGGER = logging.getLogger(__name__)

NEGATIVE_PROPENSITY_TOL = 1e-12
MAX_CONDITION = 1e12
FD_STEP = np.sqrt(np.finfo(float).eps)


def central_difference_gradient(fun, y, t):
    """Gradient of a scalar function of y by central differences, h = sqrt(eps_mach) * max(1, |y_j|)."""
    y = np.asarray(y, dtype=float)
    grad = np.empty(len(y))
    for j in range(len(y)):
        h = FD_STEP * max(1.0, abs(y[j]))
        up, down = y.copy(), y.copy()
        up[j] += h
        down[j] -= h
        grad[j] = (fun(up, t) - fun(down, t)) / (2.0 * h)
    return grad


class LnaModel:
    """
    Drift f(y,t) = sum_i v_i a_i, Jacobian A = df/dy and noise matrix
    sigma = [v_i sqrt(a_i)] of the LNA.  Fast rates carry 1/epsilon here;
    epsilon defaults to the network's value and may be overridden per call.
    """

    def __init__(self, net):
        self.net = net
        self.stoichiometry = net.stoichiometry
        self.fast_mask = np.array([r.is_fast for r in net.reactions], dtype=bool)

    @property
    def epsilon(self):
        return self.net.epsilon

    def rate_scaling(self, epsilon=None):
        eps = self.epsilon if epsilon is None else float(epsilon)
        return np.where(self.fast_mask, 1.0 / eps, 1.0)

    def raw_propensities(self, y, t):
        """Unscaled rates a_s, a_f without sign checks."""
        y = np.asarray(y, dtype=float)
        return np.array([r.propensity(y, t) for r in self.net.reactions], dtype=float)

    def propensities(self, y, t):
        """Unscaled rates with roundoff negatives clamped to zero; DomainError below -1e-12."""
        a = self.raw_propensities(y, t)
        negative = a < 0
        if np.any(negative):
            worst = int(np.argmin(a))
            if a[worst] < -NEGATIVE_PROPENSITY_TOL:
                raise DomainError(self.net.reactions[worst].name, a[worst], y, t)
            LOGGER.debug("clamping %d roundoff-negative propensities at t=%s", negative.sum(), t)
            a = np.where(negative, 0.0, a)
        return a

    def propensity_gradients(self, y, t):
        """m x n matrix of unscaled rate gradients; finite differences where no analytic form exists."""
        y = np.asarray(y, dtype=float)
        rows = []
        for r in self.net.reactions:
            if r.gradient is not None:
                rows.append(np.asarray(r.gradient(y, t), dtype=float))
            else:
                rows.append(central_difference_gradient(r.propensity, y, t))
        return np.vstack(rows)

    def drift(self, y, t, epsilon=None):
        return self.stoichiometry @ (self.rate_scaling(epsilon) * self.raw_propensities(y, t))

    def jacobian(self, y, t, epsilon=None):
        scaled = self.rate_scaling(epsilon)[:, None] * self.propensity_gradients(y, t)
        return self.stoichiometry @ scaled

    def diffusion(self, y, t, epsilon=None):
        """n x m noise matrix; column i is v_i sqrt(a_i)."""
        rates = self.rate_scaling(epsilon) * self.propensities(y, t)
        return self.stoichiometry * np.sqrt(rates)[None, :]

    def diffusion_matrix(self, y, t, epsilon=None):
        sigma = self.diffusion(y, t, epsilon)
        return sigma @ sigma.T


def assemble_lna(net):
    """Builds the LNA evaluators of a well-formed network."""
    report = validate_network(net)
    if not report.ok:
        raise ModelValidationError("; ".join(report.violations))
    return LnaModel(net)


@dataclass(frozen=True)
class TransformMatrices:
    A_x: np.ndarray
    A_z: np.ndarray
    slow_names: Optional[Tuple[str, ...]] = None
    fast_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        A_x = np.atleast_2d(np.array(self.A_x, dtype=float))
        A_z = np.atleast_2d(np.array(self.A_z, dtype=float))
        if A_x.shape[1] != A_z.shape[1]:
            raise TransformError(f"A_x has {A_x.shape[1]} columns but A_z has {A_z.shape[1]}")
        if A_x.shape[0] + A_z.shape[0] != A_x.shape[1]:
            raise TransformError(
                f"n_s + n_f = {A_x.shape[0] + A_z.shape[0]} does not match n = {A_x.shape[1]}"
            )
        A_x.setflags(write=False)
        A_z.setflags(write=False)
        object.__setattr__(self, "A_x", A_x)
        object.__setattr__(self, "A_z", A_z)
        slow = self.slow_names or tuple(f"x{i}" for i in range(A_x.shape[0]))
        fast = self.fast_names or tuple(f"z{i}" for i in range(A_z.shape[0]))
        object.__setattr__(self, "slow_names", tuple(slow))
        object.__setattr__(self, "fast_names", tuple(fast))

    @property
    def n_s(self):
        return self.A_x.shape[0]

    @property
    def n_f(self):
        return self.A_z.shape[0]

    @property
    def A(self):
        return np.vstack([self.A_x, self.A_z])

    @property
    def condition_number(self):
        return float(np.linalg.cond(self.A))


@dataclass
class BlockEval:
    f_x: np.ndarray
    f_z: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    sigma_x: np.ndarray
    sigma_z: np.ndarray


class SingularPerturbedLNA:
    """
    The LNA in slow/fast coordinates:

        x' = f_x(x,z,t),           psi_x' = A1 psi_x + A2 psi_z + sigma_x G_x
        eps z' = f_z(x,z,t,eps),   eps psi_z' = B1 psi_x + B2 psi_z + sigma_z G_z

    with G_z = [G_x, G_f].  Build it through ``transform_to_sp``.
    """

    def __init__(self, lna, tm, net):
        self.lna = lna
        self.tm = tm
        self.net = net
        self.epsilon = float(net.epsilon)
        self.A_inv = np.linalg.inv(tm.A)
        self.slow = np.array(net.slow_indices, dtype=int)
        self.fast = np.array(net.fast_indices, dtype=int)
        S = net.stoichiometry
        self._x_slow = tm.A_x @ S[:, self.slow]
        self._z_slow = tm.A_z @ S[:, self.slow]
        self._z_fast = tm.A_z @ S[:, self.fast]

    @property
    def n_s(self):
        return self.tm.n_s

    @property
    def n_f(self):
        return self.tm.n_f

    @property
    def m_s(self):
        return len(self.slow)

    @property
    def m_f(self):
        return len(self.fast)

    @property
    def slow_names(self):
        return self.tm.slow_names

    @property
    def fast_names(self):
        return self.tm.fast_names

    def _eps(self, epsilon):
        return self.epsilon if epsilon is None else float(epsilon)

    def to_original(self, x, z):
        return self.A_inv @ np.concatenate([np.atleast_1d(x), np.atleast_1d(z)]).astype(float)

    def from_original(self, y):
        y = np.asarray(y, dtype=float)
        return self.tm.A_x @ y, self.tm.A_z @ y

    def f_x(self, x, z, t):
        a = self.lna.raw_propensities(self.to_original(x, z), t)
        return self._x_slow @ a[self.slow]

    def f_z(self, x, z, t, epsilon=None):
        a = self.lna.raw_propensities(self.to_original(x, z), t)
        return self._eps(epsilon) * (self._z_slow @ a[self.slow]) + self._z_fast @ a[self.fast]

    def jacobian_blocks(self, x, z, t, epsilon=None):
        """(A1, A2, B1, B2) by the chain rule through y = A^-1 [x; z]."""
        G = self.lna.propensity_gradients(self.to_original(x, z), t)
        return self._split_jacobians(G, self._eps(epsilon))

    def _split_jacobians(self, G, eps):
        n_s = self.n_s
        J_x = self._x_slow @ G[self.slow] @ self.A_inv
        J_z = (eps * (self._z_slow @ G[self.slow]) + self._z_fast @ G[self.fast]) @ self.A_inv
        return J_x[:, :n_s], J_x[:, n_s:], J_z[:, :n_s], J_z[:, n_s:]

    def B2(self, x, z, t, epsilon=None):
        return self.jacobian_blocks(x, z, t, epsilon)[3]

    def sigma_x(self, x, z, t):
        a = self.lna.propensities(self.to_original(x, z), t)
        return self._x_slow * np.sqrt(a[self.slow])[None, :]

    def sigma_z(self, x, z, t, epsilon=None):
        a = self.lna.propensities(self.to_original(x, z), t)
        return self._sigma_z(a, self._eps(epsilon))

    def _sigma_z(self, a, eps):
        slow_cols = eps * self._z_slow * np.sqrt(a[self.slow])[None, :]
        fast_cols = np.sqrt(eps) * self._z_fast * np.sqrt(a[self.fast])[None, :]
        return np.hstack([slow_cols, fast_cols])

    def blocks(self, x, z, t, epsilon=None):
        eps = self._eps(epsilon)
        y = self.to_original(x, z)
        raw = self.lna.raw_propensities(y, t)
        a = self.lna.propensities(y, t)
        A1, A2, B1, B2 = self._split_jacobians(self.lna.propensity_gradients(y, t), eps)
        return BlockEval(
            f_x=self._x_slow @ raw[self.slow],
            f_z=eps * (self._z_slow @ raw[self.slow]) + self._z_fast @ raw[self.fast],
            A1=A1, A2=A2, B1=B1, B2=B2,
            sigma_x=self._x_slow * np.sqrt(a[self.slow])[None, :],
            sigma_z=self._sigma_z(a, eps),
        )

    def with_epsilon(self, epsilon):
        """Same transformed model at another timescale ratio."""
        net = self.net.with_epsilon(epsilon)
        return SingularPerturbedLNA(LnaModel(net), self.tm, net)


def transform_to_sp(lna, tm, net):
    """
    Applies the linear change of coordinates to the LNA.

    Raises TransformError when [A_x; A_z] is numerically singular and
    StructuralError when a fast reaction moves the slow coordinates
    (A_x v_i != 0), since then f_x would carry a 1/epsilon term.
    """
    if tm.A.shape[1] != net.n_species:
        raise TransformError(f"transform acts on {tm.A.shape[1]} species, network has {net.n_species}")
    cond = tm.condition_number
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise TransformError("stacked transform [A_x; A_z] is not invertible", condition_number=cond)
    for r in net.reactions:
        if not r.is_fast:
            continue
        leak = tm.A_x @ r.stoich
        if np.max(np.abs(leak)) > 1e-12 * max(1.0, np.max(np.abs(tm.A_x))) * max(1.0, np.max(np.abs(r.stoich))):
            raise StructuralError(r.name, f"fast reaction changes slow coordinates: A_x v = {leak.tolist()}")
    LOGGER.info("transformed '%s' into %d slow / %d fast coordinates (cond %.3g)",
                net.name, tm.n_s, tm.n_f, cond)
    return SingularPerturbedLNA(lna, tm, net)


def sp_blocks(sp, x, z, t, epsilon=None):
    """All eight blocks of the singularly perturbed LNA at one point."""
    return sp.blocks(x, z, t, epsilon)
