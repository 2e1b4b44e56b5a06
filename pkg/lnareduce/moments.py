"""
First and second moment dynamics of the original (slow + fast) and reduced
LNA fluctuations, deterministic paths, and the adaptive Dormand-Prince 5(4)
integrator that drives them.

The original system carries 1/eps and 1/eps^2 terms; it is integrated with
the same explicit pair using small steps.  That is adequate for eps >= 1e-3
and is the first thing to replace with an implicit method for eps < 1e-4.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd

from .exceptions import StiffnessError
from .lna import sp_blocks

LOGGER = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9


# Dormand-Prince 5(4) ------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
# difference between the 5th and embedded 4th order weights
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

SAFETY = 0.9
FAC_MIN = 0.2
FAC_MAX = 5.0
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5


def _dp_step(rhs, t, y, h, k1):
    K = np.empty((7, y.size))
    K[0] = k1
    for s in range(1, 7):
        y_stage = y + h * (_DP_A[s] @ K[:s])
        K[s] = rhs(t + _DP_C[s] * h, y_stage)
    # stage 7 is evaluated at the new solution (FSAL)
    return y_stage, h * (_DP_E @ K), K[6]


def _initial_step(rhs, t0, y0, f0, rtol, atol, span):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


class MomentTrajectory:
    """
    States of an integration at the requested output times.

    ``layout`` (optional) names the blocks of the flat state vector; without
    it the trajectory is a plain (times, states) pair.
    """

    def __init__(self, times, states, layout=None, stats=None):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.layout = layout
        self.stats = stats or {}

    def __len__(self):
        return len(self.times)

    def block(self, name):
        sl, shape = self.layout.slices[name]
        return self.states[:, sl].reshape((len(self.times),) + shape)

    def slow(self):
        """(x, E[psi_x], E[psi_x psi_x^T]) over time, for either system."""
        return self.block(self.layout.state_block), self.block("m_x"), self.block("M_xx")

    def slow_covariance(self):
        _, m, M = self.slow()
        return M - np.einsum("ki,kj->kij", m, m)

    def at_times(self, t_grid, tol=1e-9):
        """Row indices of t_grid in this trajectory; None if some time is missing."""
        t_grid = np.asarray(t_grid, dtype=float)
        idx = np.searchsorted(self.times, t_grid - tol * (1.0 + np.abs(t_grid)))
        idx = np.clip(idx, 0, len(self.times) - 1)
        if not np.allclose(self.times[idx], t_grid, rtol=0.0, atol=tol * (1.0 + np.max(np.abs(t_grid), initial=0.0))):
            return None
        return idx

    def to_frame(self, slow_names, fast_names=()):
        columns = self.layout.column_names(slow_names, fast_names)
        frame = pd.DataFrame(self.layout.flat_columns(self.states), columns=columns[1:])
        frame.insert(0, "t", self.times)
        return frame


def integrate(rhs, state0, t_span, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, t_eval=None,
              post_step=None, max_steps=10_000_000, layout=None):
    """
    Adaptive Dormand-Prince 5(4) with PI step-size control.

    Inputs:
    rhs       : callable(t, y) -> dy/dt on flat arrays
    state0    : initial flat state
    t_span    : (t0, t1)
    rtol/atol : per-component error bound atol + rtol |y| on every accepted step
    t_eval    : output times inside t_span; steps are shortened to land on them
    post_step : optional callable(y) -> y applied after each accepted step

    Outputs:
    MomentTrajectory with one row per output time

    Raises StiffnessError when the step size underflows 1e-14 * span.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("rtol and atol must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError(f"empty time span {t_span}")
    span = t1 - t0
    t_eval = np.array([t0, t1]) if t_eval is None else np.sort(np.asarray(t_eval, dtype=float))
    if len(t_eval) and (t_eval[0] < t0 - 1e-12 * span or t_eval[-1] > t1 + 1e-12 * span):
        raise ValueError("t_eval must lie inside t_span")
    h_min = 1e-14 * span

    y = np.array(state0, dtype=float)
    out = np.empty((len(t_eval), y.size))
    k = 0
    while k < len(t_eval) and t_eval[k] <= t0 + h_min:
        out[k] = y
        k += 1
    f = rhs(t0, y)
    h = _initial_step(rhs, t0, y, f, rtol, atol, span)
    t = t0
    err_prev = 1e-4
    accepted = rejected = 0
    just_rejected = False
    while k < len(t_eval):
        target = t_eval[k]
        if target - t <= h_min:
            out[k] = y
            k += 1
            continue
        clipped = h >= target - t
        h_use = target - t if clipped else h
        if h_use < h_min:
            raise StiffnessError(
                f"step size {h_use:.3e} underflowed at t={t:.6g}; the fast subsystem is too stiff "
                "for the explicit pair: increase epsilon or loosen rtol"
            )
        y_new, err_vec, f_new = _dp_step(rhs, t, y, h_use, f)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale)) if y.size else 0.0
        if not np.isfinite(err):
            err = np.inf
        if err <= 1.0:
            t = target if clipped else t + h_use
            y, f = y_new, f_new
            if post_step is not None:
                fixed = post_step(y)
                if not np.array_equal(fixed, y):
                    y = fixed
                    f = rhs(t, y)
            accepted += 1
            if err == 0.0:
                fac = FAC_MAX
            else:
                fac = min(FAC_MAX, max(FAC_MIN, SAFETY * err ** -PI_ALPHA * err_prev ** PI_BETA))
            if just_rejected:
                fac = min(fac, 1.0)
            h = max(h_use * fac, h) if clipped else h_use * fac
            err_prev = max(err, 1e-4)
            just_rejected = False
            while k < len(t_eval) and t_eval[k] <= t + h_min:
                out[k] = y
                k += 1
        else:
            rejected += 1
            just_rejected = True
            h = h_use * (FAC_MIN if err == np.inf else max(FAC_MIN, SAFETY * err ** -0.2))
        if accepted + rejected > max_steps:
            raise StiffnessError(f"more than {max_steps} steps before t={t1}; the system is too stiff")
    LOGGER.info("integrated [%g, %g]: %d accepted, %d rejected steps", t0, t1, accepted, rejected)
    return MomentTrajectory(t_eval, out, layout, {"accepted": accepted, "rejected": rejected})


# State layouts ------------------------------------------------------------

class MomentLayout:
    """Names, shapes and symmetry of the blocks packed into one flat vector."""

    def __init__(self, blocks, state_block):
        self.blocks = blocks
        self.state_block = state_block
        self.slices = {}
        offset = 0
        for name, shape, _ in blocks:
            size = int(np.prod(shape))
            self.slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset
        self.symmetric = [name for name, _, sym in blocks if sym]

    def pack(self, values):
        vec = np.empty(self.size)
        for name, shape, _ in self.blocks:
            vec[self.slices[name][0]] = np.asarray(values[name], dtype=float).reshape(-1)
        return vec

    def unpack(self, vec):
        return {name: vec[sl].reshape(shape) for name, (sl, shape) in self.slices.items()}

    def symmetrize(self, vec):
        vec = vec.copy()
        for name in self.symmetric:
            sl, shape = self.slices[name]
            M = vec[sl].reshape(shape)
            vec[sl] = (0.5 * (M + M.T)).reshape(-1)
        return vec

    def _column_index(self):
        cols = []
        for name, shape, sym in self.blocks:
            sl, _ = self.slices[name]
            if len(shape) == 1:
                cols.extend((name, (i,), sl.start + i) for i in range(shape[0]))
            else:
                for i in range(shape[0]):
                    for j in range(shape[1]):
                        if sym and j < i:
                            continue
                        cols.append((name, (i, j), sl.start + i * shape[1] + j))
        return cols

    def column_names(self, slow_names, fast_names=()):
        state_names = {"x": list(slow_names), "xbar": list(slow_names), "z": list(fast_names)}
        labels = {"m_x": "m", "M_xx": "M"}
        names = ["t"]
        for name, idx, _ in self._column_index():
            if name in state_names:
                names.append(state_names[name][idx[0]])
            else:
                label = labels.get(name, name)
                names.append(label + "".join(f"[{i}]" for i in idx))
        return names

    def flat_columns(self, states):
        return states[:, [pos for _, _, pos in self._column_index()]]


@lru_cache(maxsize=None)
def original_layout(n_s, n_f):
    return MomentLayout([
        ("x", (n_s,), False), ("z", (n_f,), False),
        ("m_x", (n_s,), False), ("M_xx", (n_s, n_s), True),
        ("m_z", (n_f,), False), ("M_zx", (n_f, n_s), False), ("M_zz", (n_f, n_f), True),
    ], state_block="x")


@lru_cache(maxsize=None)
def reduced_layout(n_s):
    return MomentLayout([
        ("xbar", (n_s,), False), ("m_x", (n_s,), False), ("M_xx", (n_s, n_s), True),
    ], state_block="xbar")


@dataclass
class OriginalMomentState:
    x: np.ndarray
    z: np.ndarray
    m_x: np.ndarray
    M_xx: np.ndarray
    m_z: np.ndarray
    M_zx: np.ndarray
    M_zz: np.ndarray

    @classmethod
    def deterministic(cls, x0, z0, psi_x0, psi_z0):
        """Initial moments of a known fluctuation: M = m m^T."""
        px = np.asarray(psi_x0, dtype=float)
        pz = np.asarray(psi_z0, dtype=float)
        return cls(np.asarray(x0, float), np.asarray(z0, float), px, np.outer(px, px),
                   pz, np.outer(pz, px), np.outer(pz, pz))

    def to_vector(self):
        layout = original_layout(len(self.x), len(self.z))
        return layout.pack(self.__dict__)

    @classmethod
    def from_vector(cls, vec, n_s, n_f):
        return cls(**original_layout(n_s, n_f).unpack(vec))


@dataclass
class ReducedMomentState:
    xbar: np.ndarray
    m_x: np.ndarray
    M_xx: np.ndarray

    @classmethod
    def deterministic(cls, x0, psi_x0):
        px = np.asarray(psi_x0, dtype=float)
        return cls(np.asarray(x0, float), px, np.outer(px, px))

    def to_vector(self):
        return reduced_layout(len(self.xbar)).pack(self.__dict__)

    @classmethod
    def from_vector(cls, vec, n_s):
        return cls(**reduced_layout(n_s).unpack(vec))


def original_moment_rhs(sp, s, t, epsilon=None):
    """
    Time derivative of every field of an OriginalMomentState, with the
    1/eps factors of the fast equations applied.
    """
    eps = sp.epsilon if epsilon is None else float(epsilon)
    b = sp_blocks(sp, s.x, s.z, t, eps)
    sx_full = np.hstack([b.sigma_x, np.zeros((sp.n_s, sp.m_f))])
    A_M = b.A2 @ s.M_zx
    B_Mzz = b.B1 @ s.M_zx.T + b.B2 @ s.M_zz
    return OriginalMomentState(
        x=b.f_x,
        z=b.f_z / eps,
        m_x=b.A1 @ s.m_x + b.A2 @ s.m_z,
        M_xx=b.A1 @ s.M_xx + A_M + s.M_xx @ b.A1.T + A_M.T + b.sigma_x @ b.sigma_x.T,
        m_z=(b.B1 @ s.m_x + b.B2 @ s.m_z) / eps,
        M_zx=s.M_zx @ b.A1.T + s.M_zz @ b.A2.T
        + (b.B1 @ s.M_xx + b.B2 @ s.M_zx + b.sigma_z @ sx_full.T) / eps,
        M_zz=(B_Mzz + B_Mzz.T) / eps + b.sigma_z @ b.sigma_z.T / eps ** 2,
    )


def reduced_moment_rhs(red, s, t):
    """dx/dt = f_x(x, gamma1), dm/dt = Abar m, dM/dt = Abar M + M Abar^T + sigma sigma^T."""
    ev = red.evaluate(s.xbar, t)
    AM = ev.Abar @ s.M_xx
    return ReducedMomentState(
        xbar=ev.drift,
        m_x=ev.Abar @ s.m_x,
        M_xx=AM + AM.T + ev.sigma @ ev.sigma.T,
    )


class OriginalMomentSystem:
    """Flat-vector wrapper of original_moment_rhs for the integrator."""

    def __init__(self, sp, epsilon=None):
        self.sp = sp
        self.epsilon = sp.epsilon if epsilon is None else float(epsilon)
        self.layout = original_layout(sp.n_s, sp.n_f)

    def rhs(self, t, vec):
        s = OriginalMomentState.from_vector(vec, self.sp.n_s, self.sp.n_f)
        return self.layout.pack(original_moment_rhs(self.sp, s, t, self.epsilon).__dict__)

    def integrate(self, state0, t_span, t_eval=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
        return integrate(self.rhs, state0.to_vector(), t_span, rtol, atol, t_eval,
                         post_step=self.layout.symmetrize, layout=self.layout)


class ReducedMomentSystem:
    def __init__(self, red):
        self.red = red.fork()
        self.n_s = red.sp.n_s
        self.layout = reduced_layout(self.n_s)

    def rhs(self, t, vec):
        s = ReducedMomentState.from_vector(vec, self.n_s)
        return self.layout.pack(reduced_moment_rhs(self.red, s, t).__dict__)

    def integrate(self, state0, t_span, t_eval=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
        return integrate(self.rhs, state0.to_vector(), t_span, rtol, atol, t_eval,
                         post_step=self.layout.symmetrize, layout=self.layout)


def qss_consistency_residual(sp, red, x, t, m_x, M_xx, M_zx_offset=None):
    """
    Compares the slow part of the original moment equations evaluated on
    the manifold (z = gamma1, E[psi_z] = gamma2 m, E[psi_z psi_x^T] = gamma2 M)
    with the reduced moment equations at the same point.

    Outputs:
    dict : max abs differences 'x', 'm', 'M' and their maximum 'max'
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m_x = np.asarray(m_x, dtype=float)
    M_xx = np.asarray(M_xx, dtype=float)
    ev = red.fork().evaluate(x, t)
    M_zx = ev.gamma2 @ M_xx
    if M_zx_offset is not None:
        M_zx = M_zx + M_zx_offset
    s = OriginalMomentState(x, ev.z, m_x, M_xx, ev.gamma2 @ m_x, M_zx, ev.gamma2 @ M_xx @ ev.gamma2.T)
    d_orig = original_moment_rhs(sp, s, t)
    d_red = reduced_moment_rhs(red.fork(), ReducedMomentState(x, m_x, M_xx), t)
    res = {
        "x": float(np.max(np.abs(d_orig.x - d_red.xbar))),
        "m": float(np.max(np.abs(d_orig.m_x - d_red.m_x))),
        "M": float(np.max(np.abs(d_orig.M_xx - d_red.M_xx))),
    }
    res["max"] = max(res.values())
    return res


def check_moment_invariants(traj):
    """
    Symmetry and positive semidefiniteness of the second-moment blocks (and
    of the stacked covariance for the original system) along a trajectory.

    Outputs:
    list of violation strings, empty when every row passes
    """
    names = ["M_xx"] + (["M_zz"] if "M_zz" in traj.layout.slices else [])
    violations = []
    for name in names:
        Ms = traj.block(name)
        for t, M in zip(traj.times, Ms):
            size = 1.0 + np.linalg.norm(M)
            if np.linalg.norm(M - M.T) >= SYMMETRY_TOL * size:
                violations.append(f"{name} not symmetric at t={t}")
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -PSD_TOL * size:
                violations.append(f"{name} not PSD at t={t}")
    if "M_zz" in traj.layout.slices:
        for k, t in enumerate(traj.times):
            m = np.concatenate([traj.block("m_x")[k], traj.block("m_z")[k]])
            M_zx = traj.block("M_zx")[k]
            M = np.block([[traj.block("M_xx")[k], M_zx.T], [M_zx, traj.block("M_zz")[k]]])
            C = M - np.outer(m, m)
            if np.min(np.linalg.eigvalsh(0.5 * (C + C.T))) < -PSD_TOL * (1.0 + np.linalg.norm(C)):
                violations.append(f"stacked covariance not PSD at t={t}")
    return violations


# Deterministic paths ------------------------------------------------------

class DeterministicPath:
    """Macroscopic (x, z) path on a grid with linear interpolation between grid points."""

    def __init__(self, times, x, z):
        self.times = np.asarray(times, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.z = np.asarray(z, dtype=float)

    def at(self, t):
        x = np.array([np.interp(t, self.times, col) for col in self.x.T])
        z = np.array([np.interp(t, self.times, col) for col in self.z.T])
        return x, z

    def trajectory(self):
        return list(zip(self.x, self.z, self.times))


def original_path(sp, x0, z0, t_span, t_eval, epsilon=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Solves x' = f_x, eps z' = f_z from (x0, z0)."""
    eps = sp.epsilon if epsilon is None else float(epsilon)
    n_s = sp.n_s

    def rhs(t, y):
        x, z = y[:n_s], y[n_s:]
        return np.concatenate([sp.f_x(x, z, t), sp.f_z(x, z, t, eps) / eps])

    traj = integrate(rhs, np.concatenate([x0, z0]), t_span, rtol, atol, t_eval)
    return DeterministicPath(traj.times, traj.states[:, :n_s], traj.states[:, n_s:])


def reduced_path(red, x0, t_span, t_eval, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Solves xbar' = f_x(xbar, gamma1(xbar, t), t) and records gamma1 along it."""
    red = red.fork()
    traj = integrate(lambda t, x: red.reduced_drift(x, t), np.asarray(x0, float), t_span,
                     rtol, atol, t_eval)
    z = red.gamma1_path(traj.states, traj.times)
    return DeterministicPath(traj.times, traj.states, z)
