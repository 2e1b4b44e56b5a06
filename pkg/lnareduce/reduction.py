"""
Quasi-steady-state reduction of a singularly perturbed LNA.

gamma1(x, t) is the isolated root of f_z(x, z, t, 0) = 0 on which
df_z/dz is Hurwitz; gamma2(x, t) = -B2^-1 B1 at that root projects slow
fluctuations onto the fast ones.  Substituting both into the slow equations
gives the reduced drift, Abar = A1 + A2 gamma2 and sigma_x on the manifold.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np
from scipy.linalg import qr, solve_triangular

from .exceptions import (
    DomainError, NoConvergenceError, NumericalError, SingularityError, WrongBranchError,
)
from .lna import MAX_CONDITION

LOGGER = logging.getLogger(__name__)

HURWITZ_MARGIN = -1e-9
ROOT_RTOL = 1e-12
MAX_NEWTON_ITER = 100
MAX_HALVINGS = 50


def _inf_norm(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _newton_root(sp, x, t, z_guess):
    """
    Damped Newton on f_z(x, ., t, 0).  Returns (z, residual); no stability check.

    A step is halved until the residual decreases (at most 50 times).
    Converged when ||f_z||_inf < 1e-12 (1 + ||z||_inf).
    """
    z = np.array(z_guess, dtype=float).reshape(sp.n_f)
    g = sp.f_z(x, z, t, 0.0)
    res = _inf_norm(g)
    for it in range(MAX_NEWTON_ITER):
        if res < ROOT_RTOL * (1.0 + _inf_norm(z)):
            LOGGER.debug("gamma1 converged in %d iterations at t=%s (residual %.2e)", it, t, res)
            return _polish(sp, x, t, z, res)
        J = sp.B2(x, z, t, 0.0)
        try:
            step = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            raise SingularityError("df_z/dz is singular during Newton", float(np.linalg.cond(J)))
        lam = 1.0
        for halving in range(MAX_HALVINGS + 1):
            z_new = z + lam * step
            g_new = sp.f_z(x, z_new, t, 0.0)
            res_new = _inf_norm(g_new)
            if np.all(np.isfinite(g_new)) and res_new < res:
                break
            lam *= 0.5
        else:
            raise NoConvergenceError(f"damped Newton stalled at t={t}", res)
        if halving:
            LOGGER.debug("Newton step damped by 2^-%d", halving)
        if _inf_norm(z_new - z) <= 4 * np.finfo(float).eps * (1.0 + _inf_norm(z)) \
                and res_new >= ROOT_RTOL * (1.0 + _inf_norm(z_new)):
            raise NoConvergenceError(f"Newton step below roundoff at t={t}", res_new)
        z, g, res = z_new, g_new, res_new
    if res < ROOT_RTOL * (1.0 + _inf_norm(z)):
        return _polish(sp, x, t, z, res)
    raise NoConvergenceError(f"Newton did not converge in {MAX_NEWTON_ITER} iterations at t={t}", res)


def _polish(sp, x, t, z, res):
    """One extra full Newton step, kept only if it does not increase the residual."""
    if res == 0.0:
        return z, res
    try:
        z_new = z + np.linalg.solve(sp.B2(x, z, t, 0.0), -sp.f_z(x, z, t, 0.0))
    except np.linalg.LinAlgError:
        return z, res
    res_new = _inf_norm(sp.f_z(x, z_new, t, 0.0))
    return (z_new, res_new) if res_new <= res else (z, res)


@dataclass
class StabilityReport:
    max_real_part: float
    is_hurwitz: bool
    eigenvalues: np.ndarray
    z: np.ndarray


def _stability(sp, x, z, t):
    eig = np.linalg.eigvals(sp.B2(x, z, t, 0.0))
    margin = float(np.max(eig.real))
    return StabilityReport(margin, margin < HURWITZ_MARGIN, eig, z)


def solve_gamma1(sp, x, t, z_guess):
    """
    Root of f_z(x, z, t, 0) = 0 reached from z_guess.

    Raises WrongBranchError when the root is not Hurwitz or lies outside the
    network's physical domain, NoConvergenceError when Newton stagnates.
    """
    z, _ = _newton_root(sp, x, t, z_guess)
    report = _stability(sp, x, z, t)
    if not report.is_hurwitz:
        raise WrongBranchError(
            f"root z={z.tolist()} at x={np.asarray(x).tolist()}, t={t} is not Hurwitz "
            f"(max real part {report.max_real_part:.3e})"
        )
    domain = sp.net.domain
    if domain is not None and not domain.contains(sp.to_original(x, z)):
        raise WrongBranchError(
            f"root z={z.tolist()} at x={np.asarray(x).tolist()} leaves the physical domain"
        )
    return z


def solve_projection(B1, B2):
    """
    gamma2 = -B2^-1 B1 through a column-pivoted QR of B2.

    Raises SingularityError when cond(B2) exceeds 1e12.
    """
    B1 = np.atleast_2d(np.asarray(B1, dtype=float))
    B2 = np.atleast_2d(np.asarray(B2, dtype=float))
    cond = float(np.linalg.cond(B2))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularityError("B2 is singular on the slow manifold", cond)
    Q, R, perm = qr(B2, pivoting=True)
    permuted = solve_triangular(R, -Q.T @ B1)
    gamma = np.empty_like(permuted)
    gamma[perm] = permuted
    return gamma


def gamma2(sp, x, t, z_guess=None):
    z = solve_gamma1(sp, x, t, np.zeros(sp.n_f) if z_guess is None else z_guess)
    _, _, B1, B2 = sp.jacobian_blocks(x, z, t, 0.0)
    return solve_projection(B1, B2)


def check_hurwitz(sp, x, t, z_guess=None):
    """Eigenvalues of df_z/dz at the root reached from z_guess; report-style, never raises for instability."""
    z, _ = _newton_root(sp, x, t, np.zeros(sp.n_f) if z_guess is None else z_guess)
    return _stability(sp, x, z, t)


@dataclass
class ReducedEval:
    z: np.ndarray
    gamma2: np.ndarray
    drift: np.ndarray
    Abar: np.ndarray
    sigma: np.ndarray


class ReducedModel:
    """
    Slow dynamics on the manifold z = gamma1(x, t).

    gamma1 is warm-started from the last root found; that cache is the only
    state, so every concurrent consumer should work on its own ``fork()``.
    """

    def __init__(self, sp, z0, closed_form_gamma1=None):
        self.sp = sp
        self.closed_form_gamma1 = closed_form_gamma1
        self._z_last = np.array(z0, dtype=float).reshape(sp.n_f)

    def fork(self):
        other = copy.copy(self)
        other._z_last = self._z_last.copy()
        return other

    def gamma1(self, x, t):
        if self.closed_form_gamma1 is not None:
            return np.atleast_1d(np.asarray(self.closed_form_gamma1(x, t), dtype=float))
        z = solve_gamma1(self.sp, x, t, self._z_last)
        self._z_last = z
        return z

    def gamma1_path(self, xs, ts):
        return np.array([self.gamma1(x, t) for x, t in zip(xs, ts)])

    def evaluate(self, x, t):
        z = self.gamma1(x, t)
        blocks = self.sp.blocks(x, z, t, 0.0)
        g2 = solve_projection(blocks.B1, blocks.B2)
        return ReducedEval(
            z=z,
            gamma2=g2,
            drift=blocks.f_x,
            Abar=blocks.A1 + blocks.A2 @ g2,
            sigma=blocks.sigma_x,
        )

    def gamma2(self, x, t):
        return self.evaluate(x, t).gamma2

    def reduced_drift(self, x, t):
        return self.sp.f_x(x, self.gamma1(x, t), t)

    def Abar(self, x, t):
        return self.evaluate(x, t).Abar

    def reduced_sigma(self, x, t):
        return self.sp.sigma_x(x, self.gamma1(x, t), t)


def reduce(sp, x0, z0, t0=0.0, closed_form_gamma1=None):
    """
    Builds the reduced model after checking the stability and noise
    assumptions at the initial state.

    Inputs:
    sp                 : SingularPerturbedLNA
    x0, z0             : initial slow state and a guess inside the root's basin
    closed_form_gamma1 : optional analytic manifold (x, t) -> z

    Outputs:
    ReducedModel
    """
    z_root = solve_gamma1(sp, x0, t0, z0)
    if _inf_norm(sp.sigma_z(x0, z_root, t0, 0.0)) != 0.0:
        raise WrongBranchError("sigma_z does not vanish at epsilon = 0")
    if closed_form_gamma1 is not None:
        gap = _inf_norm(np.atleast_1d(closed_form_gamma1(x0, t0)) - z_root)
        if gap > 1e-8 * (1.0 + _inf_norm(z_root)):
            raise WrongBranchError(f"closed-form manifold disagrees with Newton root by {gap:.3e}")
    return ReducedModel(sp, z_root, closed_form_gamma1)


@dataclass
class PointAssumptions:
    t: float
    hurwitz_margin: float
    b2_condition: float
    sigma_z_at_zero: float
    scaling_residual: float
    root_converged: bool
    in_domain: bool
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures


@dataclass
class AssumptionReport:
    points: List[PointAssumptions]

    @property
    def passed(self):
        return all(p.passed for p in self.points)

    @property
    def worst_hurwitz_margin(self):
        return max((p.hurwitz_margin for p in self.points), default=float("nan"))

    def failures(self):
        return sorted({f for p in self.points for f in p.failures})

    def to_dict(self):
        """Plain JSON data; non-finite numbers become None."""
        points = []
        for p in self.points:
            row = {k: _finite_or_none(v) for k, v in asdict(p).items()}
            points.append(dict(row, passed=p.passed))
        return {
            "passed": self.passed,
            "worst_hurwitz_margin": _finite_or_none(self.worst_hurwitz_margin),
            "failures": self.failures(),
            "points": points,
        }


def _finite_or_none(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _scaling_residual(sp, x, z, t, eps_pair):
    S = [sp.sigma_z(x, z, t, e) @ sp.sigma_z(x, z, t, e).T / e for e in eps_pair]
    return float(np.linalg.norm(S[0] - S[1]) / (1.0 + np.linalg.norm(S[0])))


def check_assumptions(sp, trajectory, eps_pair=(1e-6, 1e-8), scaling_tol=1e-3):
    """
    Checks the stability, conditioning and noise-scaling assumptions at
    every (x, z, t) of a trajectory.  Never raises for a failed check.

    Inputs:
    sp          : SingularPerturbedLNA
    trajectory  : iterable of (x, z, t)
    eps_pair    : two small epsilons compared for the sigma_z sigma_z^T / eps limit
    scaling_tol : allowed relative change of that limit between the two epsilons

    Outputs:
    AssumptionReport
    """
    points = []
    z_warm = None
    for x, z, t in trajectory:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        z = np.atleast_1d(np.asarray(z, dtype=float))
        failures = []
        try:
            root, _ = _newton_root(sp, x, t, z if z_warm is None else z_warm)
            z_warm, root_ok = root, True
        except NumericalError as err:
            LOGGER.warning("no quasi-steady root at t=%s: %s", t, err)
            root, root_ok = z, False
            failures.append("root")
        B2 = sp.B2(x, root, t, 0.0)
        margin = float(np.max(np.linalg.eigvals(B2).real))
        cond = float(np.linalg.cond(B2))
        if not margin < HURWITZ_MARGIN:
            failures.append("hurwitz")
        if not cond <= MAX_CONDITION:
            failures.append("b2_condition")
        in_domain = sp.net.domain is None or sp.net.domain.contains(sp.to_original(x, z))
        if not in_domain:
            failures.append("domain")
        try:
            sigma0 = _inf_norm(sp.sigma_z(x, z, t, 0.0))
            residual = _scaling_residual(sp, x, z, t, eps_pair)
        except DomainError as err:
            LOGGER.warning("noise undefined at t=%s: %s", t, err)
            sigma0, residual = float("nan"), float("nan")
            failures.append("noise_domain")
        else:
            if sigma0 != 0.0:
                failures.append("sigma_z_nonzero_at_eps0")
            if not residual <= scaling_tol:
                failures.append("sigma_z_scaling")
        points.append(PointAssumptions(float(t), margin, cond, sigma0, residual, root_ok, in_domain, failures))
    report = AssumptionReport(points)
    if not report.passed:
        LOGGER.warning("assumption checks failed: %s", ", ".join(report.failures()))
    return report
