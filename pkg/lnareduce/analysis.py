# Standard libraries
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd

# Stats models
from statsmodels.regression.linear_model import OLS
from statsmodels.tools.tools import add_constant

from .ensemble import (
    ORIGINAL, REDUCED, EnsembleConfig, ensemble_path, simulate_ensemble, standard_errors,
)
from .exceptions import GridMismatchError, LnaReduceError
from .moments import (
    DEFAULT_ATOL, DEFAULT_RTOL, OriginalMomentState, OriginalMomentSystem,
    ReducedMomentState, ReducedMomentSystem,
)

LOGGER = logging.getLogger(__name__)

SLOPE_BAND = (0.8, 1.2)
PSD_TOL = 1e-9
FAMILIES = ("x", "m", "M")
SDE_FAMILIES = ("m", "M")


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    max_residual: float


@dataclass
class ModelFamily:
    """
    One network swept over epsilon: the transformed LNA at some reference
    epsilon, its epsilon-independent reduced model and the initial data.
    """

    sp: object
    reduced: object
    x0: np.ndarray
    z0: np.ndarray
    psi_x0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.z0 = np.atleast_1d(np.asarray(self.z0, dtype=float))
        self.psi_x0 = np.zeros(len(self.x0)) if self.psi_x0 is None else np.asarray(self.psi_x0, float)

    def psi_z0(self):
        """Fast fluctuation consistent with the slow one: gamma2(x0, 0) psi_x0."""
        return self.reduced.fork().gamma2(self.x0, 0.0) @ self.psi_x0

    def original_state(self):
        return OriginalMomentState.deterministic(self.x0, self.z0, self.psi_x0, self.psi_z0())

    def reduced_state(self):
        return ReducedMomentState.deterministic(self.x0, self.psi_x0)


@dataclass
class SweepResult:
    epsilons: np.ndarray
    errors: Dict[str, np.ndarray]
    fits: Dict[str, Optional[SlopeFit]]
    zero_families: List[str]
    gaussian_distances: np.ndarray
    t_grid: np.ndarray
    metrics: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self):
        return {
            "epsilons": self.epsilons.tolist(),
            "errors": {k: v.tolist() for k, v in self.errors.items()},
            "fits": {k: (None if f is None else f._asdict()) for k, f in self.fits.items()},
            "slope": None if self.fits.get("M") is None else self.fits["M"].slope,
            "zero_families": list(self.zero_families),
            "gaussian_distances": self.gaussian_distances.tolist(),
            "metrics": self.metrics,
            "t_grid": {"start": float(self.t_grid[0]), "stop": float(self.t_grid[-1]),
                       "points": int(len(self.t_grid))},
        }

    def to_frame(self):
        frame = pd.DataFrame({"epsilon": self.epsilons})
        for family in FAMILIES:
            frame[f"e_{family}"] = self.errors[family]
        frame["w2"] = self.gaussian_distances
        return frame

@dataclass
class EnsembleSweepResult:
    """
    Sup-in-time differences between Euler-Maruyama estimates of the original
    slow moments and of the reduced moments, with the sampling noise floor
    sqrt(se_orig^2 + se_red^2) of each difference.
    """

    epsilons: np.ndarray
    errors: Dict[str, np.ndarray]
    noise_floor: Dict[str, np.ndarray]
    fits: Dict[str, Optional[SlopeFit]]
    n_realizations: int
    master_seed: int

    def resolved(self, family):
        """Epsilons whose error stands above twice the noise floor."""
        return self.errors[family] > 2.0 * self.noise_floor[family]

    def to_dict(self):
        return {
            "epsilons": self.epsilons.tolist(),
            "errors": {k: v.tolist() for k, v in self.errors.items()},
            "noise_floor": {k: v.tolist() for k, v in self.noise_floor.items()},
            "fits": {k: (None if f is None else f._asdict()) for k, f in self.fits.items()},
            "n_realizations": int(self.n_realizations),
            "master_seed": int(self.master_seed),
        }

    def to_frame(self):
        frame = pd.DataFrame({"epsilon": self.epsilons})
        for family in SDE_FAMILIES:
            frame[f"e_{family}"] = self.errors[family]
            frame[f"floor_{family}"] = self.noise_floor[family]
        return frame


class ConvergenceAnalysis:
    """
    Error measures between original and reduced moment trajectories, and
    the epsilon sweep that checks they shrink like O(eps).
    """

    def __init__(self, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, threads=None):
        self.rtol = rtol
        self.atol = atol
        self.threads = threads

    def _calculate_metrics(self, y_true, y_pred, n_params=2):
        """
        Goodness of a fit on log-log data.
        Inputs:
        y_true    : observed log errors
        y_pred    : fitted log errors
        n_params  : number of fitted parameters

        Outputs:
        dict      : dictionary containing
            - r2           : R-squared value (1 for a two-point fit)
            - rmse         : Root Mean Square Error of the log residuals
            - max_residual : largest absolute log residual
        """
        n = len(y_true)
        if n < 2:
            raise ValueError("Need at least 2 points to calculate metrics")
        residuals = np.asarray(y_true) - np.asarray(y_pred)
        rss = np.sum(residuals ** 2)
        tss = np.sum((y_true - np.mean(y_true)) ** 2)
        return {
            "r2": float(1 - rss / tss) if tss != 0 else 1.0,
            "rmse": float(np.sqrt(rss / n)),
            "max_residual": float(np.max(np.abs(residuals))),
            "dof": n - n_params,
        }

    def moment_error(self, orig, red, t_grid):
        """
        Sup over t_grid of the slow-block differences.

        Outputs:
        tuple : (e_x, e_m, e_M) with Euclidean norms for vectors and
                Frobenius norms for matrices
        """
        i_orig = orig.at_times(t_grid)
        i_red = red.at_times(t_grid)
        if i_orig is None or i_red is None:
            raise GridMismatchError("trajectories do not both cover the requested output times")
        x1, m1, M1 = (a[i_orig] for a in orig.slow())
        x2, m2, M2 = (a[i_red] for a in red.slow())
        if x1.shape != x2.shape:
            raise GridMismatchError(f"slow blocks differ in shape: {x1.shape} vs {x2.shape}")
        e_x = float(np.max(np.linalg.norm(x1 - x2, axis=1), initial=0.0))
        e_m = float(np.max(np.linalg.norm(m1 - m2, axis=1), initial=0.0))
        e_M = float(np.max(np.linalg.norm(M1 - M2, axis=(1, 2)), initial=0.0))
        return e_x, e_m, e_M

    def fit_loglog_slope(self, pairs):
        """
        Least squares line through (ln eps, ln e).

        Inputs:
        pairs : iterable of (eps, e), at least two distinct eps, all values > 0

        Outputs:
        SlopeFit(slope, intercept, max_residual)
        """
        pairs = [(float(eps), float(e)) for eps, e in pairs]
        if len(pairs) < 2:
            raise ValueError("Need at least 2 (epsilon, error) pairs to fit a slope")
        eps, err = np.array(pairs).T
        if np.any(eps <= 0) or np.any(err <= 0):
            raise ValueError("log-log fit needs strictly positive epsilons and errors")
        if len(np.unique(eps)) < 2:
            raise ValueError("log-log fit needs at least two distinct epsilons")
        log_eps, log_err = np.log(eps), np.log(err)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = OLS(log_err, add_constant(log_eps)).fit()
        intercept, slope = (float(v) for v in model.params)
        fitted = intercept + slope * log_eps
        metrics = self._calculate_metrics(log_err, fitted)
        return SlopeFit(slope, intercept, metrics["max_residual"])

    def gaussian_distance(self, m1, M1, m2, M2):
        """2-Wasserstein distance between N(m1, M1 - m1 m1^T) and N(m2, M2 - m2 m2^T)."""
        m1, m2 = np.atleast_1d(m1).astype(float), np.atleast_1d(m2).astype(float)
        C1 = np.atleast_2d(M1) - np.outer(m1, m1)
        C2 = np.atleast_2d(M2) - np.outer(m2, m2)
        root2 = _psd_sqrt(C2, "second")
        _psd_sqrt(C1, "first")
        cross = _psd_sqrt(root2 @ C1 @ root2, "cross term")
        w2_sq = np.sum((m1 - m2) ** 2) + np.trace(C1) + np.trace(C2) - 2.0 * np.trace(cross)
        return float(np.sqrt(max(w2_sq, 0.0)))

    def _sweep_point(self, family, eps, red_traj, t_span, t_grid):
        try:
            sp = family.sp.with_epsilon(eps)
            traj = OriginalMomentSystem(sp).integrate(
                family.original_state(), t_span, t_grid, self.rtol, self.atol)
            errors = self.moment_error(traj, red_traj, t_grid)
        except LnaReduceError as err:
            err.args = (f"epsilon={eps}: {err}",)
            raise
        _, m, M = traj.slow()
        _, m_r, M_r = red_traj.slow()
        w2 = self.gaussian_distance(m[-1], M[-1], m_r[-1], M_r[-1])
        LOGGER.info("epsilon=%g: e_x=%.3e e_m=%.3e e_M=%.3e w2=%.3e", eps, *errors, w2)
        return errors, w2

    def epsilon_sweep(self, family, eps_list, t_span, t_grid):
        """
        Integrates the reduced moment equations once and the original ones
        for every epsilon, then fits the log-log slope of each error family.

        Inputs:
        family   : ModelFamily
        eps_list : at least two positive epsilons, sorted descending here
        t_span   : (t0, t1)
        t_grid   : output times on which the sup errors are taken

        Outputs:
        SweepResult
        """
        eps = sorted({float(e) for e in eps_list}, reverse=True)
        if len(eps) < 2:
            raise ValueError("Need at least 2 distinct epsilons for a sweep")
        if eps[-1] <= 0:
            raise ValueError("epsilons must be positive")
        t_grid = np.asarray(t_grid, dtype=float)
        red_traj = ReducedMomentSystem(family.reduced).integrate(
            family.reduced_state(), t_span, t_grid, self.rtol, self.atol)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            points = list(pool.map(lambda e: self._sweep_point(family, e, red_traj, t_span, t_grid), eps))

        errors = {f: np.array([p[0][i] for p in points]) for i, f in enumerate(FAMILIES)}
        fits, metrics, zero = {}, {}, []
        for f in FAMILIES:
            if np.all(errors[f] == 0.0):
                fits[f] = None
                zero.append(f)
                continue
            fits[f] = self.fit_loglog_slope(zip(eps, errors[f]))
            log_eps = np.log(eps)
            metrics[f] = self._calculate_metrics(
                np.log(errors[f]), fits[f].intercept + fits[f].slope * log_eps)
            if not SLOPE_BAND[0] <= fits[f].slope <= SLOPE_BAND[1]:
                LOGGER.warning("slope of e_%s is %.3f, outside %s", f, fits[f].slope, SLOPE_BAND)
        return SweepResult(
            epsilons=np.array(eps),
            errors=errors,
            fits=fits,
            zero_families=zero,
            gaussian_distances=np.array([p[1] for p in points]),
            t_grid=t_grid,
            metrics=metrics,
        )

    def _ensemble_slow(self, stats, n_s):
        se_m, se_M = standard_errors(stats)
        return stats.mean[:, :n_s], stats.second[:, :n_s, :n_s], se_m[:, :n_s], se_M[:, :n_s, :n_s]

    def ensemble_sweep(self, family, eps_list, t_grid, n_realizations, master_seed=0):
        """
        The epsilon sweep measured on Euler-Maruyama ensembles instead of the
        moment equations.  The reduced ensemble runs once; each epsilon runs
        an original ensemble with the same seed and dt = min(eps/20, 0.1
        grid spacing).  Slopes are fitted only through the epsilons whose
        error is resolved above the noise floor.

        Inputs:
        family         : ModelFamily
        eps_list       : at least two positive epsilons
        t_grid         : output times, the sup is taken over t_grid[1:]
        n_realizations : ensemble size of every run
        master_seed    : seed shared by every run

        Outputs:
        EnsembleSweepResult
        """
        eps = sorted({float(e) for e in eps_list}, reverse=True)
        if len(eps) < 2:
            raise ValueError("Need at least 2 distinct epsilons for a sweep")
        if eps[-1] <= 0:
            raise ValueError("epsilons must be positive")
        t_grid = np.asarray(t_grid, dtype=float)
        n_s = len(family.x0)

        cfg = EnsembleConfig.with_default_dt(n_realizations, t_grid, REDUCED, master_seed=master_seed)
        red_path = ensemble_path(family.reduced, cfg, family.x0)
        m_r, M_r, se_m_r, se_M_r = self._ensemble_slow(
            simulate_ensemble(family.reduced, cfg, red_path, family.psi_x0, self.threads), n_s)

        psi0 = np.concatenate([family.psi_x0, family.psi_z0()])
        errors = {f: [] for f in SDE_FAMILIES}
        floor = {f: [] for f in SDE_FAMILIES}
        for e in eps:
            sp = family.sp.with_epsilon(e)
            cfg = EnsembleConfig.with_default_dt(n_realizations, t_grid, ORIGINAL, e, master_seed)
            stats = simulate_ensemble(sp, cfg, ensemble_path(sp, cfg, family.x0, family.z0), psi0, self.threads)
            m, M, se_m, se_M = self._ensemble_slow(stats, n_s)
            errors["m"].append(np.max(np.linalg.norm(m - m_r, axis=1)[1:]))
            errors["M"].append(np.max(np.linalg.norm(M - M_r, axis=(1, 2))[1:]))
            floor["m"].append(np.max(np.linalg.norm(np.hypot(se_m, se_m_r), axis=1)[1:]))
            floor["M"].append(np.max(np.linalg.norm(np.hypot(se_M, se_M_r), axis=(1, 2))[1:]))
            LOGGER.info("epsilon=%g: ensemble e_m=%.3e (floor %.1e) e_M=%.3e (floor %.1e)",
                        e, errors["m"][-1], floor["m"][-1], errors["M"][-1], floor["M"][-1])

        result = EnsembleSweepResult(
            epsilons=np.array(eps),
            errors={f: np.array(v) for f, v in errors.items()},
            noise_floor={f: np.array(v) for f, v in floor.items()},
            fits={},
            n_realizations=int(n_realizations),
            master_seed=int(master_seed),
        )
        for f in SDE_FAMILIES:
            keep = result.resolved(f)
            if np.count_nonzero(keep) < 2:
                LOGGER.warning("e_%s is resolved above the noise floor at %d epsilon(s), no slope fitted",
                               f, int(np.count_nonzero(keep)))
                result.fits[f] = None
                continue
            result.fits[f] = self.fit_loglog_slope(zip(result.epsilons[keep], result.errors[f][keep]))
        return result


def _psd_sqrt(C, label):
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    if w.size and w.min() < -PSD_TOL * (1.0 + np.abs(w).max()):
        raise ValueError(f"{label} covariance is not positive semidefinite (eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


_DEFAULT = ConvergenceAnalysis()
moment_error = _DEFAULT.moment_error
fit_loglog_slope = _DEFAULT.fit_loglog_slope
gaussian_distance = _DEFAULT.gaussian_distance


def epsilon_sweep(family, eps_list, t_span, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, threads=None):
    return ConvergenceAnalysis(rtol, atol, threads).epsilon_sweep(family, eps_list, t_span, t_grid)


def ensemble_sweep(family, eps_list, t_grid, n_realizations, master_seed=0, threads=None):
    return ConvergenceAnalysis(threads=threads).ensemble_sweep(family, eps_list, t_grid, n_realizations, master_seed)
