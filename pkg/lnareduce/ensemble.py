"""
Euler-Maruyama ensembles of the LNA fluctuation equations.

The fluctuation SDEs are linear in psi once the deterministic path is
known, so every coefficient matrix is evaluated once per time step on the
(linearly interpolated) path and shared by all realizations.  Each step is
stored as a propagator I + h D and a square root of h sigma sigma^T, which
advance psi in law exactly like em_step.  Realizations run in blocks of
BLOCK_SIZE; block b draws from a Philox stream seeded by (master_seed, b),
realization r owning a fixed row of every chunk, and block sums are merged
in ascending block order, which makes the statistics independent of the
number of worker threads and of the ensemble size.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .exceptions import DivergenceError
from .lna import SingularPerturbedLNA, sp_blocks
from .moments import original_path, reduced_path
from .reduction import ReducedModel, solve_projection

LOGGER = logging.getLogger(__name__)

BLOCK_SIZE = 4096
STEP_CHUNK = 64
ORIGINAL = "original"
REDUCED = "reduced"
DEFAULT_REDUCED_DT = 1e-3


@dataclass(frozen=True)
class EnsembleConfig:
    """
    Inputs:
    n_realizations : number of sample paths
    dt             : largest Euler-Maruyama step; intervals between output
                     times are split into equal steps no longer than dt
    t_grid         : increasing output times, t_grid[0] is the initial time
    master_seed    : nonnegative integer keying every random stream
    model          : 'original' or 'reduced'
    epsilon        : timescale ratio, required for the original model
    """

    n_realizations: int
    dt: float
    t_grid: np.ndarray
    master_seed: int = 0
    model: str = REDUCED
    epsilon: Optional[float] = None

    def __post_init__(self):
        grid = np.array(self.t_grid, dtype=float).reshape(-1)
        grid.setflags(write=False)
        object.__setattr__(self, "t_grid", grid)
        if int(self.n_realizations) < 1:
            raise ValueError("n_realizations must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.master_seed) < 0:
            raise ValueError("master_seed must be nonnegative")
        if self.model not in (ORIGINAL, REDUCED):
            raise ValueError(f"model must be '{ORIGINAL}' or '{REDUCED}', got '{self.model}'")
        if len(grid) < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("t_grid must hold at least two strictly increasing times")
        if self.model == ORIGINAL:
            if self.epsilon is None or not self.epsilon > 0:
                raise ValueError("the original model needs a positive epsilon")
            limit = min(self.epsilon / 20.0, 0.1 * float(np.min(np.diff(grid))))
            if self.dt > limit * (1 + 1e-12):
                raise ValueError(f"dt={self.dt} exceeds min(eps/20, 0.1 grid spacing) = {limit}")

    @classmethod
    def with_default_dt(cls, n_realizations, t_grid, model=REDUCED, epsilon=None, master_seed=0):
        """dt = min(eps/20, 0.1 grid spacing) for the original model, min(1e-3, 0.1 grid spacing) otherwise."""
        spacing = float(np.min(np.diff(np.asarray(t_grid, dtype=float))))
        if model == ORIGINAL:
            dt = min(epsilon / 20.0, 0.1 * spacing)
        else:
            dt = min(DEFAULT_REDUCED_DT, 0.1 * spacing)
        return cls(n_realizations, dt, t_grid, master_seed, model, epsilon)

    def step_schedule(self):
        """Step counts and step sizes of each interval between consecutive output times."""
        gaps = np.diff(self.t_grid)
        counts = np.maximum(1, np.ceil(gaps / self.dt - 1e-9)).astype(int)
        return counts, gaps / counts


def em_step(state, drift, noise, dt, normal_draws, step=None, t=None):
    """
    One Euler-Maruyama step, state + drift dt + noise xi sqrt(dt).

    state and drift are (..., n), noise is (n, m) and normal_draws (..., m).
    Raises DivergenceError when any component stops being finite.
    """
    new = state + drift * dt + (normal_draws @ np.asarray(noise).T) * np.sqrt(dt)
    if not np.all(np.isfinite(new)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(new)))[0][0]
        raise DivergenceError(step, t, realization=int(bad) if np.ndim(new) > 1 else None)
    return new


@dataclass
class EnsembleStats:
    """Sample moments of psi at each output time."""

    times: np.ndarray
    mean: np.ndarray
    second: np.ndarray
    var_mean: np.ndarray
    var_second: np.ndarray
    n_realizations: int
    model: str = REDUCED
    state_names: tuple = field(default_factory=tuple)

    @property
    def covariance(self):
        return self.second - np.einsum("ki,kj->kij", self.mean, self.mean)

    @classmethod
    def from_samples(cls, times, samples, model=REDUCED):
        """Statistics of explicit samples shaped (n_times, N, n)."""
        samples = np.asarray(samples, dtype=float)
        acc = MomentAccumulator(samples.shape[0], samples.shape[2])
        for k in range(samples.shape[0]):
            acc.add(k, samples[k])
        return acc.finalize(times, model)

    def to_frame(self):
        n = self.mean.shape[1]
        upper = [(i, j) for i in range(n) for j in range(i, n)]
        se_m, se_M = standard_errors(self) if self.n_realizations >= 2 else (
            np.full_like(self.mean, np.nan), np.full_like(self.second, np.nan))
        data = {"t": self.times}
        for i in range(n):
            data[f"m[{i}]"] = self.mean[:, i]
        for i, j in upper:
            data[f"M[{i}][{j}]"] = self.second[:, i, j]
        for i in range(n):
            data[f"se_m[{i}]"] = se_m[:, i]
        for i, j in upper:
            data[f"se_M[{i}][{j}]"] = se_M[:, i, j]
        return pd.DataFrame(data)


def standard_errors(stats):
    """
    Standard errors sqrt(sample variance / N) of the mean and second-moment
    estimators.  Raises ValueError for fewer than two realizations.
    """
    if stats.n_realizations < 2:
        raise ValueError("standard errors need at least two realizations")
    n = stats.n_realizations
    return np.sqrt(stats.var_mean / n), np.sqrt(stats.var_second / n)


class MomentAccumulator:
    """
    Running sums of psi, psi psi^T and (psi psi^T)^2 per output time in
    extended precision.  Accumulators of disjoint realization blocks combine
    with ``merge``; merging in a fixed order gives bit-identical totals.
    """

    def __init__(self, n_times, n):
        self.count = 0
        self.s1 = np.zeros((n_times, n), dtype=np.longdouble)
        self.s2 = np.zeros((n_times, n, n), dtype=np.longdouble)
        self.s4 = np.zeros((n_times, n, n), dtype=np.longdouble)
        self._rows = np.zeros(n_times, dtype=int)

    def add(self, k, psi):
        prod = psi[:, :, None] * psi[:, None, :]
        self.s1[k] += psi.sum(axis=0, dtype=np.longdouble)
        self.s2[k] += prod.sum(axis=0, dtype=np.longdouble)
        self.s4[k] += (prod * prod).sum(axis=0, dtype=np.longdouble)
        self._rows[k] += psi.shape[0]
        self.count = int(self._rows.max())

    def merge(self, other):
        self.s1 += other.s1
        self.s2 += other.s2
        self.s4 += other.s4
        self._rows += other._rows
        self.count = int(self._rows.max())
        return self

    def finalize(self, times, model=REDUCED, state_names=()):
        n = self.count
        mean = self.s1 / n
        second = self.s2 / n
        if n >= 2:
            sq = np.diagonal(self.s2, axis1=1, axis2=2)
            var_mean = np.maximum((sq - n * mean * mean) / (n - 1), 0)
            var_second = np.maximum((self.s4 - n * second * second) / (n - 1), 0)
        else:
            var_mean = np.full(mean.shape, np.nan)
            var_second = np.full(second.shape, np.nan)
        second = 0.5 * (second + np.swapaxes(second, 1, 2))
        return EnsembleStats(
            times=np.asarray(times, dtype=float),
            mean=mean.astype(float),
            second=second.astype(float),
            var_mean=np.asarray(var_mean, dtype=float),
            var_second=np.asarray(var_second, dtype=float),
            n_realizations=n,
            model=model,
            state_names=tuple(state_names),
        )


def _original_coefficients(sp, x, z, t, eps):
    b = sp_blocks(sp, x, z, t, eps)
    drift = np.block([[b.A1, b.A2], [b.B1 / eps, b.B2 / eps]])
    noise = np.vstack([np.hstack([b.sigma_x, np.zeros((sp.n_s, sp.m_f))]), b.sigma_z / eps])
    return drift, noise


def _reduced_coefficients(sp, x, z, t):
    b = sp_blocks(sp, x, z, t, 0.0)
    return b.A1 + b.A2 @ solve_projection(b.B1, b.B2), b.sigma_x


def frozen_coefficients(model, cfg, path):
    """Drift and noise matrices at the start of every Euler-Maruyama step."""
    counts, sizes = cfg.step_schedule()
    starts = np.concatenate([t0 + h * np.arange(c) for t0, h, c in zip(cfg.t_grid[:-1], sizes, counts)])
    drifts, noises = [], []
    for t in starts:
        x, z = path.at(t)
        if cfg.model == ORIGINAL:
            D, N = _original_coefficients(model, x, z, t, cfg.epsilon)
        else:
            D, N = _reduced_coefficients(model.sp, x, z, t)
        drifts.append(D)
        noises.append(N)
    return np.array(drifts), np.array(noises), counts, sizes


@dataclass(frozen=True)
class StepOperators:
    """
    Per-step linear maps of the Euler-Maruyama recursion on row vectors,
    psi_next = psi @ propagators[s] + xi @ noise_factors[s] with xi ~ N(0, I_n).

    noise_factors[s] is (sqrt(h) L)^T for a square root L L^T = sigma sigma^T,
    so every step uses n normal draws per realization whatever the number of
    reaction channels.
    """

    propagators: np.ndarray
    noise_factors: np.ndarray
    counts: np.ndarray
    sizes: np.ndarray

    @property
    def n(self):
        return self.propagators.shape[1]

    @classmethod
    def from_coefficients(cls, drifts, noises, counts, sizes):
        h = np.repeat(sizes, counts)
        n = drifts.shape[1]
        propagators = np.swapaxes(np.eye(n) + h[:, None, None] * drifts, 1, 2)
        w, V = np.linalg.eigh(noises @ np.swapaxes(noises, 1, 2))
        roots = V * np.sqrt(np.clip(w, 0.0, None) * h[:, None])[:, None, :]
        return cls(np.ascontiguousarray(propagators), np.ascontiguousarray(np.swapaxes(roots, 1, 2)),
                   counts, sizes)


def step_operators(model, cfg, path):
    return StepOperators.from_coefficients(*frozen_coefficients(model, cfg, path))


def block_generator(master_seed, block):
    """Philox stream of realization block ``block``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), int(block)])))


def block_paths(block, cfg, ops, psi0):
    """
    Yields psi of every realization in the block at each time of cfg.t_grid,
    shaped (block size, n).  The yielded array is overwritten by the next
    step, copy it to keep it.

    Every chunk draws normals for a full BLOCK_SIZE block and the block uses
    its leading rows, so realization r sees the same numbers whatever
    n_realizations is.  Finiteness is checked at output times only.
    """
    start = block * BLOCK_SIZE
    size = min(BLOCK_SIZE, cfg.n_realizations - start)
    rng = block_generator(cfg.master_seed, block)
    n = ops.n
    psi = np.tile(np.asarray(psi0, dtype=float), (size, 1))
    buf = np.empty_like(psi)
    kick = np.empty_like(psi)
    yield psi
    step = 0
    draws, used = None, STEP_CHUNK
    for k, count in enumerate(ops.counts):
        for _ in range(count):
            if used == STEP_CHUNK:
                draws = rng.standard_normal((STEP_CHUNK, BLOCK_SIZE, n))
                used = 0
            np.matmul(psi, ops.propagators[step], out=buf)
            np.matmul(draws[used, :size], ops.noise_factors[step], out=kick)
            buf += kick
            psi, buf = buf, psi
            used += 1
            step += 1
        finite = np.isfinite(psi).all(axis=1)
        if not finite.all():
            raise DivergenceError(step, float(cfg.t_grid[k + 1]), start + int(np.argmin(finite)))
        yield psi


def _run_block(block, cfg, ops, psi0):
    acc = MomentAccumulator(len(cfg.t_grid), ops.n)
    for k, psi in enumerate(block_paths(block, cfg, ops, psi0)):
        acc.add(k, psi)
    return acc


def _check_inputs(model, cfg, path):
    if cfg.model == ORIGINAL and not isinstance(model, SingularPerturbedLNA):
        raise ValueError("the original ensemble needs a SingularPerturbedLNA")
    if cfg.model == REDUCED and not isinstance(model, ReducedModel):
        raise ValueError("the reduced ensemble needs a ReducedModel")
    if path.times[0] > cfg.t_grid[0] + 1e-12 or path.times[-1] < cfg.t_grid[-1] - 1e-12:
        raise ValueError("deterministic path does not cover the output grid")
    sp = model if cfg.model == ORIGINAL else model.sp
    return sp, (sp.n_s + sp.n_f if cfg.model == ORIGINAL else sp.n_s)


def simulate_ensemble(model, cfg, path, psi0=None, threads=None):
    """
    Sample moments of the original fluctuations [psi_x; psi_z] or of the
    reduced psi_x at cfg.t_grid.

    Inputs:
    model   : SingularPerturbedLNA (cfg.model == 'original') or ReducedModel
    cfg     : EnsembleConfig
    path    : DeterministicPath covering cfg.t_grid
    psi0    : deterministic initial fluctuation, zeros by default
    threads : worker threads; has no effect on the result

    Outputs:
    EnsembleStats
    """
    sp, n = _check_inputs(model, cfg, path)
    psi0 = np.zeros(n) if psi0 is None else np.asarray(psi0, dtype=float).reshape(n)

    ops = step_operators(model, cfg, path)
    n_blocks = -(-int(cfg.n_realizations) // BLOCK_SIZE)
    LOGGER.info("%s ensemble: %d realizations in %d blocks, %d steps each",
                cfg.model, cfg.n_realizations, n_blocks, int(ops.counts.sum()))

    def run(block):
        acc = _run_block(block, cfg, ops, psi0)
        LOGGER.debug("block %d done", block)
        return acc

    with ThreadPoolExecutor(max_workers=threads) as pool:
        partials = list(pool.map(run, range(n_blocks)))
    total = partials[0]
    for acc in partials[1:]:
        total.merge(acc)
    names = sp.slow_names + (sp.fast_names if cfg.model == ORIGINAL else ())
    return total.finalize(cfg.t_grid, cfg.model, names)


def sample_paths(model, cfg, path, psi0=None):
    """
    Every realization's psi at cfg.t_grid, shaped (len(t_grid), N, n).
    Same numbers as simulate_ensemble with the same config.
    """
    _, n = _check_inputs(model, cfg, path)
    psi0 = np.zeros(n) if psi0 is None else np.asarray(psi0, dtype=float).reshape(n)
    ops = step_operators(model, cfg, path)
    out = np.empty((len(cfg.t_grid), int(cfg.n_realizations), n))
    for block in range(-(-int(cfg.n_realizations) // BLOCK_SIZE)):
        start = block * BLOCK_SIZE
        for k, psi in enumerate(block_paths(block, cfg, ops, psi0)):
            out[k, start:start + psi.shape[0]] = psi
    return out


def ensemble_path(model, cfg, x0, z0=None, rtol=1e-10, atol=1e-12):
    """
    Deterministic path for an ensemble, on a grid of spacing at most
    min(0.05, eps/5) that contains every output time.
    """
    t0, t1 = float(cfg.t_grid[0]), float(cfg.t_grid[-1])
    spacing = 0.05 if cfg.model == REDUCED else min(0.05, cfg.epsilon / 5.0)
    fine = np.linspace(t0, t1, int(np.ceil((t1 - t0) / spacing)) + 1)
    grid = np.union1d(fine, cfg.t_grid)
    if cfg.model == ORIGINAL:
        return original_path(model, x0, z0, (t0, t1), grid, cfg.epsilon, rtol, atol)
    return reduced_path(model, x0, (t0, t1), grid, rtol, atol)
