"""Reaction-network data model and the built-in phosphorylation example.

Propensities are macroscopic rates (concentration units per time).  Fast
reactions store the unscaled rate; the 1/epsilon factor is applied by
``lnareduce.lna`` so that epsilon can be swept on a single network.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

LOGGER = logging.getLogger(__name__)

SLOW = "slow"
FAST = "fast"
TIMESCALES = (SLOW, FAST)


class ConstantInput:
    """Time input Z(t) that never changes."""

    def __init__(self, value):
        self.value = float(value)

    def __call__(self, t):
        return self.value

    def __repr__(self):
        return f"ConstantInput({self.value!r})"


class PiecewiseConstantInput:
    """
    Time input that holds values[k] on [times[k], times[k+1]).

    Inputs:
    times  : increasing breakpoints, times[0] is where the first value starts
    values : one value per breakpoint
    """

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1 or len(self.times) == 0:
            raise ValueError("times and values must be equal-length non-empty lists")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __call__(self, t):
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(k, 0)])


class AffineProductRate:
    """
    Polynomial rate law written as a product of affine factors:

        a(y, t) = scale * Z(t) * prod_k (offset_k + coeffs_k . y)

    Mass-action terms are the special case of factors with zero offset and a
    single unit coefficient.  The gradient is exact.
    """

    def __init__(self, scale, factors, time_factor=None):
        self.scale = float(scale)
        self.factors = tuple((float(off), np.asarray(c, dtype=float)) for off, c in factors)
        self.time_factor = time_factor

    def _prefactor(self, t):
        if self.time_factor is None:
            return self.scale
        return self.scale * self.time_factor(t)

    def __call__(self, y, t):
        value = self._prefactor(t)
        for offset, coeffs in self.factors:
            value *= offset + coeffs @ y
        return float(value)

    def gradient(self, y, t):
        terms = [offset + coeffs @ y for offset, coeffs in self.factors]
        grad = np.zeros(len(y))
        for k, (_, coeffs) in enumerate(self.factors):
            others = np.prod([v for j, v in enumerate(terms) if j != k])
            grad += others * coeffs
        return self._prefactor(t) * grad


def mass_action(scale, orders, n_species, time_factor=None):
    """Builds an AffineProductRate for scale * prod_j y_j^orders[j]."""
    factors = []
    for j, order in orders.items():
        unit = np.zeros(n_species)
        unit[j] = 1.0
        factors.extend([(0.0, unit)] * int(order))
    return AffineProductRate(scale, factors, time_factor)


def macroscopic_rate(microscopic, omega):
    """
    Macroscopic rate a~(y, t) = a(omega * y, t) / omega from a microscopic
    propensity acting on molecule counts.  Networks in this package store
    macroscopic rates directly; this is the bridge for count-based models.
    """
    return lambda y, t: microscopic(omega * np.asarray(y, dtype=float), t) / omega


@dataclass(frozen=True)
class Reaction:
    name: str
    stoich: np.ndarray
    propensity: Callable
    timescale: str = SLOW
    gradient: Optional[Callable] = None

    def __post_init__(self):
        stoich = np.array(self.stoich, dtype=float)
        stoich.setflags(write=False)
        object.__setattr__(self, "stoich", stoich)
        if self.gradient is None and hasattr(self.propensity, "gradient"):
            object.__setattr__(self, "gradient", self.propensity.gradient)

    @property
    def is_fast(self):
        return self.timescale == FAST


@dataclass(frozen=True)
class PhysicalDomain:
    """Axis-aligned box the macroscopic state is allowed to occupy."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("lower", "upper"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def contains(self, y, tol=1e-9):
        y = np.asarray(y, dtype=float)
        scale = tol * (1.0 + np.abs(y))
        return bool(np.all(y >= self.lower - scale) and np.all(y <= self.upper + scale))


@dataclass(frozen=True)
class ReactionNetwork:
    species_names: Tuple[str, ...]
    reactions: Tuple[Reaction, ...]
    epsilon: float
    volume: float = 1.0
    domain: Optional[PhysicalDomain] = None
    parameters: Dict[str, float] = field(default_factory=dict)
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "species_names", tuple(self.species_names))
        object.__setattr__(self, "reactions", tuple(self.reactions))

    @property
    def n_species(self):
        return len(self.species_names)

    @property
    def n_reactions(self):
        return len(self.reactions)

    @property
    def slow_indices(self):
        return [i for i, r in enumerate(self.reactions) if not r.is_fast]

    @property
    def fast_indices(self):
        return [i for i, r in enumerate(self.reactions) if r.is_fast]

    @property
    def stoichiometry(self):
        """n x m matrix whose column i is the state change of reaction i."""
        return np.column_stack([r.stoich for r in self.reactions])

    def with_epsilon(self, epsilon):
        return replace(self, epsilon=float(epsilon))


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def validate_network(net):
    """
    Lists structural problems of a network without raising.

    Inputs:
    net     : ReactionNetwork

    Outputs:
    ValidationReport : empty violations list means the network is well formed
    """
    report = ValidationReport()
    n = net.n_species
    for r in net.reactions:
        if r.stoich.ndim != 1 or len(r.stoich) != n:
            report.violations.append(
                f"reaction '{r.name}': stoich has length {r.stoich.size}, expected {n}"
            )
        if r.timescale not in TIMESCALES:
            report.violations.append(f"reaction '{r.name}': unknown timescale '{r.timescale}'")
    if not (np.isfinite(net.epsilon) and net.epsilon > 0):
        report.violations.append(f"epsilon must be positive, got {net.epsilon}")
    if not (np.isfinite(net.volume) and net.volume > 0):
        report.violations.append(f"volume must be positive, got {net.volume}")
    if net.domain is not None and (len(net.domain.lower) != n or len(net.domain.upper) != n):
        report.violations.append("domain bounds must have one entry per species")
    return report


# Built-in example -----------------------------------------------------------

PHOSPHO_SPECIES = ("x_star", "c", "g")
PHOSPHO_A_X = ((1.0, 1.0, 0.0), (0.0, 0.0, 1.0))
PHOSPHO_A_Z = ((0.0, 1.0, 0.0),)
PHOSPHO_SLOW_NAMES = ("v", "g")
PHOSPHO_FAST_NAMES = ("c",)


@dataclass(frozen=True)
class PhosphoParams:
    """Rate constants of the phosphorylation / promoter-binding example."""

    k1: float = 0.01
    k2: float = 0.01
    kd: float = 100.0
    beta: float = 0.1
    delta: float = 0.1
    X_tot: float = 200.0
    Y: float = 20.0
    p_tot: float = 100.0
    Z: Callable = field(default_factory=lambda: ConstantInput(1.0))
    epsilon: float = 0.05

    def __post_init__(self):
        for name in ("k1", "k2", "kd", "beta", "delta", "X_tot", "Y", "p_tot", "epsilon"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"PhosphoParams.{name} must be strictly positive, got {value}")
        if self.Z(0.0) < 0:
            raise ValueError("PhosphoParams.Z(t) must be nonnegative")

    @classmethod
    def from_koff(cls, k_off, **kwargs):
        """Parameterizes the timescale ratio through the unbinding rate: eps = k2 Y / k_off."""
        base = cls(**kwargs)
        return replace(base, epsilon=base.k2 * base.Y / float(k_off))

    @property
    def k_off(self):
        return self.k2 * self.Y / self.epsilon

    @property
    def k_on(self):
        return self.k_off / self.kd

    def as_dict(self):
        return {
            "k1": self.k1, "k2": self.k2, "kd": self.kd, "beta": self.beta,
            "delta": self.delta, "X_tot": self.X_tot, "Y": self.Y,
            "p_tot": self.p_tot, "epsilon": self.epsilon,
        }


def build_example_phospho(p=None):
    """
    Builds the three-species network (x*, c, g) of a phosphorylated protein
    binding a promoter that expresses G.  Binding/unbinding are the fast
    reactions and are stored without their 1/epsilon factor.
    """
    p = PhosphoParams() if p is None else p
    e = np.eye(3)
    k2Y = p.k2 * p.Y
    reactions = (
        Reaction("phosphorylation", (1, 0, 0),
                 AffineProductRate(p.k1, [(p.X_tot, -e[0] - e[1])], time_factor=p.Z)),
        Reaction("dephosphorylation", (-1, 0, 0), AffineProductRate(k2Y, [(0.0, e[0])])),
        Reaction("binding", (-1, 1, 0),
                 AffineProductRate(k2Y / p.kd, [(0.0, e[0]), (p.p_tot, -e[1])]), FAST),
        Reaction("unbinding", (1, -1, 0), AffineProductRate(k2Y, [(0.0, e[1])]), FAST),
        Reaction("production", (0, 0, 1), AffineProductRate(p.beta, [(0.0, e[1])])),
        Reaction("decay", (0, 0, -1), AffineProductRate(p.delta, [(0.0, e[2])])),
    )
    domain = PhysicalDomain(lower=(0.0, 0.0, 0.0), upper=(np.inf, p.p_tot, np.inf))
    return ReactionNetwork(
        species_names=PHOSPHO_SPECIES,
        reactions=reactions,
        epsilon=p.epsilon,
        domain=domain,
        parameters=p.as_dict(),
        name="phospho-example",
    )


def phospho_closed_form_gamma1(p, v):
    """Complex level on the slow manifold: the root of f_z(v, c) = 0 with 0 <= c <= p_tot."""
    s = v + p.p_tot + p.kd
    return 0.5 * s - 0.5 * np.sqrt(s * s - 4.0 * v * p.p_tot)
