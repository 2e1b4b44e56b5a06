from pathlib import Path

import numpy as np
import pytest

from lnareduce.lna import TransformMatrices, assemble_lna, transform_to_sp
from lnareduce.network import (
    FAST, PHOSPHO_A_X, PHOSPHO_A_Z, PHOSPHO_FAST_NAMES, PHOSPHO_SLOW_NAMES, PhosphoParams,
    PhysicalDomain, Reaction, ReactionNetwork, build_example_phospho, mass_action,
    phospho_closed_form_gamma1,
)
from lnareduce.reduction import reduce

MODELS = Path(__file__).resolve().parents[1] / "models"


@pytest.fixture
def params():
    return PhosphoParams()


@pytest.fixture
def network(params):
    return build_example_phospho(params)


@pytest.fixture
def phospho_tm():
    return TransformMatrices(PHOSPHO_A_X, PHOSPHO_A_Z, PHOSPHO_SLOW_NAMES, PHOSPHO_FAST_NAMES)


@pytest.fixture
def sp(network, phospho_tm):
    return transform_to_sp(assemble_lna(network), phospho_tm, network)


@pytest.fixture
def closed_form(params):
    return lambda x, t: np.array([phospho_closed_form_gamma1(params, x[0])])


@pytest.fixture
def reduced(sp, closed_form):
    return reduce(sp, np.zeros(2), np.zeros(1), closed_form_gamma1=closed_form)


def two_species_sp(fast_rate, epsilon=0.01, slow_rates=(1.0, 0.5)):
    """Slow species a (production, decay) and fast species b with a single first-order fast reaction."""
    production, decay = slow_rates
    reactions = [
        Reaction("a_decay", (-1, 0), mass_action(decay, {0: 1}, 2)),
        Reaction("b_fast", (0, 1 if fast_rate > 0 else -1), mass_action(abs(fast_rate), {1: 1}, 2), FAST),
    ]
    if production:
        reactions.insert(0, Reaction("a_production", (1, 0), mass_action(production, {}, 2)))
    net = ReactionNetwork(
        species_names=("a", "b"),
        reactions=reactions,
        epsilon=epsilon,
        domain=PhysicalDomain((0.0, 0.0), (np.inf, np.inf)),
        name="two-species",
    )
    tm = TransformMatrices(((1.0, 0.0),), ((0.0, 1.0),), ("a",), ("b",))
    return transform_to_sp(assemble_lna(net), tm, net)


@pytest.fixture
def unstable_sp():
    """Fast autocatalysis b -> 2b: df_z/dz = +2."""
    return two_species_sp(2.0)


@pytest.fixture
def decay_sp():
    """Both species only decay, so from zero every propensity and noise term stays zero."""
    return two_species_sp(-1.0, slow_rates=(0.0, 0.5))
