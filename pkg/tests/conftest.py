import numpy as np
import pytest

from synapse_sync.cli import FAMILY_RANGES, seeded_population
from synapse_sync.ifsim import IFNetwork
from synapse_sync.network import ring_graph
from synapse_sync.neuron import piecewise_neuron

# Corner of the conductance box with the smallest knees; used for frozen values.
CORNER = (0.3, 1.75, 2.75)

# Five-neuron ring used by the contraction and fixed-point checks.  Seed 4 of the
# population stream gives c_sf * c_fs = 0.819 < 1, so M1 holds.
SYSTEM5_SEED = 4
SYSTEM5_GAIN = 0.04


# Closed-form oracles shared by several modules.

def m_inf(v):
    return 0.5 + 0.5 * np.tanh(v / 0.15)


def x_null_oracle(gl, gca, gk, m, v):
    return (gl * (-0.4 - v) + gca * m_inf(v) * (1 - v) + 0.4 + m * (1 - v)) / (gk * (v + 0.7))


def dense_knees(gl, gca, gk, m, n=1_000_001):
    """Brute-force knees: extrema of the closed-form nullcline on a fine grid."""
    v = np.linspace(-0.6, 0.6, n)
    x = x_null_oracle(gl, gca, gk, m, v)
    dx = np.diff(x)
    turn = np.nonzero(np.sign(dx[:-1]) != np.sign(dx[1:]))[0] + 1
    lo, hi = turn[0], turn[1]
    return x[lo], x[hi]


def family(n, seed, tau_knee=30.0):
    return [piecewise_neuron(*p, tau_knee=tau_knee) for p in seeded_population(FAMILY_RANGES, seed, n)]


@pytest.fixture(scope="session")
def corner():
    return piecewise_neuron(*CORNER)


@pytest.fixture(scope="session")
def system5():
    models = family(5, SYSTEM5_SEED)
    return IFNetwork(models, ring_graph(5, 2, SYSTEM5_GAIN))


@pytest.fixture
def rng():
    return np.random.default_rng(7)
