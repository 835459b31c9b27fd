import numpy as np
import pytest
from hypothesis import strategies as st

from npdag.graph import Dag


def random_dag(rng: np.random.Generator, d: int, prob: float = 0.3) -> Dag:
    """Upper-triangular Bernoulli edges under a random relabeling."""
    perm = rng.permutation(d)
    edges = {(int(perm[i]), int(perm[j]))
             for i in range(d) for j in range(i + 1, d) if rng.random() < prob}
    return Dag(d, frozenset(edges))


@st.composite
def dags(draw, min_d=1, max_d=8):
    d = draw(st.integers(min_d, max_d))
    seed = draw(st.integers(0, 2**31 - 1))
    prob = draw(st.sampled_from([0.0, 0.2, 0.5, 0.9]))
    return random_dag(np.random.default_rng(seed), d, prob)


@pytest.fixture
def chain3():
    return Dag(3, frozenset({(0, 1), (1, 2)}))
