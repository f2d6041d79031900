import numpy as np
import pytest

from qlambda import Policy, random_mdp, two_state_chain


@pytest.fixture
def chain():
    return two_state_chain(gamma=0.5)


@pytest.fixture
def always_a1():
    return Policy(np.array([[0.0, 1.0], [0.0, 1.0]]))


@pytest.fixture
def uniform2():
    return Policy(np.full((2, 2), 0.5))


def random_policy(rng, n_states, n_actions):
    return Policy(rng.dirichlet(np.ones(n_actions), size=n_states))


@pytest.fixture
def small_mdp():
    return random_mdp(6, 3, branching=3, reward_sparsity=0.3, seed=11, gamma=0.9)
