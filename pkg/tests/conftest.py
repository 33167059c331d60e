import numpy as np
import pytest

from pomdp_sr.model import PomdpModel, PomdpSr


def random_dense_pomdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    num_observations: int,
    discount: float,
    reward_scale: float = 1.0,
    sparsity: float = 0.0,
) -> PomdpModel:
    """Random model with Dirichlet rows; optionally zero out some entries."""
    T = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    if sparsity > 0.0:
        mask = rng.random((num_states, num_actions, num_states)) < sparsity
        # never kill an entire row
        for s in range(num_states):
            for a in range(num_actions):
                if mask[s, a].all():
                    mask[s, a, rng.integers(num_states)] = False
        T = np.where(mask, 0.0, T)
        T = T / T.sum(axis=2, keepdims=True)
    Z = rng.dirichlet(np.ones(num_observations), size=(num_states, num_actions))
    R = rng.uniform(-reward_scale, reward_scale, size=(num_states, num_actions))
    return PomdpModel.from_dense(T, Z, R, discount)


def random_sr_problem(rng: np.random.Generator, **kwargs) -> PomdpSr:
    cost = float(rng.uniform(0.02, 0.4))
    return PomdpSr(model=random_dense_pomdp(rng, **kwargs), request_cost=cost)


def random_belief(rng: np.random.Generator, num_states: int):
    from pomdp_sr.model import Belief

    return Belief.from_dense(rng.dirichlet(np.ones(num_states)))


def counterexample_problem(cost: float = 0.1) -> PomdpSr:
    """2-state model whose uniform transitions make FIB collapse to the
    immediate reward, far below the value of paying to stay localized."""
    T = np.full((2, 2, 2), 0.5)
    Z = np.ones((2, 2, 1))
    R = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return PomdpSr(model=PomdpModel.from_dense(T, Z, R, 0.95), request_cost=cost)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
