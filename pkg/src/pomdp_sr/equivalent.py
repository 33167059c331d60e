"""Reduction of a POMDP with state requests to a plain POMDP.

The transformed model splits every timestep in two: request-decision states
(phase 0) alternate with action states (phase 1), the discount becomes
sqrt(gamma), and requesting emits an observation that reveals the phase-1
state. Values scale accordingly; see to_equivalent_pomdp for the exact
relation. Planners that consume this model must respect legal_actions; the
probability tables still carry neutral filler rows (self-loop, null
observation, zero reward) for illegal pairs so the model validates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import PomdpModel, PomdpSr

REQUEST_ACTION = 0
NO_REQUEST_ACTION = 1


@dataclass(frozen=True)
class EquivalentPomdp:
    """Plain-POMDP encoding of a POMDP with state requests.

    States 0..S-1 are request-decision copies of the base states, states
    S..2S-1 are action-phase copies. Actions are [request, no-request,
    env_0..env_{A-1}]. Observations are the base observations followed by one
    reveal observation per base state and a final null observation.
    """

    model: PomdpModel
    num_base_states: int
    num_base_actions: int
    num_base_observations: int

    @property
    def legal_actions(self) -> list:
        return self._legal_actions()

    def _legal_actions(self):
        phase0 = (REQUEST_ACTION, NO_REQUEST_ACTION)
        phase1 = tuple(range(2, 2 + self.num_base_actions))
        return [phase0] * self.num_base_states + [phase1] * self.num_base_states

    def legal_actions_of(self, state: int) -> tuple:
        if state < self.num_base_states:
            return (REQUEST_ACTION, NO_REQUEST_ACTION)
        return tuple(range(2, 2 + self.num_base_actions))

    def phase0_state(self, base_state: int) -> int:
        return base_state

    def phase1_state(self, base_state: int) -> int:
        return self.num_base_states + base_state

    def is_phase0(self, state: int) -> bool:
        return state < self.num_base_states

    def base_state(self, state: int) -> int:
        return state % self.num_base_states

    def env_action(self, base_action: int) -> int:
        return 2 + base_action

    def base_action_of(self, action: int) -> int:
        if action < 2:
            raise ValueError("request/no-request actions have no base counterpart")
        return action - 2

    def reveal_observation(self, base_state: int) -> int:
        return self.num_base_observations + base_state

    @property
    def null_observation(self) -> int:
        return self.num_base_observations + self.num_base_states


def to_equivalent_pomdp(p: PomdpSr) -> EquivalentPomdp:
    """Encode request semantics into a plain POMDP.

    The request charge is -c/sqrt(gamma) at the phase-0 step and the discount
    is sqrt(gamma), so a phase-0 value V' of the result relates to the native
    value V of the source by V'[cost c](b) = sqrt(gamma) * V[cost c/gamma](b):
    native values are scaled by sqrt(gamma) with the request cost remapped to
    c/gamma.
    """
    base = p.model
    s_n, a_n, o_n = base.num_states, base.num_actions, base.num_observations
    n2 = 2 * s_n
    num_actions = a_n + 2
    num_obs = o_n + s_n + 1
    null_obs = o_n + s_n
    root_g = math.sqrt(base.discount)

    phase0 = np.arange(s_n)
    phase1 = s_n + phase0

    transitions = []
    ones = np.ones(s_n)
    # request / no-request: deterministic phase flip 0 -> 1; filler self-loops
    # on phase-1 rows.
    flip = sp.coo_matrix(
        (np.concatenate([ones, ones]),
         (np.concatenate([phase0, phase1]), np.concatenate([phase1, phase1]))),
        shape=(n2, n2)).tocsr()
    transitions.append(flip)
    transitions.append(flip.copy())
    for a in range(a_n):
        t = base.transition_matrix(a).tocoo()
        rows = np.concatenate([s_n + t.row, phase0])
        cols = np.concatenate([t.col, phase0])  # filler self-loops on phase 0
        data = np.concatenate([t.data, ones])
        transitions.append(sp.coo_matrix((data, (rows, cols)), shape=(n2, n2)).tocsr())

    obs = np.zeros((num_actions, n2, num_obs))
    # request: arriving phase-1 state is revealed
    obs[REQUEST_ACTION, phase1, o_n + phase0] = 1.0
    obs[REQUEST_ACTION, phase0, null_obs] = 1.0
    # no-request: null observation everywhere
    obs[NO_REQUEST_ACTION, :, null_obs] = 1.0
    for a in range(a_n):
        obs[2 + a, phase0, :o_n] = base.observation_table[a]
        obs[2 + a, phase1, null_obs] = 1.0

    rewards = np.zeros((n2, num_actions))
    rewards[phase0, REQUEST_ACTION] = -p.request_cost / root_g
    rewards[phase1, 2:] = base.rewards

    model = PomdpModel(transitions, obs, rewards, root_g)
    return EquivalentPomdp(model, s_n, a_n, o_n)
