"""Core types for discrete POMDPs and POMDPs with paid state requests.

A POMDP with state requests extends a plain POMDP with a per-step option to
pay a fixed cost and observe the true state before choosing the environmental
action. One timestep therefore has two decision points: the request decision
(phase 0) and the environmental action (phase 1). Discounting applies once per
timestep; there is no discount between the two phases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import scipy.sparse as sp

PROB_TOL = 1e-9
BELIEF_PRUNE = 1e-12


class ModelValidationError(ValueError):
    """A model's probability tables or parameters are malformed."""


class ImpossibleObservation(ValueError):
    """Belief update conditioned on an observation with zero probability."""


class Phase(IntEnum):
    REQUEST_DECISION = 0
    ENV_ACTION = 1


class Belief:
    """Sparse probability distribution over states, tagged with a phase.

    Entries below 1e-12 are pruned and the rest renormalized, so stored
    probabilities are strictly positive and sum to 1. States are kept sorted.
    Instances are immutable.
    """

    __slots__ = ("states", "probs", "phase")

    def __init__(self, states, probs, phase: Phase = Phase.REQUEST_DECISION):
        states = np.asarray(states, dtype=np.int64)
        probs = np.asarray(probs, dtype=np.float64)
        if states.shape != probs.shape or states.ndim != 1:
            raise ValueError("states and probs must be 1-d arrays of equal length")
        if np.any(probs < 0):
            raise ValueError("belief probabilities must be nonnegative")
        total = probs.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValueError("belief must have positive total mass")
        probs = probs / total
        keep = probs > BELIEF_PRUNE
        states, probs = states[keep], probs[keep]
        if states.size == 0:
            raise ValueError("belief empty after pruning")
        order = np.argsort(states, kind="stable")
        states, probs = states[order], probs[order]
        if np.any(states[1:] == states[:-1]):
            raise ValueError("duplicate states in belief")
        probs = probs / probs.sum()
        object.__setattr__(self, "states", tuple(int(s) for s in states))
        object.__setattr__(self, "probs", tuple(float(p) for p in probs))
        object.__setattr__(self, "phase", Phase(phase))

    def __setattr__(self, name, value):
        raise AttributeError("Belief is immutable")

    @classmethod
    def from_dict(cls, entries: dict, phase: Phase = Phase.REQUEST_DECISION) -> "Belief":
        states = np.fromiter(entries.keys(), dtype=np.int64, count=len(entries))
        probs = np.fromiter(entries.values(), dtype=np.float64, count=len(entries))
        return cls(states, probs, phase)

    @classmethod
    def from_dense(cls, dense, phase: Phase = Phase.REQUEST_DECISION) -> "Belief":
        dense = np.asarray(dense, dtype=np.float64)
        states = np.flatnonzero(dense > 0)
        return cls(states, dense[states], phase)

    def as_dict(self) -> dict:
        return {int(s): float(p) for s, p in zip(self.states, self.probs)}

    def as_dense(self, num_states: int) -> np.ndarray:
        out = np.zeros(num_states)
        out[list(self.states)] = self.probs
        return out

    def support_size(self) -> int:
        return len(self.states)

    def is_corner(self) -> bool:
        return len(self.states) == 1

    def key(self):
        """Hashable exact-match key (used for point-set deduplication)."""
        return (int(self.phase), self.states, self.probs)

    def __eq__(self, other):
        return isinstance(other, Belief) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        entries = ", ".join(f"{s}: {p:.6g}" for s, p in zip(self.states, self.probs))
        return f"Belief({{{entries}}}, phase={self.phase.name})"


def corner_belief(state: int, phase: Phase = Phase.REQUEST_DECISION) -> Belief:
    """Point-mass belief on a single state."""
    return Belief(np.array([state]), np.array([1.0]), phase)


class PomdpModel:
    """Finite discrete POMDP.

    Transitions are stored per action as sparse CSR matrices (row s gives the
    distribution over successor states); the observation table O(o | s', a) is
    dense, indexed [a, s', o]; rewards R(s, a) are dense. All probability rows
    must sum to 1 within 1e-9 and the discount must lie in [0, 1).
    """

    def __init__(self, transition_matrices, observation_table, rewards, discount):
        self._T = [sp.csr_matrix(t, dtype=np.float64) for t in transition_matrices]
        self.observation_table = np.ascontiguousarray(observation_table, dtype=np.float64)
        self.rewards = np.ascontiguousarray(rewards, dtype=np.float64)
        self.discount = float(discount)
        self.num_actions = len(self._T)
        if self.num_actions == 0:
            raise ModelValidationError("model needs at least one action")
        self.num_states = self._T[0].shape[0]
        self.num_observations = self.observation_table.shape[2]
        self._validate()
        self._pack = None
        self._terminal = None

    @classmethod
    def from_dense(cls, transitions, observations, rewards, discount) -> "PomdpModel":
        """Build from dense arrays: transitions[s, a, s'], observations[s', a, o],
        rewards[s, a]."""
        transitions = np.asarray(transitions, dtype=np.float64)
        observations = np.asarray(observations, dtype=np.float64)
        num_states, num_actions, _ = transitions.shape
        mats = [transitions[:, a, :] for a in range(num_actions)]
        obs = np.transpose(observations, (1, 0, 2))  # -> [a, s', o]
        return cls(mats, obs, rewards, discount)

    @classmethod
    def from_triplets(cls, num_states, num_actions, num_observations, discount,
                      transitions, observations, rewards) -> "PomdpModel":
        """Build from sparse entry lists: transitions [(s, a, s', p)],
        observations [(s', a, o, p)], rewards [(s, a, r)]."""
        t_dense = [sp.lil_matrix((num_states, num_states)) for _ in range(num_actions)]
        for s, a, s2, p in transitions:
            t_dense[int(a)][int(s), int(s2)] += float(p)
        obs = np.zeros((num_actions, num_states, num_observations))
        for s2, a, o, p in observations:
            obs[int(a), int(s2), int(o)] += float(p)
        rew = np.zeros((num_states, num_actions))
        for s, a, r in rewards:
            rew[int(s), int(a)] = float(r)
        return cls(t_dense, obs, rew, discount)

    def _validate(self):
        if not (0.0 <= self.discount < 1.0):
            raise ModelValidationError(f"discount must be in [0, 1), got {self.discount}")
        if self.observation_table.shape[:2] != (self.num_actions, self.num_states):
            raise ModelValidationError("observation table shape mismatch")
        if self.rewards.shape != (self.num_states, self.num_actions):
            raise ModelValidationError("reward table shape mismatch")
        if not np.all(np.isfinite(self.rewards)):
            raise ModelValidationError("rewards must be finite")
        for a, t in enumerate(self._T):
            if t.shape != (self.num_states, self.num_states):
                raise ModelValidationError("transition matrix shape mismatch")
            if t.nnz and t.data.min() < -PROB_TOL:
                raise ModelValidationError(f"negative transition probability (action {a})")
            sums = np.asarray(t.sum(axis=1)).ravel()
            bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
            if bad.size:
                raise ModelValidationError(
                    f"transition row (s={bad[0]}, a={a}) sums to {sums[bad[0]]!r}")
        if np.any(self.observation_table < -PROB_TOL):
            raise ModelValidationError("negative observation probability")
        osums = self.observation_table.sum(axis=2)
        if np.any(np.abs(osums - 1.0) > PROB_TOL):
            a, s2 = np.argwhere(np.abs(osums - 1.0) > PROB_TOL)[0]
            raise ModelValidationError(
                f"observation row (s'={s2}, a={a}) sums to {osums[a, s2]!r}")

    # -- row accessors ----------------------------------------------------

    def transition_row(self, state: int, action: int):
        """Successor distribution of (state, action) as (states, probs) arrays."""
        t = self._T[action]
        lo, hi = t.indptr[state], t.indptr[state + 1]
        return t.indices[lo:hi], t.data[lo:hi]

    def observation_row(self, next_state: int, action: int) -> np.ndarray:
        return self.observation_table[action, next_state]

    def reward(self, state: int, action: int) -> float:
        return float(self.rewards[state, action])

    def transition_matrix(self, action: int) -> sp.csr_matrix:
        return self._T[action]

    @property
    def terminal_states(self) -> frozenset:
        """States that are absorbing under every action with zero reward."""
        if self._terminal is None:
            term = []
            for s in range(self.num_states):
                if np.any(self.rewards[s] != 0.0):
                    continue
                ok = True
                for a in range(self.num_actions):
                    cols, vals = self.transition_row(s, a)
                    if not (cols.size == 1 and cols[0] == s and abs(vals[0] - 1.0) <= PROB_TOL):
                        ok = False
                        break
                if ok:
                    term.append(s)
            self._terminal = frozenset(term)
        return self._terminal

    def predicted_support(self, belief: Belief, action: int):
        """Unnormalized successor-state distribution sum_s b(s) T(s'|s,a)."""
        pred = np.zeros(self.num_states)
        t = self._T[action]
        for s, p in zip(belief.states, belief.probs):
            lo, hi = t.indptr[s], t.indptr[s + 1]
            pred[t.indices[lo:hi]] += p * t.data[lo:hi]
        return pred


@dataclass(frozen=True)
class PomdpSr:
    """POMDP plus a strictly positive per-step state-request cost."""

    model: PomdpModel
    request_cost: float

    def __post_init__(self):
        if not (self.request_cost > 0):
            raise ModelValidationError(
                f"request cost must be strictly positive, got {self.request_cost}")


# -- belief operations ----------------------------------------------------


def observation_probabilities(model: PomdpModel, belief: Belief, action: int) -> np.ndarray:
    """Distribution over observations after taking `action` from `belief`."""
    pred = model.predicted_support(belief, action)
    support = np.flatnonzero(pred)
    dist = pred[support] @ model.observation_table[action, support]
    # guard tiny negative round-off
    return np.maximum(dist, 0.0)


def observation_probability(model: PomdpModel, belief: Belief, action: int, obs: int) -> float:
    return float(observation_probabilities(model, belief, action)[obs])


def belief_update(model: PomdpModel, belief: Belief, action: int, obs: int) -> Belief:
    """Posterior belief after taking `action` and observing `obs`.

    Raises ImpossibleObservation when the observation has zero probability.
    The result is a phase-0 belief (a fresh request-decision point).
    """
    pred = model.predicted_support(belief, action)
    support = np.flatnonzero(pred)
    numer = pred[support] * model.observation_table[action, support, obs]
    total = numer.sum()
    if total <= 0.0:
        raise ImpossibleObservation(
            f"observation {obs} has probability 0 after action {action}")
    return Belief(support, numer, Phase.REQUEST_DECISION)


def belief_reward(model: PomdpModel, belief: Belief, action: int) -> float:
    """Expected immediate reward sum_s b(s) R(s, a)."""
    return float(belief.probs @ model.rewards[belief.states, action])


# -- JSON model files ------------------------------------------------------


def model_to_json(model: PomdpModel, request_cost: float | None = None) -> dict:
    """Serializable dict in the interchange schema (sorted sparse triplets)."""
    transitions = []
    for a in range(model.num_actions):
        t = model.transition_matrix(a)
        coo = t.tocoo()
        for s, s2, p in zip(coo.row, coo.col, coo.data):
            if p != 0.0:
                transitions.append([int(s), a, int(s2), float(p)])
    transitions.sort(key=lambda e: (e[0], e[1], e[2]))
    observations = []
    obs_nz = np.argwhere(model.observation_table > 0.0)
    for a, s2, o in obs_nz:
        observations.append([int(s2), int(a), int(o),
                             float(model.observation_table[a, s2, o])])
    observations.sort(key=lambda e: (e[0], e[1], e[2]))
    rewards = []
    rew_nz = np.argwhere(model.rewards != 0.0)
    for s, a in rew_nz:
        rewards.append([int(s), int(a), float(model.rewards[s, a])])
    rewards.sort(key=lambda e: (e[0], e[1]))
    out = {
        "num_states": model.num_states,
        "num_actions": model.num_actions,
        "num_observations": model.num_observations,
        "discount": model.discount,
        "transitions": transitions,
        "observations": observations,
        "rewards": rewards,
    }
    if request_cost is not None:
        out["request_cost"] = float(request_cost)
    return out


def model_from_json(data: dict):
    """Parse the interchange schema. Returns PomdpSr when request_cost is
    present, else PomdpModel."""
    try:
        model = PomdpModel.from_triplets(
            int(data["num_states"]), int(data["num_actions"]),
            int(data["num_observations"]), float(data["discount"]),
            data["transitions"], data["observations"], data["rewards"])
    except KeyError as exc:
        raise ModelValidationError(f"model file missing field {exc}") from exc
    if "request_cost" in data and data["request_cost"] is not None:
        return PomdpSr(model, float(data["request_cost"]))
    return model


def save_model(model, path, request_cost: float | None = None):
    if isinstance(model, PomdpSr):
        request_cost = model.request_cost if request_cost is None else request_cost
        model = model.model
    with open(path, "w") as fh:
        json.dump(model_to_json(model, request_cost), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))
