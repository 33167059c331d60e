"""Offline point-based value iteration with paid state requests.

The value function is a lower-bound alpha-vector set over environmental
actions plus one request-tagged vector: alpha_c(s) = -c + max of the
environmental vectors at s, pricing "pay c, learn the state, act now"
with no discounting between the request and the action.  Belief sets
always carry every corner belief, which anchors alpha_c (the per-state
max is then realized at an optimized point) and keeps revealed-state
values honest.

Backups draw candidates from the previous iteration's set including its
request vector; the refreshed request vector is appended only after all
points are backed up, so within one sweep the environmental vectors
never bootstrap through the request value of the same sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np

from .aems_sr import Decision
from .bounds import (
    REQUEST_TAG,
    AlphaVectorSet,
    BoundKind,
    KindMismatch,
    NonConvergence,
)
from .model import Belief, PomdpSr, belief_update, observation_probabilities


@dataclass(frozen=True)
class BeliefSet:
    """Backup points for point-based iteration.

    Use make_belief_set / expand_belief_set to build one: they keep the
    corner beliefs present and drop exact duplicates.  The constructor
    itself only validates ranges and duplicates so that corner-free sets
    remain constructible for ablation runs.
    """

    num_states: int
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        if not pts:
            raise ValueError("belief set must be nonempty")
        seen = set()
        for b in pts:
            if not isinstance(b, Belief):
                raise TypeError("belief set points must be Belief instances")
            if max(b.states) >= self.num_states:
                raise ValueError("belief support exceeds num_states")
            key = (b.states, b.probs)
            if key in seen:
                raise ValueError("duplicate belief point")
            seen.add(key)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def dense(self) -> np.ndarray:
        out = np.zeros((len(self.points), self.num_states))
        for i, b in enumerate(self.points):
            out[i, list(b.states)] = b.probs
        return out

    def has_corners(self) -> bool:
        singletons = {b.states[0] for b in self.points
                      if len(b.states) == 1 and b.probs[0] == 1.0}
        return len(singletons) == self.num_states


def make_belief_set(num_states: int, points=()) -> BeliefSet:
    """Corner beliefs first, then the given points, exact dups dropped."""
    pts = [Belief([s], [1.0]) for s in range(num_states)]
    seen = {(b.states, b.probs) for b in pts}
    for b in points:
        key = (b.states, b.probs)
        if key not in seen:
            seen.add(key)
            pts.append(b)
    return BeliefSet(num_states, tuple(pts))


def expand_belief_set(problem: PomdpSr, points: BeliefSet,
                      rng: np.random.Generator | int | None = None,
                      copies: int = 1) -> BeliefSet:
    """Grow the set by stochastic simulation, one candidate per point.

    For every existing point, each environmental action proposes the
    posterior of one simulated (state, successor, observation) draw; the
    proposal farthest from the current set in L1 is kept if it is new.
    Requests need no proposals since every corner is already present.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    model = problem.model
    S = model.num_states
    pts = list(points.points)
    seen = {(b.states, b.probs) for b in pts}
    dense = [b.as_dense(S) for b in pts]
    for _ in range(copies):
        for b in list(pts):
            best, best_dist = None, 0.0
            for a in range(model.num_actions):
                s = int(rng.choice(b.states, p=np.asarray(b.probs)))
                t = model.transition_matrix(a)
                lo, hi = t.indptr[s], t.indptr[s + 1]
                nxt = int(rng.choice(t.indices[lo:hi],
                                     p=t.data[lo:hi] / t.data[lo:hi].sum()))
                obs_probs = model.observation_table[a, nxt]
                o = int(rng.choice(model.num_observations, p=obs_probs))
                if observation_probabilities(model, b, a)[o] <= 0.0:
                    continue
                cand = belief_update(model, b, a, o)
                cd = cand.as_dense(S)
                dist = min(float(np.abs(cd - d).sum()) for d in dense)
                if dist > best_dist:
                    best, best_dist = cand, dist
            if best is not None and (best.states, best.probs) not in seen:
                seen.add((best.states, best.probs))
                pts.append(best)
                dense.append(best.as_dense(S))
    return BeliefSet(S, tuple(pts))


@dataclass(frozen=True)
class ValuePolicy:
    """Converged lower-bound vector set plus convergence metadata."""

    gamma_set: AlphaVectorSet
    points: BeliefSet
    iterations: int
    residual: float


def _check_inputs(problem: PomdpSr, points: BeliefSet,
                  gamma_prev: AlphaVectorSet) -> None:
    S = problem.model.num_states
    if points.num_states != S:
        raise ValueError("belief set and model disagree on num_states")
    if gamma_prev.kind is not BoundKind.LOWER:
        raise KindMismatch("point-based backups maintain a lower bound")
    if gamma_prev.num_states != S:
        raise ValueError("alpha vectors and model disagree on num_states")


def pbvi_sr_backup(problem: PomdpSr, points: BeliefSet,
                   gamma_prev: AlphaVectorSet) -> AlphaVectorSet:
    """One point-based sweep; returns the new set with its request vector.

    Every point gets the best one-step backup over environmental
    actions with successor values read from gamma_prev (request vector
    included).  Exact-duplicate winners collapse.  The request vector of
    the new set is the pointwise max of its environmental vectors minus
    the request cost.
    """
    _check_inputs(problem, points, gamma_prev)
    model = problem.model
    S, A, O = model.num_states, model.num_actions, model.num_observations
    prev = gamma_prev.vectors
    B = points.dense()
    P = B.shape[0]
    best_vals = np.full(P, -np.inf)
    best_vecs = np.zeros((P, S))
    best_tags = np.zeros(P, np.int64)
    for a in range(A):
        t = model.transition_matrix(a)
        acc = np.repeat(model.rewards[:, a][None, :], P, axis=0)
        for o in range(O):
            z = model.observation_table[a, :, o]
            g = (t @ (prev * z).T).T  # (n_prev, S)
            pick = np.argmax(B @ g.T, axis=1)
            acc += model.discount * g[pick]
        vals = np.einsum("ps,ps->p", B, acc)
        better = vals > best_vals
        best_vals[better] = vals[better]
        best_vecs[better] = acc[better]
        best_tags[better] = a
    rows = {}
    for i in range(P):
        key = best_vecs[i].tobytes()
        if key not in rows:
            rows[key] = (best_vecs[i], int(best_tags[i]))
    env = np.array([v for v, _ in rows.values()])
    tags = [t for _, t in rows.values()]
    alpha_c = env.max(axis=0) - problem.request_cost
    return AlphaVectorSet(BoundKind.LOWER,
                          np.vstack([env, alpha_c[None, :]]),
                          (*tags, REQUEST_TAG))


def pbvi_sr_solve(problem: PomdpSr, points: BeliefSet,
                  max_iters: int = 1000, tol: float = 1e-6) -> ValuePolicy:
    """Iterate backups until values at the points settle below tol.

    Starts from the all-states worst-reward floor so every iterate stays
    a valid lower bound.  Raises NonConvergence with the last residual
    when max_iters sweeps are not enough.
    """
    model = problem.model
    floor = float(model.rewards.min()) / (1.0 - model.discount)
    gamma = AlphaVectorSet(BoundKind.LOWER,
                           np.full((1, model.num_states), floor), (0,))
    B = points.dense()
    vals = (gamma.vectors @ B.T).max(axis=0)
    residual = np.inf
    for it in range(1, max_iters + 1):
        gamma = pbvi_sr_backup(problem, points, gamma)
        new_vals = (gamma.vectors @ B.T).max(axis=0)
        residual = float(np.abs(new_vals - vals).max())
        vals = new_vals
        if residual < tol:
            return ValuePolicy(gamma_set=gamma, points=points,
                               iterations=it, residual=residual)
    raise NonConvergence("pbvi-sr", max_iters, residual)


def execute_policy(policy: ValuePolicy, belief: Belief) -> Decision:
    """Decision of the offline policy at one belief.

    A request-tagged winner yields a request with the per-state actions
    read off the environmental vectors at each corner; otherwise the
    winning vector's action tag runs blind.
    """
    gamma = policy.gamma_set
    tag, _ = gamma.best(belief)
    env_rows = [i for i, t in enumerate(gamma.tags) if t != REQUEST_TAG]
    env = gamma.vectors[env_rows]
    env_tags = [gamma.tags[i] for i in env_rows]
    if tag == REQUEST_TAG:
        mapping = {int(s): int(env_tags[int(np.argmax(env[:, s]))])
                   for s in belief.states}
        return Decision(request=True, action=None, state_action=mapping,
                        stats=None)
    return Decision(request=False, action=int(tag), state_action=None,
                    stats=None)


def save_policy(policy: ValuePolicy, path) -> None:
    blob = {
        "alpha": policy.gamma_set.to_json(),
        "belief_set": [
            {"states": list(b.states), "probs": list(b.probs)}
            for b in policy.points
        ],
        "num_states": policy.points.num_states,
        "iterations": policy.iterations,
        "residual": policy.residual,
    }
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1)
        fh.write("\n")


def load_policy(path) -> ValuePolicy:
    blob = json.loads(Path(path).read_text())
    points = BeliefSet(
        int(blob["num_states"]),
        tuple(Belief(p["states"], p["probs"]) for p in blob["belief_set"]))
    return ValuePolicy(
        gamma_set=AlphaVectorSet.from_json(blob["alpha"]),
        points=points,
        iterations=int(blob["iterations"]),
        residual=float(blob["residual"]))
