"""Offline alpha-vector bounds: Blind (lower), QMDP, FIB and FIB-SR (upper).

All solvers iterate their defining fixed-point equation until the max-norm
change drops below ``tol`` (the discount makes every one of them a
contraction), starting from zero unless an optimistic start is requested.
FIB-SR extends FIB with one extra REQUEST-tagged vector pricing the option
to pay for the true state, which is what restores upper-bound validity
when state requests are available; plain FIB is not a valid upper bound
in that setting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .model import Belief, PomdpModel, PomdpSr

# tag for the vector pricing "pay the cost, learn the state, act"
REQUEST_TAG = -2

MAX_SWEEPS = 1_000_000


class NonConvergence(RuntimeError):
    def __init__(self, what: str, sweeps: int, residual: float):
        super().__init__(
            f"{what} did not converge after {sweeps} sweeps (residual {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


class KindMismatch(ValueError):
    pass


class BoundKind(Enum):
    LOWER = "lower"
    UPPER = "upper"


@dataclass(frozen=True)
class AlphaVectorSet:
    """Immutable bundle of alpha vectors with a direction tag.

    ``vectors`` is (count, num_states); ``tags[i]`` is the environment
    action the vector commits to, or REQUEST_TAG.
    """

    kind: BoundKind
    vectors: np.ndarray
    tags: tuple

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0:
            raise ValueError("alpha-vector set must be a nonempty 2-d array")
        if not np.isfinite(v).all():
            raise ValueError("alpha vectors must be finite")
        if len(self.tags) != v.shape[0]:
            raise ValueError("one tag per vector required")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "tags", tuple(int(t) for t in self.tags))

    @property
    def num_states(self) -> int:
        return self.vectors.shape[1]

    def evaluate(self, belief: Belief) -> float:
        if max(belief.states) >= self.num_states:
            raise ValueError("belief support exceeds vector length")
        sub = self.vectors[:, list(belief.states)]
        return float(np.max(sub @ np.asarray(belief.probs)))

    def evaluate_dense(self, dense) -> float:
        dense = np.asarray(dense, dtype=np.float64)
        return float(np.max(self.vectors @ dense))

    def best(self, belief: Belief) -> tuple:
        """(tag, value) of the maximizing vector; ties go to the lowest index."""
        sub = self.vectors[:, list(belief.states)]
        vals = sub @ np.asarray(belief.probs)
        i = int(np.argmax(vals))
        return self.tags[i], float(vals[i])

    def corner_values(self) -> np.ndarray:
        """Per-state bound value max_i vectors[i, s]."""
        return self.vectors.max(axis=0)

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "vectors": [
                {
                    "tag": "request" if t == REQUEST_TAG else t,
                    "values": [float(x) for x in row],
                }
                for t, row in zip(self.tags, self.vectors)
            ],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "AlphaVectorSet":
        tags = tuple(
            REQUEST_TAG if v["tag"] == "request" else int(v["tag"])
            for v in blob["vectors"]
        )
        vectors = np.array([v["values"] for v in blob["vectors"]], dtype=np.float64)
        return cls(kind=BoundKind(blob["kind"]), vectors=vectors, tags=tags)


def save_alpha_set(alpha_set: AlphaVectorSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(alpha_set.to_json(), fh, indent=1)
        fh.write("\n")


def load_alpha_set(path) -> AlphaVectorSet:
    with open(path) as fh:
        return AlphaVectorSet.from_json(json.load(fh))


def evaluate(alpha_set: AlphaVectorSet, belief: Belief) -> float:
    return alpha_set.evaluate(belief)


def _unwrap(model) -> PomdpModel:
    return model.model if isinstance(model, PomdpSr) else model


def _optimistic_start(model: PomdpModel) -> float:
    return float(model.rewards.max()) / (1.0 - model.discount)


def blind_lower_bound(model, tol: float = 1e-6) -> AlphaVectorSet:
    """One vector per action: the value of playing that action forever."""
    m = _unwrap(model)
    A, S, g = m.num_actions, m.num_states, m.discount
    T = [m.transition_matrix(a) for a in range(A)]
    alphas = np.zeros((A, S))
    for sweep in range(MAX_SWEEPS):
        new = np.stack([m.rewards[:, a] + g * (T[a] @ alphas[a]) for a in range(A)])
        residual = float(np.max(np.abs(new - alphas)))
        alphas = new
        if residual < tol:
            return AlphaVectorSet(BoundKind.LOWER, alphas, tuple(range(A)))
    raise NonConvergence("blind lower bound", MAX_SWEEPS, residual)


def qmdp(model, tol: float = 1e-6, init: str = "zero") -> AlphaVectorSet:
    """Fully observable Q-values, one vector per action.

    Handed a problem with state requests, the set additionally carries a
    REQUEST vector -c + max_a Q(s, a). Without it the per-action vectors
    alone can undervalue beliefs where repeatedly paying to relocalize
    beats committing to any single action, which would break the upper
    bound; with it the request branch is priced by the fully observable
    continuation, which dominates it.
    """
    m = _unwrap(model)
    A, S, g = m.num_actions, m.num_states, m.discount
    T = [m.transition_matrix(a) for a in range(A)]
    q = np.zeros((A, S))
    if init == "optimistic":
        q += _optimistic_start(m)
    elif init != "zero":
        raise ValueError(f"unknown init {init!r}")
    for sweep in range(MAX_SWEEPS):
        v = q.max(axis=0)
        new = np.stack([m.rewards[:, a] + g * (T[a] @ v) for a in range(A)])
        residual = float(np.max(np.abs(new - q)))
        q = new
        if residual < tol:
            tags: tuple = tuple(range(A))
            if isinstance(model, PomdpSr):
                alpha_c = q.max(axis=0) - model.request_cost
                q = np.vstack([q, alpha_c[None, :]])
                tags = tags + (REQUEST_TAG,)
            return AlphaVectorSet(BoundKind.UPPER, q, tags)
    raise NonConvergence("qmdp", MAX_SWEEPS, residual)


def _obs_weighted_transitions(m: PomdpModel):
    # M[a][o][s, s'] = T(s'|s,a) O(o|s',a), kept sparse
    out = []
    for a in range(m.num_actions):
        Ta = m.transition_matrix(a)
        out.append(
            [Ta.multiply(m.observation_table[a, :, o][None, :]).tocsr()
             for o in range(m.num_observations)]
        )
    return out


def _fib_sweep(m: PomdpModel, M, gamma_set: np.ndarray) -> np.ndarray:
    # one application of the informed backup to every action vector
    A, S, g = m.num_actions, m.num_states, m.discount
    new = np.empty((A, S))
    for a in range(A):
        acc = np.zeros(S)
        for o in range(m.num_observations):
            acc += (M[a][o] @ gamma_set.T).max(axis=1)
        new[a] = m.rewards[:, a] + g * acc
    return new


def fib(model, tol: float = 1e-6, init: str = "zero") -> AlphaVectorSet:
    """Fast informed bound: per-observation maximization, one vector per action."""
    m = _unwrap(model)
    A = m.num_actions
    M = _obs_weighted_transitions(m)
    alphas = np.zeros((A, m.num_states))
    if init == "optimistic":
        alphas += _optimistic_start(m)
    elif init != "zero":
        raise ValueError(f"unknown init {init!r}")
    for sweep in range(MAX_SWEEPS):
        new = _fib_sweep(m, M, alphas)
        residual = float(np.max(np.abs(new - alphas)))
        alphas = new
        if residual < tol:
            return AlphaVectorSet(BoundKind.UPPER, alphas, tuple(range(A)))
    raise NonConvergence("fib", MAX_SWEEPS, residual)


def fib_sr(problem: PomdpSr, tol: float = 1e-6, init: str = "zero") -> AlphaVectorSet:
    """FIB plus a REQUEST vector valuing "pay c, observe the state, act".

    Alternates one informed sweep over the environment vectors (with the
    REQUEST vector in the candidate set) with a refresh of the REQUEST
    vector from the freshly swept environment vectors.
    """
    m = problem.model
    c = problem.request_cost
    A = m.num_actions
    M = _obs_weighted_transitions(m)
    alphas = np.zeros((A, m.num_states))
    if init == "optimistic":
        alphas += _optimistic_start(m)
    elif init != "zero":
        raise ValueError(f"unknown init {init!r}")
    alpha_c = alphas.max(axis=0) - c
    for sweep in range(MAX_SWEEPS):
        gamma_set = np.vstack([alphas, alpha_c[None, :]])
        new = _fib_sweep(m, M, gamma_set)
        new_c = new.max(axis=0) - c
        residual = float(
            max(np.max(np.abs(new - alphas)), np.max(np.abs(new_c - alpha_c)))
        )
        alphas, alpha_c = new, new_c
        if residual < tol:
            vectors = np.vstack([alphas, alpha_c[None, :]])
            return AlphaVectorSet(
                BoundKind.UPPER, vectors, tuple(range(A)) + (REQUEST_TAG,)
            )
    raise NonConvergence("fib-sr", MAX_SWEEPS, residual)


SOLVERS = {
    "blind": blind_lower_bound,
    "qmdp": qmdp,
    "fib": fib,
    "fib-sr": fib_sr,
}


def solve_offline_bound(kind: str, model, tol: float = 1e-6) -> AlphaVectorSet:
    try:
        solver = SOLVERS[kind]
    except KeyError:
        raise ValueError(f"unknown bound kind {kind!r}; choose from {sorted(SOLVERS)}")
    return solver(model, tol=tol)


@dataclass
class CornerActionValues:
    """Graph-derived bounds on per-state action values, with their direction.

    entries maps (state, action) to the graph bound at the corner node for
    that state under that environment action.
    """

    kind: BoundKind
    entries: dict = field(default_factory=dict)


def improve_from_graph(
    alpha_set: AlphaVectorSet, corner_values: CornerActionValues
) -> AlphaVectorSet:
    """Tighten per-entry using corner-node values harvested from a search graph.

    Upper sets take the min, lower sets the max, entry by entry on the
    vector tagged with the matching action. The REQUEST vector is left
    alone: its stale value still prices the request branch soundly, and
    tightening only the action vectors keeps the set valid everywhere.
    """
    if corner_values.kind != alpha_set.kind:
        raise KindMismatch(
            f"cannot apply {corner_values.kind.value} corner values "
            f"to a {alpha_set.kind.value} set"
        )
    vectors = alpha_set.vectors.copy()
    by_tag: dict = {}
    for i, t in enumerate(alpha_set.tags):
        by_tag.setdefault(t, []).append(i)
    tighten = min if alpha_set.kind == BoundKind.UPPER else max
    for (s, a), val in corner_values.entries.items():
        if a < 0:
            continue
        for i in by_tag.get(a, ()):
            vectors[i, s] = tighten(vectors[i, s], float(val))
    return AlphaVectorSet(alpha_set.kind, vectors, alpha_set.tags)
