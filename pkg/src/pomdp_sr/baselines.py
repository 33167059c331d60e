"""Comparison planners: AEMS tree search and POMCP.

The AEMS baseline runs the exact expansion and propagation machinery of
the main planner, but on a tree: the corner registry is disabled, so a
request expansion spawns one private subtree per support state instead
of sharing corner nodes.  On request-masked problems this reduces to
the classic gap-contribution tree search.

POMCP plays the plain-POMDP encoding of the request problem with UCT,
restricting each node to the actions legal in its phase and rolling out
uniformly over legal actions.  The search tree lives in flat arrays and
is rebuilt from the current belief at every call; the companion
particle filter (pomcp_advance) is for callers that track belief by
particles alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .aems_sr import Decision, pack_model, plan_step
from .bounds import AlphaVectorSet
from .equivalent import NO_REQUEST_ACTION, REQUEST_ACTION, EquivalentPomdp
from .model import Belief, PomdpSr


class ParticleDepletion(RuntimeError):
    """Raised when no particle survives conditioning on an observation."""


def aems_plan_step(problem: PomdpSr, lower: AlphaVectorSet,
                   upper: AlphaVectorSet, belief: Belief, *,
                   budget: int, epsilon: float,
                   allow_request: bool = True,
                   trace: bool = False) -> Decision:
    """Plan one step with AEMS on a tree over the two-phase structure.

    Same fringe heuristic, bound propagation, epsilon/budget semantics
    and action extraction as plan_step; only the corner registry is
    off, so revisited corner beliefs are duplicated instead of shared.
    With allow_request=False this is AEMS on the plain POMDP.
    """
    return plan_step(problem, lower, upper, belief, budget=budget,
                     epsilon=epsilon, use_registry=False,
                     allow_request=allow_request, trace=trace)


# -- POMCP ------------------------------------------------------------


@dataclass(frozen=True)
class PomcpConfig:
    """Knobs for pomcp_plan_step; None picks the documented default.

    uct_c defaults to the reward range over legal state-action pairs,
    rollout_depth to ceil(log(1e-3)/log(discount)) of the model being
    searched, num_particles to 1000.
    """

    uct_c: float | None = None
    rollout_depth: int | None = None
    num_particles: int = 1000


@dataclass
class PomcpStats:
    """Search diagnostics; slots into Decision.stats.

    root_visits and root_values are keyed by the encoded action ids of
    the plain-POMDP model (0 request, 1 no-request, 2+a environmental).
    The resolved configuration is echoed so runs can be reproduced.
    """

    simulations: int
    node_count: int
    root_visits: dict[int, int]
    root_values: dict[int, float]
    uct_c: float
    rollout_depth: int
    num_particles: int
    status: str = "budget"


@njit(cache=True)
def _hash_slot(key, mask):
    h = np.uint64(key)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return np.int64(h & np.uint64(mask))


@njit(cache=True)
def _hash_find(hkeys, hvals, key):
    mask = hkeys.shape[0] - 1
    idx = _hash_slot(key, mask)
    while True:
        k = hkeys[idx]
        if k == key:
            return hvals[idx]
        if k == -1:
            return np.int64(-1)
        idx = (idx + 1) & mask


@njit(cache=True)
def _uct_search(pack, nbase, terminal, particles, budget, uct_c, max_depth,
                seed, n_vis, a_vis, a_val, hkeys, hvals):
    """Run the full simulation budget; returns the node count.

    Node 0 is the root.  Children are keyed (node, action, observation)
    in an open-addressed table; each simulation adds at most one node,
    then evaluates it with a uniform-legal rollout.  Rewards and the
    discount are those of the packed model, so value estimates are on
    the encoded scale throughout.
    """
    np.random.seed(seed)
    t_indptr, t_col, t_val = pack.t_indptr, pack.t_col, pack.t_val
    obs, rew, disc = pack.obs, pack.rew, pack.disc
    ns, na, no = pack.ns, pack.na, pack.no
    mask = hkeys.shape[0] - 1
    node_count = 1
    path_n = np.empty(max_depth + 1, np.int64)
    path_a = np.empty(max_depth + 1, np.int64)
    path_r = np.empty(max_depth + 1, np.float64)
    for _ in range(budget):
        s = particles[np.random.randint(0, particles.shape[0])]
        node = 0
        depth = 0
        plen = 0
        value = 0.0
        while depth < max_depth and not terminal[s]:
            lo = 0 if s < nbase else 2
            hi = 2 if s < nbase else na
            best_a = lo
            best = -1.0e300
            nn = n_vis[node]
            for a in range(lo, hi):
                cnt = a_vis[node, a]
                if cnt == 0:  # untried first, lowest id
                    best_a = a
                    break
                u = a_val[node, a] + uct_c * math.sqrt(math.log(nn) / cnt)
                if u > best:
                    best = u
                    best_a = a
            a = best_a
            r = rew[s, a]
            row = a * ns + s
            u = np.random.random()
            s2 = t_col[t_indptr[row + 1] - 1]
            acc = 0.0
            for k in range(t_indptr[row], t_indptr[row + 1]):
                acc += t_val[k]
                if u < acc:
                    s2 = t_col[k]
                    break
            u = np.random.random()
            o = no - 1
            acc = 0.0
            for k in range(no):
                acc += obs[a, s2, k]
                if u < acc:
                    o = k
                    break
            path_n[plen] = node
            path_a[plen] = a
            path_r[plen] = r
            plen += 1
            key = np.int64(node * na + a) * np.int64(no) + np.int64(o)
            idx = _hash_slot(key, mask)
            child = np.int64(-1)
            while True:
                k2 = hkeys[idx]
                if k2 == key:
                    child = hvals[idx]
                    break
                if k2 == -1:
                    break
                idx = (idx + 1) & mask
            if child < 0:
                child = node_count
                node_count += 1
                hkeys[idx] = key
                hvals[idx] = child
                n_vis[child] += 1
                # fresh leaf: uniform-legal rollout from its state
                dfac = 1.0
                d = depth + 1
                ss = s2
                while d < max_depth and not terminal[ss]:
                    llo = 0 if ss < nbase else 2
                    lhi = 2 if ss < nbase else na
                    aa = llo + np.random.randint(0, lhi - llo)
                    value += dfac * rew[ss, aa]
                    rrow = aa * ns + ss
                    uu = np.random.random()
                    nxt = t_col[t_indptr[rrow + 1] - 1]
                    acc = 0.0
                    for k in range(t_indptr[rrow], t_indptr[rrow + 1]):
                        acc += t_val[k]
                        if uu < acc:
                            nxt = t_col[k]
                            break
                    ss = nxt
                    dfac *= disc
                    d += 1
                break
            node = child
            s = s2
            depth += 1
        ret = value
        for i in range(plen - 1, -1, -1):
            ret = path_r[i] + disc * ret
            nn2 = path_n[i]
            aa2 = path_a[i]
            n_vis[nn2] += 1
            a_vis[nn2, aa2] += 1
            a_val[nn2, aa2] += (ret - a_val[nn2, aa2]) / a_vis[nn2, aa2]
    return node_count


_equiv_meta: dict[int, tuple] = {}


def _meta(equiv: EquivalentPomdp):
    """Terminal mask and default uct scale, cached per encoding."""
    found = _equiv_meta.get(id(equiv))
    if found is not None and found[0] is equiv:
        return found[1], found[2]
    m = equiv.model
    nb = equiv.num_base_states
    alive = np.ones(nb, bool)
    for a in range(equiv.num_base_actions):
        t = m.transition_matrix(2 + a)
        diag = t.diagonal()[nb:]
        nnz = np.diff(t.indptr)[nb:]
        still = (nnz == 1) & (diag > 1.0 - 1e-12)
        still &= np.abs(m.rewards[nb:, 2 + a]) <= 1e-12
        alive &= still
    terminal = np.concatenate([alive, alive])
    legal_lo = min(m.rewards[:nb, :2].min(), m.rewards[nb:, 2:].min())
    legal_hi = max(m.rewards[:nb, :2].max(), m.rewards[nb:, 2:].max())
    uct_default = float(legal_hi - legal_lo)
    if len(_equiv_meta) > 16:
        _equiv_meta.clear()
    _equiv_meta[id(equiv)] = (equiv, terminal, uct_default)
    return terminal, uct_default


def _resolve(equiv: EquivalentPomdp, config: PomcpConfig | None):
    config = config or PomcpConfig()
    terminal, uct_default = _meta(equiv)
    uct_c = config.uct_c if config.uct_c is not None else uct_default
    depth = config.rollout_depth
    if depth is None:
        depth = math.ceil(math.log(1e-3) / math.log(equiv.model.discount))
    if depth < 1 or config.num_particles < 1:
        raise ValueError("rollout_depth and num_particles must be positive")
    return terminal, float(uct_c), int(depth), int(config.num_particles)


def _root_particles(equiv, belief, num_particles, rng):
    if isinstance(belief, Belief):
        states = np.array(belief.states, np.int64)
        probs = np.array(belief.probs)
        return rng.choice(states, size=num_particles, p=probs)
    particles = np.asarray(belief, np.int64)
    if particles.ndim != 1 or particles.size == 0:
        raise ValueError("particle set must be a nonempty 1-d array")
    n2 = 2 * equiv.num_base_states
    if particles.min() < 0 or particles.max() >= n2:
        raise ValueError("particle out of state range")
    phase0 = particles < equiv.num_base_states
    if phase0.any() and not phase0.all():
        raise ValueError("particles mix phases")
    return particles


def _greedy_env(equiv, weights):
    """Fallback arm when a subtree went unvisited: immediate reward."""
    nb = equiv.num_base_states
    scores = weights @ equiv.model.rewards[nb:, 2:]
    return int(np.argmax(scores))


def pomcp_plan_step(equiv: EquivalentPomdp, belief, budget: int, *,
                    config: PomcpConfig | None = None,
                    rng: np.random.Generator | int | None = None) -> Decision:
    """One planning step of POMCP on the plain-POMDP encoding.

    belief is either an exact Belief over base states (sampled into
    num_particles root particles) or a 1-d array of encoded states, all
    of the same phase.  budget counts simulations.  From a phase-0 root
    the decision covers the whole native step: the per-state actions of
    a request decision are read off the reveal children, falling back
    to the immediate-reward arm for children the search never visited.
    Fixed rng in, fixed decision out.
    """
    if not isinstance(equiv, EquivalentPomdp):
        raise TypeError("pomcp_plan_step wants the plain-POMDP encoding")
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    terminal, uct_c, depth, num_particles = _resolve(equiv, config)
    particles = _root_particles(equiv, belief, num_particles, rng)
    pack = pack_model(equiv.model)
    na, no = pack.na, pack.no
    nb = equiv.num_base_states
    cap = budget + 2
    tsize = 1 << max(5, int(math.ceil(math.log2(4.0 * cap))))
    n_vis = np.zeros(cap, np.int64)
    a_vis = np.zeros((cap, na), np.int64)
    a_val = np.zeros((cap, na))
    hkeys = np.full(tsize, -1, np.int64)
    hvals = np.zeros(tsize, np.int64)
    seed = int(rng.integers(0, 2**31 - 1))
    nodes = int(_uct_search(pack, nb, terminal, particles, budget, uct_c,
                            depth, seed, n_vis, a_vis, a_val, hkeys, hvals))

    base = particles % nb
    weights = np.bincount(base, minlength=nb).astype(float)
    weights /= weights.sum()
    phase0 = bool(particles[0] < nb)
    legal = (REQUEST_ACTION, NO_REQUEST_ACTION) if phase0 else tuple(range(2, na))
    stats = PomcpStats(
        simulations=budget, node_count=nodes,
        root_visits={a: int(a_vis[0, a]) for a in legal},
        root_values={a: float(a_val[0, a]) for a in legal},
        uct_c=uct_c, rollout_depth=depth, num_particles=num_particles)

    def arm_of(node: int, state_weights) -> int:
        if node >= 0 and a_vis[node, 2:].sum() > 0:
            return int(np.argmax(a_vis[node, 2:]))
        return _greedy_env(equiv, state_weights)

    if not phase0:
        return Decision(request=False, action=arm_of(0, weights),
                        state_action=None, stats=stats)
    # request wins ties, matching the graph planner's convention
    request = a_vis[0, REQUEST_ACTION] >= a_vis[0, NO_REQUEST_ACTION]
    if request:
        mapping = {}
        for s in np.unique(base):
            o = equiv.reveal_observation(int(s))
            child = int(_hash_find(hkeys, hvals,
                                   np.int64(REQUEST_ACTION) * no + o))
            onehot = np.zeros(nb)
            onehot[s] = 1.0
            mapping[int(s)] = arm_of(child, onehot)
        return Decision(request=True, action=None, state_action=mapping,
                        stats=stats)
    child = int(_hash_find(hkeys, hvals,
                           np.int64(NO_REQUEST_ACTION) * no +
                           equiv.null_observation))
    return Decision(request=False, action=arm_of(child, weights),
                    state_action=None, stats=stats)


def pomcp_advance(equiv: EquivalentPomdp, particles, action: int,
                  observation: int,
                  rng: np.random.Generator | int | None = None, *,
                  num_particles: int | None = None) -> np.ndarray:
    """Condition base-state particles on one blind environmental step.

    Rejection filter for the no-request case: propose successors of
    sampled particles under the action and keep them with the
    probability of emitting the observation.  Request steps need no
    filter (the revealed state pins the belief down).  Raises
    ParticleDepletion when nothing survives within the attempt cap.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    particles = np.asarray(particles, np.int64)
    if particles.size == 0:
        raise ValueError("particle set must be nonempty")
    target = int(num_particles) if num_particles else particles.size
    nb = equiv.num_base_states
    t = equiv.model.transition_matrix(2 + action)
    accept = equiv.model.observation_table[2 + action, :, observation]
    rows = {}
    for s in np.unique(particles):
        lo, hi = t.indptr[nb + s], t.indptr[nb + s + 1]
        rows[int(s)] = (t.indices[lo:hi], np.cumsum(t.data[lo:hi]))
    kept = []
    cap = max(10_000, 50 * target)
    for _ in range(cap):
        if len(kept) >= target:
            break
        s = int(particles[rng.integers(particles.size)])
        cols, cum = rows[s]
        nxt = int(cols[np.searchsorted(cum, rng.random() * cum[-1])])
        if rng.random() < accept[nxt]:
            kept.append(nxt)
    if not kept:
        raise ParticleDepletion(
            f"no particles consistent with observation {observation}")
    kept = np.array(kept, np.int64)
    if kept.size < target:
        extra = kept[rng.integers(kept.size, size=target - kept.size)]
        kept = np.concatenate([kept, extra])
    return kept
