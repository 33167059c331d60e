"""Independent reference solvers used only by the test suite.

Everything here is deliberately written with a different algorithmic
approach than the package under test: exact piecewise-linear value
iteration with LP-based pruning instead of point-based or heuristic
search, dense linear algebra instead of sparse, and brute-force
enumeration where it is affordable.  Slow is fine; wrong is not.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.optimize import linprog

from pomdp_sr.model import Belief, PomdpModel, PomdpSr

# Discard margin for pruning.  A vector whose best achievable advantage
# over the kept set is at most this is dropped, so each pruned set's max
# sits within PRUNE_EPS of the true max everywhere on the simplex.
PRUNE_EPS = 1e-8


# ---------------------------------------------------------------------------
# MDP value iteration (dense, for QMDP-style cross-checks)
# ---------------------------------------------------------------------------

def mdp_optimal_q(model: PomdpModel, tol: float = 1e-10) -> np.ndarray:
    """Optimal Q(s, a) of the fully observable MDP underlying ``model``."""
    S = model.num_states
    A = model.num_actions
    T = np.zeros((A, S, S))
    for a in range(A):
        T[a] = model.transition_matrix(a).toarray()
    R = model.rewards  # (S, A)
    g = model.discount
    q = np.zeros((S, A))
    for _ in range(10_000_000):
        v = q.max(axis=1)
        nq = R + g * np.stack([T[a] @ v for a in range(A)], axis=1)
        if np.max(np.abs(nq - q)) < tol:
            return nq
        q = nq
    raise RuntimeError("MDP value iteration did not converge")


# ---------------------------------------------------------------------------
# Vector set pruning (Lark's algorithm)
# ---------------------------------------------------------------------------

def _dedupe(vectors: np.ndarray) -> np.ndarray:
    return np.unique(vectors, axis=0)


@njit(cache=True)
def _pointwise_dominated_mask(v, eps):
    # eps-slack pointwise dominance where killers are permanent survivors,
    # so every victim sits within eps of a vector in the output and the
    # filter costs at most eps regardless of near-duplicate chains.  Rows
    # arrive lex-sorted; descending scan makes lex-larger rows killers.
    n, width = v.shape
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            if not keep[j]:
                continue
            ge = True
            for s in range(width):
                if v[j, s] < v[i, s] - eps:
                    ge = False
                    break
            if ge:
                keep[i] = False
                break
    return keep


def _remove_pointwise_dominated(vectors: np.ndarray) -> np.ndarray:
    # assumes exact duplicates already removed and rows lex-sorted
    mask = _pointwise_dominated_mask(np.ascontiguousarray(vectors), PRUNE_EPS)
    return vectors[mask]


@njit(cache=True)
def _row_player_simplex(A):
    """Dense tableau simplex for  max sum(y)  s.t.  A @ y <= 1,  y >= 0.

    ``A`` is strictly positive with few rows (the belief dimension), so
    the all-slack basis is feasible and the LP is bounded.  Returns
    (status, objective, y, duals) with status 0 on success; any nonzero
    status tells the caller to fall back to a library solver.  Dantzig
    pivoting with a switch to Bland's rule guards against cycling.
    """
    m, n = A.shape
    width = n + m + 1
    t = np.zeros((m, width))
    t[:, :n] = A
    for i in range(m):
        t[i, n + i] = 1.0
        t[i, width - 1] = 1.0
    z = np.zeros(width)
    for j in range(n):
        z[j] = -1.0
    basis = np.empty(m, dtype=np.int64)
    for i in range(m):
        basis[i] = n + i
    tol = 1e-11
    bland_after = 20 * (m + n)
    for pivot in range(60 * (m + n)):
        enter = -1
        if pivot < bland_after:
            best = -tol
            for j in range(width - 1):
                if z[j] < best:
                    best = z[j]
                    enter = j
        else:
            for j in range(width - 1):
                if z[j] < -tol:
                    enter = j
                    break
        if enter < 0:
            y = np.zeros(n)
            for i in range(m):
                if basis[i] < n:
                    y[basis[i]] = t[i, width - 1]
            duals = np.empty(m)
            for i in range(m):
                duals[i] = z[n + i]
            return 0, y.sum(), y, duals
        leave = -1
        best_ratio = np.inf
        for i in range(m):
            aij = t[i, enter]
            if aij > tol:
                ratio = t[i, width - 1] / aij
                if ratio < best_ratio - 1e-13 or (
                    ratio < best_ratio + 1e-13
                    and (leave < 0 or basis[i] < basis[leave])
                ):
                    best_ratio = ratio
                    leave = i
        if leave < 0:
            return 1, 0.0, np.zeros(n), np.zeros(m)
        piv = t[leave, enter]
        for j in range(width):
            t[leave, j] /= piv
        for i in range(m):
            if i != leave:
                f = t[i, enter]
                if f != 0.0:
                    for j in range(width):
                        t[i, j] -= f * t[leave, j]
        f = z[enter]
        if f != 0.0:
            for j in range(width):
                z[j] -= f * t[leave, j]
        basis[leave] = enter
    return 2, 0.0, np.zeros(n), np.zeros(m)


def _witness_lp_scipy(candidate: np.ndarray, kept: np.ndarray) -> tuple[float, np.ndarray | None]:
    S = candidate.shape[0]
    k = kept.shape[0]
    # variables: b_0..b_{S-1}, delta ; maximize delta
    c = np.zeros(S + 1)
    c[-1] = -1.0
    A_ub = np.hstack([kept - candidate[None, :], np.ones((k, 1))])
    b_ub = np.zeros(k)
    A_eq = np.zeros((1, S + 1))
    A_eq[0, :S] = 1.0
    b_eq = np.array([1.0])
    bounds = [(0.0, 1.0)] * S + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if not res.success:
        return -np.inf, None
    return -res.fun, res.x[:S]


def _witness_lp(candidate: np.ndarray, kept: np.ndarray) -> tuple[float, np.ndarray | None]:
    """Max margin by which ``candidate`` beats every vector in ``kept``.

    Returns (delta, belief) where belief attains the margin, or
    (delta, None) when a dominance certificate proves the margin cannot
    exceed PRUNE_EPS anywhere.  Solved as the matrix game
    max_b min_j (candidate - kept_j) . b over the belief simplex via a
    small shifted-game simplex; both possible answers are re-verified by
    direct evaluation (a winning belief, or a convex mixture of kept
    vectors that dominates the candidate), so a solver bug can only
    cause a fallback to scipy, never a wrong admit/discard.
    """
    k = kept.shape[0]
    S = candidate.shape[0]
    if k == 0:
        return np.inf, np.full(S, 1.0 / S)
    diff = candidate[None, :] - kept  # (k, S)
    shift = 1.0 - diff.min()
    status, g, yraw, duals = _row_player_simplex(
        np.ascontiguousarray((diff + shift).T)
    )
    if status == 0 and g > 0.0:
        b = np.maximum(duals / g, 0.0)
        tot = b.sum()
        if tot > 0.0:
            b = b / tot
            achieved = float((diff @ b).min())
            if achieved > PRUNE_EPS:
                return achieved, b
        lam = np.maximum(yraw, 0.0)
        lt = lam.sum()
        if lt > 0.0:
            upper = float(((lam / lt) @ diff).max())
            if upper <= PRUNE_EPS:
                return upper, None
    return _witness_lp_scipy(candidate, kept)


@njit(cache=True)
def _prune_loop(v, in_kept, alive, eps):
    """Resolve pending vectors in place; returns -1 when done.

    A nonnegative return is the index of a candidate whose game solution
    failed both evaluation certificates; the caller settles it with a
    library LP and re-enters.  Admit/discard decisions taken here are
    certificate-checked, so they do not rely on the simplex being right.
    """
    n, S = v.shape
    while True:
        i = -1
        for t in range(n):
            if alive[t] and not in_kept[t]:
                i = t
                break
        if i < 0:
            return -1
        k = 0
        for t in range(n):
            if in_kept[t]:
                k += 1
        at = np.empty((S, k))
        shift = -np.inf
        col = 0
        for t in range(n):
            if in_kept[t]:
                for s in range(S):
                    d = v[i, s] - v[t, s]
                    at[s, col] = d
                    if -d > shift:
                        shift = -d
                col += 1
        shift += 1.0
        for s in range(S):
            for c in range(k):
                at[s, c] += shift
        status, g, yraw, duals = _row_player_simplex(at)
        resolved = False
        if status == 0 and g > 0.0:
            b = np.empty(S)
            tot = 0.0
            for s in range(S):
                x = duals[s]
                if x < 0.0:
                    x = 0.0
                b[s] = x
                tot += x
            if tot > 0.0:
                achieved = np.inf
                for t in range(n):
                    if in_kept[t]:
                        d = 0.0
                        for s in range(S):
                            d += (v[i, s] - v[t, s]) * b[s] / tot
                        if d < achieved:
                            achieved = d
                if achieved > eps:
                    # admit the true winner at b among alive vectors
                    for s in range(S):
                        b[s] /= tot
                    best = -np.inf
                    for t in range(n):
                        if alive[t]:
                            val = 0.0
                            for s in range(S):
                                val += v[t, s] * b[s]
                            if val > best:
                                best = val
                    winner = -1
                    for t in range(n):
                        if alive[t]:
                            val = 0.0
                            for s in range(S):
                                val += v[t, s] * b[s]
                            if val >= best - eps:
                                if in_kept[t]:
                                    winner = t
                                    break
                                if winner < 0:
                                    winner = t
                    if in_kept[winner]:
                        alive[i] = False  # numerical stalemate
                    else:
                        in_kept[winner] = True
                    resolved = True
            if not resolved:
                lt = 0.0
                for c in range(k):
                    if yraw[c] > 0.0:
                        lt += yraw[c]
                if lt > 0.0:
                    upper = -np.inf
                    for s in range(S):
                        acc = 0.0
                        col = 0
                        for t in range(n):
                            if in_kept[t]:
                                w = yraw[col]
                                if w > 0.0:
                                    acc += w * (v[i, s] - v[t, s])
                                col += 1
                        acc /= lt
                        if acc > upper:
                            upper = acc
                    if upper <= eps:
                        alive[i] = False
                        resolved = True
        if not resolved:
            return i


def prune(vectors: np.ndarray, witnesses: list[np.ndarray] | None = None) -> np.ndarray:
    """Exact parsimonious representation of max over ``vectors``.

    ``witnesses`` is an optional warm-start list of beliefs; vectors that
    win at a warm-start belief are admitted without an LP.  The result is
    sorted lexicographically so it is deterministic.
    """
    vectors = _dedupe(np.asarray(vectors, dtype=float))
    if vectors.shape[0] <= 1:
        return vectors
    vectors = _remove_pointwise_dominated(vectors)
    n, S = vectors.shape
    if n <= 1:
        return vectors

    in_kept = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)

    def admit_winner_at(b: np.ndarray) -> None:
        vals = vectors @ b
        vals[~alive] = -np.inf
        best = float(vals.max())
        # among vectors within eps of the max, prefer one already kept
        close = np.nonzero(vals >= best - PRUNE_EPS)[0]
        if any(in_kept[j] for j in close):
            return
        in_kept[close[0]] = True

    for s in range(S):
        e = np.zeros(S)
        e[s] = 1.0
        admit_winner_at(e)
    if witnesses:
        for b in witnesses:
            admit_winner_at(np.asarray(b, dtype=float))

    while True:
        i = _prune_loop(vectors, in_kept, alive, PRUNE_EPS)
        if i < 0:
            break
        # certificate-less candidate: settle with the library solver
        delta, b = _witness_lp_scipy(vectors[i], vectors[in_kept])
        if b is None or delta <= PRUNE_EPS:
            alive[i] = False
            continue
        vals = vectors @ b
        vals[~alive] = -np.inf
        best = float(vals.max())
        close = np.nonzero(vals >= best - PRUNE_EPS)[0]
        winner = next((j for j in close if in_kept[j]), close[0])
        if in_kept[winner]:
            # numerical stalemate: candidate's margin was within eps
            alive[i] = False
        else:
            in_kept[winner] = True

    kept = vectors[in_kept]
    order = np.lexsort(kept.T[::-1])
    return kept[order]


# ---------------------------------------------------------------------------
# Exact POMDP value iteration (plain and with paid state requests)
# ---------------------------------------------------------------------------

def _cross_sum(parts: list[np.ndarray], witnesses: list[np.ndarray]) -> np.ndarray:
    parts = sorted(parts, key=len)  # small products first
    total = parts[0]
    for nxt in parts[1:]:
        summed = (total[:, None, :] + nxt[None, :, :]).reshape(-1, total.shape[1])
        total = prune(summed, witnesses)
    return total


class ExactSolution:
    """Frozen optimal value function as a finite vector set."""

    def __init__(self, vectors: np.ndarray, accuracy: float):
        self.vectors = vectors
        self.accuracy = accuracy

    def value(self, belief) -> float:
        if isinstance(belief, Belief):
            b = belief.as_dense(self.vectors.shape[1])
        else:
            b = np.asarray(belief, dtype=float)
        return float(np.max(self.vectors @ b))


def exact_value_iteration(
    model: PomdpModel,
    request_cost: float | None = None,
    accuracy: float = 2.5e-7,
    max_vectors: int = 4000,
) -> ExactSolution:
    """Solve a POMDP to within ``accuracy`` in sup norm by exact backups.

    The iteration count is chosen so truncation alone meets ``accuracy``;
    pruning contributes at most a few times PRUNE_EPS / (1 - discount) on
    top, negligible at the module constants.

    With ``request_cost`` set, the value function solved is the native
    paid-state-request one: each stage first offers an undiscounted
    request branch whose value at belief b is -cost + sum_s b(s) V(e_s)
    before the ordinary discounted environment-action stage.  The request
    branch is linear in b, so it adds exactly one vector per backup: the
    pointwise corner max of the freshly backed-up environment vectors,
    shifted by -cost.
    """
    S = model.num_states
    A = model.num_actions
    O = model.num_observations
    g = model.discount
    R = model.rewards

    # M[a][o][s, s'] = T(s'|s,a) O(o|s',a)
    M = []
    for a in range(A):
        Ta = model.transition_matrix(a).toarray()
        Ma = [Ta * model.observation_table[a, :, o][None, :] for o in range(O)]
        M.append(Ma)

    r_max = float(np.max(np.abs(R)))
    if request_cost is not None:
        r_max += request_cost
    if r_max == 0.0:
        return ExactSolution(np.zeros((1, S)), accuracy)
    m0 = r_max / (1.0 - g)
    if g == 0.0:
        iters = 1
    else:
        iters = max(1, math.ceil(math.log(accuracy * (1.0 - g) / m0) / math.log(g)))

    # fixed warm-start mesh: admits most winners without solving an LP
    rng = np.random.default_rng(0)
    mesh = rng.dirichlet(np.ones(S), size=8 * S)
    witnesses = [b for b in mesh]

    gamma_set = np.zeros((1, S))
    for _ in range(iters):
        env_sets = []
        for a in range(A):
            proj = [prune(gamma_set @ M[a][o].T, witnesses) for o in range(O)]
            crossed = _cross_sum(proj, witnesses)
            env_sets.append(R[:, a][None, :] + g * crossed)
        new_set = prune(np.vstack(env_sets), witnesses)
        if request_cost is not None:
            req = new_set.max(axis=0) - request_cost
            new_set = prune(np.vstack([new_set, req[None, :]]), witnesses)
        if new_set.shape[0] > max_vectors:
            raise RuntimeError(
                f"exact VI vector count blew up: {new_set.shape[0]}"
            )
        gamma_set = new_set
    return ExactSolution(gamma_set, accuracy)


def exact_sr_value(problem: PomdpSr, accuracy: float = 2.5e-7,
                   max_vectors: int = 4000) -> ExactSolution:
    return exact_value_iteration(
        problem.model, request_cost=problem.request_cost, accuracy=accuracy,
        max_vectors=max_vectors,
    )


def deterrent_equivalent_model(equivalent) -> PomdpModel:
    """Copy of an equivalent-form model safe to hand to a plain solver.

    The bipartite construction pads illegal (state, action) pairs with
    neutral self loops.  A generic solver could still pick those, so this
    replaces their reward with a penalty harsh enough that no optimal
    policy ever uses them from a phase-pure belief.  Values at embedded
    beliefs are unchanged because legal actions preserve phase purity.
    """
    base = equivalent.model
    g = base.discount
    r_mag = float(np.max(np.abs(base.rewards)))
    penalty = -(2.0 * r_mag / (1.0 - g) + 1.0)
    rewards = base.rewards.copy()
    legal = equivalent.legal_actions
    for s in range(base.num_states):
        for a in range(base.num_actions):
            if a not in legal[s]:
                rewards[s, a] = penalty
    T = np.zeros((base.num_states, base.num_actions, base.num_states))
    for a in range(base.num_actions):
        T[:, a, :] = base.transition_matrix(a).toarray()
    Z = np.transpose(base.observation_table, (1, 0, 2))
    return PomdpModel.from_dense(T, Z, rewards, g)


# ---------------------------------------------------------------------------
# Psi-system references
# ---------------------------------------------------------------------------

def neumann_series_solve(coeffs: np.ndarray, inhomog: np.ndarray,
                         terms: int = 400) -> np.ndarray:
    """Solve x = coeffs @ x + inhomog by truncated geometric series."""
    x = np.zeros_like(inhomog)
    powed = inhomog.copy()
    for _ in range(terms):
        x = x + powed
        powed = coeffs @ powed
    return x


def spectral_radius_below_one(coeffs: np.ndarray, slack: float = 1e-6) -> bool:
    return bool(np.max(np.abs(np.linalg.eigvals(coeffs))) < 1.0 - slack)
