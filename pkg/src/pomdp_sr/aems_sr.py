"""Anytime heuristic search for POMDPs with paid state requests.

The planner grows a search graph rooted at the current belief.  Expanding
a belief adds a request edge (one corner child per support state, shared
through a registry so repeated requests for the same state reuse the same
node) and a no-request twin that carries the environmental actions.  The
next fringe to expand is the one contributing the largest slice of the
root bound gap under the current greedy policy; because corners merge
paths, that contribution is computed by solving a small linear system
over the request mass flowing between corners rather than by enumerating
paths.

With the registry disabled the same machinery runs on a plain tree, which
is the classical anytime-error-minimization baseline applied to the
two-phase structure of the problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .bounds import AlphaVectorSet, BoundKind, CornerActionValues
from .model import Belief, Phase, PomdpModel, PomdpSr, belief_reward, belief_update, observation_probabilities

ROOT = "ROOT"


class AlreadyExpanded(RuntimeError):
    """Raised when expand() targets a node that is not a fringe."""


class NoReachableFringe(RuntimeError):
    """Raised when the graph has no fringe node left anywhere."""


class SingularSystem(RuntimeError):
    """Raised when the corner mass system cannot be solved reliably.

    The system matrix is strictly diagonally dominant by construction
    (every corner-to-corner path crosses at least one discounted edge),
    so this indicates graph corruption rather than a degenerate model.
    """


@dataclass
class PsiSolution:
    """Request-mass accounting for the current greedy policy.

    psi_bar[i, j] is the discounted probability mass that flows from
    corner i's subtree into corner j through greedy request edges;
    psi_bar_root is the same mass flowing directly from the root's
    subtree.  psi_root solves x = psi_bar_root + psi_bar^T x and gives
    the total greedy mass reaching each corner from the root.
    fringe_scores maps each greedy-reachable fringe node to its bound
    contribution, in traversal order.
    """

    psi_bar: np.ndarray
    psi_bar_root: np.ndarray
    psi_root: np.ndarray
    fringe_scores: dict


@dataclass
class PlanStats:
    expansions: int
    status: str
    initial_upper: float
    initial_lower: float
    root_upper: float
    root_lower: float
    node_count: int
    fallbacks: int = 0
    trace: list | None = None


@dataclass
class Decision:
    """Outcome of one planning step.

    When request is True, state_action maps every state in the current
    belief's support to the environmental action to run once the state
    is revealed.  Otherwise action is the environmental action to run
    blind.  stats carries the planning diagnostics for the step.
    """

    request: bool
    action: int | None
    state_action: dict[int, int] | None
    stats: PlanStats
    graph: "SearchGraph | None" = field(default=None, repr=False)


def pack_model(model: PomdpModel) -> K.ModelPack:
    """Flatten a model into the arrays the jitted kernels consume."""
    if model._pack is not None:
        return model._pack
    S, A = model.num_states, model.num_actions
    indptr = np.zeros(A * S + 1, np.int64)
    cols = []
    vals = []
    nnz = 0
    for a in range(A):
        t = model._T[a]
        for s in range(S):
            row = t.indices[t.indptr[s]: t.indptr[s + 1]]
            val = t.data[t.indptr[s]: t.indptr[s + 1]]
            nnz += row.shape[0]
            indptr[a * S + s + 1] = nnz
            cols.append(row)
            vals.append(val)
    pack = K.ModelPack(
        t_indptr=indptr,
        t_col=np.concatenate(cols).astype(np.int32) if nnz else np.zeros(0, np.int32),
        t_val=np.concatenate(vals).astype(np.float64) if nnz else np.zeros(0),
        obs=np.ascontiguousarray(model.observation_table),
        rew=np.ascontiguousarray(model.rewards),
        disc=float(model.discount),
        ns=S, na=A, no=model.num_observations,
    )
    model._pack = pack
    return pack


def solve_psi(psi_bar: np.ndarray, psi_bar_root: np.ndarray,
              residual_tol: float = 1e-10) -> np.ndarray:
    """Solve the corner mass balance x = psi_bar_root + psi_bar^T x.

    psi_bar rows are indexed by the origin corner, columns by the target
    corner, matching what gwalk accumulates.  Raises SingularSystem when
    the solve fails or leaves a residual above residual_tol.
    """
    psi_bar = np.asarray(psi_bar, dtype=np.float64)
    rhs = np.asarray(psi_bar_root, dtype=np.float64)
    n = rhs.shape[0]
    m = np.eye(n) - psi_bar.T
    try:
        x = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite solution")
    resid = np.abs(m @ x - rhs).max() if n else 0.0
    if resid > residual_tol:
        raise SingularSystem(f"residual {resid:.3e}")
    return x


_STATUS_NAMES = {K.ST_SOLVED: "solved", K.ST_BUDGET: "budget",
                 K.ST_NO_FRINGE: "no_fringe"}


class SearchGraph:
    """Search graph over beliefs of a paid-state-request POMDP.

    The graph lives in flat arrays (see _kernels); this wrapper owns
    allocation, exposes node accessors for inspection, and runs the
    planning loop.  One graph serves one root belief and is discarded
    after the environment advances.
    """

    def __init__(self, problem: PomdpSr, lower: AlphaVectorSet,
                 upper: AlphaVectorSet, root: Belief, *,
                 use_registry: bool = True, allow_request: bool = True):
        if not isinstance(problem, PomdpSr):
            raise TypeError("SearchGraph plans on a PomdpSr")
        if lower.kind is not BoundKind.LOWER or upper.kind is not BoundKind.UPPER:
            raise ValueError("bound sets passed in the wrong order")
        if root.phase is not Phase.REQUEST_DECISION:
            raise ValueError("the root belief must be phase 0")
        self.problem = problem
        self.model = problem.model
        self.pack = pack_model(self.model)
        S = self.model.num_states
        if lower.num_states != S or upper.num_states != S:
            raise ValueError("bound sets do not match the model")
        self._uv = np.ascontiguousarray(upper.vectors)
        self._lv = np.ascontiguousarray(lower.vectors)
        self.lower_set = lower
        self.upper_set = upper
        self.use_registry = bool(use_registry)
        self.allow_request = bool(allow_request)
        self._ar = K.new_arena(S)
        self._sc = K.new_scratch(S, self._ar.phase.shape[0])
        self._init_root(root)

    def _init_root(self, root: Belief) -> None:
        ar = self._ar
        n = len(root.states)
        ar.bstate[:n] = root.states
        ar.bprob[:n] = root.probs
        ar.ctr[K.CTR_BELIEF] = n
        ou = float(self.upper_set.evaluate(root))
        ol = float(self.lower_set.evaluate(root))
        ar.phase[0] = 0
        ar.fringe[0] = 1
        ar.corner[0] = -1
        ar.origin[0] = K.ROOT_ORIGIN
        ar.oweight[0] = 1.0
        ar.off_u[0] = ou
        ar.off_l[0] = ol
        ar.upper[0] = ou
        ar.lower[0] = ol
        ar.lp_u[0] = ou
        ar.lp_l[0] = ol
        ar.bel_start[0] = 0
        ar.bel_len[0] = n
        ar.par_head[0] = -1
        ar.greedy[0] = -1
        ar.ctr[K.CTR_NODES] = 1
        self.root = 0

    # -- sizing ------------------------------------------------------

    def _grow(self, pool: int, hint: int) -> None:
        self._ar = K.grow_arena(self._ar, pool, hint)
        if pool == K.POOL_NODES:
            self._sc = K.new_scratch(self.model.num_states,
                                     self._ar.phase.shape[0])

    def _ensure_headroom(self, node: int) -> None:
        while True:
            pool, hint = K._grow_request(self._ar, self.pack, node)
            if pool < 0:
                return
            self._grow(pool, hint)

    # -- properties --------------------------------------------------

    @property
    def node_count(self) -> int:
        return int(self._ar.ctr[K.CTR_NODES])

    @property
    def expansion_count(self) -> int:
        return int(self._ar.ctr[K.CTR_EXPANSIONS])

    def root_bounds(self) -> tuple[float, float]:
        return float(self._ar.lower[0]), float(self._ar.upper[0])

    def root_gap(self) -> float:
        return float(self._ar.upper[0] - self._ar.lower[0])

    # -- node accessors ----------------------------------------------

    def _check_node(self, n: int) -> int:
        if not 0 <= n < self.node_count:
            raise IndexError(f"no node {n}")
        return int(n)

    def belief_of(self, n: int) -> Belief:
        n = self._check_node(n)
        ar = self._ar
        b0, ln = ar.bel_start[n], ar.bel_len[n]
        return Belief(ar.bstate[b0:b0 + ln], ar.bprob[b0:b0 + ln],
                      phase=int(ar.phase[n]))

    def is_fringe(self, n: int) -> bool:
        return bool(self._ar.fringe[self._check_node(n)])

    def phase_of(self, n: int) -> int:
        return int(self._ar.phase[self._check_node(n)])

    def origin_of(self, n: int):
        o = int(self._ar.origin[self._check_node(n)])
        return ROOT if o < 0 else o

    def origin_weight_of(self, n: int) -> float:
        return float(self._ar.oweight[self._check_node(n)])

    def bounds_of(self, n: int) -> tuple[float, float]:
        n = self._check_node(n)
        return float(self._ar.lower[n]), float(self._ar.upper[n])

    def offline_bounds_of(self, n: int) -> tuple[float, float]:
        n = self._check_node(n)
        return float(self._ar.off_l[n]), float(self._ar.off_u[n])

    def corner_node(self, state: int) -> int | None:
        n = int(self._ar.reg[state])
        return None if n < 0 else n

    def corner_state_of(self, n: int) -> int | None:
        c = int(self._ar.corner[self._check_node(n)])
        return None if c < 0 else c

    def greedy_action_of(self, n: int) -> int:
        """Action id of the greedy group (-2 request, -1 no-request)."""
        n = self._check_node(n)
        if self._ar.fringe[n]:
            raise AlreadyExpanded(f"node {n} is a fringe")
        g = self._ar.grp_start[n] + self._ar.greedy[n]
        return int(self._ar.gr_action[g])

    def children_of(self, n: int) -> list:
        """[(action, reward, discount, [(child, prob), ...]), ...]"""
        n = self._check_node(n)
        ar = self._ar
        out = []
        g0 = ar.grp_start[n]
        for j in range(int(ar.grp_cnt[n])):
            g = g0 + j
            c0 = ar.gr_cstart[g]
            branches = [(int(ar.ch_node[c0 + i]), float(ar.ch_prob[c0 + i]))
                        for i in range(int(ar.gr_ccnt[g]))]
            out.append((int(ar.gr_action[g]), float(ar.gr_reward[g]),
                        float(ar.gr_disc[g]), branches))
        return out

    def action_bounds_of(self, n: int) -> dict[int, tuple[float, float]]:
        """action -> (lower, upper) action values at node n."""
        n = self._check_node(n)
        ar = self._ar
        g0 = ar.grp_start[n]
        return {int(ar.gr_action[g0 + j]): (float(ar.gr_ql[g0 + j]),
                                            float(ar.gr_qu[g0 + j]))
                for j in range(int(ar.grp_cnt[n]))}

    def fringe_nodes(self) -> list[int]:
        ar = self._ar
        return [int(n) for n in range(self.node_count) if ar.fringe[n]]

    # -- core operations ---------------------------------------------

    def expand(self, n: int) -> None:
        n = self._check_node(n)
        if not self._ar.fringe[n]:
            raise AlreadyExpanded(f"node {n} already expanded")
        self._ensure_headroom(n)
        st = K._expand(self._ar, self.pack, self._uv, self._lv,
                       self.problem.request_cost,
                       1 if self.use_registry else 0,
                       1 if self.allow_request else 0, n)
        if st != 0:
            raise AlreadyExpanded(f"node {n} already expanded")

    def update_ancestors(self, n: int) -> int:
        n = self._check_node(n)
        pops = K._update_ancestors(self._ar, n, self._sc.queue)
        if pops < 0:
            raise RuntimeError("bound propagation failed to settle")
        return int(pops)

    def gwalk(self) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """Greedy-subgraph walk in literal traversal order (reference path).

        Returns (psi_bar, psi_bar_root, fringes): the request mass
        accumulated between corner subtrees, the mass from the root's
        subtree, and every greedy-reachable fringe in traversal order.
        """
        ar = self._ar
        S = self.model.num_states
        psi = np.zeros((S, S))
        psi_root = np.zeros(S)
        visited = set()
        fringes = []
        stack = [self.root]
        while stack:
            n = stack.pop()
            if ar.fringe[n]:
                fringes.append(int(n))
                continue
            g = ar.grp_start[n] + ar.greedy[n]
            c0 = ar.gr_cstart[g]
            cnt = int(ar.gr_ccnt[g])
            if ar.gr_action[g] == K.REQUEST_A:
                row = int(ar.origin[n])
                w = float(ar.oweight[n])
                pushes = []
                for i in range(cnt):
                    corner = int(ar.ch_node[c0 + i])
                    s = int(ar.corner[corner])
                    if row < 0:
                        psi_root[s] += w * ar.ch_prob[c0 + i]
                    else:
                        psi[row, s] += w * ar.ch_prob[c0 + i]
                    if s not in visited:
                        visited.add(s)
                        pushes.append(corner)
                stack.extend(reversed(pushes))
            else:
                stack.extend(int(ar.ch_node[c0 + i])
                             for i in range(cnt - 1, -1, -1))
        return psi, psi_root, fringes

    def psi_solution(self) -> PsiSolution:
        """Request-mass solve plus fringe scores for the greedy policy."""
        psi, psi_root, fringes = self.gwalk()
        x = solve_psi(psi, psi_root)
        ar = self._ar
        scores = {}
        for n in fringes:
            o = int(ar.origin[n])
            mass = 1.0 if o < 0 else float(x[o])
            scores[n] = mass * float(ar.oweight[n]) * \
                float(ar.off_u[n] - ar.off_l[n])
        return PsiSolution(psi, psi_root, x, scores)

    def get_belief_to_expand(self) -> int:
        """Next fringe under the gap-contribution heuristic.

        Falls back to the globally best fringe by origin weight times
        offline gap when the greedy policy reaches no fringe; raises
        NoReachableFringe only when no fringe exists at all.
        """
        ar, sc = self._ar, self._sc
        if ar.fringe[self.root]:
            return self.root
        if self.use_registry:
            nv, nc = K._gwalk(ar, sc)
            if nc > 0:
                st = K._solve_corner_system(ar, sc, nv)
                if st != 0:
                    raise SingularSystem("corner mass solve failed")
                f, _ = K._score_candidates(sc, nc)
            else:
                f = -1
        else:
            f, _ = K._tree_select(ar, sc)
        if f < 0:
            f, _ = K._fallback_select(ar)
            if f < 0:
                raise NoReachableFringe("graph has no fringe nodes")
        return int(f)

    def plan(self, budget: int, epsilon: float,
             trace: bool = False) -> PlanStats:
        """Expand fringes until the root gap closes to epsilon or the
        expansion budget is spent."""
        ar = self._ar
        init_u = float(ar.off_u[0])
        init_l = float(ar.off_l[0])
        budget = int(budget)
        tr = np.zeros((budget if trace else 0, 6))
        ar.ctr[K.CTR_TRACE] = 0
        out = np.zeros(4, np.int64)
        spent = 0
        fallbacks = 0
        while True:
            st = int(K._plan_loop(self._ar, self._sc, self.pack, self._uv,
                                  self._lv, self.problem.request_cost,
                                  1 if self.use_registry else 0,
                                  1 if self.allow_request else 0,
                                  budget - spent, float(epsilon), tr, out))
            spent += int(out[0])
            fallbacks += int(out[1])
            if st >= K.ST_GROW:
                self._grow(st - K.ST_GROW, int(out[2]))
                continue
            if st == K.ST_SINGULAR:
                raise SingularSystem("corner mass solve failed")
            break
        rows = None
        if trace:
            rows = []
            for i in range(int(self._ar.ctr[K.CTR_TRACE])):
                origin = int(tr[i, 1])
                rows.append({
                    "iteration": int(tr[i, 0]),
                    "origin": ROOT if origin < 0 else origin,
                    "score": float(tr[i, 2]),
                    "root_upper": float(tr[i, 3]),
                    "root_lower": float(tr[i, 4]),
                    "node_count": int(tr[i, 5]),
                })
        lo, up = self.root_bounds()
        return PlanStats(
            expansions=spent, status=_STATUS_NAMES[st],
            initial_upper=init_u, initial_lower=init_l,
            root_upper=up, root_lower=lo,
            node_count=self.node_count, fallbacks=fallbacks, trace=rows)

    # -- decision extraction -----------------------------------------

    def corner_action_values(self) -> tuple[CornerActionValues, CornerActionValues]:
        """Graph action bounds at every registered corner, for tightening
        offline sets.  Empty in tree mode (corners are not shared)."""
        lo: dict = {}
        up: dict = {}
        ar = self._ar
        for s in range(self.model.num_states):
            n = int(ar.reg[s])
            if n < 0:
                continue
            g0 = ar.grp_start[n]
            for j in range(int(ar.grp_cnt[n])):
                g = g0 + j
                a = int(ar.gr_action[g])
                if a < 0:
                    continue
                lo[(s, a)] = float(ar.gr_ql[g])
                up[(s, a)] = float(ar.gr_qu[g])
        return (CornerActionValues(BoundKind.LOWER, lo),
                CornerActionValues(BoundKind.UPPER, up))

    def _graph_decision(self) -> tuple[bool, int | None, dict | None]:
        ar = self._ar
        ab = self.action_bounds_of(self.root)
        request = False
        if self.allow_request and K.REQUEST_A in ab:
            # the request edge wins ties: lower action id first
            request = ab[K.REQUEST_A][0] >= ab[K.NO_REQUEST_A][0]
        if request:
            mapping = {}
            for s in self.belief_of(self.root).states:
                corner = self.corner_node(s)
                if corner is None:  # tree mode: find via the request group
                    corner = self._tree_corner(s)
                env = self.action_bounds_of(corner)
                mapping[s] = max(sorted(env), key=lambda a: env[a][0])
            return True, None, mapping
        twin = None
        for action, _, _, branches in self.children_of(self.root):
            if action == K.NO_REQUEST_A:
                twin = branches[0][0]
        env = self.action_bounds_of(twin)
        best = max(sorted(env), key=lambda a: env[a][0])
        return False, int(best), None

    def _tree_corner(self, s: int) -> int:
        ar = self._ar
        for action, _, _, branches in self.children_of(self.root):
            if action == K.REQUEST_A:
                for child, _ in branches:
                    if int(ar.corner[child]) == s:
                        return child
        raise KeyError(f"no corner child for state {s}")

    def _offline_decision(self) -> tuple[bool, int | None, dict | None]:
        """One-step lookahead priced on the offline lower set, used when
        the root was never expanded (zero budget or epsilon = inf)."""
        model = self.model
        b = self.belief_of(self.root)
        lo = self.lower_set

        def env_value(belief: Belief, a: int) -> float:
            acc = belief_reward(model, belief, a)
            for o, po in enumerate(observation_probabilities(model, belief, a)):
                if po <= 0.0:
                    continue
                nxt = belief_update(model, belief, a, o)
                acc += model.discount * po * float(lo.evaluate(nxt))
            return acc

        env_vals = {a: env_value(b, a) for a in range(model.num_actions)}
        best_env = max(sorted(env_vals), key=lambda a: env_vals[a])
        if not self.allow_request:
            return False, int(best_env), None
        corner_lower = self._lv.max(axis=0)
        req = -self.problem.request_cost + sum(
            p * corner_lower[s] for s, p in zip(b.states, b.probs))
        if req >= env_vals[best_env]:
            mapping = {}
            for s in b.states:
                corner = Belief([s], [1.0])
                vals = {a: env_value(corner, a) for a in range(model.num_actions)}
                mapping[s] = max(sorted(vals), key=lambda a: vals[a])
            return True, None, mapping
        return False, int(best_env), None

    def decide(self, stats: PlanStats) -> Decision:
        if self._ar.expanded[self.root]:
            request, action, mapping = self._graph_decision()
        else:
            request, action, mapping = self._offline_decision()
        return Decision(request=request, action=action, state_action=mapping,
                        stats=stats, graph=self)


def plan_step(problem: PomdpSr, lower: AlphaVectorSet, upper: AlphaVectorSet,
              belief: Belief, *, budget: int, epsilon: float,
              use_registry: bool = True, allow_request: bool = True,
              trace: bool = False) -> Decision:
    """Plan from one belief: build a fresh graph, run the anytime loop,
    and extract the executable decision from the lower bounds."""
    graph = SearchGraph(problem, lower, upper, belief,
                        use_registry=use_registry,
                        allow_request=allow_request)
    stats = graph.plan(budget, epsilon, trace=trace)
    return graph.decide(stats)
