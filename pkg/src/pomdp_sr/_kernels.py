"""Flat-array search graph and jitted planning kernels.

The anytime planner spends nearly all of its time in three inner loops:
expanding a fringe node, propagating bound changes to ancestors, and
walking the greedy subgraph to pick the next fringe.  All three run over
a struct-of-arrays arena so numba can compile them once and reuse the
buffers across iterations.

Arena layout (all arrays preallocated, grown by the Python wrapper):

  node fields   phase, fringe, expanded, inq (flags), corner (state id or
                -1), origin (corner state whose subtree the node lives in,
                -1 for the root's own subtree), oweight (discount times
                branch probabilities accumulated since that corner),
                upper/lower (graph bounds), off_u/off_l (offline bounds),
                lp_u/lp_l (bounds at the last parent notification),
                bel_start/bel_len (belief pool slice), grp_start/grp_cnt
                (group slice), greedy (offset of the greedy group),
                par_head (head of the parent linked list)
  group fields  action (-2 request, -1 no-request, 0.. environmental),
                reward, disc, cstart/ccnt (child slice), qu/ql (action
                bounds), bkey/bchild (best fringe child by the static
                key disc * prob * offline gap)
  child fields  ch_node, ch_prob
  pools         bstate/bprob (belief support); parent links pl_node /
                pl_group / pl_w / pl_next, one per incoming edge, where
                pl_w caches the edge's disc * prob
  reg           corner registry, state -> node id (-1 when absent)
  ctr           counters: nodes, groups, children, belief, parents,
                expansions, trace rows

Node 0 is always the root.  Twins share their parent's belief slice.
Fringe nodes are always phase 0: corners and twins are created together
with their environmental edges.

Action values are maintained incrementally: a group's qu/ql always
equals reward + disc * sum(prob * committed child bound), where a
child's committed bound is its lp_u/lp_l.  When a node's own bound
drifts more than PROPAGATE_TOL from its committed value, the delta is
folded into every parent edge in O(1); a parent is re-examined only
when the edge could move that parent's node value.  Bounds evolve
monotonically (uppers fall, lowers rise), keeping those re-check
conditions to one comparison per edge.
"""

from collections import namedtuple

import numpy as np
from numba import njit

# counter slots
CTR_NODES = 0
CTR_GROUPS = 1
CTR_CHILDREN = 2
CTR_BELIEF = 3
CTR_PARENTS = 4
CTR_EXPANSIONS = 5
CTR_TRACE = 6

# plan-loop statuses
ST_SOLVED = 1
ST_BUDGET = 2
ST_NO_FRINGE = 3
ST_SINGULAR = 4
ST_GROW = 10  # + pool id

POOL_NODES = 0
POOL_GROUPS = 1
POOL_CHILDREN = 2
POOL_BELIEF = 3
POOL_PARENTS = 4

REQUEST_A = -2
NO_REQUEST_A = -1
ROOT_ORIGIN = -1

BELIEF_PRUNE = 1e-12
OBS_FLOOR = 1e-15
PROPAGATE_TOL = 1e-6
PSI_RESIDUAL_TOL = 1e-10

Arena = namedtuple(
    "Arena",
    [
        "phase", "fringe", "expanded", "inq", "corner", "origin", "oweight",
        "upper", "lower", "off_u", "off_l", "lp_u", "lp_l",
        "bel_start", "bel_len", "grp_start", "grp_cnt", "greedy", "par_head",
        "bstate", "bprob",
        "gr_action", "gr_reward", "gr_disc", "gr_cstart", "gr_ccnt",
        "gr_qu", "gr_ql", "gr_bkey", "gr_bchild",
        "ch_node", "ch_prob", "pl_node", "pl_group", "pl_w", "pl_next",
        "reg", "ctr",
    ],
)

ModelPack = namedtuple(
    "ModelPack",
    ["t_indptr", "t_col", "t_val", "obs", "rew", "disc", "ns", "na", "no"],
)

Scratch = namedtuple(
    "Scratch",
    [
        "pred", "touched", "psi", "psi_root", "visited", "vlist", "xfull",
        "stack", "wstack", "queue",
        "cand_w", "cand_key", "cand_child", "cand_origin",
    ],
)


def new_arena(num_states, node_cap=4096, group_cap=8192, child_cap=16384,
              belief_cap=16384, parent_cap=16384):
    i4 = np.int32
    i8 = np.int64
    f8 = np.float64
    u1 = np.uint8
    return Arena(
        phase=np.zeros(node_cap, u1),
        fringe=np.zeros(node_cap, u1),
        expanded=np.zeros(node_cap, u1),
        inq=np.zeros(node_cap, u1),
        corner=np.full(node_cap, -1, i4),
        origin=np.full(node_cap, -1, i4),
        oweight=np.zeros(node_cap, f8),
        upper=np.zeros(node_cap, f8),
        lower=np.zeros(node_cap, f8),
        off_u=np.zeros(node_cap, f8),
        off_l=np.zeros(node_cap, f8),
        lp_u=np.zeros(node_cap, f8),
        lp_l=np.zeros(node_cap, f8),
        bel_start=np.zeros(node_cap, i8),
        bel_len=np.zeros(node_cap, i4),
        grp_start=np.zeros(node_cap, i8),
        grp_cnt=np.zeros(node_cap, i4),
        greedy=np.full(node_cap, -1, i4),
        par_head=np.full(node_cap, -1, i8),
        bstate=np.zeros(belief_cap, i4),
        bprob=np.zeros(belief_cap, f8),
        gr_action=np.zeros(group_cap, i4),
        gr_reward=np.zeros(group_cap, f8),
        gr_disc=np.zeros(group_cap, f8),
        gr_cstart=np.zeros(group_cap, i8),
        gr_ccnt=np.zeros(group_cap, i4),
        gr_qu=np.zeros(group_cap, f8),
        gr_ql=np.zeros(group_cap, f8),
        gr_bkey=np.zeros(group_cap, f8),
        gr_bchild=np.full(group_cap, -1, i8),
        ch_node=np.zeros(child_cap, i8),
        ch_prob=np.zeros(child_cap, f8),
        pl_node=np.zeros(parent_cap, i8),
        pl_group=np.zeros(parent_cap, i8),
        pl_w=np.zeros(parent_cap, f8),
        pl_next=np.full(parent_cap, -1, i8),
        reg=np.full(num_states, -1, i8),
        ctr=np.zeros(16, i8),
    )


def new_scratch(num_states, node_cap):
    f8 = np.float64
    return Scratch(
        pred=np.zeros(num_states, f8),
        touched=np.zeros(num_states, np.int32),
        psi=np.zeros((num_states, num_states), f8),
        psi_root=np.zeros(num_states, f8),
        visited=np.zeros(num_states, np.uint8),
        vlist=np.zeros(num_states, np.int32),
        xfull=np.zeros(num_states, f8),
        stack=np.zeros(node_cap, np.int64),
        wstack=np.zeros(node_cap, f8),
        queue=np.zeros(node_cap + 1, np.int64),
        cand_w=np.zeros(node_cap, f8),
        cand_key=np.zeros(node_cap, f8),
        cand_child=np.zeros(node_cap, np.int64),
        cand_origin=np.zeros(node_cap, np.int32),
    )


def grow_arena(ar, pool, need):
    """Return a new Arena with the given pool at least `need` long."""

    def enlarged(a):
        cap = max(2 * a.shape[0], int(need))
        out = np.empty(cap, a.dtype)
        out[: a.shape[0]] = a
        if a.dtype == np.int64 and (a is ar.par_head or a is ar.pl_next or a is ar.gr_bchild):
            out[a.shape[0]:] = -1
        elif a.dtype == np.int32:
            out[a.shape[0]:] = -1
        else:
            out[a.shape[0]:] = 0
        return out

    d = ar._asdict()
    if pool == POOL_NODES:
        for k in ("phase", "fringe", "expanded", "inq", "corner", "origin",
                  "oweight", "upper", "lower", "off_u", "off_l", "lp_u",
                  "lp_l", "bel_start", "bel_len", "grp_start", "grp_cnt",
                  "greedy", "par_head"):
            d[k] = enlarged(d[k])
        d["par_head"][ar.phase.shape[0]:] = -1
    elif pool == POOL_GROUPS:
        for k in ("gr_action", "gr_reward", "gr_disc", "gr_cstart",
                  "gr_ccnt", "gr_qu", "gr_ql", "gr_bkey", "gr_bchild"):
            d[k] = enlarged(d[k])
        d["gr_bchild"][ar.gr_action.shape[0]:] = -1
    elif pool == POOL_CHILDREN:
        for k in ("ch_node", "ch_prob"):
            d[k] = enlarged(d[k])
    elif pool == POOL_BELIEF:
        for k in ("bstate", "bprob"):
            d[k] = enlarged(d[k])
    elif pool == POOL_PARENTS:
        for k in ("pl_node", "pl_group", "pl_w", "pl_next"):
            d[k] = enlarged(d[k])
        d["pl_next"][ar.pl_node.shape[0]:] = -1
    else:
        raise ValueError(f"unknown pool {pool}")
    return Arena(**d)


@njit(cache=True)
def _eval_set(vecs, bstate, bprob, start, length):
    """Best value of an alpha-vector matrix at a sparse belief."""
    best = -np.inf
    for r in range(vecs.shape[0]):
        acc = 0.0
        for i in range(length):
            acc += vecs[r, bstate[start + i]] * bprob[start + i]
        if acc > best:
            best = acc
    return best


@njit(cache=True)
def _add_parent(ar, child, parent, group, weight):
    p = ar.ctr[CTR_PARENTS]
    ar.pl_node[p] = parent
    ar.pl_group[p] = group
    ar.pl_w[p] = weight
    ar.pl_next[p] = ar.par_head[child]
    ar.par_head[child] = p
    ar.ctr[CTR_PARENTS] = p + 1


@njit(cache=True)
def _new_node(ar, phase, corner, origin, oweight, bel_start, bel_len,
              off_u, off_l):
    n = ar.ctr[CTR_NODES]
    ar.phase[n] = phase
    ar.fringe[n] = 1
    ar.expanded[n] = 0
    ar.inq[n] = 0
    ar.corner[n] = corner
    ar.origin[n] = origin
    ar.oweight[n] = oweight
    ar.off_u[n] = off_u
    ar.off_l[n] = off_l
    ar.upper[n] = off_u
    ar.lower[n] = off_l
    ar.lp_u[n] = off_u
    ar.lp_l[n] = off_l
    ar.bel_start[n] = bel_start
    ar.bel_len[n] = bel_len
    ar.grp_start[n] = 0
    ar.grp_cnt[n] = 0
    ar.greedy[n] = -1
    ar.par_head[n] = -1
    ar.ctr[CTR_NODES] = n + 1
    return n


@njit(cache=True)
def _refresh_node(ar, n):
    """Price a node's action values from its children's committed bounds
    and derive the greedy group and clamped node bounds.  Used when the
    groups are first built; afterwards the values evolve incrementally."""
    g0 = ar.grp_start[n]
    cnt = ar.grp_cnt[n]
    if cnt == 0:
        return
    for j in range(cnt):
        g = g0 + j
        c0 = ar.gr_cstart[g]
        au = 0.0
        al = 0.0
        for i in range(ar.gr_ccnt[g]):
            ch = ar.ch_node[c0 + i]
            p = ar.ch_prob[c0 + i]
            au += p * ar.lp_u[ch]
            al += p * ar.lp_l[ch]
        ar.gr_qu[g] = ar.gr_reward[g] + ar.gr_disc[g] * au
        ar.gr_ql[g] = ar.gr_reward[g] + ar.gr_disc[g] * al
    _refresh_value(ar, n)


@njit(cache=True)
def _refresh_value(ar, n):
    """Recompute a node's bounds and greedy group from its action values."""
    g0 = ar.grp_start[n]
    cnt = ar.grp_cnt[n]
    if cnt == 0:
        return
    best_u = -np.inf
    best_l = -np.inf
    greedy = 0
    for j in range(cnt):
        qu = ar.gr_qu[g0 + j]
        if qu > best_u:
            best_u = qu
            greedy = j
        ql = ar.gr_ql[g0 + j]
        if ql > best_l:
            best_l = ql
    ar.greedy[n] = greedy
    # clamp against the offline sets; the raw action values keep driving
    # the greedy choice
    ar.upper[n] = best_u if best_u < ar.off_u[n] else ar.off_u[n]
    ar.lower[n] = best_l if best_l > ar.off_l[n] else ar.off_l[n]


@njit(cache=True)
def _refresh_bkey(ar, g):
    """Recompute an action edge's best-fringe cache."""
    best = -np.inf
    child = -1
    c0 = ar.gr_cstart[g]
    for i in range(ar.gr_ccnt[g]):
        ch = ar.ch_node[c0 + i]
        if ar.fringe[ch] == 1:
            key = ar.gr_disc[g] * ar.ch_prob[c0 + i] * (ar.off_u[ch] - ar.off_l[ch])
            if key > best:
                best = key
                child = ch
    ar.gr_bkey[g] = best
    ar.gr_bchild[g] = child


@njit(cache=True)
def _expand_env(ar, pack, uv, lv, n, origin, base_w):
    """Attach one group per environmental action to phase-1 node `n`.

    Children are phase-0 fringe nodes, one per observation with positive
    probability, carrying origin `origin` and weight base_w * disc * P(o).
    """
    ns = pack.ns
    no = pack.no
    gamma = pack.disc
    b0 = ar.bel_start[n]
    blen = ar.bel_len[n]
    g_first = ar.ctr[CTR_GROUPS]
    ar.grp_start[n] = g_first
    ar.grp_cnt[n] = pack.na

    pred = np.zeros(ns)
    touched = np.empty(ns, np.int32)

    for a in range(pack.na):
        g = ar.ctr[CTR_GROUPS]
        ar.ctr[CTR_GROUPS] = g + 1
        reward = 0.0
        ntouch = 0
        for i in range(blen):
            s = ar.bstate[b0 + i]
            p = ar.bprob[b0 + i]
            reward += p * pack.rew[s, a]
            row = a * ns + s
            for k in range(pack.t_indptr[row], pack.t_indptr[row + 1]):
                sp = pack.t_col[k]
                if pred[sp] == 0.0:
                    touched[ntouch] = sp
                    ntouch += 1
                pred[sp] += p * pack.t_val[k]
        ts = np.sort(touched[:ntouch])  # belief supports stay ascending
        ar.gr_action[g] = a
        ar.gr_reward[g] = reward
        ar.gr_disc[g] = gamma
        c_first = ar.ctr[CTR_CHILDREN]
        ar.gr_cstart[g] = c_first
        nch = 0
        for o in range(no):
            po = 0.0
            for t in range(ntouch):
                sp = ts[t]
                po += pred[sp] * pack.obs[a, sp, o]
            if po <= OBS_FLOOR:
                continue
            # normalized successor belief with tiny support pruned
            kept = 0.0
            for t in range(ntouch):
                sp = ts[t]
                q = pred[sp] * pack.obs[a, sp, o] / po
                if q > BELIEF_PRUNE:
                    kept += q
            bstart = ar.ctr[CTR_BELIEF]
            w = 0
            for t in range(ntouch):
                sp = ts[t]
                q = pred[sp] * pack.obs[a, sp, o] / po
                if q > BELIEF_PRUNE:
                    ar.bstate[bstart + w] = sp
                    ar.bprob[bstart + w] = q / kept
                    w += 1
            ar.ctr[CTR_BELIEF] = bstart + w
            ou = _eval_set(uv, ar.bstate, ar.bprob, bstart, w)
            ol = _eval_set(lv, ar.bstate, ar.bprob, bstart, w)
            ch = _new_node(ar, 0, -1, origin, base_w * gamma * po,
                           bstart, w, ou, ol)
            c = ar.ctr[CTR_CHILDREN]
            ar.ch_node[c] = ch
            ar.ch_prob[c] = po
            ar.ctr[CTR_CHILDREN] = c + 1
            _add_parent(ar, ch, n, g, gamma * po)
            nch += 1
        ar.gr_ccnt[g] = nch
        _refresh_bkey(ar, g)
        # reset prediction scratch for the next action
        for t in range(ntouch):
            pred[ts[t]] = 0.0
    ar.fringe[n] = 0
    ar.expanded[n] = 1
    _refresh_node(ar, n)
    # silent commit: the only parent either does not exist yet or will
    # price this node from lp right after, so no deltas need folding
    ar.lp_u[n] = ar.upper[n]
    ar.lp_l[n] = ar.lower[n]


@njit(cache=True)
def _expand(ar, pack, uv, lv, cost, use_registry, allow_request, f):
    """Expand phase-0 fringe `f`: request group (one corner per support
    state) plus the no-request twin, each created with environmental edges.
    Returns 0, or -1 if the node is not an expandable fringe."""
    if ar.fringe[f] == 0 or ar.phase[f] != 0:
        return -1
    b0 = ar.bel_start[f]
    blen = ar.bel_len[f]
    g_first = ar.ctr[CTR_GROUPS]
    ar.grp_start[f] = g_first
    ngroups = 2 if allow_request == 1 else 1
    ar.grp_cnt[f] = ngroups
    ar.ctr[CTR_GROUPS] = g_first + ngroups

    g = g_first
    if allow_request == 1:
        ar.gr_action[g] = REQUEST_A
        ar.gr_reward[g] = -cost
        ar.gr_disc[g] = 1.0
        c_first = ar.ctr[CTR_CHILDREN]
        ar.gr_cstart[g] = c_first
        ar.gr_ccnt[g] = blen
        ar.ctr[CTR_CHILDREN] = c_first + blen
        for i in range(blen):
            s = ar.bstate[b0 + i]
            p = ar.bprob[b0 + i]
            corner = ar.reg[s] if use_registry == 1 else np.int64(-1)
            if corner < 0:
                bstart = ar.ctr[CTR_BELIEF]
                ar.bstate[bstart] = s
                ar.bprob[bstart] = 1.0
                ar.ctr[CTR_BELIEF] = bstart + 1
                ou = _eval_set(uv, ar.bstate, ar.bprob, bstart, 1)
                ol = _eval_set(lv, ar.bstate, ar.bprob, bstart, 1)
                corner = _new_node(ar, 1, s, s, 1.0, bstart, 1, ou, ol)
                _expand_env(ar, pack, uv, lv, corner, s, 1.0)
                if use_registry == 1:
                    ar.reg[s] = corner
            ar.ch_node[c_first + i] = corner
            ar.ch_prob[c_first + i] = p
            _add_parent(ar, corner, f, g, p)
        _refresh_bkey(ar, g)  # corners are never fringes; key stays empty
        g += 1

    ar.gr_action[g] = NO_REQUEST_A
    ar.gr_reward[g] = 0.0
    ar.gr_disc[g] = 1.0
    c_first = ar.ctr[CTR_CHILDREN]
    ar.gr_cstart[g] = c_first
    ar.gr_ccnt[g] = 1
    ar.ctr[CTR_CHILDREN] = c_first + 1
    twin = _new_node(ar, 1, -1, ar.origin[f], ar.oweight[f],
                     b0, blen, ar.off_u[f], ar.off_l[f])
    ar.ch_node[c_first] = twin
    ar.ch_prob[c_first] = 1.0
    _add_parent(ar, twin, f, g, 1.0)
    _expand_env(ar, pack, uv, lv, twin, ar.origin[f], ar.oweight[f])
    _refresh_bkey(ar, g)

    ar.fringe[f] = 0
    ar.expanded[f] = 1
    # lp_u/lp_l stay at the fringe values: parents priced this node as a
    # fringe, and update_ancestors must see the expansion as drift
    _refresh_node(ar, f)
    ar.ctr[CTR_EXPANSIONS] += 1

    # the edge that pointed at this fringe must drop it from its
    # best-fringe cache
    p = ar.par_head[f]
    while p >= 0:
        if ar.gr_bchild[ar.pl_group[p]] == f:
            _refresh_bkey(ar, ar.pl_group[p])
        p = ar.pl_next[p]
    return 0


@njit(cache=True)
def _update_ancestors(ar, start, queue):
    """Asynchronous bound propagation from `start` toward the root.

    A popped node recomputes its bounds from its (incrementally
    maintained) action values; when they drifted more than
    PROPAGATE_TOL past the committed values it commits: the delta is
    folded into every parent edge, and a parent is enqueued only if the
    touched action value can move that parent's bounds (it belongs to
    the parent's greedy group, or it rose above a current bound).
    FIFO order batches the waves; corner cycles simply re-enqueue until
    contraction drains the queue.  Returns the number of node refreshes
    (-1 on overflow).
    """
    cap = queue.shape[0]
    head = 0
    tail = 1
    queue[0] = start
    ar.inq[start] = 1
    pops = 0
    while head != tail:
        n = queue[head]
        head = (head + 1) % cap
        ar.inq[n] = 0
        pops += 1
        if pops > 50_000_000:
            return -1
        _refresh_value(ar, n)
        du = ar.upper[n] - ar.lp_u[n]
        dl = ar.lower[n] - ar.lp_l[n]
        adu = -du if du < 0.0 else du
        adl = -dl if dl < 0.0 else dl
        if adu > PROPAGATE_TOL or adl > PROPAGATE_TOL:
            ar.lp_u[n] = ar.upper[n]
            ar.lp_l[n] = ar.lower[n]
            p = ar.par_head[n]
            while p >= 0:
                parent = ar.pl_node[p]
                g = ar.pl_group[p]
                w = ar.pl_w[p]
                ar.gr_qu[g] += w * du
                ar.gr_ql[g] += w * dl
                if ar.inq[parent] == 0:
                    gg = ar.grp_start[parent] + ar.greedy[parent]
                    if ((g == gg and du != 0.0)
                            or ar.gr_qu[g] > ar.upper[parent]
                            or ar.gr_ql[g] > ar.lower[parent]):
                        queue[tail] = parent
                        tail = (tail + 1) % cap
                        if tail == head:
                            return -1
                        ar.inq[parent] = 1
                p = ar.pl_next[p]
    return pops


@njit(cache=True)
def _gwalk(ar, sc):
    """Walk the greedy subgraph from the root, accumulating request mass.

    Fills sc.psi (rows indexed by origin corner state), sc.psi_root,
    sc.visited/sc.vlist (corner states entered) and the candidate arrays
    (one entry per greedy action edge whose best-fringe cache is armed),
    in traversal order.  Returns (visited corner count, candidate count).
    """
    ns = sc.visited.shape[0]
    for s in range(ns):
        sc.visited[s] = 0
        sc.psi_root[s] = 0.0
    nv = 0
    nc = 0
    top = 0
    sc.stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        n = sc.stack[top]
        if ar.fringe[n] == 1:
            continue
        g = ar.grp_start[n] + ar.greedy[n]
        if ar.gr_action[g] == REQUEST_A:
            # request edge: corner children, mass recorded by origin row;
            # pushed in reverse so corners pop in child order
            row = ar.origin[n]
            w = ar.oweight[n]
            c0 = ar.gr_cstart[g]
            for i in range(ar.gr_ccnt[g] - 1, -1, -1):
                corner = ar.ch_node[c0 + i]
                s = ar.corner[corner]
                if row < 0:
                    sc.psi_root[s] += w * ar.ch_prob[c0 + i]
                else:
                    sc.psi[row, s] += w * ar.ch_prob[c0 + i]
                if sc.visited[s] == 0:
                    sc.visited[s] = 1
                    sc.psi[s, :] = 0.0
                    sc.vlist[nv] = s
                    nv += 1
                    sc.stack[top] = corner
                    top += 1
        else:
            if ar.gr_bchild[g] >= 0:
                sc.cand_w[nc] = ar.oweight[n]
                sc.cand_key[nc] = ar.gr_bkey[g]
                sc.cand_child[nc] = ar.gr_bchild[g]
                sc.cand_origin[nc] = ar.origin[n]
                nc += 1
            c0 = ar.gr_cstart[g]
            # push in reverse so traversal visits children in order
            for i in range(ar.gr_ccnt[g] - 1, -1, -1):
                ch = ar.ch_node[c0 + i]
                if ar.fringe[ch] == 0:
                    sc.stack[top] = ch
                    top += 1
    return nv, nc


@njit(cache=True)
def _solve_corner_system(ar, sc, nv):
    """Solve x = psi_bar_root + Psi_bar^T x over the visited corners.

    Unvisited corners receive no request mass, so their entries are zero
    and the system restricts exactly to the visited block.  Returns 0 on
    success, ST_SINGULAR when the solve is unusable.
    """
    ns = sc.xfull.shape[0]
    for s in range(ns):
        sc.xfull[s] = 0.0
    if nv == 0:
        return 0
    m = np.empty((nv, nv))
    rhs = np.empty(nv)
    for i in range(nv):
        si = sc.vlist[i]
        rhs[i] = sc.psi_root[si]
        for j in range(nv):
            sj = sc.vlist[j]
            m[i, j] = (1.0 if i == j else 0.0) - sc.psi[sj, si]
    x = np.linalg.solve(m, rhs)
    for i in range(nv):
        if not np.isfinite(x[i]):
            return ST_SINGULAR
    # defensive residual check; the system is diagonally dominant by
    # construction so failures indicate graph corruption
    for i in range(nv):
        acc = -rhs[i]
        for j in range(nv):
            acc += m[i, j] * x[j]
        if acc > PSI_RESIDUAL_TOL or acc < -PSI_RESIDUAL_TOL:
            return ST_SINGULAR
    for i in range(nv):
        sc.xfull[sc.vlist[i]] = x[i]
    return 0


@njit(cache=True)
def _score_candidates(sc, nc):
    """Pick the best fringe among greedy-reachable candidates.

    Scores are Psi(b0, origin) * origin_weight * offline gap; ties keep
    the earliest candidate in traversal order.  Returns (node, score)."""
    best = -np.inf
    node = np.int64(-1)
    for i in range(nc):
        o = sc.cand_origin[i]
        x = 1.0 if o < 0 else sc.xfull[o]
        score = x * sc.cand_w[i] * sc.cand_key[i]
        if score > best:
            best = score
            node = sc.cand_child[i]
    return node, best


@njit(cache=True)
def _tree_select(ar, sc):
    """Greedy-walk selection for tree mode (registry disabled).

    Carries the running path weight explicitly: request edges multiply by
    the branch probability, environmental edges by disc * P(o).  Returns
    (node, score) with ties kept in traversal order."""
    best = -np.inf
    node = np.int64(-1)
    top = 0
    sc.stack[top] = 0
    sc.wstack[top] = 1.0
    top += 1
    while top > 0:
        top -= 1
        n = sc.stack[top]
        w = sc.wstack[top]
        if ar.fringe[n] == 1:
            continue
        g = ar.grp_start[n] + ar.greedy[n]
        if ar.gr_bchild[g] >= 0:
            score = w * ar.gr_bkey[g]
            if score > best:
                best = score
                node = ar.gr_bchild[g]
        c0 = ar.gr_cstart[g]
        for i in range(ar.gr_ccnt[g] - 1, -1, -1):
            ch = ar.ch_node[c0 + i]
            if ar.fringe[ch] == 0:
                sc.stack[top] = ch
                # one rule covers all edge kinds: request edges have
                # disc 1 and prob b(s), the no-request edge disc 1 prob 1
                sc.wstack[top] = w * ar.gr_disc[g] * ar.ch_prob[c0 + i]
                top += 1
    return node, best


@njit(cache=True)
def _fallback_select(ar):
    """Globally best fringe by origin_weight * offline gap (creation
    order on ties); used when the greedy subgraph reaches no fringe."""
    best = -np.inf
    node = np.int64(-1)
    for n in range(ar.ctr[CTR_NODES]):
        if ar.fringe[n] == 1:
            score = ar.oweight[n] * (ar.off_u[n] - ar.off_l[n])
            if score > best:
                best = score
                node = n
    return node, best


@njit(cache=True)
def _grow_request(ar, pack, f):
    """Worst-case pool headroom needed to expand `f`; returns the pool id
    that would overflow, or -1 when all fit."""
    k = ar.bel_len[f]
    ao = pack.na * pack.no
    need_nodes = ar.ctr[CTR_NODES] + 1 + k + (1 + k) * ao
    if need_nodes > ar.phase.shape[0]:
        return POOL_NODES, need_nodes
    need_groups = ar.ctr[CTR_GROUPS] + 2 + (1 + k) * pack.na
    if need_groups > ar.gr_action.shape[0]:
        return POOL_GROUPS, need_groups
    need_children = ar.ctr[CTR_CHILDREN] + 1 + k + (1 + k) * ao
    if need_children > ar.ch_node.shape[0]:
        return POOL_CHILDREN, need_children
    need_belief = ar.ctr[CTR_BELIEF] + k + (1 + k) * ao * pack.ns
    if need_belief > ar.bstate.shape[0]:
        return POOL_BELIEF, need_belief
    need_parents = ar.ctr[CTR_PARENTS] + 1 + 2 * k + (1 + k) * ao
    if need_parents > ar.pl_node.shape[0]:
        return POOL_PARENTS, need_parents
    return -1, 0


@njit(cache=True)
def _plan_loop(ar, sc, pack, uv, lv, cost, use_registry, allow_request,
               budget, epsilon, trace, out):
    """Fused select/expand/propagate loop.

    Runs until the root gap closes to epsilon, the expansion budget is
    spent, no fringe remains, or a pool needs growing (status ST_GROW +
    pool id; nothing is half-applied, the caller grows and re-enters).
    out[0] = expansions performed in this call, out[1] = fallback count,
    out[2] = grow size hint.  Trace rows: iteration, origin, score,
    root upper, root lower, node count.
    """
    done = 0
    fallbacks = 0
    while True:
        gap = ar.upper[0] - ar.lower[0]
        if gap <= epsilon:
            out[0] = done
            out[1] = fallbacks
            return ST_SOLVED
        if done >= budget:
            out[0] = done
            out[1] = fallbacks
            return ST_BUDGET
        # selection
        if ar.fringe[0] == 1:
            f = np.int64(0)
            score = ar.off_u[0] - ar.off_l[0]
        elif use_registry == 1:
            nv, nc = _gwalk(ar, sc)
            if nc > 0:
                st = _solve_corner_system(ar, sc, nv)
                if st != 0:
                    out[0] = done
                    out[1] = fallbacks
                    return st
                f, score = _score_candidates(sc, nc)
            else:
                f = np.int64(-1)
                score = -np.inf
            if f < 0:
                f, score = _fallback_select(ar)
                fallbacks += 1
                if f < 0:
                    out[0] = done
                    out[1] = fallbacks
                    return ST_NO_FRINGE
        else:
            f, score = _tree_select(ar, sc)
            if f < 0:
                f, score = _fallback_select(ar)
                fallbacks += 1
                if f < 0:
                    out[0] = done
                    out[1] = fallbacks
                    return ST_NO_FRINGE
        pool, hint = _grow_request(ar, pack, f)
        if pool >= 0:
            out[0] = done
            out[1] = fallbacks
            out[2] = hint
            return ST_GROW + pool
        _expand(ar, pack, uv, lv, cost, use_registry, allow_request, f)
        _update_ancestors(ar, f, sc.queue)
        t = ar.ctr[CTR_TRACE]
        if t < trace.shape[0]:
            trace[t, 0] = ar.ctr[CTR_EXPANSIONS] - 1
            trace[t, 1] = ar.origin[f]
            trace[t, 2] = score
            trace[t, 3] = ar.upper[0]
            trace[t, 4] = ar.lower[0]
            trace[t, 5] = ar.ctr[CTR_NODES]
            ar.ctr[CTR_TRACE] = t + 1
        done += 1
