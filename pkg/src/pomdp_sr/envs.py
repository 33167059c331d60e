"""Benchmark model builders and an episode step sampler.

The package-delivery grid world is generated procedurally for any corridor
count n >= 2; the chase domain uses the classic 29-cell map. Both builders
return fully validated models, so every probability row sums to one by
construction. Layout details that matter for tests (position counts, wall
observation map, start placement) are documented on the builder functions
and exportable as ASCII art.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Belief, Phase, PomdpModel, PomdpSr

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
DELIVERY_ACTION_NAMES = ("up", "down", "left", "right")

# package status codes, appended after the per-corridor pickup statuses
_ST_WAITING = "waiting"
_ST_CARRIED = "carried"
_ST_NONE = "none"


@dataclass(frozen=True)
class RobotDeliveryParams:
    """Knobs for the delivery grid world.

    corridors: number of pickup corridors (>= 2; the waiting pen needs room).
    move_failure: probability a move into an ordinary cell leaves the agent
        in place. Moves into a pickup cell or the delivery alcove never fail.
    transfer_prob: chance per step that a waiting package moves to a pickup,
        and also the chance a fresh package spawns directly at a pickup.
    no_respawn_prob: chance that a delivery is the last one ever.
    exit_reward: bonus for stepping into the exit (terminates the episode).
    """

    corridors: int = 3
    move_failure: float = 0.1
    transfer_prob: float = 0.8
    no_respawn_prob: float = 1.0 / 3.0
    discount: float = 0.99
    request_cost: float = 0.1
    exit_reward: float = 1.0

    def __post_init__(self):
        if self.corridors < 2:
            raise ValueError("need at least 2 corridors")
        if not (0.0 <= self.move_failure < 1.0):
            raise ValueError("move_failure must be in [0, 1)")
        if not (0.0 < self.transfer_prob <= 1.0):
            raise ValueError("transfer_prob must be in (0, 1]")
        if not (0.0 < self.no_respawn_prob <= 1.0):
            raise ValueError("no_respawn_prob must be in (0, 1]")


@dataclass(frozen=True)
class TagParams:
    discount: float = 0.95
    prey_stay_probability: float = 0.2


class _DeliveryLayout:
    """Grid geometry for a given corridor count.

    Rows 0-1 hold the corridors (row 0 cells are the pickup points), rows
    2-4 the main room of width 3 and length 2n+1, and row 5 two one-cell
    alcoves: the exit below column 0 and the delivery zone below column 1.
    A 2x3 waiting pen occupies the room's bottom-right corner; packages
    in transit sit there, the agent cannot enter. That leaves exactly
    8n-2 standable cells (the exit is a doorway, not a position).
    """

    def __init__(self, n: int):
        self.n = n
        self.width = 2 * n + 1
        # the pen leaves its top-left cell open; together with a pillar
        # at (3, 1) that keeps the standable-cell count at 8n-2 in every
        # size and leaves exactly one shortest route from pickup0 down to
        # the delivery alcove
        pen = {(r, c) for r in (3, 4) for c in range(2 * n - 2, 2 * n + 1)}
        pen.discard((3, 2 * n - 2))
        blocked = pen | {(3, 1)}
        cells = []
        for c in range(1, 2 * n, 2):
            cells.append((0, c))          # pickup points
        for c in range(1, 2 * n, 2):
            cells.append((1, c))          # corridor shafts
        for r in (2, 3, 4):
            for c in range(self.width):
                if (r, c) not in blocked:
                    cells.append((r, c))  # main room minus the blocked cells
        # start sits on the bottom row with the delivery alcove directly
        # below it; the exit doorway is in the far corner
        start_col = min(n, 2 * n - 3)
        self.start = (4, start_col)
        self.delivery = (5, start_col)
        cells.append(self.delivery)
        self.exit_cell = (5, 0)           # enterable, terminal, not a position
        self.pen = pen
        self.cells = cells
        self.index = {cell: i for i, cell in enumerate(cells)}
        self.pickups = [(0, c) for c in range(1, 2 * n, 2)]
        self.num_positions = len(cells)

    def neighbor(self, cell, action):
        r, c = cell
        if action == UP:
            return (r - 1, c)
        if action == DOWN:
            return (r + 1, c)
        if action == LEFT:
            return (r, c - 1)
        return (r, c + 1)

    def wall_count(self, cell) -> int:
        """Blocked sides of a cell; the exit doorway does not count as a wall."""
        walls = 0
        for a in (UP, DOWN, LEFT, RIGHT):
            nb = self.neighbor(cell, a)
            if nb not in self.index and nb != self.exit_cell:
                walls += 1
        return walls

    def ascii_map(self) -> str:
        rows = []
        for r in range(6):
            row = []
            for c in range(self.width):
                cell = (r, c)
                if cell == self.start:
                    row.append("A")
                elif cell in self.pickups:
                    row.append("P")
                elif cell == self.delivery:
                    row.append("D")
                elif cell == self.exit_cell:
                    row.append("E")
                elif cell in self.pen:
                    row.append("W")
                elif cell in self.index:
                    row.append(".")
                else:
                    row.append("#")
            rows.append(" ".join(row))
        return "\n".join(rows)


def _delivery_statuses(n: int):
    return [f"pickup{i}" for i in range(n)] + [_ST_WAITING, _ST_CARRIED, _ST_NONE]


def robot_delivery(n: int = 3, *, move_failure: float = 0.1,
                   transfer_prob: float = 0.8, no_respawn_prob: float = 1.0 / 3.0,
                   discount: float = 0.99, request_cost: float = 0.1,
                   exit_reward: float = 1.0) -> PomdpSr:
    """Package-delivery grid world with n pickup corridors.

    States are (position, package status) pairs plus one absorbing terminal,
    (8n-2)(n+3)+1 in total. Statuses: package at pickup i, in the waiting
    pen, carried, or gone for good. Actions are the four moves; a move into
    an ordinary cell fails with probability `move_failure` (the agent stays),
    moves into a pickup cell or the delivery alcove always succeed. Arriving
    at the pickup holding the package collects it; arriving at the delivery
    alcove while carrying pays 1 and respawns a package (or ends the supply
    with probability `no_respawn_prob`; fresh packages go to a uniform pickup
    with probability `transfer_prob`, otherwise to the waiting pen, from
    which they later transfer at the same rate). Stepping into the exit
    doorway pays `exit_reward` and terminates.

    Observations: the wall count (0-3) of the arrival cell, plus a fifth
    signal on arriving at the delivery alcove or standing at a pickup with
    the package in hand.
    """
    params = RobotDeliveryParams(n, move_failure, transfer_prob, no_respawn_prob,
                                 discount, request_cost, exit_reward)
    lay = _DeliveryLayout(n)
    statuses = _delivery_statuses(n)
    ns_status = len(statuses)
    carried = n + 1
    waiting = n
    gone = n + 2
    num_states = lay.num_positions * ns_status + 1
    terminal = num_states - 1
    pickup_index = {cell: i for i, cell in enumerate(lay.pickups)}

    def sid(cell, status):
        return lay.index[cell] * ns_status + status

    f, t, e = params.move_failure, params.transfer_prob, params.no_respawn_prob

    def status_outcomes(status, arrival):
        """Package-status distribution given the agent's arrival cell."""
        if status < n:
            if arrival in pickup_index and pickup_index[arrival] == status:
                return [(carried, 1.0)]
            return [(status, 1.0)]
        if status == waiting:
            out = [(i, t / n) for i in range(n)]
            out.append((waiting, 1.0 - t))
            return out
        if status == carried:
            if arrival == lay.delivery:
                out = [(gone, e)]
                out.extend((i, (1.0 - e) * t / n) for i in range(n))
                out.append((waiting, (1.0 - e) * (1.0 - t)))
                return out
            return [(carried, 1.0)]
        return [(gone, 1.0)]

    transitions = []
    rewards = np.zeros((num_states, 4))
    for cell in lay.cells:
        for a in range(4):
            target = lay.neighbor(cell, a)
            if target == lay.exit_cell:
                moves = [("exit", 1.0 - f), (cell, f)]
            elif target in lay.index:
                if target in pickup_index or target == lay.delivery:
                    moves = [(target, 1.0)]
                else:
                    moves = [(target, 1.0 - f), (cell, f)]
            else:
                moves = [(cell, 1.0)]
            for status in range(ns_status):
                s = sid(cell, status)
                for arrival, pm in moves:
                    if pm <= 0.0:
                        continue
                    if arrival == "exit":
                        transitions.append((s, a, terminal, pm))
                        rewards[s, a] += pm * params.exit_reward
                        continue
                    if arrival == lay.delivery and status == carried:
                        rewards[s, a] += pm * 1.0
                    for status2, ps in status_outcomes(status, arrival):
                        transitions.append((s, a, sid(arrival, status2), pm * ps))
    for a in range(4):
        transitions.append((terminal, a, terminal, 1.0))

    def obs_of(cell, status):
        if cell == lay.delivery:
            return 4
        if cell in pickup_index and status == carried:
            return 4
        return lay.wall_count(cell)

    observations = []
    for cell in lay.cells:
        for status in range(ns_status):
            o = obs_of(cell, status)
            for a in range(4):
                observations.append((sid(cell, status), a, o, 1.0))
    for a in range(4):
        observations.append((terminal, a, 0, 1.0))

    rew_list = [(s, a, rewards[s, a]) for s, a in zip(*np.nonzero(rewards))]
    model = PomdpModel.from_triplets(num_states, 4, 5, params.discount,
                                     transitions, observations, rew_list)
    return PomdpSr(model, params.request_cost)


def robot_delivery_initial_belief(n: int = 3) -> Belief:
    """Agent at the start cell, package at a uniformly random pickup."""
    lay = _DeliveryLayout(n)
    ns_status = n + 3
    base = lay.index[lay.start] * ns_status
    return Belief(np.arange(base, base + n), np.full(n, 1.0 / n),
                  Phase.REQUEST_DECISION)


def delivery_ascii_map(n: int = 3) -> str:
    return _DeliveryLayout(n).ascii_map()


def delivery_state_legend(n: int = 3) -> list:
    """Human-readable meaning of every state index."""
    lay = _DeliveryLayout(n)
    statuses = _delivery_statuses(n)
    legend = []
    for cell in lay.cells:
        for st in statuses:
            legend.append(f"pos={cell} package={st}")
    legend.append("terminal")
    return legend


# -- chase domain -----------------------------------------------------------


_TAG_CELLS = [(x, y) for y in range(2) for x in range(10)] + \
             [(x, y) for y in range(2, 5) for x in (5, 6, 7)]
_TAG_INDEX = {cell: i for i, cell in enumerate(_TAG_CELLS)}


def _tag_step(cell, action):
    x, y = cell
    if action == UP:
        nxt = (x, y + 1)
    elif action == DOWN:
        nxt = (x, y - 1)
    elif action == LEFT:
        nxt = (x - 1, y)
    else:
        nxt = (x + 1, y)
    return nxt if nxt in _TAG_INDEX else cell


def _prey_distribution(prey, agent, stay_prob):
    """Prey stays with `stay_prob`; the rest spreads uniformly over moves
    that strictly increase L1 distance from the agent (stay if none)."""
    px, py = _TAG_CELLS[prey]
    ax, ay = _TAG_CELLS[agent]
    d0 = abs(px - ax) + abs(py - ay)
    away = []
    for a in (UP, DOWN, LEFT, RIGHT):
        nxt = _tag_step((px, py), a)
        nx, ny = nxt
        if abs(nx - ax) + abs(ny - ay) > d0:
            away.append(_TAG_INDEX[nxt])
    if not away:
        return [(prey, 1.0)]
    out = [(c, (1.0 - stay_prob) / len(away)) for c in sorted(set(away))]
    out.append((prey, stay_prob))
    return out


def tag(*, discount: float = 0.95, prey_stay_probability: float = 0.2) -> PomdpModel:
    """Chase on the classic 29-cell map: a 10x2 base with a 3x3 block on top.

    States are (agent cell, prey cell) pairs plus one terminal, 842 in all.
    Four moves at -1 each (deterministic, bumping walls stays), and a tag
    action: +10 and terminal when sharing the prey's tile, -10 otherwise.
    The prey sees both positions, keeps still with probability 0.2 and
    otherwise flees to a uniformly random distance-increasing cell. The
    agent observes its own cell, or a special signal on the prey's tile.
    """
    nc = len(_TAG_CELLS)
    num_states = nc * nc + 1
    terminal = num_states - 1

    def sid(agent, prey):
        return agent * nc + prey

    transitions = []
    rewards = np.zeros((num_states, 5))
    for agent in range(nc):
        for prey in range(nc):
            s = sid(agent, prey)
            for a in range(4):
                rewards[s, a] = -1.0
                agent2 = _TAG_INDEX[_tag_step(_TAG_CELLS[agent], a)]
                for prey2, pp in _prey_distribution(prey, agent2, prey_stay_probability):
                    transitions.append((s, a, sid(agent2, prey2), pp))
            if agent == prey:
                rewards[s, 4] = 10.0
                transitions.append((s, 4, terminal, 1.0))
            else:
                rewards[s, 4] = -10.0
                for prey2, pp in _prey_distribution(prey, agent, prey_stay_probability):
                    transitions.append((s, 4, sid(agent, prey2), pp))
    for a in range(5):
        transitions.append((terminal, a, terminal, 1.0))

    observations = []
    for agent in range(nc):
        for prey in range(nc):
            o = nc if agent == prey else agent
            for a in range(5):
                observations.append((sid(agent, prey), a, o, 1.0))
    for a in range(5):
        observations.append((terminal, a, nc, 1.0))

    rew_list = [(s, a, rewards[s, a]) for s, a in zip(*np.nonzero(rewards))]
    return PomdpModel.from_triplets(num_states, 5, nc + 1, discount,
                                    transitions, observations, rew_list)


def tag_initial_belief() -> Belief:
    """Uniform over all non-terminal (agent, prey) configurations."""
    nc = len(_TAG_CELLS)
    return Belief(np.arange(nc * nc), np.full(nc * nc, 1.0 / (nc * nc)),
                  Phase.REQUEST_DECISION)


# -- analytic two-state model ------------------------------------------------


def fib_counterexample(c: float) -> PomdpSr:
    """Two-state model where one-step state knowledge is worth paying for.

    Both actions shuffle the state uniformly and the single observation is
    uninformative, so belief stays uniform forever without requests. Reward
    is +1 for matching the action to the state, -1 otherwise.
    """
    if not (c > 0):
        raise ValueError("request cost must be positive")
    transitions = np.full((2, 2, 2), 0.5)  # [s, a, s']
    observations = np.ones((2, 2, 1))      # [s', a, o]
    rewards = np.array([[1.0, -1.0], [-1.0, 1.0]])
    model = PomdpModel.from_dense(transitions, observations, rewards, 0.95)
    return PomdpSr(model, c)


# -- random model generators --------------------------------------------------


def random_pomdp(rng, num_states: int, num_actions: int, num_observations: int,
                 discount: float, transition_support: Optional[int] = None,
                 observation_sharpness: float = 1.0) -> PomdpModel:
    """Random dense-ish POMDP with Dirichlet probability rows.

    transition_support limits each (s, a) row to that many successor states.
    observation_sharpness is the Dirichlet concentration of observation
    rows; values below 1 yield peaked, informative observation channels.
    """
    T = np.zeros((num_states, num_actions, num_states))
    for s in range(num_states):
        for a in range(num_actions):
            if transition_support and transition_support < num_states:
                succ = rng.choice(num_states, size=transition_support, replace=False)
                T[s, a, succ] = rng.dirichlet(np.ones(transition_support))
            else:
                T[s, a] = rng.dirichlet(np.ones(num_states))
    alpha = np.full(num_observations, observation_sharpness)
    Z = rng.dirichlet(alpha, size=(num_states, num_actions))
    R = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    return PomdpModel.from_dense(T, Z, R, discount)


def random_pomdp_sr(rng, num_states: int, num_actions: int, num_observations: int,
                    discount: float, cost_range=(0.05, 0.5),
                    transition_support: Optional[int] = None,
                    observation_sharpness: float = 1.0) -> PomdpSr:
    model = random_pomdp(rng, num_states, num_actions, num_observations,
                         discount, transition_support, observation_sharpness)
    return PomdpSr(model, float(rng.uniform(*cost_range)))


# -- episode stepping ---------------------------------------------------------


@dataclass(frozen=True)
class StepOutcome:
    next_state: int
    observation: int
    reward: float
    revealed_state: Optional[int]
    done: bool


def simulate(problem: PomdpSr, state: int, decision, rng) -> StepOutcome:
    """Sample one environment step from the true `state` under `decision`.

    The decision carries the request flag, the action for the unrequested
    case, and the per-state action map for the requested case (the revealed
    state picks the action). Reward is the state-action reward minus the
    request cost when a request was made.
    """
    model = problem.model
    if state in model.terminal_states:
        raise ValueError(f"state {state} is terminal")
    if decision.request:
        revealed = state
        action = decision.state_action[state]
    else:
        revealed = None
        action = decision.action
    cols, vals = model.transition_row(state, action)
    nxt = int(cols[_sample_index(rng, vals)])
    obs_row = model.observation_row(nxt, action)
    obs = int(_sample_index(rng, obs_row))
    reward = model.reward(state, action)
    if decision.request:
        reward -= problem.request_cost
    return StepOutcome(nxt, obs, reward,
                       revealed, nxt in model.terminal_states)


def _sample_index(rng, weights) -> int:
    """Inverse-CDF sample; tolerates rows that sum to 1 within rounding."""
    u = rng.random() * np.sum(weights)
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u <= acc:
            return i
    return len(weights) - 1
