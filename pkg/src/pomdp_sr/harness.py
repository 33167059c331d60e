"""Experiment orchestration: seeded episodes, metrics, and result tables.

run_experiment drives one configured planner through repeated simulated
episodes and records, per step, the planning effort (NE, expansions or
simulations) and the error reduction ER = 1 - (U_G(b) - L_G(b)) / (U(b) - L(b)),
where U and L are the untouched offline bounds at the step's root belief.
Results render to a deterministic CSV; compare_table lines up several
experiments side by side.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np

from . import envs
from .aems_sr import plan_step
from .baselines import PomcpConfig, pomcp_plan_step
from .bounds import improve_from_graph, solve_offline_bound
from .equivalent import to_equivalent_pomdp
from .model import Belief, PomdpModel, PomdpSr, belief_update, load_model
from .pbvi import execute_policy, load_policy

PLANNERS = ("aems-sr", "aems", "pomcp", "pbvi-sr-policy")
UPPER_BOUNDS = ("qmdp", "fib-sr")
BUDGET_MODES = ("expansions", "seconds")
ENVIRONMENTS = ("robot-delivery", "tag", "counterexample", "model-file")

# Episodes stop once gamma^t falls below this; echoed in result metadata so
# consumers know the horizon was truncated by the harness, not the model.
TAIL_CUTOFF = 1e-4

_PLANNER_PARAM_KEYS = {
    "aems-sr": {"bound_tol"},
    "aems": {"bound_tol"},
    "pomcp": {"uct_c", "rollout_depth", "num_particles"},
    "pbvi-sr-policy": {"policy"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: an environment, a planner, bounds, and budgets.

    seeds is either a base int (episode i runs with seeds + i) or an
    explicit per-episode sequence. budget counts per-step expansions
    (simulations for pomcp) in expansions mode and wall-clock seconds in
    seconds mode; zero is allowed in expansions mode and falls back to
    the planner's offline decision rule. initial_states, when given, is
    cycled across episodes, so two configs differing only in planner
    evaluate on the same start states.
    """

    environment: str
    planner: str
    budget: float
    epsilon: float = 1e-3
    episodes: int = 1
    seeds: int | tuple = 0
    env_params: dict = field(default_factory=dict)
    planner_params: dict = field(default_factory=dict)
    upper_bound: str = "fib-sr"
    improve_bounds: bool = False
    budget_mode: str = "expansions"
    initial_states: Optional[tuple] = None

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ValueError(
                f"unknown environment {self.environment!r}; choose from {ENVIRONMENTS}")
        if self.planner not in PLANNERS:
            raise ValueError(
                f"unknown planner {self.planner!r}; choose from {PLANNERS}")
        if self.upper_bound not in UPPER_BOUNDS:
            raise ValueError(
                f"unknown upper bound {self.upper_bound!r}; choose from {UPPER_BOUNDS}")
        if self.budget_mode not in BUDGET_MODES:
            raise ValueError(
                f"unknown budget mode {self.budget_mode!r}; choose from {BUDGET_MODES}")
        budget = float(self.budget)
        if not np.isfinite(budget) or budget < 0:
            raise ValueError(f"budget must be finite and nonnegative, got {self.budget}")
        if self.budget_mode == "expansions" and budget != int(budget):
            raise ValueError("expansion budgets must be whole numbers")
        if self.budget_mode == "seconds" and budget <= 0:
            raise ValueError("second budgets must be positive")
        if not (float(self.epsilon) >= 0):
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if int(self.episodes) < 1 or int(self.episodes) != self.episodes:
            raise ValueError(f"episodes must be a positive integer, got {self.episodes}")
        object.__setattr__(self, "episodes", int(self.episodes))
        if not isinstance(self.seeds, (int, np.integer)):
            seeds = tuple(int(s) for s in self.seeds)
            if len(seeds) != self.episodes:
                raise ValueError(
                    f"got {len(seeds)} seeds for {self.episodes} episodes")
            object.__setattr__(self, "seeds", seeds)
        else:
            object.__setattr__(self, "seeds", int(self.seeds))
        if self.initial_states is not None:
            states = tuple(int(s) for s in self.initial_states)
            if not states:
                raise ValueError("initial_states must be nonempty when given")
            if any(s < 0 for s in states):
                raise ValueError("initial_states must be nonnegative state indices")
            object.__setattr__(self, "initial_states", states)
        allowed = _PLANNER_PARAM_KEYS[self.planner]
        unknown = set(self.planner_params) - allowed
        if unknown:
            raise ValueError(
                f"planner_params {sorted(unknown)} not understood by "
                f"{self.planner} (allowed: {sorted(allowed)})")
        if self.planner == "pbvi-sr-policy" and "policy" not in self.planner_params:
            raise ValueError("pbvi-sr-policy needs planner_params['policy'] "
                             "(path to a saved policy file)")

    def episode_seeds(self) -> tuple:
        if isinstance(self.seeds, tuple):
            return self.seeds
        return tuple(self.seeds + i for i in range(self.episodes))

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("seeds", "initial_states"):
            if isinstance(out[key], tuple):
                out[key] = list(out[key])
        if out["initial_states"] is None:
            del out["initial_states"]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        missing = {"environment", "planner", "budget"} - set(data)
        if missing:
            raise ValueError(f"config is missing required fields: {sorted(missing)}")
        return cls(**data)


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one simulated episode.

    expansions and error_reductions are per-step parallel lists; every
    error reduction is at most 1 (the graph gap cannot be negative).
    """

    episode: int
    seed: int
    discounted_return: float
    steps: int
    requests: int
    expansions: tuple
    error_reductions: tuple


def resolve_environment(name: str, params: dict) -> tuple[PomdpSr, Belief]:
    """Instantiate a config's environment and its initial belief.

    tag and model-file environments without a stored request cost accept
    one through params["request_cost"]; tag defaults to 1.0 (the cost of
    one movement step).
    """
    params = dict(params)
    if name == "robot-delivery":
        n = int(params.pop("n", 3))
        problem = envs.robot_delivery(n=n, **params)
        return problem, envs.robot_delivery_initial_belief(n)
    if name == "tag":
        cost = float(params.pop("request_cost", 1.0))
        model = envs.tag(**params)
        return PomdpSr(model, cost), envs.tag_initial_belief()
    if name == "counterexample":
        cost = float(params.pop("request_cost", 0.1))
        if params:
            raise ValueError(f"counterexample takes only request_cost, got {sorted(params)}")
        return envs.fib_counterexample(cost), Belief([0, 1], [0.5, 0.5])
    if name == "model-file":
        path = params.pop("path", None)
        if path is None:
            raise ValueError("model-file environment needs env_params['path']")
        loaded = load_model(path)
        cost = params.pop("request_cost", None)
        if not isinstance(loaded, PomdpSr):
            if cost is None:
                raise ValueError("model file stores no request cost; "
                                 "pass env_params['request_cost']")
            loaded = PomdpSr(loaded, float(cost))
        belief_spec = params.pop("initial_belief", None)
        if params:
            raise ValueError(f"unknown model-file params {sorted(params)}")
        if belief_spec is not None:
            belief = Belief.from_dict({int(s): float(p) for s, p in belief_spec.items()})
        else:
            live = [s for s in range(loaded.model.num_states)
                    if s not in loaded.model.terminal_states]
            belief = Belief(live, np.full(len(live), 1.0 / len(live)))
        return loaded, belief
    raise ValueError(f"unknown environment {name!r}")


def _advance_belief(model: PomdpModel, belief: Belief, decision, outcome) -> Belief:
    if decision.request:
        pre = Belief([outcome.revealed_state], [1.0])
        action = decision.state_action[outcome.revealed_state]
    else:
        pre, action = belief, decision.action
    return belief_update(model, pre, action, outcome.observation)


class _PlannerContext:
    """Read-only per-process bundle shared by all of a config's episodes."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.problem, self.initial_belief = resolve_environment(
            config.environment, config.env_params)
        model = self.problem.model
        if config.initial_states is not None:
            bad = [s for s in config.initial_states
                   if s not in self.initial_belief.states]
            if bad:
                raise ValueError(
                    f"initial_states {bad} lie outside the initial belief's support")
        self.lower = self.upper = None
        if config.planner in ("aems-sr", "aems"):
            tol = float(config.planner_params.get("bound_tol", 1e-6))
            self.lower = solve_offline_bound("blind", self.problem, tol=tol)
            self.upper = solve_offline_bound(config.upper_bound, self.problem, tol=tol)
        self.equiv = None
        self.pomcp_config = None
        if config.planner == "pomcp":
            self.equiv = to_equivalent_pomdp(self.problem)
            pp = config.planner_params
            self.pomcp_config = PomcpConfig(
                uct_c=pp.get("uct_c"),
                rollout_depth=pp.get("rollout_depth"),
                num_particles=int(pp.get("num_particles", 1000)))
        self.policy = None
        if config.planner == "pbvi-sr-policy":
            self.policy = load_policy(config.planner_params["policy"])
            if self.policy.gamma_set.num_states != model.num_states:
                raise ValueError("policy file was built for a different model "
                                 f"({self.policy.gamma_set.num_states} states, "
                                 f"model has {model.num_states})")

    # -- per-step planning -------------------------------------------

    def _search_step(self, belief: Belief, lower, upper):
        config = self.config
        registry = config.planner == "aems-sr"
        if config.budget_mode == "expansions":
            return plan_step(self.problem, lower, upper, belief,
                             budget=int(config.budget), epsilon=float(config.epsilon),
                             use_registry=registry)
        # Seconds mode re-plans with doubling budgets until the wall budget
        # is spent; the planner itself only counts expansions.
        deadline = time.perf_counter() + float(config.budget)
        budget = 64
        while True:
            decision = plan_step(self.problem, lower, upper, belief,
                                 budget=budget, epsilon=float(config.epsilon),
                                 use_registry=registry)
            if decision.stats.status != "budget" or time.perf_counter() >= deadline:
                return decision
            budget *= 2

    def _pomcp_step(self, belief: Belief, rng):
        config = self.config
        if config.budget_mode == "expansions":
            return pomcp_plan_step(self.equiv, belief, int(config.budget),
                                   config=self.pomcp_config, rng=rng)
        deadline = time.perf_counter() + float(config.budget)
        sims = 256
        while True:
            decision = pomcp_plan_step(self.equiv, belief, sims,
                                       config=self.pomcp_config, rng=rng)
            if time.perf_counter() >= deadline:
                return decision
            sims *= 2

    def _plan_once(self, belief: Belief, rng, lower, upper):
        """One decision plus its (NE, ER) pair for the step record."""
        planner = self.config.planner
        if planner in ("aems-sr", "aems"):
            decision = self._search_step(belief, lower, upper)
            stats = decision.stats
            # ER always against the pristine offline gap, even when the
            # working sets have been tightened by improve_bounds.
            gap0 = self.upper.evaluate(belief) - self.lower.evaluate(belief)
            gap_graph = stats.root_upper - stats.root_lower
            er = 0.0 if gap0 <= 1e-12 else 1.0 - gap_graph / gap0
            return decision, stats.expansions, er
        if planner == "pomcp":
            decision = self._pomcp_step(belief, rng)
            return decision, decision.stats.simulations, 0.0
        return execute_policy(self.policy, belief), 0, 0.0

    # -- episode loop --------------------------------------------------

    def run_episode(self, episode: int, seed: int, want_trace: bool):
        config = self.config
        problem = self.problem
        model = problem.model
        gamma = model.discount
        rng = np.random.default_rng(seed)
        belief = self.initial_belief
        if config.initial_states is not None:
            state = config.initial_states[episode % len(config.initial_states)]
        else:
            state = int(rng.choice(np.asarray(belief.states),
                                   p=np.asarray(belief.probs)))
        lower, upper = self.lower, self.upper
        disc, total = 1.0, 0.0
        requests = 0
        nes, ers, trace = [], [], []
        while disc >= TAIL_CUTOFF:
            decision, ne, er = self._plan_once(belief, rng, lower, upper)
            if config.improve_bounds and decision.graph is not None:
                corner_lo, corner_up = decision.graph.corner_action_values()
                lower = improve_from_graph(lower, corner_lo)
                upper = improve_from_graph(upper, corner_up)
            decision.graph = None  # drop the search arena before simulating on
            outcome = envs.simulate(problem, state, decision, rng)
            total += disc * outcome.reward
            requests += int(decision.request)
            nes.append(int(ne))
            ers.append(float(er))
            if want_trace:
                trace.append({
                    "episode": episode, "seed": seed, "step": len(nes) - 1,
                    "state": int(state), "request": bool(decision.request),
                    "action": None if decision.action is None else int(decision.action),
                    "observation": int(outcome.observation),
                    "reward": float(outcome.reward),
                    "ne": int(ne), "er": float(er),
                })
            if outcome.done:
                break
            belief = _advance_belief(model, belief, decision, outcome)
            state = int(outcome.next_state)
            disc *= gamma
        result = EpisodeResult(
            episode=episode, seed=seed, discounted_return=float(total),
            steps=len(nes), requests=requests,
            expansions=tuple(nes), error_reductions=tuple(ers))
        return result, trace


_WORKER: Optional[_PlannerContext] = None


def _init_worker(config_blob: dict) -> None:
    global _WORKER
    _WORKER = _PlannerContext(ExperimentConfig.from_json(config_blob))


def _worker_episode(task):
    episode, seed, want_trace = task
    return _WORKER.run_episode(episode, seed, want_trace)


@dataclass(frozen=True)
class ExperimentResults:
    """Episode results stably sorted by seed, plus harness metadata."""

    config: ExperimentConfig
    episodes: tuple
    metadata: dict
    traces: tuple = ()

    def summary(self) -> dict:
        """Aggregates: mean return with its standard error, mean NE and ER
        per step, mean steps and requests per episode."""
        rets = np.array([e.discounted_return for e in self.episodes])
        n = rets.size
        se = float(rets.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        all_ne = [x for e in self.episodes for x in e.expansions]
        all_er = [x for e in self.episodes for x in e.error_reductions]
        return {
            "episodes": n,
            "return_mean": float(rets.mean()),
            "return_se": se,
            "ne_mean": float(np.mean(all_ne)) if all_ne else 0.0,
            "er_mean": float(np.mean(all_er)) if all_er else 0.0,
            "steps_mean": float(np.mean([e.steps for e in self.episodes])),
            "requests_mean": float(np.mean([e.requests for e in self.episodes])),
        }

    def to_csv(self) -> str:
        """One row per episode; float cells use repr so equal runs produce
        byte-identical files."""
        lines = ["episode,seed,return,steps,requests,ne_mean,er_mean"]
        for e in self.episodes:
            ne = float(np.mean(e.expansions)) if e.expansions else 0.0
            er = float(np.mean(e.error_reductions)) if e.error_reductions else 0.0
            lines.append(f"{e.episode},{e.seed},{e.discounted_return!r},"
                         f"{e.steps},{e.requests},{ne!r},{er!r}")
        return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, *, jobs: int = 1,
                   collect_trace: bool = False) -> ExperimentResults:
    """Run every configured episode and assemble the results table.

    jobs > 1 spreads episodes over a process pool; every worker rebuilds
    the same environment and offline bounds, episodes are seeded
    independently, and the output is stably sorted by seed, so the table
    does not depend on the degree of parallelism.
    """
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    tasks = [(i, s, collect_trace) for i, s in enumerate(config.episode_seeds())]
    if jobs == 1 or len(tasks) == 1:
        ctx = _PlannerContext(config)
        outs = [ctx.run_episode(*t) for t in tasks]
    else:
        mp = get_context("fork")
        with mp.Pool(min(jobs, len(tasks)), initializer=_init_worker,
                     initargs=(config.to_json(),)) as pool:
            outs = pool.map(_worker_episode, tasks)
    outs.sort(key=lambda pair: (pair[0].seed, pair[0].episode))
    episodes = tuple(r for r, _ in outs)
    traces = tuple(row for _, rows in outs for row in rows)
    metadata = {
        "tail_cutoff": TAIL_CUTOFF,
        "budget_mode": config.budget_mode,
        "episodes": len(episodes),
    }
    return ExperimentResults(config=config, episodes=episodes,
                             metadata=metadata, traces=traces)


def compare_table(results: Sequence[ExperimentResults],
                  names: Optional[Sequence[str]] = None) -> tuple[str, str]:
    """Render experiments side by side as (CSV text, aligned text).

    One row per experiment with mean return (plus standard error), mean
    NE, and mean ER; the best mean return carries a '*' marker in both
    renderings. Formatting is deterministic.
    """
    if not results:
        raise ValueError("compare_table needs at least one result set")
    if names is None:
        names = [r.config.planner for r in results]
    if len(names) != len(results):
        raise ValueError("one name per result set required")
    rows = []
    for name, res in zip(names, results):
        s = res.summary()
        rows.append((str(name), s["return_mean"], s["return_se"],
                     s["ne_mean"], s["er_mean"]))
    best = max(range(len(rows)), key=lambda i: rows[i][1])
    csv_lines = ["planner,return_mean,return_se,ne_mean,er_mean,best"]
    for i, (name, rm, rs, ne, er) in enumerate(rows):
        star = "*" if i == best else ""
        csv_lines.append(f"{name},{rm!r},{rs!r},{ne!r},{er!r},{star}")
    width = max(7, max(len(r[0]) for r in rows))
    text_lines = [f"{'planner':<{width}}  {'return':>18}  {'ne':>10}  {'er':>7}"]
    for i, (name, rm, rs, ne, er) in enumerate(rows):
        star = " *" if i == best else ""
        text_lines.append(
            f"{name:<{width}}  {rm:>10.4f} +- {rs:.3f}  {ne:>10.1f}  {er:>7.3f}{star}")
    return "\n".join(csv_lines) + "\n", "\n".join(text_lines) + "\n"
