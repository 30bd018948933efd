"""Imitation-learning distillation of an expert into a decision tree across scenarios.

Each scenario of the list is visited in order for ``N`` iterations. An iteration rolls
out ``M`` trajectories (expert or current tree at the wheel, always expert-labelled),
grows the aggregate dataset, draws ``n_s`` pairs from it and fits a tree. All trees
are kept as candidates and the one with the best mean evaluation return wins.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .cart import CartConfig, PairSet, train
from .core import DEFAULT_ACTIONS, ActionSpec, DecisionTreePolicy, predict, tree_stats
from .envs import ScenarioSpec, layout_for, make_env, rollout
from .errors import ConfigError, EmptyDatasetError

SAMPLING_MODES = ("uniform", "loss_weighted")
_EVAL_STREAM = 0xE7A1
_SAMPLE_STREAM = 0x5A3D


@dataclass
class DistillConfig:
    M: int = 10                  # trajectories per iteration
    N: int = 5                   # iterations per scenario
    l_t: int = 100               # trajectory length cap
    n_s: int = 2000              # pairs drawn from D per iteration
    n_cv: int = 10               # evaluation episodes per scenario per candidate
    sampling_mode: str = "uniform"
    beta_schedule: str | list = "dagger"
    rng_seed: int = 0
    weighted_fit: bool = False
    env_weights: list | None = None
    cart: CartConfig = field(default_factory=CartConfig)

    def __post_init__(self):
        if isinstance(self.cart, dict):
            unknown = set(self.cart) - {f.name for f in fields(CartConfig)}
            if unknown:
                raise ConfigError(f"unknown cart keys {sorted(unknown)}")
            self.cart = CartConfig(**self.cart)
        for name in ("M", "N", "l_t", "n_s", "n_cv"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ConfigError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if isinstance(self.beta_schedule, str):
            if self.beta_schedule not in ("dagger", "expert"):
                raise ConfigError("beta_schedule must be 'dagger', 'expert' or a list of probabilities")
        elif not self.beta_schedule or any(not 0 <= b <= 1 for b in self.beta_schedule):
            raise ConfigError("beta_schedule entries must lie in [0, 1]")

    def beta(self, iteration: int) -> float:
        """Probability of executing the expert's action on global iteration ``iteration`` (0-based)."""
        if self.beta_schedule == "dagger":
            return 1.0 if iteration == 0 else 0.0
        if self.beta_schedule == "expert":
            return 1.0
        sched = self.beta_schedule
        return float(sched[min(iteration, len(sched) - 1)])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown distill keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def trajectory_rng(run_seed: int, scenario_idx: int, iteration: int, traj: int) -> np.random.Generator:
    return np.random.default_rng([run_seed, scenario_idx, iteration, traj])


def sample_trajectories(policy: Callable | DecisionTreePolicy | None, expert: Callable,
                        scenario: ScenarioSpec, M: int, l_t: int, beta: float,
                        run_seed: int = 0, scenario_idx: int = 0, iteration: int = 0,
                        actions: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> tuple[PairSet, list[int]]:
    """Roll out ``M`` episodes of at most ``l_t`` steps and label every visited state.

    Each step executes the expert's action with probability ``beta`` and the policy's
    otherwise. Returns the pairs (tagged with ``scenario_idx``) and the trajectory lengths.
    """
    if policy is None and beta < 1:
        raise ConfigError("a rollout policy is required when beta < 1")
    if isinstance(policy, DecisionTreePolicy):
        tree = policy
        policy = lambda s: predict(tree, s)  # noqa: E731
    env = make_env(scenario, actions)
    X, y, lengths = [], [], []
    for k in range(M):
        rng = trajectory_rng(run_seed, scenario_idx, iteration, k)
        s = env.reset(int(rng.integers(2**31)))
        steps = 0
        while not env.done and steps < l_t:
            label = int(expert(s))
            a = label if rng.random() < beta else int(policy(s))
            X.append(s)
            y.append(label)
            s = env.step(a).next_state
            steps += 1
        lengths.append(steps)
    dim = env.layout.dim
    pairs = PairSet(np.array(X).reshape(-1, dim), np.array(y, dtype=np.int64),
                    source=np.full(len(y), scenario_idx))
    return pairs, lengths


def environment_weights(lengths: Sequence[float]) -> np.ndarray:
    """w_e = T_e / sum(T_e) from the total timesteps sampled in each scenario."""
    t = np.asarray(lengths, dtype=float)
    if t.sum() <= 0:
        return np.full(len(t), 1.0 / max(1, len(t)))
    return t / t.sum()


def loss_weights(D: PairSet, expert, env_weights: Sequence[float] | None = None) -> np.ndarray | None:
    """max_a Q - min_a Q per pair, scaled by the weight of the pair's scenario.

    None when the expert exposes no Q-values.
    """
    q_fn = getattr(expert, "q_values", None)
    if q_fn is None:
        return None
    gaps = np.array([np.ptp(q_fn(s)) for s in D.X], dtype=float)
    if env_weights is not None and D.source is not None:
        w = np.asarray(env_weights, dtype=float)
        src = np.clip(D.source, 0, len(w) - 1)
        gaps = gaps * w[src]
    return gaps


def weighted_draw(weights, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` items drawn without replacement, each successive draw proportional
    to weight among the remaining items (exponential-key method)."""
    w = np.asarray(weights, dtype=float)
    u = rng.random(len(w))
    with np.errstate(divide="ignore"):
        keys = np.where(w > 0, np.log(u) / np.where(w > 0, w, 1.0), -np.inf)
    # zero-weight items come last, in random order
    tiebreak = rng.random(len(w))
    order = np.lexsort((-tiebreak, -keys))
    return np.sort(order[:n])


def sample_dataset(D: PairSet, n_s: int, mode: str = "uniform", expert=None,
                   rng: np.random.Generator | None = None,
                   env_weights: Sequence[float] | None = None) -> PairSet:
    """Draw ``min(n_s, |D|)`` pairs without replacement.

    In ``loss_weighted`` mode selection is proportional to the expert's Q-value gap at
    each state (uniform when the expert has none) and the gaps become the pair weights.
    """
    if len(D) == 0:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    if mode not in SAMPLING_MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    rng = rng or np.random.default_rng()
    n = min(int(n_s), len(D))
    gaps = loss_weights(D, expert, env_weights) if mode == "loss_weighted" else None
    if gaps is None or gaps.sum() <= 0:
        idx = np.sort(rng.choice(len(D), size=n, replace=False))
        return D.subset(idx)
    idx = weighted_draw(gaps, n, rng)
    out = D.subset(idx)
    out.weights = gaps[idx]
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def as_policy(policy) -> Callable[[np.ndarray], int]:
    if isinstance(policy, DecisionTreePolicy):
        return lambda s: predict(policy, s)
    return policy


def eval_seeds(run_seed: int, trials: int) -> list[int]:
    return [int(x) for x in np.random.default_rng([run_seed, _EVAL_STREAM]).integers(2**31, size=trials)]


def evaluate(policy, scenarios: Sequence[ScenarioSpec], trials: int, seed: int = 0) -> dict[str, float]:
    """Greedy rollouts: ``trials`` episodes per scenario on a fixed seed set."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    act = as_policy(policy)
    total_r = total_steps = goals = collisions = episodes = 0
    returns = []
    seeds = eval_seeds(seed, trials)
    for spec in scenarios:
        env = make_env(spec)
        for sd in seeds:
            ep = rollout(env, act, seed=sd)
            total_r += sum(ep.rewards)
            returns.append(sum(ep.rewards))
            total_steps += len(ep)
            goals += ep.goal_reached
            collisions += ep.collided
            episodes += 1
    return {
        "mean_reward_per_timestep": total_r / max(1, total_steps),
        "mean_return": float(np.mean(returns)),
        "success_rate": goals / episodes,
        "collision_rate": collisions / episodes,
        "episodes": episodes,
    }


def expert_states(expert, scenario: ScenarioSpec, n: int, seed: int = 0) -> np.ndarray:
    """``n`` states visited by the expert on ``scenario`` (whole episodes, truncated to ``n``)."""
    env = make_env(scenario)
    out, k = [], 0
    while sum(len(x) for x in out) < n:
        ep = rollout(env, expert, seed=seed + k)
        out.append(np.array(ep.states))
        k += 1
    return np.vstack(out)[:n]


def fidelity(tree: DecisionTreePolicy, expert, states) -> float:
    from .core import predict_batch

    states = np.asarray(states, dtype=float)
    labels = np.array([expert(s) for s in states])
    return float(np.mean(predict_batch(tree, states) == labels))


# ---------------------------------------------------------------------------
# The distillation loop
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    tree: DecisionTreePolicy
    scenario_idx: int
    iteration: int
    score: dict = field(default_factory=dict)


@dataclass
class DistillRun:
    config: DistillConfig
    scenarios: list[ScenarioSpec]
    dataset: PairSet
    candidates: list[Candidate]
    selected: int
    log: list[dict]
    eval_scenarios: list[ScenarioSpec]

    @property
    def tree(self) -> DecisionTreePolicy:
        return self.candidates[self.selected].tree

    def manifest(self, tree_path: str | None = None) -> dict:
        return {
            "config": self.config.to_dict(),
            "scenarios": [s.to_dict() for s in self.scenarios],
            "eval_scenarios": [s.to_dict() for s in self.eval_scenarios],
            "iterations": self.log,
            "candidates": [
                {"scenario": c.scenario_idx, "iteration": c.iteration, **c.score,
                 **tree_stats(c.tree)} for c in self.candidates
            ],
            "selected": self.selected,
            "selected_tree": tree_path,
            "dataset_size": len(self.dataset),
        }


def _distill(expert, E: Sequence[ScenarioSpec], cfg: DistillConfig,
             eval_scenarios: Sequence[ScenarioSpec]) -> DistillRun:
    E = list(E)
    if not E:
        raise ConfigError("scenario list is empty")
    layout = layout_for(E[0])
    D = PairSet.empty(layout.dim)
    lengths = np.zeros(len(E))
    tree: DecisionTreePolicy | None = None
    candidates, log = [], []
    step = 0
    for e_idx, spec in enumerate(E):
        if layout_for(spec) != layout:
            raise ConfigError("all scenarios must share one state layout")
        for i in range(cfg.N):
            beta = cfg.beta(step)
            Di, lens = sample_trajectories(tree, expert, spec, cfg.M, cfg.l_t, beta,
                                           cfg.rng_seed, e_idx, i)
            lengths[e_idx] += sum(lens)
            D = D.union(Di)
            weights = cfg.env_weights if cfg.env_weights is not None else environment_weights(lengths)
            rng = np.random.default_rng([cfg.rng_seed, e_idx, i, _SAMPLE_STREAM])
            Dp = sample_dataset(D, cfg.n_s, cfg.sampling_mode, expert, rng, weights)
            if not cfg.weighted_fit:
                Dp = PairSet(Dp.X, Dp.y, None, Dp.source)
            tree = train(Dp, cfg.cart, layout, DEFAULT_ACTIONS)
            candidates.append(Candidate(tree, e_idx, i))
            log.append({"scenario": e_idx, "iteration": i, "beta": beta, "D": len(D),
                        "D_prime": len(Dp), **tree_stats(tree)})
            step += 1
    best, best_score = 0, -np.inf
    for k, c in enumerate(candidates):
        c.score = evaluate(c.tree, eval_scenarios, cfg.n_cv, cfg.rng_seed)
        if c.score["mean_return"] > best_score:
            best, best_score = k, c.score["mean_return"]
    return DistillRun(cfg, E, D, candidates, best, log, list(eval_scenarios))


def msviper(expert, E: Sequence[ScenarioSpec], cfg: DistillConfig | None = None) -> DistillRun:
    """Distil across the ordered scenario list; candidates are scored on every scenario."""
    cfg = cfg or DistillConfig()
    return _distill(expert, E, cfg, list(E))


def ssviper(expert, scenario: ScenarioSpec, cfg: DistillConfig | None = None,
            stages: int = 1) -> DistillRun:
    """Single-scenario baseline; ``stages`` repeats the scenario to match a multi-stage budget."""
    cfg = cfg or DistillConfig()
    if stages < 1:
        raise ConfigError("stages must be >= 1")
    return _distill(expert, [scenario] * stages, cfg, [scenario])
