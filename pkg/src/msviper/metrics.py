"""Behaviour metrics, modification efficiency and critical-state coverage."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import DEFAULT_ACTIONS, ActionSpec
from .errors import DomainError, ParameterError

VB_HISTORY = 4
FREEZE_STEPS = 10


# ---------------------------------------------------------------------------
# Vibration
# ---------------------------------------------------------------------------


def vibration_vb(omega_history, gamma: float) -> float:
    """Discounted 4-step vibration from (roll rate, pitch rate) pairs ordered oldest first."""
    h = np.asarray(omega_history, dtype=float)
    if h.shape != (VB_HISTORY, 2):
        raise ParameterError(f"need exactly {VB_HISTORY} (roll, pitch) pairs, got shape {h.shape}")
    if not 0 <= gamma <= 1:
        raise ParameterError("gamma must lie in [0, 1]")
    lag = np.arange(VB_HISTORY - 1, -1, -1)
    return float(np.sum(gamma ** lag * np.abs(h).sum(axis=1)))


# ---------------------------------------------------------------------------
# Oscillation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OscillationDetector:
    """Window predicate: fires when at least ``min_alternations`` consecutive action pairs in
    the window turn in opposite (nonzero) directions."""

    window: int = 6
    min_alternations: int = 4

    def __post_init__(self):
        if self.window < 2:
            raise ParameterError("oscillation window must be >= 2")
        if self.min_alternations < 1:
            raise ParameterError("min_alternations must be >= 1")

    def signs(self, actions: Sequence[int], catalog: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> np.ndarray:
        return np.array([catalog[a].turn_sign for a in actions], dtype=int)

    def fires_on_signs(self, signs) -> bool:
        signs = np.asarray(signs)
        alt = (signs[1:] * signs[:-1]) < 0
        run = best = 0
        for flag in alt:
            run = run + 1 if flag else 0
            best = max(best, run)
        return best >= self.min_alternations

    def __call__(self, actions: Sequence[int], catalog: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> bool:
        return self.fires_on_signs(self.signs(actions, catalog))


def oscillating_steps(actions: Sequence[int], detector: OscillationDetector = OscillationDetector(),
                      catalog: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> np.ndarray:
    """Boolean mask of steps that lie in at least one window where the detector fires.

    Logs shorter than the window are judged as a single window.
    """
    signs = detector.signs(actions, catalog)
    T = len(signs)
    mask = np.zeros(T, dtype=bool)
    L = min(detector.window, T)
    for end in range(L, T + 1):
        if detector.fires_on_signs(signs[end - L:end]):
            mask[end - L:end] = True
    return mask


def oscillation_metrics(actions: Sequence[int], detector: OscillationDetector = OscillationDetector(),
                        catalog: Sequence[ActionSpec] = DEFAULT_ACTIONS) -> dict[str, float]:
    """``c_osc_pct``: share of steps inside a firing window; ``c_osc_delta``: mean |change| of
    commanded angular velocity between consecutive steps."""
    if len(actions) < 2:
        raise ParameterError("oscillation metrics need at least 2 steps")
    omega = np.array([catalog[a].angular_velocity for a in actions])
    return {
        "c_osc_pct": float(oscillating_steps(actions, detector, catalog).mean()),
        "c_osc_delta": float(np.mean(np.abs(np.diff(omega)))),
    }


# ---------------------------------------------------------------------------
# Freezing and rollout reports
# ---------------------------------------------------------------------------


def has_freeze_event(froze: Sequence[bool], k: int = FREEZE_STEPS) -> bool:
    run = 0
    for f in froze:
        run = run + 1 if f else 0
        if run >= k:
            return True
    return False


def _episodes(policy, scenario, trials: int, seed: int):
    from .envs import make_env, rollout

    if trials < 1:
        raise ParameterError("trials must be >= 1")
    env = make_env(scenario)
    return [rollout(env, policy, seed=seed + k) for k in range(trials)]


def _as_policy(policy) -> Callable:
    from .core import DecisionTreePolicy, predict

    if isinstance(policy, DecisionTreePolicy):
        return lambda s: predict(policy, s)
    return policy


def freezing_rate(policy, scenario, trials: int = 100, k: int = FREEZE_STEPS, seed: int = 0) -> float:
    """Share of episodes with ``k`` or more consecutive Stop steps away from the goal."""
    eps = _episodes(_as_policy(policy), scenario, trials, seed)
    return float(np.mean([has_freeze_event(e.froze, k) for e in eps]))


@dataclass
class BehaviorReport:
    freezing_rate: float
    c_osc_pct: float
    c_osc_delta: float
    v_b_mean: float
    success_rate: float
    collision_rate: float
    trials: int
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def behavior_report(policy, scenario, trials: int = 50, seed: int = 0,
                    detector: OscillationDetector = OscillationDetector(),
                    freeze_steps: int = FREEZE_STEPS) -> BehaviorReport:
    """All behaviour metrics from one fixed-seed batch of rollouts.

    Oscillation figures pool the steps of every episode; ``v_b_mean`` averages the
    per-step vibration the environment reports (0 where it reports none).
    """
    eps = _episodes(_as_policy(policy), scenario, trials, seed)
    masks = [oscillating_steps(e.actions, detector) for e in eps if len(e)]
    steps = sum(len(m) for m in masks)
    deltas = [np.abs(np.diff([DEFAULT_ACTIONS[a].angular_velocity for a in e.actions])) for e in eps]
    n_delta = sum(len(d) for d in deltas)
    vib = [v for e in eps for v in e.vibration]
    return BehaviorReport(
        freezing_rate=float(np.mean([has_freeze_event(e.froze, freeze_steps) for e in eps])),
        c_osc_pct=float(sum(m.sum() for m in masks) / steps) if steps else 0.0,
        c_osc_delta=float(sum(d.sum() for d in deltas) / n_delta) if n_delta else 0.0,
        v_b_mean=float(np.mean(vib)) if vib else 0.0,
        success_rate=float(np.mean([e.goal_reached for e in eps])),
        collision_rate=float(np.mean([e.collided for e in eps])),
        trials=trials,
        seeds=[seed + k for k in range(trials)],
    )


# ---------------------------------------------------------------------------
# Modification efficiency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EfficiencyResult:
    M_1: float
    M_2: float
    N_1: int
    N_plus: int
    e_O: float
    e_R: float

    def to_dict(self) -> dict:
        return asdict(self)


def efficiency(M_1: float, M_2: float, log=None, *, N_plus: int | None = None,
               N_1: int | None = None) -> EfficiencyResult:
    """Relative metric change per modified node (``e_O``) and per modified tree fraction (``e_R``).

    ``log`` is anything with ``N_plus`` and ``N_1`` attributes (a repair log); explicit
    keywords override it.
    """
    if log is not None:
        N_plus = log.N_plus if N_plus is None else N_plus
        N_1 = log.N_1 if N_1 is None else N_1
    if N_plus is None or N_1 is None:
        raise ParameterError("efficiency needs N_plus and N_1")
    for name, v in (("M_1", M_1), ("N_plus", N_plus), ("N_1", N_1)):
        if not v > 0:
            raise DomainError(f"efficiency undefined: {name} = {v} (must be > 0)")
    gain = abs(M_2 - M_1) / M_1
    return EfficiencyResult(float(M_1), float(M_2), int(N_1), int(N_plus),
                            gain / N_plus, gain / (N_plus / N_1))


# ---------------------------------------------------------------------------
# Critical-state coverage
# ---------------------------------------------------------------------------


@dataclass
class CoverageParams:
    """Per-state, per-environment hit probabilities ``p`` (K x n_E, last column = final
    environment), ``m`` trajectories in total and coverage fraction ``epsilon``."""

    p: np.ndarray
    m: int
    epsilon: float

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if self.p.size == 0:
            raise ParameterError("need at least one critical state and one environment")
        if np.any(self.p < 0) or np.any(self.p > 1) or not np.all(np.isfinite(self.p)):
            raise ParameterError("hit probabilities must lie in [0, 1]")
        if self.m < 1:
            raise ParameterError("m must be >= 1")
        if not 0 <= self.epsilon <= 1:
            raise ParameterError("epsilon must lie in [0, 1]")

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def n_E(self) -> int:
        return self.p.shape[1]


def poisson_binomial_pmf(probs) -> np.ndarray:
    """Exact distribution of the number of successes among independent Bernoullis."""
    pmf = np.zeros(len(probs) + 1)
    pmf[0] = 1.0
    for k, q in enumerate(probs, start=1):
        pmf[1:k + 1] = pmf[1:k + 1] * (1 - q) + pmf[:k] * q
        pmf[0] *= 1 - q
    return pmf


def covered_probabilities(params: CoverageParams, method: str) -> np.ndarray:
    p, m = params.p, params.m
    if method == "viper":
        return 1.0 - (1.0 - p[:, -1]) ** m
    if method == "msviper":
        if m % params.n_E:
            raise ParameterError(f"m = {m} is not divisible by n_E = {params.n_E}")
        return 1.0 - np.prod((1.0 - p) ** (m // params.n_E), axis=1)
    raise ParameterError(f"unknown coverage method {method!r}; expected 'viper' or 'msviper'")


def coverage_probability(params: CoverageParams, method: str = "msviper") -> float:
    """P(at least ceil(epsilon * K) critical states visited at least once)."""
    q = covered_probabilities(params, method)
    need = math.ceil(params.epsilon * params.K - 1e-12)
    return float(min(1.0, poisson_binomial_pmf(q)[need:].sum()))


def empirical_critical_coverage(pairs, critical_states, tolerance: float = 0.0) -> float:
    """Share of ``critical_states`` with some state in ``pairs`` within ``tolerance`` (max-norm)."""
    C = np.atleast_2d(np.asarray(critical_states, dtype=float))
    if C.size == 0:
        return float("nan")
    X = pairs.X if hasattr(pairs, "X") else np.asarray(pairs, dtype=float)
    if len(X) == 0:
        return 0.0
    hit = [bool(np.any(np.max(np.abs(X - c), axis=1) <= tolerance)) for c in C]
    return float(np.mean(hit))
