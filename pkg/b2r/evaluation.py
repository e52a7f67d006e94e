"""Autoregressive deployment with decrementing RTG/CTG tokens, and normalised safe-RL metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
from pydantic import BaseModel, Field, field_validator

from .cmdp import Trajectory, Transition
from .datasets import parallel_map
from .policy import B2RPolicy, build_window

logger = logging.getLogger(__name__)

EnvFactory = Callable[[], gym.Env]


class RolloutConfig(BaseModel):
    kappa: float = Field(ge=0.0)
    target_return: Optional[float] = None  # falls back to the checkpoint's dataset max
    max_horizon: Optional[int] = Field(default=None, ge=1)
    n_episodes: int = Field(default=20, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    action_mode: Literal["mean", "sample"] = "mean"
    eps_stability: float = Field(default=0.1, gt=0.0)
    workers: int = Field(default=1, ge=1)

    @field_validator("seeds")
    @classmethod
    def _non_empty(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one evaluation seed is required")
        return value


# ------------------------------
# Metrics
# ------------------------------
def normalized_reward(r_pi: float, r_min: float, r_max: float, *, percent: bool = True) -> float:
    """(R - r_min) / (r_max - r_min), times 100 when ``percent``."""
    if r_max == r_min:
        raise ValueError(f"reward range is degenerate: r_max == r_min == {r_max}")
    value = (r_pi - r_min) / (r_max - r_min)
    return value * 100.0 if percent else value


def normalized_cost(c_pi: float, kappa: float, eps: float = 0.1) -> float:
    """(C + eps) / (kappa + eps); below 1 means the budget was respected."""
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    return (c_pi + eps) / (kappa + eps)


# ------------------------------
# Rollout
# ------------------------------
@dataclass
class RolloutResult:
    trajectory: Trajectory
    rtg_tokens: List[float]
    ctg_tokens: List[float]  # length H + 1, the last entry is C_hat_H

    @property
    def total_return(self) -> float:
        return math.fsum(self.trajectory.rewards.tolist())

    @property
    def total_cost(self) -> float:
        return math.fsum(self.trajectory.costs.tolist())

    def trace_rows(self) -> List[Tuple[Any, ...]]:
        traj = self.trajectory
        return [
            (
                t,
                " ".join(repr(float(x)) for x in traj.states[t]),
                " ".join(repr(float(x)) for x in traj.actions[t]),
                float(traj.rewards[t]),
                float(traj.costs[t]),
                self.rtg_tokens[t],
                self.ctg_tokens[t],
            )
            for t in range(traj.horizon)
        ]


TRACE_HEADER = ("t", "state", "action", "reward", "cost", "rtg_token", "ctg_token")


def _to_env_action(action: np.ndarray, discrete: bool) -> Any:
    if discrete:
        return int(np.rint(action.reshape(-1)[0]))
    return action


def rollout(
    policy: B2RPolicy,
    env: gym.Env,
    config: RolloutConfig,
    seed: int = 0,
) -> RolloutResult:
    """One episode: start from (R_0, kappa), then R_hat -= r_t and C_hat -= c_t after every step.

    CTG tokens are not clamped, so an over-budget episode feeds negative CTG to the model.
    """
    mc = policy.config
    rng = np.random.default_rng([seed, 7])
    target = config.target_return if config.target_return is not None else (mc.target_return or 0.0)
    horizon = config.max_horizon or getattr(getattr(env, "spec_info", None), "max_horizon", 1000)
    k = mc.context_len

    state, _ = env.reset(seed=seed)
    rtg_hat, ctg_hat = float(target), float(config.kappa)
    rtg_hist: List[float] = []
    ctg_hist: List[float] = []
    states: List[np.ndarray] = []
    actions: List[np.ndarray] = []
    transitions: List[Transition] = []

    for t in range(horizon):
        rtg_hist.append(rtg_hat)
        ctg_hist.append(ctg_hat)
        states.append(np.atleast_1d(np.asarray(state, dtype=np.float64)))
        actions.append(np.zeros(mc.action_dim))
        window = build_window(
            rtg_hist[-k:], ctg_hist[-k:], np.stack(states[-k:]), np.stack(actions[-k:]),
            k, config.kappa,
        )
        action = policy.act(window, config.action_mode, rng)
        env_action = _to_env_action(action, mc.discrete_actions)
        executed = np.atleast_1d(np.asarray(env_action, dtype=np.float64))
        actions[-1] = executed

        try:
            next_state, reward, terminated, truncated, info = env.step(env_action)
        except Exception as exc:
            raise RuntimeError(f"env step failed at t={t}: {exc}") from exc
        cost = float(info.get("cost", 0.0))
        transitions.append(Transition(states[-1], executed, float(reward), cost))

        rtg_hat -= float(reward)
        ctg_hat -= cost
        state = next_state
        if terminated or truncated:
            break

    env_id = getattr(getattr(env, "spec_info", None), "env_id", mc.env_id)
    return RolloutResult(
        trajectory=Trajectory.from_transitions(transitions, env_id=env_id),
        rtg_tokens=rtg_hist,
        ctg_tokens=ctg_hist + [ctg_hat],
    )


# ------------------------------
# Evaluation
# ------------------------------
@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    seed: int
    total_return: float
    total_cost: float
    violated: bool


@dataclass
class EvalSummary:
    kappa: float
    target_return: float
    r_min: float
    r_max: float
    eps_stability: float
    episodes: List[EpisodeRecord]
    reward: float  # normalised, 0-1 scale
    reward_std: float
    reward_percent: float  # normalised, 0-100 scale
    cost: float  # normalised
    cost_std: float
    mean_return: float
    mean_cost: float
    violation_rate: float
    safe: bool
    per_seed: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("episodes")
        data["n_episodes"] = len(self.episodes)
        data["reward_scales"] = {
            "fraction": self.reward,
            "percent": self.reward_percent,
            "note": "normalised reward is reported on both the 0-1 and the 0-100 scale",
        }
        return data

    def episode_rows(self) -> List[Tuple[Any, ...]]:
        return [(e.episode, e.seed, e.total_return, e.total_cost, int(e.violated)) for e in self.episodes]


EPISODE_HEADER = ("episode", "seed", "return", "cost", "violated")


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.default_rng([seed, episode]).integers(0, 2**31 - 1))


def evaluate(
    policy: B2RPolicy,
    env_factory: EnvFactory,
    config: RolloutConfig,
    reward_range: Tuple[float, float],
) -> EvalSummary:
    """Roll out n_episodes per seed; report mean +- std across seeds."""
    r_min, r_max = reward_range
    jobs = [(s, ep) for s in config.seeds for ep in range(config.n_episodes)]

    def _run(job: Tuple[int, int]) -> EpisodeRecord:
        seed, episode = job
        result = rollout(policy, env_factory(), config, seed=_episode_seed(seed, episode))
        cost = result.total_cost
        return EpisodeRecord(episode, seed, result.total_return, cost, cost > config.kappa)

    records = parallel_map(_run, jobs, config.workers)

    per_seed: Dict[str, Dict[str, float]] = {}
    for seed in config.seeds:
        mine = [r for r in records if r.seed == seed]
        mean_ret = math.fsum(r.total_return for r in mine) / len(mine)
        mean_cost = math.fsum(r.total_cost for r in mine) / len(mine)
        per_seed[str(seed)] = {
            "mean_return": mean_ret,
            "mean_cost": mean_cost,
            "reward": normalized_reward(mean_ret, r_min, r_max, percent=False),
            "cost": normalized_cost(mean_cost, config.kappa, config.eps_stability),
        }

    rewards = np.array([v["reward"] for v in per_seed.values()])
    costs = np.array([v["cost"] for v in per_seed.values()])
    n = len(records)
    mean_return = math.fsum(r.total_return for r in records) / n
    mean_cost = math.fsum(r.total_cost for r in records) / n
    reward = normalized_reward(mean_return, r_min, r_max, percent=False)
    cost = normalized_cost(mean_cost, config.kappa, config.eps_stability)
    target = config.target_return
    if target is None:
        target = policy.config.target_return or 0.0

    summary = EvalSummary(
        kappa=config.kappa,
        target_return=float(target),
        r_min=r_min,
        r_max=r_max,
        eps_stability=config.eps_stability,
        episodes=records,
        reward=reward,
        reward_std=float(rewards.std()),
        reward_percent=reward * 100.0,
        cost=cost,
        cost_std=float(costs.std()),
        mean_return=mean_return,
        mean_cost=mean_cost,
        violation_rate=sum(r.violated for r in records) / n,
        safe=cost < 1.0,
        per_seed=per_seed,
    )
    logger.info(
        "kappa=%s reward=%.3f cost=%.3f violation_rate=%.3f safe=%s",
        config.kappa, summary.reward, summary.cost, summary.violation_rate, summary.safe,
    )
    return summary


def evaluate_targets(
    policy: B2RPolicy,
    env_factory: EnvFactory,
    kappas: Sequence[float],
    config: RolloutConfig,
    reward_range: Tuple[float, float],
) -> List[EvalSummary]:
    """One summary per deployment budget, for policies trained on several budgets at once."""
    return [
        evaluate(policy, env_factory, config.model_copy(update={"kappa": float(k)}), reward_range)
        for k in kappas
    ]
