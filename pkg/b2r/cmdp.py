"""CMDP domain types, trajectory accounting and the two toy environments."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Any, Callable, Dict, FrozenSet, List, Sequence, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

logger = logging.getLogger(__name__)


class ActionBoundsError(ValueError):
    """Raised when an action lies outside the environment's action box."""


class InvalidActionError(ValueError):
    """Raised when a discrete action token is not part of the action set."""


class EnvParameterError(ValueError):
    """Raised when an env override is not a parameter of the chosen env."""


# ------------------------------
# Domain types
# ------------------------------
@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.cost) or self.cost < 0:
            raise ValueError(f"Transition cost must be a finite value >= 0, got {self.cost}")


@dataclass(frozen=True)
class CostBudget:
    kappa: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError(f"Cost budget kappa must be finite and >= 0, got {self.kappa}")

    def __float__(self) -> float:
        return float(self.kappa)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    c_max: float
    max_horizon: int
    reward_min: float
    reward_max: float
    discrete_actions: bool = False

    def __post_init__(self) -> None:
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError(
                f"{self.env_id}: action bounds must have {self.action_dim} entries"
            )
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError(f"{self.env_id}: action_low must be < action_high elementwise")
        if self.c_max <= 0:
            raise ValueError(f"{self.env_id}: C_max must be > 0, got {self.c_max}")
        if self.max_horizon < 1:
            raise ValueError(f"{self.env_id}: max_horizon must be >= 1")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)


def _frozen(array: Any, ndim: int) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Columnar storage of (s_t, a_t, r_t, c_t) for t = 0..H-1."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    env_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "actions", _frozen(self.actions, 2))
        object.__setattr__(self, "rewards", _frozen(self.rewards, 1).reshape(-1))
        object.__setattr__(self, "costs", _frozen(self.costs, 1).reshape(-1))

        horizon = self.rewards.shape[0]
        if horizon < 1:
            raise ValueError("Trajectory must contain at least one transition")
        lengths = {
            "states": self.states.shape[0],
            "actions": self.actions.shape[0],
            "costs": self.costs.shape[0],
        }
        bad = {k: v for k, v in lengths.items() if v != horizon}
        if bad:
            raise ValueError(f"Trajectory columns disagree with H={horizon}: {bad}")
        if np.any(self.costs < 0) or not np.all(np.isfinite(self.costs)):
            raise ValueError("Trajectory costs must be finite and >= 0")

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], env_id: str = "") -> "Trajectory":
        if not transitions:
            raise ValueError("Trajectory must contain at least one transition")
        return cls(
            states=np.stack([np.atleast_1d(t.state) for t in transitions]),
            actions=np.stack([np.atleast_1d(t.action) for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            costs=np.array([t.cost for t in transitions]),
            env_id=env_id,
        )

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[0])

    def __len__(self) -> int:
        return self.horizon

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[1])

    @property
    def transitions(self) -> List[Transition]:
        return [
            Transition(self.states[t], self.actions[t], float(self.rewards[t]), float(self.costs[t]))
            for t in range(self.horizon)
        ]

    def validate(self, spec: EnvSpec) -> None:
        if self.state_dim != spec.state_dim or self.action_dim != spec.action_dim:
            raise ValueError(
                f"Trajectory dims (state={self.state_dim}, action={self.action_dim}) do not match "
                f"{spec.env_id} (state={spec.state_dim}, action={spec.action_dim})"
            )
        if np.any(self.costs > spec.c_max):
            raise ValueError(f"Trajectory cost exceeds C_max={spec.c_max} for {spec.env_id}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.costs, other.costs)
        )

    __hash__ = None  # type: ignore[assignment]


def cumulative_return(traj: Trajectory) -> float:
    """R(tau): sum of rewards over all transitions."""
    return math.fsum(traj.rewards.tolist())


def cumulative_cost(traj: Trajectory) -> float:
    """C(tau): sum of costs over all transitions (always >= 0)."""
    return math.fsum(traj.costs.tolist())


# ------------------------------
# Velocity environment
# ------------------------------
@dataclass(frozen=True)
class VelocityParams:
    dt: float = 0.1
    v_max: float = 15.0
    speed_limit: float = 10.0
    max_horizon: int = 200
    initial_velocity: float = 0.0


def velocity_env_step(
    state: Sequence[float] | np.ndarray,
    action: Sequence[float] | np.ndarray | float,
    *,
    t: int = 0,
    params: VelocityParams = VelocityParams(),
) -> Tuple[np.ndarray, float, float, bool]:
    """Advance 1-D kinematics by one step.

    Returns (next_state, reward, cost, done) where reward = v'·dt and the cost is 1
    only when v' strictly exceeds the speed limit.
    """
    accel = np.asarray(action, dtype=np.float64).reshape(-1)
    if accel.size != 1:
        raise ActionBoundsError(f"velocity action must be a scalar, got shape {accel.shape}")
    a = float(accel[0])
    if not math.isfinite(a) or a < -1.0 or a > 1.0:
        raise ActionBoundsError(f"velocity action {a} outside bounds [-1, 1]")

    v = float(np.asarray(state, dtype=np.float64).reshape(-1)[0])
    v_next = min(max(v + a * params.dt, 0.0), params.v_max)
    reward = v_next * params.dt
    cost = 1.0 if v_next > params.speed_limit else 0.0
    done = t + 1 >= params.max_horizon
    return np.array([v_next]), reward, cost, done


def _velocity_reward_ceiling(params: VelocityParams) -> float:
    state = np.array([params.initial_velocity])
    total = 0.0
    for t in range(params.max_horizon):
        state, reward, _, _ = velocity_env_step(state, 1.0, t=t, params=params)
        total += reward
    return total


class VelocityEnv(gym.Env):
    """Simplified driving scenario: accelerate for reward, pay 1 per step above the limit."""

    metadata = {"render_modes": []}

    def __init__(self, params: VelocityParams = VelocityParams()):
        self.params = params
        self.observation_space = spaces.Box(0.0, params.v_max, shape=(1,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(1,), dtype=np.float64)
        self.spec_info = velocity_spec(params)
        self._state = np.array([params.initial_velocity])
        self._t = 0

    def reset(self, *, seed: int | None = None, options: Dict[str, Any] | None = None):
        super().reset(seed=seed)
        self._state = np.array([self.params.initial_velocity])
        self._t = 0
        return self._state.copy(), {}

    def step(self, action):
        next_state, reward, cost, done = velocity_env_step(
            self._state, action, t=self._t, params=self.params
        )
        self._state = next_state
        self._t += 1
        return next_state.copy(), reward, False, done, {"cost": cost}


def velocity_spec(params: VelocityParams = VelocityParams()) -> EnvSpec:
    return EnvSpec(
        env_id="velocity",
        state_dim=1,
        action_dim=1,
        action_low=(-1.0,),
        action_high=(1.0,),
        c_max=1.0,
        max_horizon=params.max_horizon,
        reward_min=0.0,
        reward_max=_velocity_reward_ceiling(params),
    )


# ------------------------------
# Chain environment
# ------------------------------
class ChainAction(IntEnum):
    LEFT = 0
    RIGHT = 1
    STAY = 2


@dataclass(frozen=True)
class ChainParams:
    n_states: int = 5
    hazard: FrozenSet[int] = field(default_factory=frozenset)
    horizon: int = 4
    start: int = 0


def parse_chain_action(action: Any) -> ChainAction:
    if isinstance(action, ChainAction):
        return action
    if isinstance(action, str):
        try:
            return ChainAction[action.strip().upper()]
        except KeyError as exc:
            raise InvalidActionError(f"Unknown chain action token: {action!r}") from exc
    value = np.asarray(action, dtype=np.float64).reshape(-1)
    if value.size != 1 or not float(value[0]).is_integer():
        raise InvalidActionError(f"Chain action must be one integer token, got {action!r}")
    try:
        return ChainAction(int(value[0]))
    except ValueError as exc:
        raise InvalidActionError(f"Unknown chain action token: {action!r}") from exc


def chain_env_step(
    state: int,
    action: Any,
    *,
    t: int = 0,
    params: ChainParams = ChainParams(),
) -> Tuple[int, float, float, bool]:
    """Deterministic walk on {0..N-1}.

    Reward is the index of the state reached divided by N; the cost is charged for the
    state the action is taken from.
    """
    s = int(state)
    if not 0 <= s < params.n_states:
        raise ValueError(f"chain state {s} outside [0, {params.n_states - 1}]")
    move = parse_chain_action(action)

    if move is ChainAction.LEFT:
        s_next = max(s - 1, 0)
    elif move is ChainAction.RIGHT:
        s_next = min(s + 1, params.n_states - 1)
    else:
        s_next = s

    reward = s_next / params.n_states
    cost = 1.0 if s in params.hazard else 0.0
    done = t + 1 >= params.horizon
    return s_next, reward, cost, done


def _chain_reward_ceiling(params: ChainParams) -> float:
    s, total = params.start, 0.0
    for t in range(params.horizon):
        s, reward, _, _ = chain_env_step(s, ChainAction.RIGHT, t=t, params=params)
        total += reward
    return total


class ChainEnv(gym.Env):
    metadata = {"render_modes": []}

    def __init__(self, params: ChainParams = ChainParams()):
        self.params = params
        self.observation_space = spaces.Box(
            0.0, float(params.n_states - 1), shape=(1,), dtype=np.float64
        )
        self.action_space = spaces.Discrete(len(ChainAction))
        self.spec_info = chain_spec(params)
        self._state = params.start
        self._t = 0

    def reset(self, *, seed: int | None = None, options: Dict[str, Any] | None = None):
        super().reset(seed=seed)
        self._state = self.params.start
        self._t = 0
        return np.array([float(self._state)]), {}

    def step(self, action):
        s_next, reward, cost, done = chain_env_step(
            self._state, action, t=self._t, params=self.params
        )
        self._state = s_next
        self._t += 1
        return np.array([float(s_next)]), reward, False, done, {"cost": cost}


def chain_spec(params: ChainParams = ChainParams()) -> EnvSpec:
    return EnvSpec(
        env_id="chain",
        state_dim=1,
        action_dim=1,
        action_low=(0.0,),
        action_high=(float(len(ChainAction) - 1),),
        c_max=1.0,
        max_horizon=params.horizon,
        reward_min=0.0,
        reward_max=_chain_reward_ceiling(params),
        discrete_actions=True,
    )


def enumerate_chain_trajectories(params: ChainParams = ChainParams()) -> List[Trajectory]:
    """Every trajectory of the chain env: one per action sequence (3^H of them)."""
    trajectories: List[Trajectory] = []
    for plan in itertools.product(list(ChainAction), repeat=params.horizon):
        s = params.start
        transitions: List[Transition] = []
        for t, move in enumerate(plan):
            s_next, reward, cost, _ = chain_env_step(s, move, t=t, params=params)
            transitions.append(Transition(np.array([float(s)]), np.array([float(move)]), reward, cost))
            s = s_next
        trajectories.append(Trajectory.from_transitions(transitions, env_id="chain"))
    return trajectories


# ------------------------------
# Registry
# ------------------------------
ENVIRONMENTS: Dict[str, Tuple[type, Callable[..., gym.Env]]] = {
    "velocity": (VelocityParams, VelocityEnv),
    "chain": (ChainParams, ChainEnv),
}


def available_envs() -> List[str]:
    return sorted(ENVIRONMENTS.keys())


def env_parameters(env_id: str) -> List[str]:
    if env_id not in ENVIRONMENTS:
        raise ValueError(f"Unknown env: {env_id}. Available envs: {available_envs()}")
    return [f.name for f in fields(ENVIRONMENTS[env_id][0])]


def build_env_params(env_id: str, **overrides: Any) -> Any:
    """Params dataclass for ``env_id`` with ``overrides`` applied; unknown keys are rejected."""
    accepted = env_parameters(env_id)
    unknown = sorted(set(overrides) - set(accepted))
    if unknown:
        raise EnvParameterError(
            f"{env_id} env does not take {unknown}. Accepted parameters: {accepted}"
        )
    if "hazard" in overrides:
        overrides["hazard"] = frozenset(overrides["hazard"])
    return ENVIRONMENTS[env_id][0](**overrides)


def make_env(env_id: str, **overrides: Any) -> gym.Env:
    return ENVIRONMENTS[env_id][1](build_env_params(env_id, **overrides))


def get_env_spec(env_id: str, **overrides: Any) -> EnvSpec:
    return make_env(env_id, **overrides).spec_info
