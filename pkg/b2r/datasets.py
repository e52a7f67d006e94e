"""Offline dataset generation, safety filtering, RTG/CTG annotation and CTG realignment."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .cmdp import (
    ChainAction,
    CostBudget,
    Trajectory,
    Transition,
    cumulative_cost,
    cumulative_return,
    make_env,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = "b2r-ds-1"
ALIGN_TOL = 1e-9

T = TypeVar("T")
U = TypeVar("U")


class StrategyInapplicableError(ValueError):
    """The chosen realignment strategy cannot be applied to this trajectory."""


class RealignmentPreconditionError(ValueError):
    """Realignment was asked for a trajectory whose cost exceeds the budget."""


class Strategy(str, Enum):
    SHIFT = "shift"
    AVG = "avg"
    RAND = "rand"
    SCALE = "scale"

    @classmethod
    def parse(cls, value: "Strategy | str") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError as exc:
            raise ValueError(
                f"Unknown realignment strategy: {value}. Available: {[s.value for s in cls]}"
            ) from exc


def _as_kappa(kappa: CostBudget | float) -> float:
    return float(kappa.kappa) if isinstance(kappa, CostBudget) else float(CostBudget(float(kappa)))


def _suffix_sums(values: np.ndarray) -> np.ndarray:
    # each entry is the next one plus a term, so non-negative terms keep it non-increasing
    return np.cumsum(values[::-1])[::-1].copy()


def parallel_map(fn: Callable[[T], U], items: Sequence[T], workers: int = 1) -> List[U]:
    if workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ------------------------------
# Annotated trajectories
# ------------------------------
@dataclass(frozen=True, eq=False)
class AnnotatedTrajectory:
    traj: Trajectory
    rtg: np.ndarray
    ctg: np.ndarray
    kappa_tag: Optional[float] = None
    strategy: Optional[str] = None
    cost_mode: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ("rtg", "ctg"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape[0] != self.traj.horizon:
                raise ValueError(
                    f"{name} has length {arr.shape[0]}, trajectory horizon is {self.traj.horizon}"
                )
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.traj.horizon

    @property
    def total_return(self) -> float:
        return cumulative_return(self.traj)

    @property
    def total_cost(self) -> float:
        return cumulative_cost(self.traj)

    @property
    def is_realigned(self) -> bool:
        return self.kappa_tag is not None and self.strategy is not None

    def implied_costs(self) -> np.ndarray:
        """Per-step costs implied by the CTG tokens, c'_t = ctg[t] - ctg[t+1], c'_{H-1} = ctg[H-1]."""
        return np.append(self.ctg[:-1] - self.ctg[1:], self.ctg[-1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotatedTrajectory):
            return NotImplemented
        return (
            self.traj == other.traj
            and np.array_equal(self.rtg, other.rtg)
            and np.array_equal(self.ctg, other.ctg)
            and self.kappa_tag == other.kappa_tag
            and self.strategy == other.strategy
            and self.cost_mode == other.cost_mode
        )

    __hash__ = None  # type: ignore[assignment]


def annotate(traj: Trajectory) -> AnnotatedTrajectory:
    """Attach exact return-to-go and cost-to-go suffix sums."""
    return AnnotatedTrajectory(
        traj=traj,
        rtg=_suffix_sums(traj.rewards),
        ctg=_suffix_sums(traj.costs),
    )


def annotate_all(trajectories: Sequence[Trajectory], workers: int = 1) -> List[AnnotatedTrajectory]:
    return parallel_map(annotate, list(trajectories), workers)


# ------------------------------
# Filtering
# ------------------------------
def filter_safe(
    dataset: Iterable[AnnotatedTrajectory], kappa: CostBudget | float
) -> List[AnnotatedTrajectory]:
    """D_safe = {tau : C(tau) <= kappa}, inclusive."""
    budget = _as_kappa(kappa)
    kept = [at for at in dataset if at.total_cost <= budget]
    if not kept:
        logger.warning("filter_safe kept no trajectories at kappa=%s", budget)
    return kept


def boundary_band(
    dataset: Iterable[AnnotatedTrajectory],
    kappa: CostBudget | float,
    epsilon: float,
    *,
    buffer: float = 1.0,
) -> List[AnnotatedTrajectory]:
    """B_0 = {tau : C(tau) in [c - eps, c + eps]} with centre c = buffer * kappa."""
    if not epsilon > 0:
        raise ValueError(f"band half-width epsilon must be > 0, got {epsilon}")
    centre = buffer * _as_kappa(kappa)
    return [at for at in dataset if centre - epsilon <= at.total_cost <= centre + epsilon]


# ------------------------------
# Realignment
# ------------------------------
@dataclass(frozen=True)
class RealignmentSpec:
    strategy: Strategy
    kappa: CostBudget
    rng_seed: int = 0
    cost_mode: str = "auto"

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if not isinstance(self.kappa, CostBudget):
            object.__setattr__(self, "kappa", CostBudget(float(self.kappa)))
        if self.cost_mode not in {"auto", "discrete", "continuous"}:
            raise ValueError(f"cost_mode must be auto, discrete or continuous, got {self.cost_mode}")

    def offset(self, at: AnnotatedTrajectory) -> float:
        """Delta = kappa - C(tau)."""
        return self.kappa.kappa - at.total_cost

    def scale(self, at: AnnotatedTrajectory) -> float:
        """alpha = kappa / C(tau); undefined for cost-free trajectories."""
        total = at.total_cost
        if total <= 0:
            raise StrategyInapplicableError(
                "Scale realignment needs C(tau) > 0; got a zero-cost trajectory"
            )
        return self.kappa.kappa / total


def _resolve_cost_mode(costs: np.ndarray, requested: str) -> str:
    if requested != "auto":
        return requested
    return "discrete" if np.all((costs == 0.0) | (costs == 1.0)) else "continuous"


def _rand_costs(
    costs: np.ndarray, kappa: float, delta: float, mode: str, rng: np.random.Generator
) -> Tuple[np.ndarray, bool]:
    """Raise per-step costs at random eligible steps until the offset is spent.

    Whatever is left (less than one increment, or more if the eligible steps ran out)
    lands on the final step. Returns the new costs and whether steps ran out.
    """
    out = costs.copy()
    horizon = out.shape[0]
    if mode == "discrete":
        for idx in rng.permutation(np.flatnonzero(out == 0.0)):
            if delta < 1.0:
                break
            out[idx] = 1.0
            delta -= 1.0
        exhausted = delta >= 1.0
    else:
        level = kappa / horizon
        for idx in rng.permutation(np.flatnonzero(out < level)):
            increment = level - out[idx]
            if increment <= delta:
                out[idx] = level
                delta -= increment
        exhausted = False
    out[-1] += delta
    return out, exhausted


def _realign_one(
    at: AnnotatedTrajectory, spec: RealignmentSpec, rng: np.random.Generator
) -> Tuple[AnnotatedTrajectory, Optional[str]]:
    kappa = spec.kappa.kappa
    delta = spec.offset(at)
    if delta < -ALIGN_TOL:
        raise RealignmentPreconditionError(
            f"C(tau)={at.total_cost} exceeds kappa={kappa}; filter before realigning"
        )
    delta = max(delta, 0.0)

    flag: Optional[str] = None
    cost_mode: Optional[str] = None
    if spec.strategy is Strategy.SHIFT:
        ctg = at.ctg + delta
    elif spec.strategy is Strategy.AVG:
        ctg = _suffix_sums(at.traj.costs + delta / at.horizon)
    elif spec.strategy is Strategy.SCALE:
        ctg = spec.scale(at) * at.ctg
    else:
        cost_mode = _resolve_cost_mode(at.traj.costs, spec.cost_mode)
        costs, exhausted = _rand_costs(at.traj.costs, kappa, delta, cost_mode, rng)
        ctg = _suffix_sums(costs)
        if exhausted:
            flag = "rand_residual_on_last_step"

    realigned = AnnotatedTrajectory(
        traj=at.traj,
        rtg=at.rtg,
        ctg=ctg,
        kappa_tag=kappa,
        strategy=spec.strategy.value,
        cost_mode=cost_mode,
    )
    return realigned, flag


def realign(at: AnnotatedTrajectory, spec: RealignmentSpec) -> AnnotatedTrajectory:
    """Rewrite the CTG sequence so that ctg'[0] = kappa.

    States, actions, rewards and rtg are untouched.
    """
    rng = np.random.default_rng(spec.rng_seed)
    return _realign_one(at, spec, rng)[0]


@dataclass
class RealignmentResult:
    dataset: List[AnnotatedTrajectory]
    flags: List[str] = field(default_factory=list)


def realign_dataset(
    dataset: Sequence[AnnotatedTrajectory], spec: RealignmentSpec, workers: int = 1
) -> RealignmentResult:
    """Realign every trajectory; Rand draws from a stream keyed by (seed, index)."""

    def _job(item: Tuple[int, AnnotatedTrajectory]) -> Tuple[AnnotatedTrajectory, Optional[str]]:
        index, at = item
        return _realign_one(at, spec, np.random.default_rng([spec.rng_seed, index]))

    outcomes = parallel_map(_job, list(enumerate(dataset)), workers)
    flags = [f"trajectory {i}: {flag}" for i, (_, flag) in enumerate(outcomes) if flag]
    for note in flags:
        logger.warning("realign: %s", note)
    if spec.strategy is Strategy.SHIFT and any(np.any(at.traj.costs == 0.0) for at in dataset):
        logger.warning(
            "shifted CTG is only non-increasing (not strictly decreasing) on zero-cost steps"
        )
    return RealignmentResult(dataset=[at for at, _ in outcomes], flags=flags)


@dataclass
class MultiTargetResult:
    dataset: List[AnnotatedTrajectory]
    counts: Dict[str, int]
    skipped: List[float] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)


def prepare_multi_target(
    dataset: Sequence[AnnotatedTrajectory],
    kappas: Sequence[CostBudget | float],
    strategy: Strategy | str,
    *,
    seed: int = 0,
    cost_mode: str = "auto",
    workers: int = 1,
) -> MultiTargetResult:
    """Filter and realign at every kappa_i, tag each output with kappa_i, and concatenate."""
    if not kappas:
        raise ValueError("prepare_multi_target needs at least one kappa")
    budgets = [_as_kappa(k) for k in kappas]

    merged: List[AnnotatedTrajectory] = []
    counts: Dict[str, int] = {}
    skipped: List[float] = []
    flags: List[str] = []
    for kappa in budgets:
        safe = filter_safe(dataset, kappa)
        if not safe:
            logger.warning("kappa=%s yields an empty safe set; skipping it", kappa)
            skipped.append(kappa)
            continue
        spec = RealignmentSpec(Strategy.parse(strategy), CostBudget(kappa), seed, cost_mode)
        result = realign_dataset(safe, spec, workers)
        merged.extend(result.dataset)
        counts[repr(kappa)] = len(result.dataset)
        flags.extend(f"kappa={kappa} {note}" for note in result.flags)
    return MultiTargetResult(dataset=merged, counts=counts, skipped=skipped, flags=flags)


# ------------------------------
# Subsampling
# ------------------------------
def subsample(dataset: Sequence[T], fraction: float, seed: int) -> List[T]:
    """Uniform draw without replacement, order of the survivors preserved."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(dataset)
    if fraction == 1.0 or n == 0:
        return list(dataset)
    size = max(1, int(round(fraction * n)))
    picked = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
    return [dataset[i] for i in picked]


# ------------------------------
# Generation
# ------------------------------
BehaviorPolicy = Callable[[np.ndarray, int], Any]


def _velocity_behavior(rng: np.random.Generator, horizon: int) -> BehaviorPolicy:
    # two cruise targets with a random switch time give costs spread over [0, H]
    first, second = rng.uniform(4.0, 14.5), rng.uniform(2.0, 12.0)
    switch = int(rng.integers(horizon // 4, horizon + 1))
    gain = rng.uniform(0.5, 3.0)
    noise = rng.uniform(0.02, 0.2)

    def act(state: np.ndarray, t: int) -> np.ndarray:
        target = first if t < switch else second
        a = gain * (target - float(state[0])) + noise * rng.standard_normal()
        return np.array([min(max(a, -1.0), 1.0)])

    return act


def _chain_behavior(rng: np.random.Generator, horizon: int) -> BehaviorPolicy:
    probs = rng.dirichlet(np.ones(len(ChainAction)))

    def act(state: np.ndarray, t: int) -> ChainAction:
        return ChainAction(int(rng.choice(len(ChainAction), p=probs)))

    return act


BEHAVIORS: Dict[str, Callable[[np.random.Generator, int], BehaviorPolicy]] = {
    "velocity": _velocity_behavior,
    "chain": _chain_behavior,
}


def collect_trajectory(env: Any, policy: BehaviorPolicy, seed: int) -> Trajectory:
    state, _ = env.reset(seed=seed)
    transitions: List[Transition] = []
    for t in range(env.spec_info.max_horizon):
        action = policy(state, t)
        next_state, reward, terminated, truncated, info = env.step(action)
        transitions.append(
            Transition(np.array(state), np.atleast_1d(np.asarray(action, dtype=np.float64)),
                       float(reward), float(info["cost"]))
        )
        state = next_state
        if terminated or truncated:
            break
    return Trajectory.from_transitions(transitions, env_id=env.spec_info.env_id)


def generate_dataset(
    env_id: str, n_trajectories: int, seed: int, **env_overrides: Any
) -> List[Trajectory]:
    """Roll out randomised behaviour policies; trajectory i uses the stream (seed, i)."""
    if env_id not in BEHAVIORS:
        raise ValueError(f"No behaviour policy for env {env_id}. Available: {sorted(BEHAVIORS)}")
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")

    trajectories: List[Trajectory] = []
    for i in range(n_trajectories):
        env = make_env(env_id, **env_overrides)
        rng = np.random.default_rng([seed, i])
        policy = BEHAVIORS[env_id](rng, env.spec_info.max_horizon)
        trajectories.append(collect_trajectory(env, policy, seed=seed + i))
    logger.info("generated %d %s trajectories (seed=%d)", n_trajectories, env_id, seed)
    return trajectories


def empirical_reward_range(dataset: Sequence[AnnotatedTrajectory]) -> Tuple[float, float]:
    returns = [at.total_return for at in dataset]
    return (min(returns), max(returns)) if returns else (0.0, 0.0)


# ------------------------------
# Manifest
# ------------------------------
@dataclass
class DatasetManifest:
    env_id: str
    total: int
    kept: int
    dropped: int
    seed: int
    kappa: Optional[float] = None
    kappas: List[float] = field(default_factory=list)
    strategy: Optional[str] = None
    format_version: str = FORMAT_VERSION
    reward_min: Optional[float] = None
    reward_max: Optional[float] = None
    empty: bool = False
    warnings: List[str] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    audit: Optional[Dict[str, Any]] = None
    env_params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kept + self.dropped != self.total:
            raise ValueError(
                f"manifest counts inconsistent: kept={self.kept} + dropped={self.dropped} "
                f"!= total={self.total}"
            )
        if self.kept == 0 and not self.empty:
            self.empty = True
            self.warnings.append("dataset is empty")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def dataset_dims(dataset: Sequence[AnnotatedTrajectory]) -> Tuple[int, int]:
    if not dataset:
        raise ValueError("dataset is empty")
    return dataset[0].traj.state_dim, dataset[0].traj.action_dim


def max_return(dataset: Sequence[AnnotatedTrajectory]) -> float:
    return max((at.total_return for at in dataset), default=-math.inf)
