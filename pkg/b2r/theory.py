"""Executable checks of the safety bounds, the region-vs-band return ordering and the
safe-aligned data assumption."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .cmdp import ChainParams, enumerate_chain_trajectories
from .datasets import ALIGN_TOL, AnnotatedTrajectory, Strategy, parallel_map

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096


class AssumptionViolationError(ValueError):
    """The configuration breaks a precondition of the bound (e.g. sigma * H >= delta)."""


class TheoryConfig(BaseModel):
    sigma: float = Field(ge=0.0)  # bound on E|c_t - c_hat_t|
    delta: float = Field(gt=0.0)  # safety margin
    c_max: float = Field(default=1.0, gt=0.0)
    horizon: int = Field(ge=1)
    kappa: float = Field(ge=0.0)
    n_trials: int = Field(default=100_000, ge=1)
    seed: int = 0
    epsilon: float = Field(default=0.5, gt=0.0)  # band half-width
    error_dist: Literal["uniform", "rademacher"] = "uniform"
    plan_margin: float = Field(default=1.0, ge=0.5)  # planned total is kappa - plan_margin * delta

    @model_validator(mode="after")
    def _check(self) -> "TheoryConfig":
        if self.delta > self.kappa:
            raise ValueError(f"delta ({self.delta}) must not exceed kappa ({self.kappa})")
        return self

    @property
    def slack(self) -> float:
        return self.delta - self.sigma * self.horizon


# ------------------------------
# Analytic bound
# ------------------------------
@dataclass(frozen=True)
class Theorem1Bound:
    prob_bound: float
    expected_cost_bound: float
    slack: float


def theorem1_bound(config: TheoryConfig) -> Theorem1Bound:
    """Pr[C <= kappa] >= 1 - exp(-(delta - sigma H)^2 / (2 H C_max^2)) and
    E[C] <= kappa - (delta - sigma H)."""
    slack = config.slack
    if slack <= 0:
        raise AssumptionViolationError(
            f"sigma*H = {config.sigma * config.horizon} must be < delta = {config.delta}"
        )
    exponent = slack**2 / (2.0 * config.horizon * config.c_max**2)
    return Theorem1Bound(
        prob_bound=-math.expm1(-exponent),
        expected_cost_bound=config.kappa - slack,
        slack=slack,
    )


# ------------------------------
# Monte Carlo
# ------------------------------
@dataclass
class ErrorProcess:
    """A block of simulated budget paths: planned, realised and per-step errors."""

    planned: np.ndarray  # (H,)
    costs: np.ndarray  # (n, H), clamped to [0, C_max]
    ctg_final: np.ndarray  # (n,), C_hat_H from step-by-step decrements

    @property
    def errors(self) -> np.ndarray:
        return self.costs - self.planned

    @property
    def cumulative_error(self) -> np.ndarray:
        """D_t = sum_{i <= t} e_i, the martingale M_t for zero-mean errors."""
        return np.cumsum(self.errors, axis=1)


def planned_costs(config: TheoryConfig) -> np.ndarray:
    total = config.kappa - config.plan_margin * config.delta
    per_step = max(total, 0.0) / config.horizon
    if per_step > config.c_max:
        raise AssumptionViolationError(
            f"planned per-step cost {per_step} exceeds C_max={config.c_max}"
        )
    return np.full(config.horizon, per_step)


def _draw_errors(config: TheoryConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    shape = (n, config.horizon)
    if config.error_dist == "uniform":
        # U[-2 sigma, 2 sigma] has E|e| = sigma
        raw = rng.uniform(-2.0 * config.sigma, 2.0 * config.sigma, size=shape)
    else:
        raw = config.sigma * rng.choice([-1.0, 1.0], size=shape)
    return np.clip(raw, -config.c_max, config.c_max)


def simulate_block(config: TheoryConfig, block: int, n: int) -> ErrorProcess:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, block]))
    planned = planned_costs(config)
    costs = np.clip(planned + _draw_errors(config, rng, n), 0.0, config.c_max)
    ctg = np.full(n, float(config.kappa))
    for t in range(config.horizon):
        ctg -= costs[:, t]
    return ErrorProcess(planned=planned, costs=costs, ctg_final=ctg)


@dataclass
class Theorem1Report:
    config: Dict[str, Any]
    prob_bound: float
    expected_cost_bound: float
    n_trials: int
    empirical_prob: float
    binomial_se: float
    mean_cost: float
    sem: float
    realized_mean_abs_error: float
    nominal_sigma: float
    azuma_tail: float
    azuma_bound: float
    telescoping_max_error: float
    clauses: Dict[str, bool] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.clauses.values())

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["passed"] = self.passed
        return data


def simulate_theorem1(config: TheoryConfig, workers: int = 1) -> Theorem1Report:
    """Simulate n_trials budget processes and test both clauses of the bound with 3-SE slack."""
    bound = theorem1_bound(config)
    sizes = [BLOCK_SIZE] * (config.n_trials // BLOCK_SIZE)
    if config.n_trials % BLOCK_SIZE:
        sizes.append(config.n_trials % BLOCK_SIZE)

    def _run(item: Tuple[int, int]) -> Tuple[int, float, float, float, int, float]:
        block, n = item
        proc = simulate_block(config, block, n)
        totals = proc.costs.sum(axis=1)
        safe = int(np.count_nonzero(totals <= config.kappa))
        telescoping = float(np.max(np.abs(totals - (config.kappa - proc.ctg_final))))
        tail = int(np.count_nonzero(proc.cumulative_error[:, -1] >= bound.slack))
        return (
            safe,
            math.fsum(totals.tolist()),
            math.fsum((totals**2).tolist()),
            math.fsum(np.abs(proc.errors).ravel().tolist()),
            tail,
            telescoping,
        )

    parts = parallel_map(_run, list(enumerate(sizes)), workers)
    n = config.n_trials
    safe = sum(p[0] for p in parts)
    mean_cost = math.fsum(p[1] for p in parts) / n
    second = math.fsum(p[2] for p in parts) / n
    var = max(second - mean_cost**2, 0.0) * n / max(n - 1, 1)
    sem = math.sqrt(var / n)
    p_hat = safe / n
    se = math.sqrt(p_hat * (1.0 - p_hat) / n)
    abs_err = math.fsum(p[3] for p in parts) / (n * config.horizon)
    telescoping = max(p[5] for p in parts)
    azuma_tail = sum(p[4] for p in parts) / n
    azuma_bound = math.exp(-(bound.slack**2) / (2.0 * config.horizon * config.c_max**2))

    tol = ALIGN_TOL * max(1.0, config.kappa)
    clauses = {
        "probability": p_hat >= bound.prob_bound - 3.0 * se,
        "expectation": mean_cost <= bound.expected_cost_bound + 3.0 * sem,
        "telescoping": telescoping <= tol,
    }
    notes = [
        "the concentration argument yields C <= kappa + slack/2 on its good event while the "
        "stated bound is for C <= kappa; both stated inequalities are checked empirically"
    ]
    if config.plan_margin < 1.0:
        notes.append(
            f"plan_margin={config.plan_margin} plans above kappa - delta; "
            "the expectation clause is not implied for this configuration"
        )
    if abs(abs_err - config.sigma) > 0.05 * max(config.sigma, 1e-12):
        notes.append(
            f"realised E|e|={abs_err:.6g} differs from nominal sigma={config.sigma} (cost clamping)"
        )
    for note in notes:
        logger.info("theorem1: %s", note)

    report = Theorem1Report(
        config=config.model_dump(),
        prob_bound=bound.prob_bound,
        expected_cost_bound=bound.expected_cost_bound,
        n_trials=n,
        empirical_prob=p_hat,
        binomial_se=se,
        mean_cost=mean_cost,
        sem=sem,
        realized_mean_abs_error=abs_err,
        nominal_sigma=config.sigma,
        azuma_tail=azuma_tail,
        azuma_bound=azuma_bound,
        telescoping_max_error=telescoping,
        clauses=clauses,
        notes=notes,
    )
    if not report.passed:
        logger.warning("theorem1 clauses failed: %s", {k: v for k, v in clauses.items() if not v})
    return report


# (horizon, sigma, delta) at kappa=10, C_max=1; every row has sigma * H < delta
DEFAULT_GRID: Tuple[Tuple[int, float, float], ...] = (
    (20, 0.01, 1.0),
    (20, 0.05, 2.0),
    (20, 0.02, 0.5),
    (50, 0.01, 1.0),
    (50, 0.02, 2.0),
    (50, 0.005, 0.5),
    (100, 0.01, 2.0),
    (100, 0.005, 1.0),
    (100, 0.02, 3.0),
)


def default_grid(n_trials: int = 100_000, seed: int = 0, kappa: float = 10.0) -> List[TheoryConfig]:
    return [
        TheoryConfig(sigma=s, delta=d, horizon=h, kappa=kappa, n_trials=n_trials, seed=seed + i)
        for i, (h, s, d) in enumerate(DEFAULT_GRID)
    ]


# ------------------------------
# Region versus band
# ------------------------------
ReturnCost = Tuple[float, float]


@dataclass(frozen=True)
class Theorem2Result:
    region_max: float
    boundary_max: float
    holds: bool
    region_size: int
    boundary_size: int
    empty_region: bool

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        # JSON has no infinity
        for key in ("region_max", "boundary_max"):
            if math.isinf(data[key]):
                data[key] = None
        return data


def _pairs(dataset: Iterable[Union[AnnotatedTrajectory, ReturnCost]]) -> List[ReturnCost]:
    out: List[ReturnCost] = []
    for item in dataset:
        if isinstance(item, AnnotatedTrajectory):
            out.append((item.total_return, item.total_cost))
        else:
            r, c = item
            out.append((float(r), float(c)))
    return out


def verify_theorem2(
    dataset: Iterable[Union[AnnotatedTrajectory, ReturnCost]],
    kappa: float,
    epsilon: float,
) -> Theorem2Result:
    """Max return over {C <= kappa} versus over {|C - kappa| <= eps} within it; empty sets give -inf."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    pairs = _pairs(dataset)
    region = [r for r, c in pairs if c <= kappa]
    band = [r for r, c in pairs if kappa - epsilon <= c <= kappa + epsilon and c <= kappa]
    region_max = max(region, default=-math.inf)
    boundary_max = max(band, default=-math.inf)
    if not region:
        logger.warning("no trajectory satisfies C <= %s; the comparison holds vacuously", kappa)
    return Theorem2Result(
        region_max=region_max,
        boundary_max=boundary_max,
        holds=region_max >= boundary_max,
        region_size=len(region),
        boundary_size=len(band),
        empty_region=not region,
    )


def band_within_region(
    dataset: Iterable[Union[AnnotatedTrajectory, ReturnCost]], kappa: float, epsilon: float
) -> bool:
    pairs = _pairs(dataset)
    band = {i for i, (_, c) in enumerate(pairs) if abs(c - kappa) <= epsilon and c <= kappa}
    region = {i for i, (_, c) in enumerate(pairs) if c <= kappa}
    return band <= region


def random_theorem2_check(
    n_datasets: int = 10_000, seed: int = 0, max_size: int = 30
) -> Dict[str, Any]:
    """Property check on random finite (R, C) sets; returns counts and the first failing case."""
    rng = np.random.default_rng(seed)
    failures = 0
    first: Optional[Dict[str, Any]] = None
    for i in range(n_datasets):
        size = int(rng.integers(1, max_size + 1))
        pairs = list(zip(rng.normal(0.0, 10.0, size).tolist(), rng.uniform(0.0, 20.0, size).tolist()))
        kappa = float(rng.uniform(0.0, 20.0))
        eps = float(rng.uniform(0.01, 10.0))
        result = verify_theorem2(pairs, kappa, eps)
        if not result.holds or not band_within_region(pairs, kappa, eps):
            failures += 1
            if first is None:
                first = {"index": i, "kappa": kappa, "epsilon": eps, "pairs": pairs}
    return {
        "n_datasets": n_datasets,
        "failures": failures,
        "holds": failures == 0,
        "first_failure": first,
    }


def chain_theorem2_oracle(
    params: ChainParams, kappa: float, epsilon: float
) -> Theorem2Result:
    """Brute-force the ordering over every trajectory of a small chain."""
    trajectories = enumerate_chain_trajectories(params)
    pairs = [(float(np.sum(t.rewards)), float(np.sum(t.costs))) for t in trajectories]
    return verify_theorem2(pairs, kappa, epsilon)


# ------------------------------
# Safe-aligned data audit
# ------------------------------
@dataclass(frozen=True)
class AuditViolation:
    trajectory: int
    t: int
    clause: str
    detail: str


@dataclass
class AuditResult:
    passed: bool
    checked: int
    violation: Optional[AuditViolation] = None
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _expected_implied_costs(at: AnnotatedTrajectory, kappa: float) -> Optional[np.ndarray]:
    """Implied costs the strategy should produce, or None for Rand (checked per step)."""
    costs = at.traj.costs
    delta = kappa - at.total_cost
    strategy = Strategy.parse(at.strategy) if at.strategy else None
    if strategy is None:
        return costs.copy()
    if strategy is Strategy.SHIFT:
        out = costs.copy()
        out[-1] += delta
        return out
    if strategy is Strategy.AVG:
        return costs + delta / at.horizon
    if strategy is Strategy.SCALE:
        return costs * (kappa / at.total_cost) if at.total_cost > 0 else costs.copy()
    return None


def _audit_one(index: int, at: AnnotatedTrajectory, c_max: float) -> Optional[AuditViolation]:
    if at.kappa_tag is None:
        return AuditViolation(index, 0, "initial_ctg", "trajectory carries no budget tag")
    kappa = at.kappa_tag
    tol = ALIGN_TOL * max(1.0, kappa)
    if abs(float(at.ctg[0]) - kappa) > tol:
        return AuditViolation(index, 0, "initial_ctg", f"ctg[0]={float(at.ctg[0])} != kappa={kappa}")

    implied = at.implied_costs()
    expected = _expected_implied_costs(at, kappa)
    costs = at.traj.costs
    level = 1.0 if at.cost_mode == "discrete" else kappa / at.horizon
    last = at.horizon - 1
    for t in range(at.horizon):
        c = float(costs[t])
        if not 0.0 <= c <= c_max:
            return AuditViolation(index, t, "cost_bounds", f"c_t={c} outside [0, {c_max}]")
        got = float(implied[t])
        if expected is not None:
            ok = abs(got - float(expected[t])) <= tol
            want = f"{float(expected[t])}"
        elif t < last:
            ok = abs(got - c) <= tol or abs(got - level) <= tol
            want = f"{c} or {level}"
        else:
            ok = got >= c - tol
            want = f">= {c}"
        if not ok:
            return AuditViolation(index, t, "ctg_recursion", f"implied cost {got}, expected {want}")
    return None


def assumption1_audit(dataset: Sequence[AnnotatedTrajectory], c_max: float = 1.0) -> AuditResult:
    """Check ctg[0] = kappa, the CTG recursion against the strategy's implied costs, and
    0 <= c_t <= C_max; stops at the first violation."""
    if not dataset:
        logger.warning("assumption audit on an empty dataset passes vacuously")
        return AuditResult(passed=True, checked=0, warnings=["empty dataset: vacuous pass"])
    for index, at in enumerate(dataset):
        violation = _audit_one(index, at, c_max)
        if violation is not None:
            logger.warning("assumption audit failed: %s", violation)
            return AuditResult(passed=False, checked=index + 1, violation=violation)
    return AuditResult(passed=True, checked=len(dataset))
