from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .services import (
    audit_dataset,
    evaluate_policy,
    filter_dataset,
    generate,
    realign_dataset_file,
    report,
    rollout_policy,
    train_boundary,
    train_policy,
    verify_theorem1,
    verify_theorem2_cmd,
)
from .theory import TheoryConfig


# ---------------------------------------------------------------------
# Tool 1: Generate data
# ---------------------------------------------------------------------

def tool_gen_data(
    env: str,
    n_trajectories: int,
    seed: int,
    out: str | Path,
    env_params: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> Dict[str, Any]:
    """
    Tool 1: Roll out randomised behaviour policies and write an annotated dataset.

    Args:
        env: Environment id ("velocity" or "chain").
        n_trajectories: Number of trajectories to generate.
        seed: Seed; trajectory i uses the stream (seed, i).
        out: Dataset path (a ``.manifest.json`` sidecar is written next to it).
        env_params: Environment overrides, e.g. ``{"hazard": [3]}`` for the chain.
        workers: Threads used for annotation.

    Returns:
        A dictionary with the dataset path, its manifest and the cost/reward ranges.
    """
    return generate(env, n_trajectories, seed, out, env_params, workers)


# ---------------------------------------------------------------------
# Tool 2: Filter / realign / audit
# ---------------------------------------------------------------------

def tool_filter(inp: str | Path, out: str | Path, kappa: float) -> Dict[str, Any]:
    """
    Tool 2a: Keep trajectories with C(tau) <= kappa.

    Returns:
        The output dataset path and a manifest with total/kept/dropped counts.
    """
    return filter_dataset(inp, out, kappa)


def tool_realign(
    inp: str | Path,
    out: str | Path,
    kappas: Sequence[float],
    strategy: str,
    seed: int,
    cost_mode: str = "auto",
    workers: int = 1,
) -> Dict[str, Any]:
    """
    Tool 2b: Filter and realign the CTG of every trajectory to each budget.

    Several kappas produce one merged dataset whose trajectories are tagged with their
    budget. The safe-aligned data audit runs on the result and lands in the manifest.

    Raises:
        StrategyInapplicableError: Scale applied to a zero-cost trajectory.
    """
    return realign_dataset_file(inp, out, kappas, strategy, seed, cost_mode, workers)


def tool_audit(inp: str | Path, c_max: Optional[float] = None) -> Dict[str, Any]:
    """
    Tool 2c: Check ctg[0] = kappa, the CTG recursion and cost bounds on a dataset.
    """
    return audit_dataset(inp, c_max)


# ---------------------------------------------------------------------
# Tool 3: Training
# ---------------------------------------------------------------------

def tool_train(
    inp: str | Path,
    out: str | Path,
    model: Optional[Dict[str, Any]] = None,
    train: Optional[Dict[str, Any]] = None,
    fraction: float = 1.0,
) -> Dict[str, Any]:
    """
    Tool 3a: Behaviour-clone the transformer policy on a realigned dataset.

    Args:
        inp: Realigned dataset.
        out: Checkpoint path; ``.config.json`` and ``.loss.csv`` sidecars are written too.
        model: ModelConfig overrides.
        train: TrainConfig overrides (``allow_unaligned`` enables ablation runs).
        fraction: Share of trajectories kept by subsampling.

    Raises:
        PreconditionError: The dataset is not filtered and realigned.
        NonFiniteLossError: Training diverged.
    """
    return train_policy(inp, out, model, train, fraction)


def tool_train_boundary(
    inp: str | Path,
    out: str | Path,
    kappa: float,
    epsilon: float,
    buffer: float = 1.0,
    model: Optional[Dict[str, Any]] = None,
    train: Optional[Dict[str, Any]] = None,
    fraction: float = 1.0,
) -> Dict[str, Any]:
    """
    Tool 3b: Train the same model only on trajectories with C(tau) near buffer*kappa.

    Raises:
        EmptyBandError: No trajectory falls inside the band.
    """
    return train_boundary(inp, out, kappa, epsilon, buffer, model, train, fraction)


# ---------------------------------------------------------------------
# Tool 4: Deployment
# ---------------------------------------------------------------------

def tool_rollout(
    checkpoint: str | Path,
    kappa: float,
    seed: int,
    trace: Optional[str | Path] = None,
    rollout: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Tool 4a: Run one episode with the checkpoint, optionally writing a per-step CSV trace.
    """
    return rollout_policy(checkpoint, kappa, seed, trace, rollout)


def tool_eval(
    checkpoint: str | Path,
    kappas: Sequence[float],
    out: str | Path,
    method: str = "b2r",
    data: Optional[str | Path] = None,
    episodes_csv: Optional[str | Path] = None,
    rollout: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Tool 4b: Evaluate a checkpoint at one or more budgets and write the eval JSON.

    Args:
        data: Dataset whose manifest supplies the empirical reward range.
        episodes_csv: Optional per-episode CSV (episode, seed, return, cost, violated).
    """
    return evaluate_policy(checkpoint, kappas, out, method, data, episodes_csv, rollout)


def tool_report(inputs: List[str | Path], out: str | Path) -> Dict[str, Any]:
    """
    Tool 4c: Aggregate eval JSONs into a CSV with columns task, method, reward, cost, safe.
    """
    return report(inputs, out)


# ---------------------------------------------------------------------
# Tool 5: Theory checks
# ---------------------------------------------------------------------

def tool_verify_theorem1(
    theory: Optional[Dict[str, Any]] = None,
    grid: bool = False,
    out: Optional[str | Path] = None,
    seed: int = 0,
    workers: int = 1,
) -> Dict[str, Any]:
    """
    Tool 5a: Compare the analytic safety bounds with Monte Carlo budget processes.

    Raises:
        AssumptionViolationError: sigma * H >= delta.
    """
    config = None if grid else TheoryConfig.model_validate({"seed": seed, **(theory or {})})
    n_trials = (theory or {}).get("n_trials")
    return verify_theorem1(config, out, grid=grid, n_trials=n_trials, seed=seed, workers=workers)


def tool_verify_theorem2(
    kappa: float,
    epsilon: float,
    inp: Optional[str | Path] = None,
    chain: Optional[Dict[str, Any]] = None,
    random_n: Optional[int] = None,
    seed: int = 0,
    out: Optional[str | Path] = None,
) -> Dict[str, Any]:
    """
    Tool 5b: Check that the best return over {C <= kappa} is never below the best return
    over the boundary band, on a dataset, the enumerated chain, or random (R, C) sets.
    """
    return verify_theorem2_cmd(kappa, epsilon, inp, chain, random_n, seed, out)


TOOLS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "gen-data": tool_gen_data,
    "filter": tool_filter,
    "realign": tool_realign,
    "audit": tool_audit,
    "train": tool_train,
    "train-boundary": tool_train_boundary,
    "rollout": tool_rollout,
    "eval": tool_eval,
    "report": tool_report,
    "verify-theorem1": tool_verify_theorem1,
    "verify-theorem2": tool_verify_theorem2,
}
