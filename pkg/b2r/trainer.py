"""Behaviour-cloning loop over filtered, realigned datasets."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from .datasets import ALIGN_TOL, AnnotatedTrajectory, annotate, boundary_band
from .policy import B2RPolicy, ModelConfig, PolicyParams, TokenBatch, tokenize

logger = logging.getLogger(__name__)

EvalFn = Callable[[B2RPolicy], float]


class PreconditionError(ValueError):
    """Training data is not filtered and realigned to its budget."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


class EmptyBandError(ValueError):
    def __init__(self, kappa: float, epsilon: float, centre: float):
        self.kappa, self.epsilon = kappa, epsilon
        super().__init__(
            f"boundary band is empty: no trajectory has C(tau) in "
            f"[{centre - epsilon}, {centre + epsilon}] (kappa={kappa}, epsilon={epsilon})"
        )


class TrainConfig(BaseModel):
    learning_rate: float = Field(default=1e-4, gt=0.0)
    batch_size: int = Field(default=64, ge=1)
    grad_clip_norm: float = Field(default=0.25, gt=0.0)
    steps_per_epoch: int = Field(default=500, ge=1)
    epochs: int = Field(default=20, ge=0)
    seed: int = 0
    weight_decay: float = Field(default=1e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    eval_every: int = Field(default=0, ge=0)  # epochs between evaluations, 0 = never
    patience: int = Field(default=3, ge=1)
    allow_unaligned: bool = False

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


# ------------------------------
# Batching
# ------------------------------
def sample_indices(
    dataset: Sequence[AnnotatedTrajectory], batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """(trajectory, timestep) pairs drawn uniformly over all timesteps in the dataset."""
    if not dataset:
        raise ValueError("cannot sample from an empty dataset")
    lengths = np.array([at.horizon for at in dataset])
    ends = np.cumsum(lengths)
    flat = rng.integers(0, int(ends[-1]), size=batch_size)
    traj = np.searchsorted(ends, flat, side="right")
    t = flat - (ends[traj] - lengths[traj])
    return np.stack([traj, t], axis=1)


def sample_batch(
    dataset: Sequence[AnnotatedTrajectory],
    batch_size: int,
    context_len: int,
    seed: int | np.random.Generator,
    kappa: Optional[float] = None,
) -> Tuple[TokenBatch, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pairs = sample_indices(dataset, batch_size, rng)
    windows = [tokenize(dataset[i], int(t), context_len, kappa) for i, t in pairs]
    return TokenBatch.from_windows(windows), pairs


# ------------------------------
# Optimisation
# ------------------------------
def global_grad_norm(params: PolicyParams) -> float:
    return math.sqrt(math.fsum(float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None))


def clip_grad_norm(params: PolicyParams, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm. Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay on matrix-shaped weights."""

    def __init__(self, params: PolicyParams, config: TrainConfig):
        self.params = params
        self.lr = config.learning_rate
        self.beta1, self.beta2 = config.beta1, config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if self.weight_decay and p.ndim >= 2:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad**2
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


# ------------------------------
# Training
# ------------------------------
@dataclass
class TrainReport:
    loss_curve: List[float]
    policy: B2RPolicy
    seed: int
    wall_time: float
    epoch_losses: List[float] = field(default_factory=list)
    eval_scores: List[float] = field(default_factory=list)
    stopped_early: bool = False
    n_trajectories: int = 0

    @property
    def steps(self) -> int:
        return len(self.loss_curve)

    def summary(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "steps": self.steps,
            "n_trajectories": self.n_trajectories,
            "initial_loss": self.loss_curve[0] if self.loss_curve else None,
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
            "epoch_losses": self.epoch_losses,
            "eval_scores": self.eval_scores,
            "stopped_early": self.stopped_early,
            "num_parameters": self.policy.num_parameters,
        }


def check_aligned(dataset: Sequence[AnnotatedTrajectory]) -> None:
    for i, at in enumerate(dataset):
        if at.kappa_tag is None:
            raise PreconditionError(f"trajectory {i} has no budget tag; realign before training")
        tol = ALIGN_TOL * max(1.0, abs(at.kappa_tag))
        if abs(float(at.ctg[0]) - at.kappa_tag) > tol:
            raise PreconditionError(
                f"trajectory {i}: ctg[0]={float(at.ctg[0])} != kappa={at.kappa_tag}; "
                "dataset is not realigned"
            )
        if at.total_cost > at.kappa_tag + tol:
            raise PreconditionError(
                f"trajectory {i}: C(tau)={at.total_cost} exceeds kappa={at.kappa_tag}; "
                "dataset is not filtered"
            )


def _robust_std(values: np.ndarray, axis=None) -> np.ndarray:
    std = np.std(values, axis=axis)
    return np.where(std < 1e-6, 1.0, std)


def fit_normalization(config: ModelConfig, dataset: Sequence[AnnotatedTrajectory]) -> ModelConfig:
    """Fill token statistics and the default target return from the training set."""
    states = np.concatenate([at.traj.states for at in dataset], axis=0)
    rtg = np.concatenate([at.rtg for at in dataset])
    update = {
        "state_mean": states.mean(axis=0).tolist(),
        "state_std": np.atleast_1d(_robust_std(states, axis=0)).tolist(),
        "rtg_mean": float(rtg.mean()),
        "rtg_std": float(_robust_std(rtg)),
    }
    if config.target_return is None:
        update["target_return"] = max(at.total_return for at in dataset)
    return config.model_copy(update=update)


def train(
    dataset: Sequence[AnnotatedTrajectory],
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    kappa: Optional[float] = None,
    eval_fn: Optional[EvalFn] = None,
    checkpoint_path: Optional[str | Path] = None,
    progress: bool = True,
) -> TrainReport:
    """Minimise the action NLL over uniformly sampled (trajectory, timestep) windows."""
    if not dataset:
        raise PreconditionError("training dataset is empty")
    if not train_config.allow_unaligned:
        check_aligned(dataset)
    dims = {(at.traj.state_dim, at.traj.action_dim) for at in dataset}
    if dims != {(model_config.state_dim, model_config.action_dim)}:
        raise PreconditionError(
            f"dataset dims {sorted(dims)} do not match model "
            f"({model_config.state_dim}, {model_config.action_dim})"
        )

    config = fit_normalization(model_config, dataset)
    policy = B2RPolicy(config, seed=train_config.seed)
    optimizer = AdamW(policy.params, train_config)
    rng = np.random.default_rng([train_config.seed, 1])
    logger.info(
        "training %d params on %d trajectories for %d steps",
        policy.num_parameters, len(dataset), train_config.total_steps,
    )

    started = time.perf_counter()
    curve: List[float] = []
    epoch_losses: List[float] = []
    scores: List[float] = []
    best, stale, stopped = -math.inf, 0, False

    bar = tqdm(total=train_config.total_steps, disable=not progress, desc="train", leave=False)
    try:
        for epoch in range(train_config.epochs):
            for _ in range(train_config.steps_per_epoch):
                step = len(curve)
                batch, _ = sample_batch(
                    dataset, train_config.batch_size, config.context_len, rng, kappa
                )
                optimizer.zero_grad()
                loss = policy.loss(batch, training=True, rng=rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLossError(step, value)
                loss.backward()
                clip_grad_norm(policy.params, train_config.grad_clip_norm)
                optimizer.step()
                curve.append(value)
                logger.debug("step %d loss %.6f", step, value)
                bar.update(1)
                bar.set_postfix(loss=f"{value:.4f}")

            epoch_loss = math.fsum(curve[-train_config.steps_per_epoch:]) / train_config.steps_per_epoch
            epoch_losses.append(epoch_loss)
            logger.info("epoch %d/%d mean loss %.5f", epoch + 1, train_config.epochs, epoch_loss)

            due = train_config.eval_every and (epoch + 1) % train_config.eval_every == 0
            if eval_fn is not None and due:
                score = float(eval_fn(policy))
                scores.append(score)
                logger.info("epoch %d eval score %.4f", epoch + 1, score)
                if score > best:
                    best, stale = score, 0
                else:
                    stale += 1
                if stale >= train_config.patience:
                    logger.info("eval score stagnated for %d evaluations; stopping", stale)
                    stopped = True
                    break
    finally:
        bar.close()

    if checkpoint_path is not None:
        policy.save(checkpoint_path)
        logger.info("checkpoint written to %s", checkpoint_path)

    return TrainReport(
        loss_curve=curve,
        policy=policy,
        seed=train_config.seed,
        wall_time=time.perf_counter() - started,
        epoch_losses=epoch_losses,
        eval_scores=scores,
        stopped_early=stopped,
        n_trajectories=len(dataset),
    )


def train_boundary_baseline(
    dataset: Sequence[AnnotatedTrajectory],
    kappa: float,
    epsilon: float,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    buffer: float = 1.0,
    **kwargs,
) -> TrainReport:
    """Train the same model on trajectories with C(tau) within epsilon of buffer*kappa, raw CTG."""
    band = boundary_band(dataset, kappa, epsilon, buffer=buffer)
    if not band:
        raise EmptyBandError(kappa, epsilon, buffer * kappa)
    raw = [annotate(at.traj) for at in band]
    logger.info(
        "boundary band [%.3f, %.3f] holds %d of %d trajectories",
        buffer * kappa - epsilon, buffer * kappa + epsilon, len(raw), len(dataset),
    )
    config = train_config.model_copy(update={"allow_unaligned": True})
    return train(raw, model_config, config, kappa=kappa, **kwargs)
