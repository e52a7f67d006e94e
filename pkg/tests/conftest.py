from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import pytest

from b2r.adapters import save_dataset
from b2r.cmdp import Trajectory
from b2r.datasets import AnnotatedTrajectory, DatasetManifest, annotate
from b2r.policy import ModelConfig


def make_trajectory(
    costs: Sequence[float],
    rewards: Optional[Sequence[float]] = None,
    *,
    env_id: str = "chain",
    seed: int = 0,
) -> Trajectory:
    rng = np.random.default_rng(seed)
    h = len(costs)
    return Trajectory(
        states=rng.normal(size=(h, 1)),
        actions=rng.uniform(-1.0, 1.0, size=(h, 1)),
        rewards=list(rewards) if rewards is not None else rng.uniform(0.0, 1.0, size=h),
        costs=list(costs),
        env_id=env_id,
    )


def make_annotated(
    costs: Sequence[float], rewards: Optional[Sequence[float]] = None, **kw
) -> AnnotatedTrajectory:
    return annotate(make_trajectory(costs, rewards, **kw))


def tiny_model_config(**overrides) -> ModelConfig:
    fields = dict(
        state_dim=1,
        action_dim=1,
        hidden_dim=8,
        n_heads=2,
        n_layers=1,
        dropout=0.0,
        context_len=3,
        action_low=[-1.0],
        action_high=[1.0],
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture
def three_cost_dataset():
    """Trajectories with C(tau) = 3, 5, 7 built from unit per-step costs."""
    return [
        make_annotated([1.0] * 3, [1.0] * 3, seed=1),
        make_annotated([1.0] * 5, [2.0] * 5, seed=2),
        make_annotated([1.0] * 7, [3.0] * 7, seed=3),
    ]


@pytest.fixture
def three_cost_file(tmp_path, three_cost_dataset):
    path = tmp_path / "fixture.jsonl"
    returns = [at.total_return for at in three_cost_dataset]
    manifest = DatasetManifest(
        env_id="chain",
        total=3,
        kept=3,
        dropped=0,
        seed=0,
        reward_min=min(returns),
        reward_max=max(returns),
        env_params={"n_states": 8, "horizon": 7},
    )
    save_dataset(path, three_cost_dataset, manifest)
    return path
