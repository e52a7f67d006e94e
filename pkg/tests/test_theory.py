import math

import numpy as np
import pytest
from pydantic import ValidationError

from b2r.cmdp import ChainParams, CostBudget
from b2r.datasets import AnnotatedTrajectory, RealignmentSpec, Strategy, realign, realign_dataset
from b2r.theory import (
    AssumptionViolationError,
    TheoryConfig,
    assumption1_audit,
    band_within_region,
    chain_theorem2_oracle,
    default_grid,
    planned_costs,
    random_theorem2_check,
    simulate_block,
    simulate_theorem1,
    theorem1_bound,
    verify_theorem2,
)

from conftest import make_annotated


# ------------------------------
# Analytic bound
# ------------------------------
def test_bound_reference_values():
    bound = theorem1_bound(TheoryConfig(sigma=0.01, delta=2.0, horizon=100, kappa=10.0))
    assert bound.slack == pytest.approx(1.0)
    assert bound.prob_bound == pytest.approx(1.0 - math.exp(-0.005))
    assert bound.prob_bound == pytest.approx(0.0049875, abs=1e-7)
    assert bound.expected_cost_bound == pytest.approx(9.0)


def test_bound_requires_slack():
    with pytest.raises(AssumptionViolationError):
        theorem1_bound(TheoryConfig(sigma=0.02, delta=2.0, horizon=100, kappa=10.0))


def test_delta_above_kappa_is_rejected():
    with pytest.raises(ValidationError, match="delta"):
        TheoryConfig(sigma=0.0, delta=3.0, horizon=5, kappa=2.0)


def test_bound_is_monotone_in_delta():
    probs = [
        theorem1_bound(TheoryConfig(sigma=0.01, delta=d, horizon=50, kappa=10.0)).prob_bound
        for d in (1.0, 2.0, 4.0, 8.0)
    ]
    assert probs == sorted(probs)
    assert probs[0] < probs[-1]


# ------------------------------
# Monte Carlo
# ------------------------------
def test_noise_free_process_never_violates():
    config = TheoryConfig(sigma=0.0, delta=2.0, horizon=20, kappa=7.0, n_trials=500)
    proc = simulate_block(config, 0, 500)
    totals = proc.costs.sum(axis=1)
    assert np.all(totals <= config.kappa - config.delta / 2)
    report = simulate_theorem1(config)
    assert report.empirical_prob == 1.0
    assert report.passed


def test_budget_telescopes_in_simulation():
    config = TheoryConfig(sigma=0.05, delta=2.0, horizon=20, kappa=10.0, n_trials=300)
    proc = simulate_block(config, 3, 300)
    np.testing.assert_allclose(proc.costs.sum(axis=1), config.kappa - proc.ctg_final, atol=1e-9)


def test_planned_costs_sum_to_margin():
    config = TheoryConfig(sigma=0.01, delta=2.0, horizon=10, kappa=6.0)
    assert planned_costs(config).sum() == pytest.approx(4.0)
    with pytest.raises(AssumptionViolationError, match="C_max"):
        planned_costs(TheoryConfig(sigma=0.0, delta=1.0, horizon=2, kappa=10.0))


def test_small_simulation_passes_every_clause():
    config = TheoryConfig(sigma=0.01, delta=1.0, horizon=20, kappa=10.0, n_trials=5000)
    report = simulate_theorem1(config)
    assert report.passed, report.clauses
    assert set(report.clauses) == {"probability", "expectation", "telescoping"}
    assert report.realized_mean_abs_error == pytest.approx(0.01, rel=0.05)
    assert report.to_dict()["passed"] is True


def test_parallel_simulation_matches_sequential():
    config = TheoryConfig(sigma=0.02, delta=1.0, horizon=20, kappa=10.0, n_trials=9000, seed=4)
    a = simulate_theorem1(config, workers=1)
    b = simulate_theorem1(config, workers=3)
    assert a.to_dict() == b.to_dict()


@pytest.mark.slow
@pytest.mark.parametrize("config", default_grid(), ids=lambda c: f"H{c.horizon}-s{c.sigma}-d{c.delta}")
def test_default_grid_holds(config):
    report = simulate_theorem1(config, workers=4)
    assert report.passed, report.clauses


# ------------------------------
# Region versus band
# ------------------------------
PAIRS = [(10.0, 4.0), (8.0, 5.0), (12.0, 7.0)]


def test_region_beats_band_on_reference_set():
    result = verify_theorem2(PAIRS, 5.0, 0.5)
    assert result.region_max == 10.0
    assert result.boundary_max == 8.0
    assert result.holds
    assert (result.region_size, result.boundary_size) == (2, 1)


def test_wide_band_equals_region():
    result = verify_theorem2(PAIRS, 5.0, 5.0)
    assert result.region_max == result.boundary_max == 10.0


def test_empty_region_holds_vacuously():
    result = verify_theorem2([(1.0, 9.0)], 5.0, 0.5)
    assert result.empty_region
    assert result.holds
    assert result.to_dict()["region_max"] is None
    assert result.to_dict()["boundary_max"] is None


def test_band_width_must_be_positive():
    with pytest.raises(ValueError):
        verify_theorem2(PAIRS, 5.0, 0.0)


def test_accepts_annotated_trajectories(three_cost_dataset):
    result = verify_theorem2(three_cost_dataset, 5.0, 0.5)
    assert result.region_max == 10.0
    assert result.boundary_max == 10.0
    assert band_within_region(three_cost_dataset, 5.0, 0.5)


def test_random_datasets_never_fail():
    summary = random_theorem2_check(n_datasets=500, seed=1, max_size=12)
    assert summary["holds"]
    assert summary["failures"] == 0
    assert summary["first_failure"] is None


@pytest.mark.slow
def test_random_datasets_never_fail_at_scale():
    assert random_theorem2_check(n_datasets=10_000, seed=0)["holds"]


def test_chain_oracle():
    params = ChainParams(n_states=5, hazard=frozenset({3}), horizon=4, start=2)
    result = chain_theorem2_oracle(params, 1.0, 0.5)
    assert result.holds
    assert result.region_max >= result.boundary_max
    assert 0 < result.region_size < 81
    assert result.boundary_size <= result.region_size


# ------------------------------
# Safe-aligned audit
# ------------------------------
def _raw():
    return [make_annotated(c, seed=i) for i, c in enumerate(([1.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0]))]


@pytest.mark.parametrize("strategy", list(Strategy))
def test_audit_accepts_realigned_data(strategy):
    spec = RealignmentSpec(strategy, CostBudget(4.0), rng_seed=2)
    dataset = realign_dataset(_raw(), spec).dataset
    result = assumption1_audit(dataset)
    assert result.passed
    assert result.checked == 2


def test_audit_finds_tampered_token():
    spec = RealignmentSpec(Strategy.SHIFT, CostBudget(4.0))
    at = realign(make_annotated([1.0, 0.0, 1.0, 0.0, 0.0]), spec)
    ctg = at.ctg.copy()
    ctg[2] += 0.1
    tampered = AnnotatedTrajectory(at.traj, at.rtg, ctg, kappa_tag=at.kappa_tag, strategy=at.strategy)
    result = assumption1_audit([at, tampered])
    assert not result.passed
    assert result.violation.trajectory == 1
    assert result.violation.t == 1
    assert result.violation.clause == "ctg_recursion"


def test_audit_rejects_untagged_data():
    result = assumption1_audit(_raw())
    assert result.violation.clause == "initial_ctg"
    assert result.checked == 1


def test_audit_on_empty_dataset():
    result = assumption1_audit([])
    assert result.passed
    assert result.checked == 0
    assert result.warnings
