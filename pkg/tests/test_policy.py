import math

import numpy as np
import pytest
from pydantic import ValidationError

from b2r.autograd import gradient_check
from b2r.policy import (
    B2RPolicy,
    ModelConfig,
    NonFiniteActivationError,
    TokenBatch,
    build_window,
    forward,
    init_params,
    nll_loss,
    predict,
    tokenize,
)
from b2r.cmdp import CostBudget
from b2r.datasets import RealignmentSpec, Strategy, realign

from conftest import make_annotated, tiny_model_config


def _realigned(h=12, kappa=4.0, seed=0):
    costs = [1.0 if i % 5 == 0 else 0.0 for i in range(h)]
    return realign(make_annotated(costs, seed=seed), RealignmentSpec(Strategy.SHIFT, CostBudget(kappa)))


def _batch(windows):
    return TokenBatch.from_windows(windows)


# ------------------------------
# Config
# ------------------------------
def test_config_validation():
    with pytest.raises(ValidationError, match="divisible"):
        ModelConfig(state_dim=1, action_dim=1, hidden_dim=10, n_heads=4)
    with pytest.raises(ValidationError, match="RoPE"):
        ModelConfig(state_dim=1, action_dim=1, hidden_dim=12, n_heads=4)
    ModelConfig(state_dim=1, action_dim=1, hidden_dim=12, n_heads=4, positional="absolute")
    with pytest.raises(ValidationError, match="state_mean"):
        ModelConfig(state_dim=2, action_dim=1, hidden_dim=8, n_heads=2, state_mean=[0.0])


# ------------------------------
# Tokenization
# ------------------------------
def test_window_at_episode_start_is_mostly_padding():
    window = tokenize(_realigned(), 0, 10)
    assert window.n_real == 1
    assert window.mask.tolist() == [False] * 9 + [True]
    assert window.kappa == 4.0


def test_window_full_when_history_is_long_enough():
    at = _realigned()
    window = tokenize(at, 10, 10)
    assert window.mask.all()
    np.testing.assert_array_equal(window.ctg, at.ctg[1:11])
    np.testing.assert_array_equal(window.rtg, at.rtg[1:11])
    np.testing.assert_array_equal(window.states, at.traj.states[1:11])


def test_tokenize_out_of_range():
    with pytest.raises(IndexError):
        tokenize(_realigned(h=3), 3, 4)


def test_build_window_rejects_ragged_history():
    with pytest.raises(ValueError):
        build_window([1.0, 2.0], [1.0], np.zeros((2, 1)), np.zeros((2, 1)), 4, 1.0)


# ------------------------------
# Forward pass
# ------------------------------
@pytest.mark.parametrize("positional", ["rope", "absolute"])
def test_forward_shapes(positional):
    config = tiny_model_config(positional=positional)
    params = init_params(config, seed=0)
    batch = _batch([tokenize(_realigned(), t, 3) for t in (0, 4, 9)])
    mu, log_std = forward(params, batch, config)
    assert mu.shape == (3, 3, 1)
    assert log_std.shape == (1,)
    assert ("embed.position" in params) == (positional == "absolute")


def test_action_token_does_not_leak_into_its_prediction():
    config = tiny_model_config()
    params = init_params(config, seed=1)
    window = tokenize(_realigned(), 6, 3)
    altered = build_window(
        window.rtg, window.ctg, window.states,
        np.vstack([window.actions[:-1], [[0.9]]]), 3, window.kappa,
    )
    mu_a, _ = predict(params, window, config)
    mu_b, _ = predict(params, altered, config)
    np.testing.assert_allclose(mu_a, mu_b, rtol=0, atol=1e-12)


def test_prediction_ignores_where_history_sits_in_the_window():
    config = tiny_model_config(n_layers=2)
    params = init_params(config, seed=3)
    at = _realigned()
    history = (at.rtg[4:7], at.ctg[4:7], at.traj.states[4:7], at.traj.actions[4:7])
    mu_short, _ = predict(params, build_window(*history, 3, 4.0), config)
    mu_padded, _ = predict(params, build_window(*history, 6, 4.0), config)
    np.testing.assert_allclose(mu_padded, mu_short, rtol=0, atol=1e-10)


def test_identical_windows_identical_outputs():
    config = tiny_model_config()
    params = init_params(config, seed=2)
    window = tokenize(_realigned(), 5, 3)
    mu, _ = forward(params, _batch([window, window]), config)
    np.testing.assert_allclose(mu.data[0], mu.data[1], rtol=0, atol=1e-12)


def test_fresh_model_outputs_are_small():
    config = tiny_model_config(hidden_dim=16, n_heads=2, n_layers=2)
    params = init_params(config, seed=3)
    mu, _ = forward(params, _batch([tokenize(_realigned(), t, 3) for t in range(6)]), config)
    assert np.max(np.abs(mu.data)) < 1.0


def test_non_finite_activation_names_layer():
    config = tiny_model_config(n_layers=2)
    params = init_params(config, seed=0)
    params["blocks.1.mlp.b2"].data[:] = np.inf
    with pytest.raises(NonFiniteActivationError, match="layer 1"):
        forward(params, _batch([tokenize(_realigned(), 2, 3)]), config)


# ------------------------------
# Loss
# ------------------------------
def _zero_mean_params(config):
    params = init_params(config, seed=0)
    params["head.mu.w"].data[:] = 0.0
    params["head.mu.b"].data[:] = 0.0
    return params


@pytest.mark.parametrize("action_dim", [1, 3])
def test_nll_at_the_mean_with_unit_sigma(action_dim):
    config = tiny_model_config(action_dim=action_dim, action_low=None, action_high=None)
    params = _zero_mean_params(config)
    window = build_window([1.0, 0.5], [2.0, 1.0], np.zeros((2, 1)),
                          np.zeros((2, action_dim)), 3, 2.0)
    loss = nll_loss(params, _batch([window]), config)
    assert loss.item() == pytest.approx(action_dim * 0.5 * math.log(2 * math.pi))
    assert loss.item() == pytest.approx(0.91894 * action_dim, abs=1e-5)


def test_smaller_sigma_lowers_loss_at_the_mean():
    config = tiny_model_config()
    params = _zero_mean_params(config)
    window = build_window([1.0], [2.0], np.zeros((1, 1)), np.zeros((1, 1)), 3, 2.0)
    batch = _batch([window])
    losses = []
    for log_std in (0.0, -0.5, -1.0):
        params["head.log_std"].data[:] = log_std
        losses.append(nll_loss(params, batch, config).item())
    assert losses[0] > losses[1] > losses[2]


def test_loss_ignores_batch_order():
    config = tiny_model_config(hidden_dim=16, n_heads=2, n_layers=2, context_len=4)
    params = init_params(config, seed=2)
    windows = [tokenize(_realigned(seed=s), t, 4) for s in range(3) for t in (0, 2, 5, 11)]
    base = nll_loss(params, _batch(windows), config).item()
    rng = np.random.default_rng(0)
    for _ in range(5):
        order = rng.permutation(len(windows))
        shuffled = nll_loss(params, _batch([windows[i] for i in order]), config).item()
        assert abs(shuffled - base) <= 1e-12


def _gradient_fixture():
    config = tiny_model_config(hidden_dim=16, n_heads=2, n_layers=2, context_len=4)
    params = init_params(config, seed=4)
    for p in params.values():
        p.data += np.random.default_rng(5).normal(0.0, 0.05, size=p.shape)
    at = _realigned(h=8)
    batch = _batch([tokenize(at, t, 4) for t in (1, 3, 5, 7)])
    return (lambda: nll_loss(params, batch, config)), params


def test_full_policy_gradient_matches_finite_differences():
    loss, params = _gradient_fixture()
    report = gradient_check(loss, params, h=1e-5, tol=1e-4, max_coords=24, seed=11)
    assert report.checked == sum(min(24, p.size) for p in params.values())
    assert report.passed, report.failures[:3]


@pytest.mark.slow
def test_full_policy_gradient_every_coordinate():
    loss, params = _gradient_fixture()
    report = gradient_check(loss, params, h=1e-5, tol=1e-4)
    assert report.checked == sum(p.size for p in params.values())
    assert report.passed, report.failures[:3]


# ------------------------------
# Sampling and the wrapper
# ------------------------------
def test_mean_mode_is_deterministic_and_clamped():
    config = tiny_model_config()
    policy = B2RPolicy(config, seed=0)
    policy.params["head.mu.b"].data[:] = 5.0
    window = tokenize(_realigned(), 3, 3)
    a1, a2 = policy.act(window), policy.act(window)
    np.testing.assert_array_equal(a1, a2)
    assert a1.tolist() == [1.0]


def test_tiny_sigma_sample_equals_mean():
    config = tiny_model_config(action_low=None, action_high=None, log_std_min=-30.0)
    policy = B2RPolicy(config, seed=0)
    policy.params["head.log_std"].data[:] = -30.0
    window = tokenize(_realigned(), 3, 3)
    np.testing.assert_allclose(policy.act(window, "sample", 0), policy.act(window), atol=1e-10)


def test_unknown_action_mode():
    policy = B2RPolicy(tiny_model_config())
    with pytest.raises(ValueError):
        policy.act(tokenize(_realigned(), 0, 3), "greedy")


def test_save_and_load(tmp_path):
    policy = B2RPolicy(tiny_model_config(env_id="chain"), seed=9)
    path = policy.save(tmp_path / "p.ckpt")
    loaded = B2RPolicy.load(path)
    assert loaded.config == policy.config
    window = tokenize(_realigned(), 4, 3)
    np.testing.assert_array_equal(loaded.act(window), policy.act(window))


def test_state_dict_must_fit_model():
    config = tiny_model_config()
    state = B2RPolicy(config).state_dict()
    state.pop("head.log_std")
    with pytest.raises(ValueError, match="missing"):
        B2RPolicy.from_state_dict(config, state)
