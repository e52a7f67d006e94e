"""Transformer policy over interleaved (RTG, CTG, state, action) tokens with a Gaussian action head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import autograd as ag
from .autograd import Tensor
from .datasets import AnnotatedTrajectory

logger = logging.getLogger(__name__)

TOKENS_PER_STEP = 4  # (rtg, ctg, state, action)
STATE_SLOT = 2
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteActivationError(FloatingPointError):
    """An intermediate activation became NaN or infinite."""

    def __init__(self, where: str, layer: Optional[int] = None):
        self.layer = layer
        super().__init__(
            f"non-finite activation in {where}" + (f" (layer {layer})" if layer is not None else "")
        )


class ModelConfig(BaseModel):
    state_dim: int = Field(ge=1)
    action_dim: int = Field(ge=1)
    hidden_dim: int = Field(default=64, ge=2)
    n_heads: int = Field(default=8, ge=1)
    n_layers: int = Field(default=2, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    context_len: int = Field(default=10, ge=1)
    init_scale: float = Field(default=0.02, gt=0.0)
    rope_base: float = Field(default=10000.0, gt=1.0)
    positional: Literal["rope", "absolute"] = "rope"
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    ln_eps: float = 1e-5

    # token normalisation, filled from the training set
    state_mean: Optional[List[float]] = None
    state_std: Optional[List[float]] = None
    rtg_mean: float = 0.0
    rtg_std: float = Field(default=1.0, gt=0.0)

    action_low: Optional[List[float]] = None
    action_high: Optional[List[float]] = None
    discrete_actions: bool = False
    env_id: str = ""
    env_params: Dict[str, Any] = Field(default_factory=dict)
    target_return: Optional[float] = None

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if self.hidden_dim % self.n_heads:
            raise ValueError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.positional == "rope" and (self.hidden_dim // self.n_heads) % 2:
            raise ValueError("RoPE needs an even per-head dimension")
        if self.log_std_min >= self.log_std_max:
            raise ValueError("log_std_min must be < log_std_max")
        for name, dim in (("state_mean", self.state_dim), ("state_std", self.state_dim),
                          ("action_low", self.action_dim), ("action_high", self.action_dim)):
            value = getattr(self, name)
            if value is not None and len(value) != dim:
                raise ValueError(f"{name} must have {dim} entries, got {len(value)}")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def seq_len(self) -> int:
        return TOKENS_PER_STEP * self.context_len


# ------------------------------
# Token windows
# ------------------------------
@dataclass(frozen=True, eq=False)
class TokenWindow:
    """K time-aligned slots ending at timestep t; slots before the episode start are padding."""

    rtg: np.ndarray
    ctg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    mask: np.ndarray
    kappa: float

    @property
    def context_len(self) -> int:
        return int(self.mask.shape[0])

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


def build_window(
    rtg: Sequence[float],
    ctg: Sequence[float],
    states: np.ndarray,
    actions: np.ndarray,
    context_len: int,
    kappa: float,
) -> TokenWindow:
    """Left-pad the last ``context_len`` entries of each history into a window.

    ``actions`` has one row per state; the row for the current state is its target (or zeros).
    """
    rtg_a = np.asarray(rtg, dtype=np.float64).reshape(-1)
    ctg_a = np.asarray(ctg, dtype=np.float64).reshape(-1)
    states_a = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions_a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    n = rtg_a.shape[0]
    if not (ctg_a.shape[0] == states_a.shape[0] == actions_a.shape[0] == n) or n == 0:
        raise ValueError("window histories must be non-empty and equally long")

    take = min(n, context_len)
    pad = context_len - take

    def _pad(values: np.ndarray) -> np.ndarray:
        tail = values[n - take:]
        filler = np.zeros((pad,) + tail.shape[1:], dtype=np.float64)
        return np.concatenate([filler, tail], axis=0)

    mask = np.concatenate([np.zeros(pad, dtype=bool), np.ones(take, dtype=bool)])
    return TokenWindow(
        rtg=_pad(rtg_a),
        ctg=_pad(ctg_a),
        states=_pad(states_a),
        actions=_pad(actions_a),
        mask=mask,
        kappa=float(kappa),
    )


def tokenize(
    at: AnnotatedTrajectory, t: int, context_len: int, kappa: Optional[float] = None
) -> TokenWindow:
    """Context o_t over timesteps t-K+1..t of a (realigned) trajectory."""
    if not 0 <= t < at.horizon:
        raise IndexError(f"timestep {t} outside [0, {at.horizon - 1}]")
    if kappa is None:
        kappa = at.kappa_tag if at.kappa_tag is not None else float(at.ctg[0])
    lo = t + 1 - min(t + 1, context_len)
    return build_window(
        at.rtg[lo:t + 1],
        at.ctg[lo:t + 1],
        at.traj.states[lo:t + 1],
        at.traj.actions[lo:t + 1],
        context_len,
        kappa,
    )


@dataclass(frozen=True, eq=False)
class TokenBatch:
    rtg: np.ndarray  # (B, K)
    ctg: np.ndarray  # (B, K)
    states: np.ndarray  # (B, K, state_dim)
    actions: np.ndarray  # (B, K, action_dim)
    mask: np.ndarray  # (B, K)
    kappa: np.ndarray  # (B,)

    @classmethod
    def from_windows(cls, windows: Sequence[TokenWindow]) -> "TokenBatch":
        if not windows:
            raise ValueError("cannot batch zero windows")
        return cls(
            rtg=np.stack([w.rtg for w in windows]),
            ctg=np.stack([w.ctg for w in windows]),
            states=np.stack([w.states for w in windows]),
            actions=np.stack([w.actions for w in windows]),
            mask=np.stack([w.mask for w in windows]),
            kappa=np.array([w.kappa for w in windows], dtype=np.float64),
        )

    @property
    def size(self) -> int:
        return int(self.rtg.shape[0])

    @property
    def context_len(self) -> int:
        return int(self.rtg.shape[1])


# ------------------------------
# Parameters
# ------------------------------
PolicyParams = Dict[str, Tensor]


def init_params(config: ModelConfig, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    d, s = config.hidden_dim, config.init_scale

    def normal(*shape: int) -> np.ndarray:
        return rng.normal(0.0, s, size=shape)

    shapes: Dict[str, np.ndarray] = {
        "embed.rtg.w": normal(1, d),
        "embed.rtg.b": np.zeros(d),
        "embed.ctg.w": normal(1, d),
        "embed.ctg.b": np.zeros(d),
        "embed.state.w": normal(config.state_dim, d),
        "embed.state.b": np.zeros(d),
        "embed.action.w": normal(config.action_dim, d),
        "embed.action.b": np.zeros(d),
        "embed.type": normal(TOKENS_PER_STEP, d),
    }
    if config.positional == "absolute":
        shapes["embed.position"] = normal(config.seq_len, d)
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        shapes.update({
            f"{p}.ln1.gamma": np.ones(d),
            f"{p}.ln1.beta": np.zeros(d),
            f"{p}.attn.wq": normal(d, d),
            f"{p}.attn.wk": normal(d, d),
            f"{p}.attn.wv": normal(d, d),
            f"{p}.attn.wo": normal(d, d),
            f"{p}.ln2.gamma": np.ones(d),
            f"{p}.ln2.beta": np.zeros(d),
            f"{p}.mlp.w1": normal(d, 4 * d),
            f"{p}.mlp.b1": np.zeros(4 * d),
            f"{p}.mlp.w2": normal(4 * d, d),
            f"{p}.mlp.b2": np.zeros(d),
        })
    shapes.update({
        "final_ln.gamma": np.ones(d),
        "final_ln.beta": np.zeros(d),
        "head.mu.w": normal(d, config.action_dim),
        "head.mu.b": np.zeros(config.action_dim),
        "head.log_std": np.zeros(config.action_dim),
    })
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in shapes.items()}


def parameter_count(params: PolicyParams) -> int:
    return sum(p.size for p in params.values())


# ------------------------------
# Forward pass
# ------------------------------
def _attention_mask(batch_mask: np.ndarray) -> np.ndarray:
    """(B, 1, T, T) mask: causal, and padded keys hidden from every query but themselves."""
    real = np.repeat(batch_mask, TOKENS_PER_STEP, axis=1)  # (B, T)
    seq = real.shape[1]
    causal = ag.causal_mask(seq)[None, :, :]
    diagonal = np.eye(seq, dtype=bool)[None, :, :]
    allowed = causal & (real[:, None, :] | diagonal)
    return allowed[:, None, :, :]


def _linear(x: Tensor, params: PolicyParams, prefix: str) -> Tensor:
    return ag.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def _embed(params: PolicyParams, batch: TokenBatch, config: ModelConfig) -> Tensor:
    b, k = batch.size, batch.context_len
    kappa = np.where(batch.kappa > 0, batch.kappa, 1.0)[:, None]
    rtg = ((batch.rtg - config.rtg_mean) / config.rtg_std)[..., None]
    ctg = (batch.ctg / kappa)[..., None]
    states = batch.states
    if config.state_mean is not None and config.state_std is not None:
        states = (states - np.asarray(config.state_mean)) / np.asarray(config.state_std)

    tokens = [
        _linear(Tensor(rtg), params, "embed.rtg"),
        _linear(Tensor(ctg), params, "embed.ctg"),
        _linear(Tensor(states), params, "embed.state"),
        _linear(Tensor(batch.actions), params, "embed.action"),
    ]
    d = config.hidden_dim
    typed = [
        ag.reshape(tok + params["embed.type"][i], (b, k, 1, d)) for i, tok in enumerate(tokens)
    ]
    h = ag.reshape(ag.concat(typed, axis=2), (b, k * TOKENS_PER_STEP, d))
    if config.positional == "absolute":
        h = h + params["embed.position"]
    return h


def _self_attention(
    x: Tensor, params: PolicyParams, prefix: str, config: ModelConfig, mask: np.ndarray
) -> Tensor:
    b, seq, d = x.shape
    heads, hd = config.n_heads, config.head_dim

    def split(w: str) -> Tensor:
        projected = ag.matmul(x, params[f"{prefix}.{w}"])
        return ag.transpose(ag.reshape(projected, (b, seq, heads, hd)), (0, 2, 1, 3))

    q, k, v = split("wq"), split("wk"), split("wv")
    if config.positional == "rope":
        positions = np.arange(seq)
        q = ag.apply_rope(q, positions, config.rope_base)
        k = ag.apply_rope(k, positions, config.rope_base)
    attended = ag.causal_attention(q, k, v, mask)
    merged = ag.reshape(ag.transpose(attended, (0, 2, 1, 3)), (b, seq, d))
    return ag.matmul(merged, params[f"{prefix}.wo"])


def forward(
    params: PolicyParams,
    batch: TokenBatch,
    config: ModelConfig,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Tensor]:
    """Returns mu of shape (B, K, action_dim), read at each state token, and the clipped log-std."""
    p_drop = config.dropout if training else 0.0
    mask = _attention_mask(batch.mask)
    h = ag.dropout(_embed(params, batch, config), p_drop, rng, training=training)

    for i in range(config.n_layers):
        prefix = f"blocks.{i}"
        a = ag.layer_norm(h, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"], config.ln_eps)
        h = h + ag.dropout(_self_attention(a, params, f"{prefix}.attn", config, mask),
                           p_drop, rng, training=training)
        m = ag.layer_norm(h, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"], config.ln_eps)
        m = ag.gelu(ag.matmul(m, params[f"{prefix}.mlp.w1"]) + params[f"{prefix}.mlp.b1"])
        m = ag.matmul(m, params[f"{prefix}.mlp.w2"]) + params[f"{prefix}.mlp.b2"]
        h = h + ag.dropout(m, p_drop, rng, training=training)
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteActivationError("transformer block", layer=i)

    h = ag.layer_norm(h, params["final_ln.gamma"], params["final_ln.beta"], config.ln_eps)
    b, k = batch.size, batch.context_len
    state_tokens = ag.reshape(h, (b, k, TOKENS_PER_STEP, config.hidden_dim))[:, :, STATE_SLOT, :]
    mu = ag.matmul(state_tokens, params["head.mu.w"]) + params["head.mu.b"]
    if not np.all(np.isfinite(mu.data)):
        raise NonFiniteActivationError("action head")
    log_std = ag.clip(params["head.log_std"], config.log_std_min, config.log_std_max)
    return mu, log_std


def nll_loss(
    params: PolicyParams,
    batch: TokenBatch,
    config: ModelConfig,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mean over real (non-padded) slots of -log N(a_t; mu_t, diag sigma^2)."""
    mu, log_std = forward(params, batch, config, training=training, rng=rng)
    weights = batch.mask.astype(np.float64)
    count = weights.sum()
    if count == 0:
        raise ValueError("nll_loss needs at least one real position")

    z = (Tensor(batch.actions) - mu) * ag.exp(-log_std)
    per_dim = ag.scale(z * z, 0.5) + log_std + HALF_LOG_2PI
    per_slot = ag.tsum(per_dim, axis=-1)
    return ag.scale(ag.tsum(per_slot * weights), 1.0 / count)


def predict(
    params: PolicyParams, window: TokenWindow, config: ModelConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """(mu, log_std) for the last slot of one window, dropout off."""
    mu, log_std = forward(params, TokenBatch.from_windows([window]), config)
    return mu.data[0, -1].copy(), log_std.data.copy()


def sample_action(
    params: PolicyParams,
    window: TokenWindow,
    config: ModelConfig,
    mode: Literal["mean", "sample"] = "mean",
    rng: Optional[np.random.Generator | int] = None,
) -> np.ndarray:
    mu, log_std = predict(params, window, config)
    if mode == "sample":
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        action = mu + np.exp(log_std) * gen.standard_normal(mu.shape)
    elif mode == "mean":
        action = mu
    else:
        raise ValueError(f"action mode must be 'mean' or 'sample', got {mode!r}")
    if config.action_low is not None and config.action_high is not None:
        action = np.clip(action, config.action_low, config.action_high)
    return action


# ------------------------------
# Policy wrapper
# ------------------------------
class B2RPolicy:
    """Config plus named parameters; the unit that is trained, saved and rolled out."""

    def __init__(self, config: ModelConfig, params: Optional[PolicyParams] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def __repr__(self) -> str:
        c = self.config
        return f"B2RPolicy(layers={c.n_layers}, hidden={c.hidden_dim}, params={self.num_parameters})"

    @property
    def num_parameters(self) -> int:
        return parameter_count(self.params)

    def loss(self, batch: TokenBatch, *, training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tensor:
        return nll_loss(self.params, batch, self.config, training=training, rng=rng)

    def act(self, window: TokenWindow, mode: Literal["mean", "sample"] = "mean",
            rng: Optional[np.random.Generator | int] = None) -> np.ndarray:
        return sample_action(self.params, window, self.config, mode, rng)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    @classmethod
    def from_state_dict(cls, config: ModelConfig, state: Dict[str, np.ndarray]) -> "B2RPolicy":
        expected = init_params(config, seed=0)
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise ValueError(f"checkpoint does not fit the model: missing={missing} extra={extra}")
        params: PolicyParams = {}
        for name, ref in expected.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != ref.shape:
                raise ag.ShapeError(f"{name}: checkpoint shape {value.shape}, model expects {ref.shape}")
            params[name] = Tensor(value, requires_grad=True, name=name)
        return cls(config, params)

    def save(self, path: str | Path) -> Path:
        from .adapters import save_checkpoint

        return save_checkpoint(path, self.state_dict(), self.config.model_dump())

    @classmethod
    def load(cls, path: str | Path) -> "B2RPolicy":
        from .adapters import load_checkpoint

        state, raw_config = load_checkpoint(path)
        return cls.from_state_dict(ModelConfig.model_validate(raw_config), state)
