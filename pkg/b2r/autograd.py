"""Small float64 reverse-mode autodiff: a Tensor, a topologically ordered tape and the
primitives the policy network is built from."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

MASK_VALUE = -1e9
GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class Tensor:
    """n-d float64 array that remembers how it was produced."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "",
        name: Optional[str] = None,
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[ArrayLike] = None) -> "ComputationTape":
        tape = ComputationTape.from_root(self)
        tape.backward(grad)
        return tape

    # operator sugar
    def __add__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


def as_tensor(value: "Tensor | ArrayLike") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=tuple(parents) if needs else (),
        _backward=backward if needs else None,
        op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ------------------------------
# Tape
# ------------------------------
@dataclass
class ComputationTape:
    """Nodes reachable from a root, parents always before children."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited: set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def root(self) -> Tensor:
        return self.nodes[-1]

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        root = self.root
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"backward needs an explicit gradient for shape {root.shape}")
            seed = np.ones_like(root.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), root.shape).copy()

        pending: Dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


# ------------------------------
# Elementwise
# ------------------------------
def add(a: Tensor | ArrayLike, b: Tensor | ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor | ArrayLike, b: Tensor | ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor | ArrayLike, b: Tensor | ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _node(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _node(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _node(out, (a,), backward, "gelu")


def dropout(
    a: Tensor,
    p: float,
    rng: Optional[np.random.Generator | int] = None,
    *,
    training: bool = True,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout. Identity when not training or p == 0; a fixed mask may be supplied."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if mask is None:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        mask = gen.random(a.shape) >= p
    keep = np.asarray(mask, dtype=np.float64) / (1.0 - p)
    if keep.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {keep.shape} does not match input {a.shape}")
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ------------------------------
# Reductions and shape ops
# ------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ------------------------------
# Linear algebra and attention pieces
# ------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot broadcast batch dims of {a.shape} and {b.shape}") from exc

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


def softmax(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is added to the logits before normalising."""
    logits = a.data if mask is None else a.data + np.asarray(mask, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dim {n}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray):
        dxhat = g * gamma.data
        dx = inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (a, gamma, beta), backward, "layer_norm")


def embed_lookup(table: Tensor, indices: ArrayLike) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: index out of range for table {table.shape}")

    def backward(g: np.ndarray):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.data[idx], (table,), backward, "embed_lookup")


def rope_angles(positions: Sequence[int] | np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    if dim % 2:
        raise ShapeError(f"RoPE needs an even feature dimension, got {dim}")
    theta = base ** (-2.0 * np.arange(dim // 2) / dim)
    return np.outer(np.asarray(positions, dtype=np.float64), theta)


def apply_rope(x: Tensor, positions: Sequence[int] | np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate each pair (x_2i, x_2i+1) at position p by p * base^(-2i/dim)."""
    seq, dim = x.shape[-2], x.shape[-1]
    angles = rope_angles(positions, dim, base)
    if angles.shape[0] != seq:
        raise ShapeError(f"apply_rope: {angles.shape[0]} positions for sequence length {seq}")
    cos, sin = np.cos(angles), np.sin(angles)

    def rotate(data: np.ndarray, sign: float) -> np.ndarray:
        even, odd = data[..., 0::2], data[..., 1::2]
        out = np.empty_like(data)
        out[..., 0::2] = even * cos - sign * odd * sin
        out[..., 1::2] = sign * even * sin + odd * cos
        return out

    return _node(rotate(x.data, 1.0), (x,), lambda g: (rotate(g, -1.0),), "rope")


def causal_mask(seq: int) -> np.ndarray:
    return np.tril(np.ones((seq, seq), dtype=bool))


def additive_mask(allowed: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(allowed, dtype=bool), 0.0, MASK_VALUE)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v. ``mask`` is a boolean "may attend" array,
    broadcastable to (..., seq, seq); defaults to lower-triangular."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    seq = q.shape[-2]
    allowed = causal_mask(seq) if mask is None else np.asarray(mask, dtype=bool)
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, additive_mask(allowed))
    return matmul(weights, v)


# ------------------------------
# Finite-difference check
# ------------------------------
@dataclass
class GradCheckFailure:
    param: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    tol: float
    failures: List[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    floor: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences (f(x+h) - f(x-h)) / 2h.

    Relative error is |a - n| / max(|a|, |n|, floor). With ``max_coords`` each parameter is
    checked on that many coordinates drawn without replacement (seeded); otherwise on all.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be > 0")
    named = dict(params) if isinstance(params, Mapping) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)
    }
    for p in named.values():
        p.zero_grad()
    f().backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named.items()
    }

    rng = np.random.default_rng(seed)
    failures: List[GradCheckFailure] = []
    worst, checked = 0.0, 0
    for name, p in named.items():
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and max_coords < len(coords):
            picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
            coords = [coords[i] for i in picked]
        for index in coords:
            original = p.data[index]
            p.data[index] = original + h
            up = float(f().data)
            p.data[index] = original - h
            down = float(f().data)
            p.data[index] = original
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name][index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            checked += 1
            if rel > tol:
                failures.append(GradCheckFailure(name, tuple(int(i) for i in index), a, numeric, rel))
    return GradCheckReport(checked=checked, max_rel_error=worst, tol=tol, failures=failures)
