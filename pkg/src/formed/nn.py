"""Neural building blocks on top of :mod:`formed.tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .tensor import NonFiniteError, Tensor, _sigmoid, as_tensor

__all__ = [
    "Parameter",
    "ResidualBlockWeights",
    "AttentionWeights",
    "LayerNormWeights",
    "linear",
    "residual_block",
    "softmax",
    "log_softmax",
    "layer_norm",
    "multi_head_attention",
    "cross_entropy",
    "binary_cross_entropy",
    "mse_loss",
    "adam_update",
    "Adam",
    "AttentionError",
]


class AttentionError(ValueError):
    pass


class Parameter(Tensor):
    """A leaf tensor owned by a model.  Frozen parameters never receive gradients."""

    __slots__ = ("trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = "", dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.trainable = trainable
        self.name = name

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.trainable = True
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Weights:
    """Mixin giving dataclass weight containers a flat ``name -> Parameter`` view."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield key, value
            elif isinstance(value, Weights):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Weights):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.trainable or not trainable_only)


@dataclass(eq=False)
class ResidualBlockWeights(Weights):
    """``y = W_out . swish(W_hidden . x + b_hidden) + b_out + W_skip . x``"""

    w_hidden: Parameter
    b_hidden: Parameter
    w_out: Parameter
    b_out: Parameter
    w_skip: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> "ResidualBlockWeights":
        return cls(
            w_hidden=Parameter(_glorot(rng, d_in, d_hidden)),
            b_hidden=Parameter(np.zeros(d_hidden)),
            w_out=Parameter(_glorot(rng, d_hidden, d_out)),
            b_out=Parameter(np.zeros(d_out)),
            w_skip=Parameter(_glorot(rng, d_in, d_out)),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w_hidden.shape[0], self.w_hidden.shape[1], self.w_out.shape[1]


@dataclass(eq=False)
class AttentionWeights(Weights):
    w_query: Parameter
    w_key: Parameter
    w_value: Parameter
    w_output: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "AttentionWeights":
        return cls(*(Parameter(_glorot(rng, dim, dim)) for _ in range(4)))


@dataclass(eq=False)
class LayerNormWeights(Weights):
    gain: Parameter
    bias: Parameter

    @classmethod
    def init(cls, dim: int) -> "LayerNormWeights":
        return cls(Parameter(np.ones(dim)), Parameter(np.zeros(dim)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    if x.ndim == 1:
        y = (x.reshape(1, -1) @ w).reshape(w.shape[1])
    else:
        y = x @ w
    return y if b is None else y + b


def residual_block(x: Tensor, w: ResidualBlockWeights) -> Tensor:
    hidden = linear(x, w.w_hidden, w.b_hidden).swish()
    return linear(hidden, w.w_out, w.b_out) + linear(x, w.w_skip)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable to ``x``) marks entries that are excluded; they get
    probability exactly zero and never influence the others.
    """
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    data = x.data
    if mask is None:
        shifted = data - data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if mask.all(axis=axis).any():
            raise AttentionError("no attendable keys")
        safe = np.where(mask, -np.inf, data)
        shifted = np.where(mask, 0.0, data - safe.max(axis=axis, keepdims=True))
        e = np.where(mask, 0.0, np.exp(shifted))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    data = x.data
    shifted = data - data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, w: LayerNormWeights, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * w.gain + w.bias


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes).reshape(*lead, n, h * dh)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    w: AttentionWeights,
    heads: int,
    key_mask: np.ndarray | None = None,
    attn_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    Shapes: query ``(..., Nq, D)``, key/value ``(..., Nk, D)``.  ``key_mask``
    ``(..., Nk)`` and ``attn_mask`` ``(..., Nq, Nk)`` are boolean with True
    meaning *blocked*.  Leading dimensions broadcast.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    dim = query.shape[-1]
    if dim % heads != 0:
        raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
    if key.shape[-2] != value.shape[-2]:
        raise ValueError("key and value lengths differ")
    head_dim = dim // heads

    q = _split_heads(linear(query, w.w_query), heads)
    k = _split_heads(linear(key, w.w_key), heads)
    v = _split_heads(linear(value, w.w_value), heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim))

    blocked = None
    if key_mask is not None:
        blocked = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    if attn_mask is not None:
        am = np.asarray(attn_mask, dtype=bool)[..., None, :, :]
        blocked = am if blocked is None else (blocked | am)
    attn = softmax(scores, axis=-1, mask=blocked)
    return linear(_merge_heads(attn @ v), w.w_output)


def cross_entropy(logits: Tensor, labels, task_kind: str = "multiclass") -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``logits`` ``(..., K)``.

    ``task_kind="binary"`` scores every class with an independent sigmoid
    against one-hot targets instead of a softmax.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    if task_kind == "binary":
        return binary_cross_entropy(logits, np.eye(k)[labels])
    if task_kind != "multiclass":
        raise ValueError(f"unknown task kind {task_kind!r}")
    onehot = np.eye(k, dtype=logits.dtype)[labels]
    picked = (log_softmax(logits, axis=-1) * onehot).sum(axis=-1)
    return -picked.mean()


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    # log(1 + exp(-|x|)) + max(x, 0) - x t
    loss = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - x * t
    n = x.size
    s = _sigmoid(x)

    def backward(g):
        return (g * (s - t) / n,)

    return Tensor._from_op(np.array(loss.mean()), (logits,), backward, "bce")


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return (diff * diff).mean()


def adam_update(value, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; returns ``(value, m, v)``.  ``step`` counts from 1."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class Adam:
    params: list[Parameter]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    state: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)

    @property
    def trainable(self) -> list[Parameter]:
        return [p for p in self.params if p.trainable]

    def num_trainable(self) -> int:
        return sum(p.size for p in self.trainable)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for p in self.params:
            if not p.trainable:
                continue
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if grad.shape != p.shape:
                raise ValueError(f"gradient shape {grad.shape} does not match parameter {p.shape}")
            m, v = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
            new, m, v = adam_update(p.data, grad, m, v, self.step_count, self.lr, *self.betas, self.eps)
            if not np.isfinite(new).all():
                raise NonFiniteError(f"optimizer produced non-finite values for {p.name or 'parameter'}")
            p.data = new.astype(p.data.dtype, copy=False)
            self.state[id(p)] = (m, v)


def set_parameter_values(params: Iterable[Parameter], values: Iterable[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.data = np.array(v, dtype=p.data.dtype)


def snapshot(params: Iterable[Parameter]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]
