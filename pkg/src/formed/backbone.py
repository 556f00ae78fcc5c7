"""Patch-transformer feature extractor and its forecasting head.

Every channel of a multivariate series is processed on its own with shared
weights: the series is cut into non-overlapping patches, each patch (values
plus its padding mask) goes through an input residual block, fixed sinusoidal
positions are added, and a stack of pre-norm causal transformer layers
produces one feature token per patch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    Adam,
    AttentionWeights,
    LayerNormWeights,
    ResidualBlockWeights,
    Weights,
    layer_norm,
    mse_loss,
    multi_head_attention,
    residual_block,
)
from .tensor import NonFiniteError, Tensor, as_tensor, get_dtype, no_grad

log = logging.getLogger(__name__)

__all__ = [
    "BackboneConfig",
    "BackboneWeights",
    "PatchedSeries",
    "patchify",
    "reduce_patch_mask",
    "embed_patches",
    "positional_encoding",
    "add_positions",
    "encode",
    "forecast",
    "extract_features",
    "pretrain_forecasting",
    "forecast_mse",
    "predict_series",
    "instance_scale",
]


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 32
    model_dim: int = 32
    layers: int = 2
    heads: int = 4
    max_patches: int = 64
    horizon: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"backbone config field {name} must be a positive integer, got {value!r}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")

    def num_patches(self, length: int) -> int:
        return math.ceil(length / self.patch_size)


@dataclass(eq=False)
class TransformerLayerWeights(Weights):
    attn_norm: LayerNormWeights
    attn: AttentionWeights
    ff_norm: LayerNormWeights
    ff: ResidualBlockWeights

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "TransformerLayerWeights":
        ff = ResidualBlockWeights.init(rng, dim, 4 * dim, dim)
        # the layer already has an identity skip around the feed-forward path
        ff.w_skip.data[...] = 0.0
        ff.w_out.data *= 0.5
        return cls(LayerNormWeights.init(dim), AttentionWeights.init(rng, dim), LayerNormWeights.init(dim), ff)


@dataclass(eq=False)
class BackboneWeights(Weights):
    config: BackboneConfig
    input_block: ResidualBlockWeights
    layers: list = field(default_factory=list)
    output_block: ResidualBlockWeights | None = None

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "BackboneWeights":
        rng = np.random.default_rng(seed)
        d, p = config.model_dim, config.patch_size
        return cls(
            config=config,
            input_block=ResidualBlockWeights.init(rng, 2 * p, d, d),
            layers=[TransformerLayerWeights.init(rng, d) for _ in range(config.layers)],
            output_block=ResidualBlockWeights.init(rng, d, d, config.horizon),
        )

    @property
    def frozen(self) -> bool:
        return not any(p.trainable for p in self.parameters())


@dataclass
class PatchedSeries:
    values: np.ndarray  # (..., L, P)
    mask: np.ndarray  # (..., L, P), 1 = padded or missing

    @property
    def num_patches(self) -> int:
        return self.values.shape[-2]

    @property
    def patch_mask(self) -> np.ndarray:
        return reduce_patch_mask(self.mask)

    @property
    def patch_valid(self) -> np.ndarray:
        return self.patch_mask < 1


def patchify(x, m, patch_size: int) -> PatchedSeries:
    """Cut ``(..., T)`` series into ``ceil(T/P)`` patches; the tail is right-padded.

    Positions flagged in ``m`` are zeroed so that their values cannot leak into
    any downstream computation.
    """
    x = np.asarray(x, dtype=get_dtype())
    m = np.asarray(m, dtype=get_dtype())
    if x.shape != m.shape:
        raise ValueError(f"values {x.shape} and mask {m.shape} differ in shape")
    if patch_size < 1:
        raise ValueError("patch size must be positive")
    t = x.shape[-1]
    if t == 0:
        raise ValueError("cannot patch an empty series")
    n = math.ceil(t / patch_size)
    pad = n * patch_size - t
    lead = x.shape[:-1]
    if pad:
        x = np.concatenate([x, np.zeros(lead + (pad,), dtype=x.dtype)], axis=-1)
        m = np.concatenate([m, np.ones(lead + (pad,), dtype=m.dtype)], axis=-1)
    x = np.where(m > 0, 0.0, x).astype(m.dtype, copy=False)
    return PatchedSeries(x.reshape(lead + (n, patch_size)), m.reshape(lead + (n, patch_size)))


def reduce_patch_mask(mask) -> np.ndarray:
    """Per-patch mask: 1 exactly when the whole patch is padding."""
    return np.asarray(mask).min(axis=-1)


def embed_patches(ps: PatchedSeries, w: BackboneWeights) -> Tensor:
    d_in = w.input_block.dims[0]
    if d_in != 2 * ps.values.shape[-1]:
        raise ValueError(f"input block expects width {d_in}, patches give {2 * ps.values.shape[-1]}")
    tokens = Tensor(np.concatenate([ps.values, ps.mask], axis=-1))
    return residual_block(tokens, w.input_block)


def positional_encoding(length: int, dim: int, dtype=None) -> np.ndarray:
    """Fixed sinusoidal table: even columns sin, odd columns cos."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    j = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, j / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table.astype(dtype or get_dtype())


def add_positions(z: Tensor, max_patches: int) -> Tensor:
    z = as_tensor(z)
    length, dim = z.shape[-2], z.shape[-1]
    if length > max_patches:
        raise ValueError(f"{length} patches exceed max_patches={max_patches}")
    return z + positional_encoding(length, dim, z.dtype)


def _causal_blocked(patch_mask: np.ndarray) -> np.ndarray:
    """``(..., L, L)`` boolean: True where query i may not look at key j."""
    length = patch_mask.shape[-1]
    future = np.triu(np.ones((length, length), dtype=bool), k=1)
    padded = np.asarray(patch_mask) >= 1
    return future | padded[..., None, :]


def encode(z: Tensor, patch_mask, w: BackboneWeights) -> Tensor:
    """Stacked pre-norm causal transformer over ``(..., L, D)`` tokens."""
    blocked = _causal_blocked(patch_mask)
    h = as_tensor(z)
    for layer in w.layers:
        normed = layer_norm(h, layer.attn_norm)
        h = h + multi_head_attention(normed, normed, normed, layer.attn, w.config.heads, attn_mask=blocked)
        h = h + residual_block(layer_norm(h, layer.ff_norm), layer.ff)
    return h


def last_valid_index(patch_mask) -> np.ndarray:
    valid = np.asarray(patch_mask) < 1
    if not valid.any(axis=-1).all():
        raise ValueError("series has no valid patch")
    length = valid.shape[-1]
    return length - 1 - np.argmax(valid[..., ::-1], axis=-1)


def forecast(h: Tensor, patch_mask, w: BackboneWeights) -> Tensor:
    """Map the last valid feature row of ``(..., L, D)`` to an ``(..., N)`` forecast."""
    idx = last_valid_index(patch_mask)
    h = as_tensor(h)
    lead = h.shape[:-2]
    flat = h.reshape(-1, h.shape[-2], h.shape[-1])
    rows = flat[np.arange(flat.shape[0]), np.ravel(idx)]
    return residual_block(rows, w.output_block).reshape(*lead, w.output_block.dims[2])


def _features(x, m, w: BackboneWeights) -> tuple[Tensor, np.ndarray]:
    ps = patchify(x, m, w.config.patch_size)
    pm = ps.patch_mask
    z = add_positions(embed_patches(ps, w), w.config.max_patches)
    return encode(z, pm, w), pm


def extract_features(x, m, w: BackboneWeights) -> tuple[Tensor, np.ndarray]:
    """Per-channel features ``(..., C, L, D)`` plus validity flags ``(..., C, L)``."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("expected (..., C, T) input")
    valid = reduce_patch_mask(patchify(x, m, w.config.patch_size).mask) < 1
    if not valid.any(axis=-1).all():
        raise ValueError("a channel has no observed values")
    if not valid[..., 0].all():
        raise ValueError("first patch of a channel is fully padded; it has nothing to attend to")
    h, _ = _features(x, m, w)
    return h, valid


def instance_scale(context: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-series mean and std of ``(..., T)`` contexts; flat series get scale 1."""
    mu = context.mean(axis=-1, keepdims=True)
    sd = context.std(axis=-1, keepdims=True)
    return mu, np.where(sd > 1e-8, sd, 1.0)


def predict_series(w: BackboneWeights, context) -> np.ndarray:
    """Forecast the next ``horizon`` values of fully observed ``(..., T)`` contexts.

    Contexts are standardised before the backbone and the forecast is mapped
    back to the original scale.
    """
    context = np.asarray(context, dtype=get_dtype())
    mu, sd = instance_scale(context)
    with no_grad():
        h, pm = _features((context - mu) / sd, np.zeros_like(context), w)
        pred = forecast(h, pm, w)
    return pred.data * sd + mu


def forecast_mse(w: BackboneWeights, context: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((predict_series(w, context) - target) ** 2))


def _sample_windows(corpus: list[np.ndarray], rng, batch: int, ctx: int, horizon: int):
    xs, ys = [], []
    for _ in range(batch):
        series = corpus[rng.integers(len(corpus))]
        start = rng.integers(0, len(series) - ctx - horizon + 1)
        xs.append(series[start : start + ctx])
        ys.append(series[start + ctx : start + ctx + horizon])
    return np.stack(xs), np.stack(ys)


def pretrain_forecasting(
    corpus,
    config: BackboneConfig,
    epochs: int,
    seed: int = 0,
    steps_per_epoch: int = 50,
    batch_size: int = 32,
    lr: float = 3e-3,
    weights: BackboneWeights | None = None,
) -> BackboneWeights:
    """Train backbone and forecast head on next-``horizon`` MSE; returns frozen weights.

    Context lengths are drawn per batch as a whole number of patches, from one
    patch up to the longest window that fits. Each
    window is standardised by its context statistics and the loss is taken in
    those units.
    """
    corpus = [np.asarray(s, dtype=get_dtype()) for s in corpus]
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    horizon = config.horizon
    shortest = min(len(s) for s in corpus)
    max_ctx = min(shortest - horizon, config.max_patches * config.patch_size)
    if max_ctx < config.patch_size:
        raise ValueError("corpus series are too short for the forecast horizon")

    w = weights if weights is not None else BackboneWeights.init(config, seed)
    w.unfreeze()
    opt = Adam(w.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    total_steps = max(epochs * steps_per_epoch, 1)
    for epoch in range(epochs):
        total = 0.0
        for step in range(steps_per_epoch):
            # cosine decay to zero over the whole run
            opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * (epoch * steps_per_epoch + step) / total_steps))
            ctx = config.patch_size * int(rng.integers(1, max_ctx // config.patch_size + 1))
            x, y = _sample_windows(corpus, rng, batch_size, ctx, horizon)
            mu, sd = instance_scale(x)
            x, y = (x - mu) / sd, (y - mu) / sd
            opt.zero_grad()
            h, pm = _features(x, np.zeros_like(x), w)
            loss = mse_loss(forecast(h, pm, w), y)
            if not math.isfinite(loss.item()):
                raise NonFiniteError("pretraining loss diverged")
            loss.backward()
            opt.step()
            total += loss.item()
        log.info("pretrain epoch %d: mse %.5f", epoch, total / steps_per_epoch)
    w.freeze()
    return w
