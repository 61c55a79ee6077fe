"""Bias-free embedding -> (Conv1D -> ReLU -> MaxPool)* -> Dense feature extractor.

Every op accepts optional leading batch dimensions, so the same code path
serves single windows (``(L,)`` tokens) and mini-batches (``(B, L)``).
Activations are laid out sequence-major: ``(..., length, channels)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadParameter, IndivisibleLength, ShapeMismatch, TapeMismatch, TokenOutOfRange


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (C_out, C_in, K)
    pool: int

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1]

    @property
    def width(self) -> int:
        return self.kernels.shape[2]


@dataclass
class ExtractorModel:
    embedding: np.ndarray  # (V+1, E)
    conv_layers: list[ConvLayer]
    dense: np.ndarray  # (F_last, D)
    seq_len: int

    def __post_init__(self):
        self.validate()

    @property
    def vocab_rows(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.dense.shape[1]

    @property
    def final_pool(self) -> int:
        """Width of the last pool, collapsing whatever sequence length remains to 1."""
        return self.seq_len // int(np.prod([c.pool for c in self.conv_layers], dtype=np.int64))

    def stage_lengths(self) -> list[int]:
        lengths = [self.seq_len]
        for layer in self.conv_layers:
            lengths.append(lengths[-1] // layer.pool)
        return lengths

    def validate(self):
        if self.embedding.ndim != 2 or self.dense.ndim != 2:
            raise ShapeMismatch("embedding and dense must be matrices")
        channels = self.embed_dim
        length = self.seq_len
        for i, layer in enumerate(self.conv_layers):
            if layer.kernels.ndim != 3:
                raise ShapeMismatch(f"conv layer {i}: kernels must be C_out x C_in x K")
            if layer.c_in != channels:
                raise ShapeMismatch(f"conv layer {i}: expects {layer.c_in} input channels, previous stage gives {channels}")
            if layer.width % 2 != 1:
                raise BadParameter(f"conv layer {i}: kernel width must be odd for same padding, got {layer.width}")
            if layer.pool < 1 or length % layer.pool:
                raise IndivisibleLength(f"conv layer {i}: pool {layer.pool} does not divide length {length}")
            channels = layer.c_out
            length //= layer.pool
        if length < 1:
            raise IndivisibleLength("sequence length collapses below 1")
        if self.dense.shape[0] != channels:
            raise ShapeMismatch(f"dense expects {self.dense.shape[0]} inputs, conv stack gives {channels}")

    def parameters(self) -> list[np.ndarray]:
        """Trainable tensors in declaration order (embedding, conv kernels, dense)."""
        return [self.embedding, *(c.kernels for c in self.conv_layers), self.dense]

    def copy(self) -> "ExtractorModel":
        return ExtractorModel(
            self.embedding.copy(),
            [ConvLayer(c.kernels.copy(), c.pool) for c in self.conv_layers],
            self.dense.copy(),
            self.seq_len,
        )

    def astype(self, dtype) -> "ExtractorModel":
        return ExtractorModel(
            self.embedding.astype(dtype),
            [ConvLayer(c.kernels.astype(dtype), c.pool) for c in self.conv_layers],
            self.dense.astype(dtype),
            self.seq_len,
        )

    def signature(self) -> tuple:
        return (self.seq_len, self.embedding.shape, tuple((c.kernels.shape, c.pool) for c in self.conv_layers), self.dense.shape)


@dataclass
class GradientSet:
    embedding: np.ndarray
    conv: list[np.ndarray]
    dense: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [self.embedding, *self.conv, self.dense]

    @classmethod
    def zeros_like(cls, model: ExtractorModel) -> "GradientSet":
        return cls(
            np.zeros_like(model.embedding),
            [np.zeros_like(c.kernels) for c in model.conv_layers],
            np.zeros_like(model.dense),
        )


@dataclass
class _StageTape:
    inputs: np.ndarray  # (..., Len, C_in)
    pre_activation: np.ndarray  # (..., Len, C_out)
    pool_index: np.ndarray  # (..., Len / P, C_out)


@dataclass
class ActivationTape:
    tokens: np.ndarray
    stages: list[_StageTape] = field(default_factory=list)
    final_input_len: int = 0
    final_index: np.ndarray | None = None
    dense_input: np.ndarray | None = None
    signature: tuple = ()


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(
    vocab_size: int,
    seq_len: int = 64,
    embed_dim: int = 32,
    channels: Sequence[int] = (32, 64, 64),
    kernel_width: int = 3,
    pools: Sequence[int] = (2, 2, 2),
    feature_dim: int = 16,
    seed: int = 0,
) -> ExtractorModel:
    """Freshly initialised extractor for token ids 0..vocab_size."""
    if len(channels) != len(pools):
        raise BadParameter(f"got {len(channels)} channel counts but {len(pools)} pool widths")
    rng = np.random.default_rng(seed)
    rows = vocab_size + 1
    embedding = glorot_uniform(rng, (rows, embed_dim), rows, embed_dim)
    layers = []
    c_in = embed_dim
    for c_out, pool in zip(channels, pools):
        k = glorot_uniform(rng, (c_out, c_in, kernel_width), c_in * kernel_width, c_out * kernel_width)
        layers.append(ConvLayer(k, int(pool)))
        c_in = c_out
    dense = glorot_uniform(rng, (c_in, feature_dim), c_in, feature_dim)
    return ExtractorModel(embedding, layers, dense, seq_len)


# -- layer kernels -----------------------------------------------------------


def embed_forward(embedding: np.ndarray, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= embedding.shape[0]):
        raise TokenOutOfRange(f"token ids must lie in 0..{embedding.shape[0] - 1}")
    return embedding[tokens]


def embed_backward(embedding_shape: tuple[int, int], tokens: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    grad = np.zeros(embedding_shape, dtype=grad_out.dtype)
    np.add.at(grad, tokens.reshape(-1), grad_out.reshape(-1, embedding_shape[1]))
    return grad


def _pad_seq(x: np.ndarray, pad: int) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    return np.pad(x, widths)


def conv1d_forward(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation. ``x``: (..., Len, C_in) -> (..., Len, C_out)."""
    if x.ndim < 2 or x.shape[-1] != kernels.shape[1]:
        raise ShapeMismatch(f"conv input has {x.shape[-1] if x.ndim else None} channels, kernels expect {kernels.shape[1]}")
    if x.shape[-2] < 1:
        raise ShapeMismatch("conv input has zero length")
    width = kernels.shape[2]
    cols = sliding_window_view(_pad_seq(x, width // 2), width, axis=-2)  # (..., Len, C_in, K)
    return np.tensordot(cols, kernels, axes=([-2, -1], [1, 2]))


def conv1d_backward(x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the conv input and kernels."""
    width = kernels.shape[2]
    pad = width // 2
    length = x.shape[-2]
    cols = sliding_window_view(_pad_seq(x, pad), width, axis=-2)
    lead = list(range(grad_out.ndim - 1))
    grad_kernels = np.tensordot(grad_out, cols, axes=(lead, lead))  # (C_out, C_in, K)
    taps = np.tensordot(grad_out, kernels, axes=([-1], [0]))  # (..., Len, C_in, K)
    grad_padded = np.zeros(x.shape[:-2] + (length + 2 * pad, x.shape[-1]), dtype=taps.dtype)
    for k in range(width):
        grad_padded[..., k : k + length, :] += taps[..., k]
    return grad_padded[..., pad : pad + length, :], grad_kernels


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool_forward(x: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool over the sequence axis.

    Returns pooled values and, per window and channel, the absolute sequence
    index of the winner (lowest index on ties).
    """
    x = np.asarray(x)
    length = x.shape[-2]
    if width < 1 or length % width:
        raise IndivisibleLength(f"pool width {width} does not divide length {length}")
    blocks = x.reshape(x.shape[:-2] + (length // width, width, x.shape[-1]))
    local = blocks.argmax(axis=-2)
    values = np.take_along_axis(blocks, local[..., None, :], axis=-2)[..., 0, :]
    offsets = (np.arange(length // width) * width)[:, None]
    return values, local + offsets


def maxpool_backward(grad_out: np.ndarray, indices: np.ndarray, length: int) -> np.ndarray:
    grad = np.zeros(grad_out.shape[:-2] + (length, grad_out.shape[-1]), dtype=grad_out.dtype)
    np.put_along_axis(grad, indices, grad_out, axis=-2)
    return grad


# -- whole network -----------------------------------------------------------


def extractor_forward(model: ExtractorModel, tokens) -> tuple[np.ndarray, ActivationTape]:
    """Feature vector(s) for token window(s) of shape ``(..., L)``."""
    tokens = np.asarray(tokens.tokens if hasattr(tokens, "tokens") else tokens, dtype=np.int64)
    if tokens.shape[-1:] != (model.seq_len,):
        raise ShapeMismatch(f"expected windows of length {model.seq_len}, got shape {tokens.shape}")
    tape = ActivationTape(tokens=tokens, signature=model.signature())
    h = embed_forward(model.embedding, tokens)
    for layer in model.conv_layers:
        pre = conv1d_forward(h, layer.kernels)
        pooled, idx = maxpool_forward(relu(pre), layer.pool)
        tape.stages.append(_StageTape(h, pre, idx))
        h = pooled
    tape.final_input_len = h.shape[-2]
    pooled, idx = maxpool_forward(h, h.shape[-2])
    tape.final_index = idx
    tape.dense_input = pooled[..., 0, :]
    return tape.dense_input @ model.dense, tape


def extractor_backward(model: ExtractorModel, tape: ActivationTape, grad_feature) -> GradientSet:
    """Reverse-mode gradients of ``sum(grad_feature * features)`` for every parameter."""
    if tape.signature != model.signature() or tape.dense_input is None:
        raise TapeMismatch("activation tape was recorded for a different model")
    grad_feature = np.asarray(grad_feature, dtype=tape.dense_input.dtype)
    if grad_feature.shape != tape.dense_input.shape[:-1] + (model.feature_dim,):
        raise TapeMismatch(f"feature gradient has shape {grad_feature.shape}, forward produced {tape.dense_input.shape[:-1] + (model.feature_dim,)}")
    lead = list(range(grad_feature.ndim - 1))
    grad_dense = np.tensordot(tape.dense_input, grad_feature, axes=(lead, lead))
    g = (grad_feature @ model.dense.T)[..., None, :]
    g = maxpool_backward(g, tape.final_index, tape.final_input_len)
    grad_conv = [None] * len(model.conv_layers)
    for i in range(len(model.conv_layers) - 1, -1, -1):
        stage = tape.stages[i]
        layer = model.conv_layers[i]
        g = maxpool_backward(g, stage.pool_index, stage.pre_activation.shape[-2])
        g = g * (stage.pre_activation > 0)
        g, grad_conv[i] = conv1d_backward(stage.inputs, layer.kernels, g)
    grad_embedding = embed_backward(model.embedding.shape, tape.tokens, g)
    return GradientSet(grad_embedding, grad_conv, grad_dense)


def extract_features(model: ExtractorModel, windows: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Forward pass over many windows without keeping the tapes."""
    windows = np.asarray(windows, dtype=np.int64)
    out = np.empty((len(windows), model.feature_dim), dtype=model.dense.dtype)
    for start in range(0, len(windows), batch_size):
        out[start : start + batch_size] = extractor_forward(model, windows[start : start + batch_size])[0]
    return out


class FloatEngine:
    """Inference-only float32 path with weights pre-laid-out for matmul."""

    kind = "float"

    def __init__(self, model: ExtractorModel):
        self.seq_len = model.seq_len
        self.feature_dim = model.feature_dim
        self.vocab_rows = model.vocab_rows
        self.embedding = np.ascontiguousarray(model.embedding, dtype=np.float32)
        # (C_out, C_in, K) -> (C_in * K, C_out) to match the flattened im2col layout
        self.convs = [
            (np.ascontiguousarray(c.kernels.reshape(c.c_out, -1).T, dtype=np.float32), c.width, c.pool)
            for c in model.conv_layers
        ]
        self.dense = np.ascontiguousarray(model.dense, dtype=np.float32)

    def features(self, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.int64)
        single = windows.ndim == 1
        if single:
            windows = windows[None]
        if windows.shape[-1] != self.seq_len:
            raise ShapeMismatch(f"expected windows of length {self.seq_len}, got {windows.shape[-1]}")
        h = embed_forward(self.embedding, windows)
        for weights, width, pool in self.convs:
            h = _im2col(h, width) @ weights
            np.maximum(h, 0, out=h)
            n, length, c = h.shape
            h = h.reshape(n, length // pool, pool, c).max(axis=2)
        out = h.max(axis=1) @ self.dense
        return out[0] if single else out


def _im2col(x: np.ndarray, width: int) -> np.ndarray:
    n, length, c = x.shape
    cols = sliding_window_view(_pad_seq(x, width // 2), width, axis=-2)  # (n, Len, C, K)
    return cols.reshape(n, length, c * width)
