"""Post-training int8 quantization of the feature extractor.

Weights are quantized per tensor (symmetric, zero point 0).  Inference keeps
activations real: the first convolution multiplies int8 embedding codes by
int8 kernel codes with exact integer accumulation; later layers accumulate
real activations against int8 kernel codes.  Each layer's accumulator is
rescaled to reals before ReLU and pooling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch
from .kernels import ExtractorModel, _im2col, embed_forward

QMIN, QMAX = -128, 127
# int8 x int8 products summed over fewer terms than this stay exact in float32
_EXACT_F32_TERMS = (1 << 24) // (128 * 128)


class QuantMode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    AFFINE = "affine"


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"quantization scale must be > 0, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside int8 range")


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compute_qparams(tensor, mode: QuantMode | str = QuantMode.SYMMETRIC) -> QuantParams:
    mode = QuantMode(mode)
    t = np.asarray(tensor, dtype=np.float64)
    if t.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(t)):
        raise NonFiniteInput("tensor contains NaN or infinity")
    lo, hi = float(t.min()), float(t.max())
    if lo == 0.0 and hi == 0.0:
        return QuantParams(1.0, 0)
    if mode is QuantMode.SYMMETRIC:
        return QuantParams(max(abs(lo), abs(hi)) / 127.0, 0)
    # keep 0.0 inside the grid so zero stays exactly representable
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255.0
    zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def quantize_tensor(tensor, params: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(tensor, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_tensor(q, params: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - params.zero_point) * params.scale


@dataclass(frozen=True)
class QTensor:
    codes: np.ndarray  # int8
    params: QuantParams

    def dequantize(self) -> np.ndarray:
        return dequantize_tensor(self.codes, self.params)


@dataclass(frozen=True)
class QuantizedModel:
    embedding: QTensor
    conv: tuple[QTensor, ...]
    pools: tuple[int, ...]
    dense: QTensor
    seq_len: int

    @property
    def feature_dim(self) -> int:
        return self.dense.codes.shape[1]

    @property
    def vocab_rows(self) -> int:
        return self.embedding.codes.shape[0]

    def tensors(self) -> list[QTensor]:
        return [self.embedding, *self.conv, self.dense]

    def dequantize(self) -> ExtractorModel:
        from .kernels import ConvLayer

        return ExtractorModel(
            self.embedding.dequantize(),
            [ConvLayer(q.dequantize(), p) for q, p in zip(self.conv, self.pools)],
            self.dense.dequantize(),
            self.seq_len,
        )


def _quantize_weight(w: np.ndarray) -> QTensor:
    params = compute_qparams(w, QuantMode.SYMMETRIC)
    return QTensor(quantize_tensor(w, params), params)


def quantize_model(model: ExtractorModel) -> QuantizedModel:
    return QuantizedModel(
        _quantize_weight(model.embedding),
        tuple(_quantize_weight(c.kernels) for c in model.conv_layers),
        tuple(c.pool for c in model.conv_layers),
        _quantize_weight(model.dense),
        model.seq_len,
    )


# bytes per tensor for the stored scale (float64) and zero point (int32)
QPARAM_BYTES = 12


def float_payload_bytes(model: ExtractorModel) -> int:
    return sum(4 * w.size for w in model.parameters())


def quantized_payload_bytes(qmodel: QuantizedModel) -> int:
    return sum(q.codes.size + QPARAM_BYTES for q in qmodel.tensors())


class QuantizedEngine:
    """Inference over a :class:`QuantizedModel`."""

    kind = "quantized"

    def __init__(self, qmodel: QuantizedModel):
        self.qmodel = qmodel
        self.seq_len = qmodel.seq_len
        self.feature_dim = qmodel.feature_dim
        self.vocab_rows = qmodel.vocab_rows
        # integer codes held as float32 so the matmuls hit BLAS; values are exact
        self.embedding = qmodel.embedding.codes.astype(np.float32)
        self.embedding_scale = qmodel.embedding.params.scale
        self.convs = []
        for q, pool in zip(qmodel.conv, qmodel.pools):
            c_out, c_in, width = q.codes.shape
            codes = np.ascontiguousarray(q.codes.reshape(c_out, -1).T, dtype=np.float32)
            self.convs.append((codes, np.float32(q.params.scale), width, pool))
        self.dense = qmodel.dense.codes.astype(np.float32)
        self.dense_scale = np.float32(qmodel.dense.params.scale)
        first_terms = self.convs[0][0].shape[0] if self.convs else 0
        self._first_exact = first_terms < _EXACT_F32_TERMS

    def features(self, windows) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.int64)
        single = windows.ndim == 1
        if single:
            windows = windows[None]
        if windows.shape[-1] != self.seq_len:
            raise ShapeMismatch(f"expected windows of length {self.seq_len}, got {windows.shape[-1]}")
        h = embed_forward(self.embedding, windows)
        in_scale = np.float32(self.embedding_scale)
        for i, (codes, w_scale, width, pool) in enumerate(self.convs):
            cols = _im2col(h, width)
            if i == 0 and not self._first_exact:
                acc = (cols.astype(np.float64) @ codes.astype(np.float64)).astype(np.float32)
            else:
                acc = cols @ codes
            h = acc * (in_scale * w_scale)
            np.maximum(h, 0, out=h)
            n, length, c = h.shape
            h = h.reshape(n, length // pool, pool, c).max(axis=2)
            in_scale = np.float32(1.0)
        out = (h.max(axis=1) @ self.dense) * (in_scale * self.dense_scale)
        return out[0] if single else out


def quantized_forward(qmodel: QuantizedModel, tokens) -> np.ndarray:
    tokens = tokens.tokens if hasattr(tokens, "tokens") else tokens
    return QuantizedEngine(qmodel).features(tokens)
