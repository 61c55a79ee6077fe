"""DeepSVDD training of the feature extractor.

Two objectives are supported:

``one_class``
    mean squared distance of features to a fixed center ``c``, plus
    ``(weight_decay / 2) * sum ||W||^2``.
``soft_boundary``
    ``R^2 + 1/(nu * n) * sum max(0, ||phi - c||^2 - R^2)`` plus the same
    decay, with ``R`` periodically reset to the ``(1 - nu)`` quantile of the
    batch distances.

The center is computed once from the untrained network and never moves.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParameter, DivergenceDetected, EmptyTrainingSet
from .ingest import DatasetSplit, TokenSequence, stack_tokens
from .kernels import ExtractorModel, GradientSet, extract_features, extractor_backward, extractor_forward

log = logging.getLogger(__name__)


class Objective(str, enum.Enum):
    ONE_CLASS = "one_class"
    SOFT_BOUNDARY = "soft_boundary"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    seed: int = 0
    objective: Objective = Objective.ONE_CLASS
    nu: float = 0.1
    epsilon_c: float = 0.1
    radius_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.objective = Objective(self.objective)
        if self.epochs < 0:
            raise BadParameter(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise BadParameter(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise BadParameter(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise BadParameter(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.nu <= 1:
            raise BadParameter(f"nu must lie in (0, 1], got {self.nu}")
        if self.epsilon_c <= 0:
            raise BadParameter(f"epsilon_c must be > 0, got {self.epsilon_c}")
        if self.radius_every < 1:
            raise BadParameter(f"radius_every must be >= 1, got {self.radius_every}")


@dataclass
class SvddState:
    center: np.ndarray
    radius: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not np.all(np.isfinite(self.center)):
            raise BadParameter("SVDD center must be finite")
        if self.radius < 0:
            raise BadParameter(f"SVDD radius must be >= 0, got {self.radius}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_distance: float
    wall_seconds: float

    def as_log(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "mean_distance": self.mean_distance,
            "wall_seconds": self.wall_seconds,
        }


@dataclass
class TrainResult:
    model: ExtractorModel
    state: SvddState
    history: list[EpochRecord] = field(default_factory=list)


def _as_windows(train) -> np.ndarray:
    if isinstance(train, np.ndarray):
        return train.astype(np.int64, copy=False)
    return stack_tokens(list(train))


def init_center(model: ExtractorModel, train, epsilon_c: float = 0.1) -> np.ndarray:
    """Mean training feature, with near-zero coordinates pushed out to +-epsilon_c."""
    windows = _as_windows(train)
    if len(windows) == 0:
        raise EmptyTrainingSet("cannot initialise the SVDD center from zero windows")
    center = extract_features(model, windows).mean(axis=0)
    small = np.abs(center) < epsilon_c
    center[small] = np.where(center[small] < 0, -epsilon_c, epsilon_c)
    return center


def squared_distances(features: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = features - center
    return np.einsum("ij,ij->i", diff, diff)


def weight_norm(model: ExtractorModel) -> float:
    return float(sum(np.vdot(w, w) for w in model.parameters()))


def svdd_loss(features: np.ndarray, state: SvddState, model: ExtractorModel | None, config: TrainConfig) -> tuple[float, np.ndarray]:
    """Batch loss and its gradient w.r.t. each feature vector.

    The weight-decay term is included in the loss value; its parameter
    gradient (``weight_decay * W``) is applied by the optimizer step.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise BadParameter(f"svdd_loss expects a non-empty (n, D) batch, got shape {features.shape}")
    if features.shape[1] != len(state.center):
        raise BadParameter(f"feature dim {features.shape[1]} != center dim {len(state.center)}")
    n = len(features)
    decay = 0.5 * config.weight_decay * weight_norm(model) if model is not None and config.weight_decay else 0.0
    diff = features - state.center
    dist = np.einsum("ij,ij->i", diff, diff)
    if config.objective is Objective.ONE_CLASS:
        return float(dist.mean()) + decay, (2.0 / n) * diff
    r2 = state.radius**2
    excess = dist - r2
    violating = excess > 0
    loss = r2 + float(np.maximum(excess, 0).sum()) / (config.nu * n) + decay
    grad = (2.0 / (config.nu * n)) * diff * violating[:, None]
    return loss, grad


class Adam:
    """Adam over a fixed list of parameter tensors, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.steps = 0

    def step(self, grads: list[np.ndarray]):
        self.steps += 1
        bc1 = 1.0 - self.beta1**self.steps
        bc2 = 1.0 - self.beta2**self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _with_decay(grads: GradientSet, model: ExtractorModel, weight_decay: float) -> list[np.ndarray]:
    tensors = grads.tensors()
    if not weight_decay:
        return tensors
    return [g + weight_decay * w for g, w in zip(tensors, model.parameters())]


def train(model: ExtractorModel, data: DatasetSplit | list[TokenSequence] | np.ndarray, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train a copy of ``model``; the argument itself is left untouched.

    ``on_epoch`` is called with each :class:`EpochRecord` as it completes.
    """
    windows = _as_windows(data.train if isinstance(data, DatasetSplit) else data)
    if len(windows) == 0:
        raise EmptyTrainingSet("no training windows")
    model = model.astype(np.float64)
    state = SvddState(init_center(model, windows, config.epsilon_c), 0.0, config.weight_decay)
    history: list[EpochRecord] = []
    if config.epochs == 0:
        return TrainResult(model, state, history)

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    n = len(windows)
    batch_no = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        dist_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = windows[order[start : start + config.batch_size]]
            feats, tape = extractor_forward(model, batch)
            loss, grad_feats = svdd_loss(feats, state, model, config)
            if not np.isfinite(loss):
                raise DivergenceDetected(epoch, loss)
            grads = extractor_backward(model, tape, grad_feats)
            opt.step(_with_decay(grads, model, config.weight_decay))
            dist = squared_distances(feats, state.center)
            loss_sum += loss * len(batch)
            dist_sum += float(dist.sum())
            batch_no += 1
            if config.objective is Objective.SOFT_BOUNDARY and batch_no % config.radius_every == 0:
                state.radius = float(np.quantile(np.sqrt(dist), 1.0 - config.nu))
        record = EpochRecord(epoch, loss_sum / n, dist_sum / n, time.perf_counter() - started)
        if not np.isfinite(record.mean_loss):
            raise DivergenceDetected(epoch, record.mean_loss)
        history.append(record)
        log.debug("epoch %d mean_loss %.6g mean_dist %.6g", epoch, record.mean_loss, record.mean_distance)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(model, state, history)
