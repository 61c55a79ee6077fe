"""Threshold calibration, the deployment pipeline and detection metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArtifactMismatch, InsufficientScores, LengthMismatch, NonFiniteScore
from .iforest import IsolationForestModel
from .kernels import ExtractorModel, FloatEngine
from .quantize import QuantizedEngine, QuantizedModel


@dataclass(frozen=True)
class Threshold:
    mean: float
    std: float
    k: float = 2.0
    value: float = float("nan")

    def __post_init__(self):
        expected = self.mean + self.k * self.std
        if math.isnan(self.value):
            object.__setattr__(self, "value", expected)
        elif self.value != expected:
            raise ValueError(f"threshold value {self.value!r} != mean + k*std = {expected!r}")
        if self.std < 0:
            raise ValueError(f"std must be >= 0, got {self.std}")


def calibrate_threshold(val_scores: Sequence[float], k: float = 2.0) -> Threshold:
    """``mean + k * std`` of the validation scores (population std)."""
    scores = [float(s) for s in val_scores]
    if len(scores) < 2:
        raise InsufficientScores(f"need at least 2 validation scores, got {len(scores)}")
    if not all(math.isfinite(s) for s in scores):
        raise NonFiniteScore("validation scores contain NaN or infinity")
    # statistics works in exact rationals, so constant inputs give std == 0 exactly
    return Threshold(statistics.mean(scores), statistics.pstdev(scores), float(k))


def score_skewness(scores: Sequence[float]) -> float:
    """Sample skewness, reported as a check on the near-Gaussian assumption."""
    x = np.asarray(scores, dtype=np.float64)
    sd = x.std()
    if sd == 0:
        return 0.0
    return float(np.mean(((x - x.mean()) / sd) ** 3))


def classify(score: float, threshold: Threshold) -> int:
    return 1 if score > threshold.value else 0


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


def evaluate(predicted: Sequence[int], truth: Sequence[int]) -> Metrics:
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(truth)} labels")
    if not predicted:
        raise LengthMismatch("cannot evaluate zero samples")
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(precision, recall, f1, tp, fp, fn, tn)


def as_engine(extractor):
    if isinstance(extractor, (FloatEngine, QuantizedEngine)):
        return extractor
    if isinstance(extractor, QuantizedModel):
        return QuantizedEngine(extractor)
    if isinstance(extractor, ExtractorModel):
        return FloatEngine(extractor)
    raise TypeError(f"not an extractor: {type(extractor).__name__}")


def batch_features(engine, windows, batch_size: int = 512) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.int64)
    if windows.shape[-1] != engine.seq_len:
        raise ArtifactMismatch("window length (extractor, input)", engine.seq_len, windows.shape[-1])
    out = np.empty((len(windows), engine.feature_dim), dtype=np.float32)
    for start in range(0, len(windows), batch_size):
        out[start : start + batch_size] = engine.features(windows[start : start + batch_size])
    return out


@dataclass(frozen=True)
class Detection:
    score: float
    label: int
    elapsed_seconds: float


class Pipeline:
    """Frozen extractor + forest + threshold. Safe to share across threads."""

    def __init__(self, extractor, forest: IsolationForestModel, threshold: Threshold | None = None):
        self.engine = as_engine(extractor)
        if self.engine.feature_dim != forest.dim:
            raise ArtifactMismatch("feature dimension (extractor, forest)", self.engine.feature_dim, forest.dim)
        self.forest = forest
        self.threshold = threshold

    def _check_window(self, tokens: np.ndarray):
        if tokens.shape[-1] != self.engine.seq_len:
            raise ArtifactMismatch("window length (extractor, input)", self.engine.seq_len, tokens.shape[-1])

    def features(self, windows) -> np.ndarray:
        return batch_features(self.engine, windows)

    def scores(self, windows) -> np.ndarray:
        return self.forest.scores(self.features(windows))

    def run(self, tokens) -> Detection:
        tokens = np.asarray(tokens.tokens if hasattr(tokens, "tokens") else tokens, dtype=np.int64)
        self._check_window(tokens)
        if self.threshold is None:
            raise ValueError("pipeline has no threshold; calibrate first")
        started = time.perf_counter()
        feature = self.engine.features(tokens)
        s = float(self.forest.scores(feature[None])[0])
        label = classify(s, self.threshold)
        elapsed = time.perf_counter() - started
        return Detection(s, label, elapsed)


def deploy_pipeline(tokens, extractor, forest: IsolationForestModel, threshold: Threshold) -> Detection:
    """Score one window: extractor forward -> forest score -> threshold."""
    pipeline = extractor if isinstance(extractor, Pipeline) else Pipeline(extractor, forest, threshold)
    return pipeline.run(tokens)


@dataclass(frozen=True)
class LatencySummary:
    per_sample_seconds: tuple[float, ...]
    mean: float
    median: float
    p95: float

    @classmethod
    def from_samples(cls, seconds: Sequence[float]) -> "LatencySummary":
        x = np.asarray(seconds, dtype=np.float64)
        if x.size == 0:
            raise ValueError("no latency samples")
        return cls(tuple(float(s) for s in x), float(np.mean(x)), float(np.median(x)), float(np.percentile(x, 95)))

    def as_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "p95": self.p95, "per_sample_seconds": list(self.per_sample_seconds)}


@dataclass
class DetectionReport:
    scores: list[float]
    predicted: list[int]
    truth: list[int]
    threshold: Threshold
    metrics: Metrics
    metadata: dict = field(default_factory=dict)
    seconds: list[float] | None = None
    groups: list[str] | None = None

    @classmethod
    def build(cls, scores, truth, threshold: Threshold, metadata=None, seconds=None, groups=None) -> "DetectionReport":
        scores = [float(s) for s in scores]
        predicted = [classify(s, threshold) for s in scores]
        truth = [int(t) for t in truth]
        return cls(scores, predicted, truth, threshold, evaluate(predicted, truth), dict(metadata or {}), seconds, groups)

    @property
    def latency(self) -> LatencySummary | None:
        return LatencySummary.from_samples(self.seconds) if self.seconds else None

    def recording_metrics(self) -> Metrics | None:
        """A recording is flagged if any of its windows is."""
        if not self.groups:
            return None
        pred: dict[str, int] = {}
        true: dict[str, int] = {}
        for g, p, t in zip(self.groups, self.predicted, self.truth):
            pred[g] = max(pred.get(g, 0), p)
            true[g] = max(true.get(g, 0), t)
        keys = sorted(pred)
        return evaluate([pred[k] for k in keys], [true[k] for k in keys])

    def to_dict(self, include_timing: bool = True) -> dict:
        m = self.metrics
        doc = {
            "metadata": self.metadata,
            "threshold": {"mean": self.threshold.mean, "std": self.threshold.std, "k": self.threshold.k, "value": self.threshold.value},
            "aggregates": {
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "tp": m.tp,
                "fp": m.fp,
                "fn": m.fn,
                "tn": m.tn,
                "n_samples": len(self.scores),
            },
        }
        rec = self.recording_metrics()
        if rec is not None:
            doc["recording_aggregates"] = {"precision": rec.precision, "recall": rec.recall, "f1": rec.f1}
        if include_timing and self.seconds:
            doc["latency"] = {k: v for k, v in self.latency.as_dict().items() if k != "per_sample_seconds"}
        rows = []
        for i, (s, p, t) in enumerate(zip(self.scores, self.predicted, self.truth)):
            row = {"score": s, "predicted": p, "truth": t}
            if self.groups:
                row["recording"] = self.groups[i]
            if include_timing and self.seconds:
                row["seconds"] = self.seconds[i]
            rows.append(row)
        doc["samples"] = rows
        return doc

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=False) + "\n"

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["index", "score", "predicted", "truth"]
        if self.groups:
            header.append("recording")
        timed = include_timing and bool(self.seconds)
        if timed:
            header.append("seconds")
        writer.writerow(header)
        for i, (s, p, t) in enumerate(zip(self.scores, self.predicted, self.truth)):
            row = [i, repr(s), p, t]
            if self.groups:
                row.append(self.groups[i])
            if timed:
                row.append(repr(self.seconds[i]))
            writer.writerow(row)
        return buf.getvalue()
