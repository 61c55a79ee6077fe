"""Per-sample latency harness.

Each sample is the wall time of one window going through extractor, forest
score and threshold.  When both extractors are present the float and
quantized timings are interleaved window by window, so drift in machine load
hits both alike.
"""

from __future__ import annotations

import json
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detect import Pipeline


def summarize(seconds: Sequence[float]) -> dict:
    x = [float(s) for s in seconds]
    if not x:
        raise ValueError("no latency samples")
    return {
        "mean": math.fsum(x) / len(x),
        "median": statistics.median(x),
        "p95": float(np.percentile(np.asarray(x), 95)),
    }


@dataclass
class Timing:
    per_sample_seconds: list[float]
    mean: float
    median: float
    p95: float

    @classmethod
    def from_samples(cls, seconds: Sequence[float]) -> "Timing":
        x = [float(s) for s in seconds]
        return cls(x, **summarize(x))

    def consistent(self) -> bool:
        again = summarize(self.per_sample_seconds)
        return again == {"mean": self.mean, "median": self.median, "p95": self.p95}


@dataclass
class BenchReport:
    float_timing: Timing
    quantized_timing: Timing | None
    float_payload_bytes: int
    quantized_payload_bytes: int | None
    environment: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def payload_ratio(self) -> float | None:
        if self.quantized_payload_bytes is None:
            return None
        return self.quantized_payload_bytes / self.float_payload_bytes

    def consistent(self) -> bool:
        return self.float_timing.consistent() and (self.quantized_timing is None or self.quantized_timing.consistent())

    def to_dict(self) -> dict:
        def timing(t: Timing | None):
            if t is None:
                return None
            return {"mean": t.mean, "median": t.median, "p95": t.p95, "per_sample_seconds": t.per_sample_seconds}

        return {
            "float": timing(self.float_timing),
            "quantized": timing(self.quantized_timing),
            "payload_bytes": {"float": self.float_payload_bytes, "quantized": self.quantized_payload_bytes},
            "payload_ratio": self.payload_ratio,
            "environment": self.environment,
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary_lines(self) -> list[str]:
        lines = []
        for name, t in (("float", self.float_timing), ("quantized", self.quantized_timing)):
            if t is not None:
                lines.append(
                    f"{name:9s} mean {t.mean * 1e3:.3f} ms  median {t.median * 1e3:.3f} ms  "
                    f"p95 {t.p95 * 1e3:.3f} ms  (n={len(t.per_sample_seconds)})"
                )
        lines.append(f"payload   float {self.float_payload_bytes} B" + (
            f"  quantized {self.quantized_payload_bytes} B  ratio {self.payload_ratio:.3f}"
            if self.quantized_payload_bytes is not None else ""
        ))
        return lines


def environment_note() -> str:
    blas_threads = os.environ.get("OMP_NUM_THREADS", "unset")
    return (
        f"python {platform.python_version()}, numpy {np.__version__}, {platform.machine()}, "
        f"{os.cpu_count()} cpu, OMP_NUM_THREADS={blas_threads}, single-threaded harness"
    )


def _time_one(pipe: Pipeline, window: np.ndarray) -> float:
    started = time.perf_counter()
    pipe.run(window)
    return time.perf_counter() - started


def run_bench(
    float_pipe: Pipeline,
    windows,
    repetitions: int = 5,
    quantized_pipe: Pipeline | None = None,
    float_payload: int = 0,
    quantized_payload: int | None = None,
) -> BenchReport:
    """Time every window ``repetitions`` times after one discarded warm-up pass."""
    windows = np.asarray(windows, dtype=np.int64)
    if windows.ndim != 2 or len(windows) == 0:
        raise ValueError("bench needs a non-empty 2-D array of windows")
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    pipes = [float_pipe] + ([quantized_pipe] if quantized_pipe is not None else [])
    for p in pipes:
        p._check_window(windows[0])
        for w in windows:
            p.run(w)
    samples: list[list[float]] = [[] for _ in pipes]
    for rep in range(repetitions):
        for i, w in enumerate(windows):
            # alternate which engine goes first so neither always runs on a warm cache
            order = range(len(pipes)) if (rep + i) % 2 == 0 else reversed(range(len(pipes)))
            for j in order:
                samples[j].append(_time_one(pipes[j], w))
    return BenchReport(
        Timing.from_samples(samples[0]),
        Timing.from_samples(samples[1]) if quantized_pipe is not None else None,
        float_payload,
        quantized_payload,
        environment_note(),
        {"repetitions": repetitions, "windows": int(len(windows))},
    )
