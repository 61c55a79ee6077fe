"""Seeded synthetic system-call corpora.

Normal traces come from a first-order Markov chain over a small call
vocabulary.  Anomalous traces are normal traces with an injected pattern:
a repeated call (brute-force-like), calls the normal model never emits
(injection-like), or a locally shuffled span.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadParameter

# common x86-64 calls; vocabularies larger than this list get synthetic names
CALL_NAMES = (
    "read", "write", "openat", "close", "fstat", "mmap", "munmap", "brk",
    "poll", "lseek", "rt_sigaction", "ioctl", "futex", "epoll_wait", "accept4", "sendto",
    "recvfrom", "getpid", "socket", "connect", "clock_gettime", "newfstatat", "fcntl", "getdents64",
    "select", "writev", "pread64", "madvise", "nanosleep", "getuid", "setsockopt", "shutdown",
)

NOVEL_PREFIX = "novel_call_"


class AnomalyKind(str, enum.Enum):
    REPEAT_BURST = "repeat_burst"
    NOVEL_CALLS = "novel_calls"
    SHUFFLED = "shuffled"


@dataclass(frozen=True)
class MarkovModel:
    states: tuple[str, ...]
    transition: np.ndarray  # (V, V), rows sum to 1
    initial: np.ndarray  # (V,)
    seed: int


@dataclass(frozen=True)
class AnomalySpec:
    kind: AnomalyKind
    intensity: float
    burst_call: str = "failauth"
    novel_count: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", AnomalyKind(self.kind))
        if not 0 < self.intensity <= 1:
            raise BadParameter(f"anomaly intensity must lie in (0, 1], got {self.intensity}")
        if self.kind is AnomalyKind.REPEAT_BURST and not self.burst_call.strip():
            raise BadParameter("repeat_burst needs a burst call name")
        if self.kind is AnomalyKind.NOVEL_CALLS and self.novel_count < 1:
            raise BadParameter(f"novel_calls needs novel_count >= 1, got {self.novel_count}")


def call_names(vocab_size: int) -> tuple[str, ...]:
    if vocab_size <= len(CALL_NAMES):
        return CALL_NAMES[:vocab_size]
    return CALL_NAMES + tuple(f"syscall_{i}" for i in range(len(CALL_NAMES), vocab_size))


def _dirichlet_rows(rng: np.random.Generator, rows: int, cols: int, concentration: float) -> np.ndarray:
    draws = rng.gamma(concentration, size=(rows, cols))
    sums = draws.sum(axis=1, keepdims=True)
    # tiny concentrations can underflow a whole row to zero
    draws[sums[:, 0] == 0] = 1.0
    return draws / draws.sum(axis=1, keepdims=True)


def gen_normal_model(vocab_size: int, concentration: float, seed: int) -> MarkovModel:
    if vocab_size < 2:
        raise BadParameter(f"vocab_size must be >= 2, got {vocab_size}")
    if not concentration > 0:
        raise BadParameter(f"concentration must be > 0, got {concentration}")
    rng = np.random.default_rng(seed)
    transition = _dirichlet_rows(rng, vocab_size, vocab_size, concentration)
    initial = _dirichlet_rows(rng, 1, vocab_size, concentration)[0]
    return MarkovModel(call_names(vocab_size), transition, initial, seed)


def _draw(cum: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cum, u, side="right")), len(cum) - 1)


def sample_trace(model: MarkovModel, length: int, stream_id: int) -> list[str]:
    if length < 1:
        raise BadParameter(f"trace length must be >= 1, got {length}")
    rng = np.random.default_rng([model.seed, stream_id])
    u = rng.random(length)
    cum_rows = np.cumsum(model.transition, axis=1)
    state = _draw(np.cumsum(model.initial), u[0])
    states = [state]
    for i in range(1, length):
        state = _draw(cum_rows[state], u[i])
        states.append(state)
    return [model.states[s] for s in states]


def _n_positions(intensity: float, n: int) -> int:
    return int(math.floor(intensity * n + 0.5))


def inject_anomaly(trace: Sequence[str], spec: AnomalySpec, seed: int) -> list[str]:
    """Return a same-length copy of ``trace`` carrying the anomaly in ``spec``."""
    if not trace:
        raise BadParameter("cannot inject into an empty trace")
    out = list(trace)
    n = len(out)
    count = _n_positions(spec.intensity, n)
    if count == 0:
        return out
    rng = np.random.default_rng(seed)
    if spec.kind is AnomalyKind.REPEAT_BURST:
        start = int(rng.integers(0, n - count + 1))
        out[start : start + count] = [spec.burst_call] * count
    elif spec.kind is AnomalyKind.NOVEL_CALLS:
        positions = rng.choice(n, size=count, replace=False)
        for j, pos in enumerate(np.sort(positions)):
            out[pos] = f"{NOVEL_PREFIX}{j % spec.novel_count}"
    else:
        start = int(rng.integers(0, n - count + 1))
        span = out[start : start + count]
        out[start : start + count] = [span[i] for i in rng.permutation(count)]
    return out


@dataclass
class CorpusConfig:
    vocab_size: int = 16
    concentration: float = 0.5
    n_normal: int = 200
    n_anomalous: int = 40
    trace_length: int = 512
    anomaly_kind: AnomalyKind = AnomalyKind.REPEAT_BURST
    intensity: float = 0.5
    segment: int = 16
    burst_call: str = "failauth"
    novel_count: int = 4
    seed: int = 0

    def anomaly_spec(self) -> AnomalySpec:
        return AnomalySpec(self.anomaly_kind, self.intensity, self.burst_call, self.novel_count)


@dataclass
class SyntheticTrace:
    name: str
    calls: list[str]
    anomalous: bool


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def generate_corpus(cfg: CorpusConfig) -> list[SyntheticTrace]:
    """Normal traces first (stream ids 0..n_normal-1), then anomalous ones.

    Anomalies are injected independently into every ``segment``-long chunk of
    an anomalous trace, so that each detection window of that size carries
    attack content.  ``segment = 0`` injects once over the whole trace.
    """
    model = gen_normal_model(cfg.vocab_size, cfg.concentration, cfg.seed)
    spec = cfg.anomaly_spec()
    traces = []
    for i in range(cfg.n_normal):
        traces.append(SyntheticTrace(f"normal_{i:04d}", sample_trace(model, cfg.trace_length, i), False))
    for j in range(cfg.n_anomalous):
        calls = sample_trace(model, cfg.trace_length, cfg.n_normal + j)
        seg = cfg.segment if cfg.segment > 0 else len(calls)
        for k, start in enumerate(range(0, len(calls), seg)):
            calls[start : start + seg] = inject_anomaly(calls[start : start + seg], spec, _sub_seed(cfg.seed, j, k))
        traces.append(SyntheticTrace(f"attack_{j:04d}", calls, True))
    return traces


MANIFEST_NAME = "manifest.tsv"


def write_corpus(traces: Sequence[SyntheticTrace], directory: str | Path) -> Path:
    """Write plain_names trace files plus a ``file<TAB>label`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["file\tlabel"]
    for t in traces:
        fname = f"{t.name}.trace"
        (directory / fname).write_text("\n".join(t.calls) + "\n", encoding="utf-8")
        rows.append(f"{fname}\t{'anomalous' if t.anomalous else 'normal'}")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    path = Path(path)
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        fname, label = line.split("\t")
        entries.append((path.parent / fname, label))
    return entries
