"""Trace parsing, vocabulary building, tokenization, windowing and splitting.

Raw system-call traces come in two line formats:

* ``lid_ds_like``: ``<timestamp> <pid> <call_name> [extra fields...]``
* ``plain_names``: one call name per line

Only the call names survive into the model input; timestamps and process ids
are parsed so malformed lines can be detected, then dropped.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadParameter, CorruptArtifact, EmptyTrace, InsufficientData, TraceEncodingError, VersionMismatch, WrongKind

UNKNOWN_ID = 0

VOCAB_MAGIC = "light-hids/vocab"
VOCAB_VERSION = 1


class TraceFormat(str, enum.Enum):
    LID_DS_LIKE = "lid_ds_like"
    PLAIN_NAMES = "plain_names"


class Label(str, enum.Enum):
    NORMAL = "normal"
    ANOMALOUS = "anomalous"
    UNLABELED = "unlabeled"

    @property
    def truth(self) -> int:
        return 1 if self is Label.ANOMALOUS else 0


class Padding(str, enum.Enum):
    DROP_TAIL = "drop_tail"
    ZERO_PAD = "zero_pad"


@dataclass(frozen=True)
class SyscallEvent:
    timestamp: float
    process_id: int
    call_name: str


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    label: Label = Label.UNLABELED
    source: str = ""

    def __len__(self):
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


@dataclass
class Vocabulary:
    name_to_id: dict[str, int] = field(default_factory=dict)
    unknown_id: int = UNKNOWN_ID

    @property
    def size(self) -> int:
        """Number of named calls, V. Valid token ids are 0..V."""
        return len(self.name_to_id)

    def lookup(self, name: str) -> int:
        return self.name_to_id.get(name, self.unknown_id)

    def names(self) -> list[str]:
        return sorted(self.name_to_id, key=self.name_to_id.__getitem__)


@dataclass
class DatasetSplit:
    train: list[TokenSequence]
    validation: list[TokenSequence]
    test: list[TokenSequence]


def _decode(raw: bytes | str) -> str:
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceEncodingError(f"trace is not valid UTF-8: {exc}") from exc


def parse_trace(raw: bytes | str, fmt: TraceFormat | str = TraceFormat.PLAIN_NAMES) -> tuple[list[SyscallEvent], int]:
    """Parse one trace into events.

    Returns ``(events, skipped)`` where ``skipped`` counts malformed lines.
    Blank lines and ``#`` comments are ignored and not counted as malformed.
    """
    fmt = TraceFormat(fmt)
    text = _decode(raw)
    events: list[SyscallEvent] = []
    skipped = 0
    last_ts = -math.inf
    for index, line in enumerate(text.splitlines()):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if fmt is TraceFormat.PLAIN_NAMES:
            if len(parts) != 1:
                skipped += 1
                continue
            events.append(SyscallEvent(float(index), 0, parts[0]))
            continue
        if len(parts) < 3:
            skipped += 1
            continue
        try:
            ts = float(parts[0])
            pid = int(parts[1])
        except ValueError:
            skipped += 1
            continue
        if not math.isfinite(ts) or ts < 0 or pid < 0 or ts < last_ts:
            skipped += 1
            continue
        last_ts = ts
        # columns past the call name (arguments, return values) are dropped
        events.append(SyscallEvent(ts, pid, parts[2]))
    if not events:
        raise EmptyTrace("trace contains no valid events")
    return events, skipped


def read_trace(path: str | Path, fmt: TraceFormat | str = TraceFormat.PLAIN_NAMES) -> tuple[list[SyscallEvent], int]:
    return parse_trace(Path(path).read_bytes(), fmt)


def build_vocabulary(traces: Iterable[Sequence[SyscallEvent]]) -> Vocabulary:
    """Assign ids 1..V to call names in order of first appearance."""
    name_to_id: dict[str, int] = {}
    seen_any = False
    for trace in traces:
        for event in trace:
            seen_any = True
            if event.call_name not in name_to_id:
                name_to_id[event.call_name] = len(name_to_id) + 1
    if not seen_any:
        raise EmptyTrace("cannot build a vocabulary from zero events")
    return Vocabulary(name_to_id)


def tokenize(events: Sequence[SyscallEvent], vocab: Vocabulary) -> list[int]:
    return [vocab.lookup(e.call_name) for e in events]


def window(
    tokens: Sequence[int],
    length: int,
    stride: int,
    pad: Padding | str = Padding.DROP_TAIL,
    label: Label = Label.UNLABELED,
    source: str = "",
) -> list[TokenSequence]:
    """Cut ``tokens`` into fixed-length windows starting at 0, S, 2S, ..."""
    if length < 1 or stride < 1:
        raise BadParameter(f"window length and stride must be >= 1, got {length}, {stride}")
    pad = Padding(pad)
    tokens = list(tokens)
    n = len(tokens)
    # drop_tail keeps only full windows; zero_pad keeps every start inside the trace
    last_start = n - length if pad is Padding.DROP_TAIL else n - 1
    out = []
    for start in range(0, last_start + 1, stride):
        chunk = tokens[start : start + length]
        chunk += [UNKNOWN_ID] * (length - len(chunk))
        out.append(TokenSequence(tuple(chunk), label, source))
    return out


def _partition_sizes(n: int, train_frac: float, val_frac: float) -> tuple[int, int, int]:
    # epsilon keeps e.g. 0.7 * 10 from flooring to 6
    n_train = int(math.floor(n * train_frac + 1e-9))
    n_val = int(math.floor(n * val_frac + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(
    normal: Sequence[TokenSequence],
    anomalous: Sequence[TokenSequence],
    train_frac: float = 0.7,
    val_frac: float = 0.15,
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle the normal pool and cut it into train/validation/test.

    Every anomalous sequence is appended to the test partition after the
    normal test windows.
    """
    if not (train_frac > 0 and val_frac > 0 and train_frac + val_frac < 1):
        raise InsufficientData(
            f"split_dataset: need 0 < train_frac, 0 < val_frac and train_frac + val_frac < 1, "
            f"got {train_frac} and {val_frac}"
        )
    n_train, n_val, n_test = _partition_sizes(len(normal), train_frac, val_frac)
    if min(n_train, n_val, n_test) < 1:
        raise InsufficientData(
            f"split_dataset: {len(normal)} normal sequences give an empty partition "
            f"(train={n_train}, validation={n_val}, test={n_test})"
        )
    order = np.random.default_rng(seed).permutation(len(normal))
    pool = [normal[i] for i in order]
    return DatasetSplit(
        train=pool[:n_train],
        validation=pool[n_train : n_train + n_val],
        test=pool[n_train + n_val :] + list(anomalous),
    )


def stack_tokens(seqs: Sequence[TokenSequence], length: int | None = None) -> np.ndarray:
    """Stack sequences into an ``(n, L)`` int64 array."""
    if not seqs:
        return np.zeros((0, length or 0), dtype=np.int64)
    return np.asarray([s.tokens for s in seqs], dtype=np.int64)


def truth_labels(seqs: Sequence[TokenSequence]) -> list[int]:
    return [s.label.truth for s in seqs]


# -- vocabulary file ---------------------------------------------------------


def dump_vocabulary(vocab: Vocabulary) -> str:
    lines = [
        f"magic = {VOCAB_MAGIC}",
        f"version = {VOCAB_VERSION}",
        f"size = {vocab.size}",
        f"unknown_id = {vocab.unknown_id}",
        "[names]",
    ]
    lines += [f"{name} = {vocab.name_to_id[name]}" for name in vocab.names()]
    return "\n".join(lines) + "\n"


def parse_vocabulary(text: str) -> Vocabulary:
    header: dict[str, str] = {}
    names: dict[str, int] = {}
    in_names = False
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[names]":
            in_names = True
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CorruptArtifact(f"vocabulary: malformed line {raw_line!r}")
        if in_names:
            try:
                names[key] = int(value)
            except ValueError as exc:
                raise CorruptArtifact(f"vocabulary: bad id in {raw_line!r}") from exc
        else:
            header[key] = value
    if header.get("magic") != VOCAB_MAGIC:
        raise WrongKind(f"not a vocabulary file (magic={header.get('magic')!r})")
    if header.get("version") != str(VOCAB_VERSION):
        raise VersionMismatch(f"vocabulary version {header.get('version')} != {VOCAB_VERSION}")
    try:
        size = int(header["size"])
        unknown_id = int(header.get("unknown_id", UNKNOWN_ID))
    except (KeyError, ValueError) as exc:
        raise CorruptArtifact("vocabulary: missing or bad size field") from exc
    if size != len(names) or sorted(names.values()) != list(range(1, size + 1)):
        raise CorruptArtifact(f"vocabulary: ids are not exactly 1..{size}")
    return Vocabulary(names, unknown_id)
