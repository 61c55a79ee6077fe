"""On-disk formats for every artifact the pipeline produces.

Binary containers (little-endian) start with an 8-byte magic, a uint16
format version and a uint16 flags word:

* model / quantized model: ``LHIDSMDL``; flag bit 0 marks int8 payloads.
  Header holds the hyperparameters and a layer table, then tensors in
  declaration order (embedding, conv kernels, dense), then tagged sections
  (``SVDD``: center, radius, weight decay), closed by an ``END`` tag.
* forest: ``LHIDSIFR``; forest header then one preorder node list per tree.
* dataset split: ``LHIDSDAT``; window length, recording-name table, then
  train/validation/test partitions of int32 tokens + label + source index.

Threshold and vocabulary files are text with a magic/version header.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ingest
from .detect import Threshold
from .errors import CorruptArtifact, VersionMismatch, WrongKind
from .iforest import Internal, IsolationForestModel, ITreeNode, Leaf
from .ingest import DatasetSplit, Label, TokenSequence, Vocabulary
from .kernels import ConvLayer, ExtractorModel
from .quantize import QTensor, QuantizedModel, QuantParams
from .svdd import SvddState

MODEL_MAGIC = b"LHIDSMDL"
FOREST_MAGIC = b"LHIDSIFR"
DATASET_MAGIC = b"LHIDSDAT"
THRESHOLD_MAGIC = "light-hids/threshold"
FORMAT_VERSION = 1

FLAG_QUANTIZED = 1

KINDS = ("model", "quantized_model", "forest", "threshold", "vocab", "dataset")

_LABEL_CODES = {Label.NORMAL: 0, Label.ANOMALOUS: 1, Label.UNLABELED: 2}
_LABELS = {v: k for k, v in _LABEL_CODES.items()}


@dataclass
class ModelFile:
    model: ExtractorModel
    svdd: SvddState | None = None


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptArtifact(f"{self.what}: truncated (wanted {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise CorruptArtifact(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def _check_header(data: bytes, magic: bytes, what: str) -> tuple[_Reader, int]:
    if len(data) < 12:
        raise CorruptArtifact(f"{what}: file too short for a header")
    if data[:8] != magic:
        found = detect_kind(data)
        if found is not None:
            raise WrongKind(f"expected a {what} file, found a {found} file")
        raise CorruptArtifact(f"{what}: bad magic {bytes(data[:8])!r}")
    r = _Reader(data, what)
    r.take(8)
    version, flags = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{what}: format version {version}, this build reads {FORMAT_VERSION}")
    return r, flags


def detect_kind(data: bytes) -> str | None:
    head = bytes(data[:8])
    if head == MODEL_MAGIC:
        if len(data) >= 12 and struct.unpack("<H", data[10:12])[0] & FLAG_QUANTIZED:
            return "quantized_model"
        return "model"
    if head == FOREST_MAGIC:
        return "forest"
    if head == DATASET_MAGIC:
        return "dataset"
    text = bytes(data[:64]).decode("utf-8", errors="replace")
    if text.startswith(f"magic = {ingest.VOCAB_MAGIC}"):
        return "vocab"
    if THRESHOLD_MAGIC in text:
        return "threshold"
    return None


# -- extractor models -----------------------------------------------------------


def _model_header(out: io.BytesIO, flags: int, seq_len, vocab_rows, embed_dim, feature_dim, conv_shapes):
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<HH", FORMAT_VERSION, flags))
    out.write(struct.pack("<IIIII", seq_len, vocab_rows, embed_dim, feature_dim, len(conv_shapes)))
    for c_out, c_in, width, pool in conv_shapes:
        out.write(struct.pack("<IIII", c_out, c_in, width, pool))


def _write_sections(out: io.BytesIO, svdd: SvddState | None):
    if svdd is not None:
        center = np.asarray(svdd.center, dtype="<f8")
        payload = struct.pack("<I", len(center)) + center.tobytes() + struct.pack("<dd", svdd.radius, svdd.weight_decay)
        out.write(b"SVDD" + struct.pack("<I", len(payload)) + payload)
    out.write(b"END\0" + struct.pack("<I", 0))


def _read_sections(r: _Reader) -> SvddState | None:
    svdd = None
    while True:
        tag = bytes(r.take(4))
        (length,) = r.unpack("<I")
        if tag == b"END\0":
            return svdd
        body = _Reader(bytes(r.take(length)), f"{r.what} section {tag!r}")
        if tag == b"SVDD":
            (d,) = body.unpack("<I")
            center = body.array("<f8", d)
            radius, decay = body.unpack("<dd")
            body.done()
            svdd = SvddState(center, radius, decay)
        # unknown sections are skipped


def dump_model(model: ExtractorModel, svdd: SvddState | None = None) -> bytes:
    out = io.BytesIO()
    shapes = [(c.c_out, c.c_in, c.width, c.pool) for c in model.conv_layers]
    _model_header(out, 0, model.seq_len, model.vocab_rows, model.embed_dim, model.feature_dim, shapes)
    for w in model.parameters():
        out.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    _write_sections(out, svdd)
    return out.getvalue()


def _read_model_header(r: _Reader):
    seq_len, vocab_rows, embed_dim, feature_dim, n_conv = r.unpack("<IIIII")
    shapes = [r.unpack("<IIII") for _ in range(n_conv)]
    return seq_len, vocab_rows, embed_dim, feature_dim, shapes


def _tensor_shapes(vocab_rows, embed_dim, feature_dim, shapes):
    out = [(vocab_rows, embed_dim)]
    out += [(c_out, c_in, width) for c_out, c_in, width, _ in shapes]
    out.append((shapes[-1][0] if shapes else embed_dim, feature_dim))
    return out


def load_model_bytes(data: bytes) -> ModelFile:
    r, flags = _check_header(data, MODEL_MAGIC, "model")
    if flags & FLAG_QUANTIZED:
        raise WrongKind("expected a float model file, found a quantized_model file")
    seq_len, vocab_rows, embed_dim, feature_dim, shapes = _read_model_header(r)
    tensors = [r.array("<f4", int(np.prod(s))).reshape(s).astype(np.float64) for s in _tensor_shapes(vocab_rows, embed_dim, feature_dim, shapes)]
    svdd = _read_sections(r)
    r.done()
    layers = [ConvLayer(k, pool) for k, (_, _, _, pool) in zip(tensors[1:-1], shapes)]
    try:
        model = ExtractorModel(tensors[0], layers, tensors[-1], seq_len)
    except Exception as exc:
        raise CorruptArtifact(f"model: inconsistent layer table ({exc})") from exc
    return ModelFile(model, svdd)


def dump_quantized(qmodel: QuantizedModel) -> bytes:
    out = io.BytesIO()
    shapes = [(q.codes.shape[0], q.codes.shape[1], q.codes.shape[2], p) for q, p in zip(qmodel.conv, qmodel.pools)]
    emb = qmodel.embedding.codes
    _model_header(out, FLAG_QUANTIZED, qmodel.seq_len, emb.shape[0], emb.shape[1], qmodel.feature_dim, shapes)
    for q in qmodel.tensors():
        out.write(struct.pack("<di", q.params.scale, q.params.zero_point))
        out.write(np.ascontiguousarray(q.codes, dtype=np.int8).tobytes())
    _write_sections(out, None)
    return out.getvalue()


def load_quantized_bytes(data: bytes) -> QuantizedModel:
    r, flags = _check_header(data, MODEL_MAGIC, "quantized_model")
    if not flags & FLAG_QUANTIZED:
        raise WrongKind("expected a quantized_model file, found a float model file")
    seq_len, vocab_rows, embed_dim, feature_dim, shapes = _read_model_header(r)
    qts = []
    for s in _tensor_shapes(vocab_rows, embed_dim, feature_dim, shapes):
        scale, zp = r.unpack("<di")
        try:
            params = QuantParams(scale, zp)
        except ValueError as exc:
            raise CorruptArtifact(f"quantized_model: {exc}") from exc
        qts.append(QTensor(r.array("i1", int(np.prod(s))).reshape(s), params))
    _read_sections(r)
    r.done()
    return QuantizedModel(qts[0], tuple(qts[1:-1]), tuple(p for *_, p in shapes), qts[-1], seq_len)


# -- isolation forest -------------------------------------------------------------


def _write_tree(out: io.BytesIO, node: ITreeNode):
    nodes = []
    stack = [node]
    while stack:
        n = stack.pop()
        nodes.append(n)
        if isinstance(n, Internal):
            stack.append(n.right)
            stack.append(n.left)
    out.write(struct.pack("<I", len(nodes)))
    for n in nodes:
        if isinstance(n, Leaf):
            out.write(struct.pack("<BI", 0, n.size))
        else:
            out.write(struct.pack("<BId", 1, n.split_dim, n.split_value))


def _read_tree(r: _Reader) -> ITreeNode:
    (count,) = r.unpack("<I")
    flat = []
    for _ in range(count):
        (tag,) = r.unpack("<B")
        if tag == 0:
            flat.append(("leaf", r.unpack("<I")[0]))
        elif tag == 1:
            flat.append(("internal", r.unpack("<Id")))
        else:
            raise CorruptArtifact(f"forest: unknown node tag {tag}")
    pos = 0

    def build() -> ITreeNode:
        nonlocal pos
        if pos >= len(flat):
            raise CorruptArtifact("forest: preorder node list ends early")
        kind, payload = flat[pos]
        pos += 1
        if kind == "leaf":
            return Leaf(payload)
        left = build()
        right = build()
        return Internal(payload[0], payload[1], left, right)

    tree = build()
    if pos != len(flat):
        raise CorruptArtifact("forest: extra nodes after tree")
    return tree


def dump_forest(forest: IsolationForestModel) -> bytes:
    out = io.BytesIO()
    out.write(FOREST_MAGIC)
    out.write(struct.pack("<HH", FORMAT_VERSION, 0))
    out.write(struct.pack("<IIIIIq", len(forest.trees), forest.psi, forest.psi_eff, forest.height_limit, forest.dim, forest.seed))
    for tree in forest.trees:
        _write_tree(out, tree)
    return out.getvalue()


def load_forest_bytes(data: bytes) -> IsolationForestModel:
    r, _ = _check_header(data, FOREST_MAGIC, "forest")
    t, psi, psi_eff, height_limit, dim, seed = r.unpack("<IIIIIq")
    trees = [_read_tree(r) for _ in range(t)]
    r.done()
    return IsolationForestModel(trees, psi, psi_eff, height_limit, seed, dim)


# -- dataset split ----------------------------------------------------------------


def dump_dataset(split: DatasetSplit, seq_len: int) -> bytes:
    sources: dict[str, int] = {}
    for part in (split.train, split.validation, split.test):
        for s in part:
            sources.setdefault(s.source, len(sources))
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<HH", FORMAT_VERSION, 0))
    out.write(struct.pack("<II", seq_len, len(sources)))
    for name in sources:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
    for part in (split.train, split.validation, split.test):
        out.write(struct.pack("<I", len(part)))
        tokens = np.asarray([s.tokens for s in part], dtype="<i4").reshape(len(part), seq_len)
        out.write(tokens.tobytes())
        out.write(np.asarray([_LABEL_CODES[s.label] for s in part], dtype="u1").tobytes())
        out.write(np.asarray([sources[s.source] for s in part], dtype="<u4").tobytes())
    return out.getvalue()


def load_dataset_bytes(data: bytes) -> tuple[DatasetSplit, int]:
    r, _ = _check_header(data, DATASET_MAGIC, "dataset")
    seq_len, n_sources = r.unpack("<II")
    names = []
    for _ in range(n_sources):
        (size,) = r.unpack("<H")
        names.append(bytes(r.take(size)).decode("utf-8"))
    parts = []
    for _ in range(3):
        (n,) = r.unpack("<I")
        tokens = r.array("<i4", n * seq_len).reshape(n, seq_len)
        labels = r.array("u1", n)
        srcs = r.array("<u4", n)
        if labels.size and labels.max() > 2 or srcs.size and srcs.max() >= max(n_sources, 1):
            raise CorruptArtifact("dataset: label or source index out of range")
        parts.append([TokenSequence(tuple(int(x) for x in row), _LABELS[int(lab)], names[int(src)] if names else "") for row, lab, src in zip(tokens, labels, srcs)])
    r.done()
    return DatasetSplit(*parts), seq_len


# -- threshold --------------------------------------------------------------------


def dump_threshold(threshold: Threshold, diagnostics: dict | None = None) -> str:
    doc = {
        "magic": THRESHOLD_MAGIC,
        "version": FORMAT_VERSION,
        "mean": threshold.mean,
        "std": threshold.std,
        "k": threshold.k,
        "value": threshold.value,
    }
    if diagnostics:
        doc["diagnostics"] = diagnostics
    return json.dumps(doc, indent=2) + "\n"


def load_threshold_text(text: str) -> Threshold:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptArtifact(f"threshold: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("magic") != THRESHOLD_MAGIC:
        raise WrongKind("not a threshold file")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"threshold: format version {doc.get('version')}, this build reads {FORMAT_VERSION}")
    try:
        return Threshold(float(doc["mean"]), float(doc["std"]), float(doc["k"]), float(doc["value"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArtifact(f"threshold: {exc}") from exc


# -- generic entry points -----------------------------------------------------------


def serialize(artifact, kind: str) -> bytes:
    if kind == "model":
        if isinstance(artifact, ModelFile):
            return dump_model(artifact.model, artifact.svdd)
        return dump_model(artifact)
    if kind == "quantized_model":
        return dump_quantized(artifact)
    if kind == "forest":
        return dump_forest(artifact)
    if kind == "threshold":
        return dump_threshold(artifact).encode("utf-8")
    if kind == "vocab":
        return ingest.dump_vocabulary(artifact).encode("utf-8")
    if kind == "dataset":
        split, seq_len = artifact
        return dump_dataset(split, seq_len)
    raise ValueError(f"unknown artifact kind {kind!r}; expected one of {KINDS}")


def deserialize(data: bytes, kind: str):
    found = detect_kind(data)
    if found is not None and found != kind:
        raise WrongKind(f"expected a {kind} file, found a {found} file")
    if kind == "model":
        return load_model_bytes(data)
    if kind == "quantized_model":
        return load_quantized_bytes(data)
    if kind == "forest":
        return load_forest_bytes(data)
    if kind in ("threshold", "vocab"):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptArtifact(f"{kind}: not UTF-8 text") from exc
        return load_threshold_text(text) if kind == "threshold" else ingest.parse_vocabulary(text)
    if kind == "dataset":
        return load_dataset_bytes(data)
    raise ValueError(f"unknown artifact kind {kind!r}; expected one of {KINDS}")


def save_artifact(path: str | Path, artifact, kind: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(artifact, kind))
    return path


def load_artifact(path: str | Path, kind: str):
    return deserialize(Path(path).read_bytes(), kind)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
