"""Stage functions behind the CLI.

Each stage reads its inputs from the run directory and writes its output
there, so any suffix of the pipeline can be re-run on its own and reproduces
the same downstream files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from . import artifacts, ingest, synth
from .config import PipelineConfig
from .detect import DetectionReport, Pipeline, as_engine, batch_features, calibrate_threshold, classify, score_skewness
from .errors import CorruptArtifact, DataError
from .iforest import fit as fit_forest
from .ingest import Label, TraceFormat
from .kernels import init_model
from .quantize import float_payload_bytes, quantize_model, quantized_payload_bytes
from .svdd import train

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "train", "quantize", "fit-forest", "calibrate", "detect", "eval")


class RunPaths:
    def __init__(self, out_dir: str | Path, quantized: bool = False):
        self.root = Path(out_dir)
        self.quantized = quantized
        q = "_q" if quantized else ""
        self.corpus = self.root / "corpus"
        self.vocab = self.root / "vocab.txt"
        self.dataset = self.root / "dataset.bin"
        self.model = self.root / "model.bin"
        self.train_log = self.root / "train_log.jsonl"
        self.qmodel = self.root / "model_q.bin"
        self.extractor = self.qmodel if quantized else self.model
        self.forest = self.root / f"forest{q}.bin"
        self.threshold = self.root / f"threshold{q}.json"
        self.detections = self.root / f"detections{q}.csv"
        self.report = self.root / f"report{q}.json"
        self.report_csv = self.root / f"report{q}.csv"
        self.bench = self.root / "bench.json"

    def variant(self, quantized: bool) -> "RunPaths":
        return RunPaths(self.root, quantized)


def _corpus_dir(cfg: PipelineConfig, paths: RunPaths) -> Path:
    return Path(cfg.run.corpus) if cfg.run.corpus else paths.corpus


def load_extractor(paths: RunPaths):
    if paths.quantized:
        return artifacts.load_artifact(paths.qmodel, "quantized_model")
    return artifacts.load_artifact(paths.model, "model").model


def load_dataset(paths: RunPaths) -> ingest.DatasetSplit:
    split, _ = artifacts.load_artifact(paths.dataset, "dataset")
    return split


# -- stages ---------------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, paths: RunPaths) -> Path:
    traces = synth.generate_corpus(cfg.synth)
    manifest = synth.write_corpus(traces, paths.corpus)
    log.info("synth: wrote %d traces to %s", len(traces), paths.corpus)
    return manifest


def read_corpus(corpus: Path, fmt: TraceFormat) -> list[tuple[str, list[ingest.SyscallEvent], Label]]:
    manifest = corpus / synth.MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"ingest: no {synth.MANIFEST_NAME} in {corpus}")
    out = []
    for path, label in synth.read_manifest(manifest):
        try:
            lab = Label(label)
        except ValueError as exc:
            raise DataError(f"ingest: manifest label {label!r} for {path.name} is not normal/anomalous") from exc
        events, skipped = ingest.read_trace(path, fmt)
        if skipped:
            log.warning("ingest: %s: skipped %d malformed lines", path.name, skipped)
        out.append((path.name, events, lab))
    return out


def stage_ingest(cfg: PipelineConfig, paths: RunPaths) -> Path:
    ing = cfg.ingest
    recordings = read_corpus(_corpus_dir(cfg, paths), cfg.run.trace_format)
    vocab = ingest.build_vocabulary(ev for _, ev, lab in recordings if lab is not Label.ANOMALOUS)
    normal, anomalous = [], []
    for name, events, lab in recordings:
        tokens = ingest.tokenize(events, vocab)
        windows = ingest.window(tokens, ing.window, ing.train_stride, ing.padding, lab, name)
        (anomalous if lab is Label.ANOMALOUS else normal).extend(windows)
    split = ingest.split_dataset(normal, anomalous, ing.train_frac, ing.val_frac, cfg.run.seed)
    artifacts.save_artifact(paths.vocab, vocab, "vocab")
    artifacts.save_artifact(paths.dataset, (split, ing.window), "dataset")
    log.info(
        "ingest: V=%d, windows train=%d validation=%d test=%d",
        vocab.size, len(split.train), len(split.validation), len(split.test),
    )
    return paths.dataset


def stage_train(cfg: PipelineConfig, paths: RunPaths) -> Path:
    vocab = artifacts.load_artifact(paths.vocab, "vocab")
    split = load_dataset(paths)
    m = cfg.model
    model = init_model(vocab.size, cfg.ingest.window, m.embed_dim, m.channels, m.kernel_width, m.pools, m.feature_dim, cfg.run.seed)
    paths.train_log.parent.mkdir(parents=True, exist_ok=True)
    with paths.train_log.open("w", encoding="utf-8") as fh:

        def on_epoch(rec):
            fh.write(json.dumps(rec.as_log()) + "\n")
            fh.flush()
            log.info("train: epoch %d mean_loss %.6g (%.2fs)", rec.epoch, rec.mean_loss, rec.wall_seconds)

        result = train(model, split, cfg.train, on_epoch=on_epoch)
    artifacts.save_artifact(paths.model, artifacts.ModelFile(result.model, result.state), "model")
    return paths.model


def stage_quantize(cfg: PipelineConfig, paths: RunPaths) -> Path:
    model = artifacts.load_artifact(paths.model, "model").model
    qmodel = quantize_model(model)
    artifacts.save_artifact(paths.qmodel, qmodel, "quantized_model")
    log.info(
        "quantize: payload %d -> %d bytes (%.3f)",
        float_payload_bytes(model), quantized_payload_bytes(qmodel),
        quantized_payload_bytes(qmodel) / float_payload_bytes(model),
    )
    return paths.qmodel


def stage_fit_forest(cfg: PipelineConfig, paths: RunPaths) -> Path:
    split = load_dataset(paths)
    features = batch_features(as_engine(load_extractor(paths)), ingest.stack_tokens(split.train))
    forest = fit_forest(features, cfg.forest.trees, cfg.forest.psi, cfg.run.seed, workers=cfg.workers())
    artifacts.save_artifact(paths.forest, forest, "forest")
    return paths.forest


def _scoring_pipeline(paths: RunPaths, with_threshold: bool = True) -> Pipeline:
    extractor = load_extractor(paths)
    forest = artifacts.load_artifact(paths.forest, "forest")
    threshold = artifacts.load_artifact(paths.threshold, "threshold") if with_threshold else None
    return Pipeline(extractor, forest, threshold)


def stage_calibrate(cfg: PipelineConfig, paths: RunPaths) -> Path:
    split = load_dataset(paths)
    scores = _scoring_pipeline(paths, with_threshold=False).scores(ingest.stack_tokens(split.validation))
    threshold = calibrate_threshold(scores, cfg.calibrate.k)
    diagnostics = {"n_scores": len(scores), "skewness": score_skewness(scores)}
    paths.threshold.write_text(artifacts.dump_threshold(threshold, diagnostics), encoding="utf-8")
    log.info("calibrate: threshold %.6g (mean %.6g, std %.6g)", threshold.value, threshold.mean, threshold.std)
    return paths.threshold


def stage_detect(cfg: PipelineConfig, paths: RunPaths) -> Path:
    split = load_dataset(paths)
    pipe = _scoring_pipeline(paths)
    scores = pipe.scores(ingest.stack_tokens(split.test))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "score", "predicted", "truth", "recording"])
    for i, (seq, s) in enumerate(zip(split.test, scores)):
        writer.writerow([i, repr(float(s)), classify(float(s), pipe.threshold), seq.label.truth, seq.source])
    paths.detections.write_text(buf.getvalue(), encoding="utf-8")
    return paths.detections


def read_detections(path: Path) -> tuple[list[float], list[int], list[str]]:
    scores, truth, groups = [], [], []
    try:
        with path.open(encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                scores.append(float(row["score"]))
                truth.append(int(row["truth"]))
                groups.append(row["recording"])
    except (KeyError, ValueError) as exc:
        raise CorruptArtifact(f"detections: {path}: {exc}") from exc
    return scores, truth, groups


def stage_eval(cfg: PipelineConfig, paths: RunPaths) -> DetectionReport:
    scores, truth, groups = read_detections(paths.detections)
    threshold = artifacts.load_artifact(paths.threshold, "threshold")
    corpus = cfg.run.corpus or f"synthetic(seed={cfg.synth.seed}, V={cfg.synth.vocab_size}, normal={cfg.synth.n_normal}, anomalous={cfg.synth.n_anomalous})"
    metadata = {
        "dataset": corpus,
        "extractor": "quantized" if paths.quantized else "float",
        "model_sha256": artifacts.file_digest(paths.extractor),
        "forest_sha256": artifacts.file_digest(paths.forest),
        "window": cfg.ingest.window,
        "level": "window",
    }
    report = DetectionReport.build(scores, truth, threshold, metadata, groups=groups if any(groups) else None)
    paths.report.write_text(report.to_json(include_timing=False), encoding="utf-8")
    paths.report_csv.write_text(report.to_csv(include_timing=False), encoding="utf-8")
    m = report.metrics
    log.info("eval (%s): precision %.4f recall %.4f f1 %.4f", metadata["extractor"], m.precision, m.recall, m.f1)
    return report


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "train": stage_train,
    "quantize": stage_quantize,
    "fit-forest": stage_fit_forest,
    "calibrate": stage_calibrate,
    "detect": stage_detect,
    "eval": stage_eval,
}


def run_all(cfg: PipelineConfig, paths: RunPaths | None = None, on_stage=None) -> dict[str, DetectionReport]:
    """Run every stage in order; returns the eval report(s) by variant.

    ``on_stage(name, variant)`` is called before each stage starts, which
    lets callers name the failing stage in diagnostics.
    """
    paths = paths or RunPaths(cfg.out_dir)
    notify = on_stage or (lambda name, variant: None)
    plan: list[tuple[str, RunPaths]] = []
    if not cfg.run.corpus:
        plan.append(("synth", paths))
    plan += [("ingest", paths), ("train", paths)]
    if cfg.run.quantize:
        plan.append(("quantize", paths))
    variants = [paths.variant(False)] + ([paths.variant(True)] if cfg.run.quantize else [])
    for v in variants:
        plan += [("fit-forest", v), ("calibrate", v), ("detect", v), ("eval", v)]
    reports = {}
    for name, p in plan:
        notify(name, "quantized" if p.quantized else "float")
        result = STAGE_FUNCS[name](cfg, p)
        if name == "eval":
            reports["quantized" if p.quantized else "float"] = result
    return reports


def detect_trace(cfg: PipelineConfig, paths: RunPaths, trace_path: str | Path, fmt: TraceFormat | None = None) -> dict:
    """Window a raw trace at the detection stride and classify every window."""
    vocab = artifacts.load_artifact(paths.vocab, "vocab")
    pipe = _scoring_pipeline(paths)
    events, skipped = ingest.read_trace(trace_path, fmt or cfg.run.trace_format)
    tokens = ingest.tokenize(events, vocab)
    windows = ingest.window(tokens, cfg.ingest.window, cfg.ingest.detect_stride, ingest.Padding.ZERO_PAD)
    rows = []
    for i, w in enumerate(windows):
        det = pipe.run(w)
        rows.append({"window": i, "offset": i * cfg.ingest.detect_stride, "score": det.score, "label": det.label, "seconds": det.elapsed_seconds})
    return {
        "trace": str(trace_path),
        "skipped_lines": skipped,
        "unknown_calls": int(np.sum(np.asarray(tokens) == ingest.UNKNOWN_ID)),
        "threshold": pipe.threshold.value,
        "windows": rows,
        "verdict": int(any(r["label"] for r in rows)),
    }


def stage_bench(cfg: PipelineConfig, paths: RunPaths, quantized: bool | None = None):
    """Latency of the float pipeline, plus the quantized one when its artifacts exist.

    ``quantized=True`` requires the quantized artifacts; ``None`` uses them if present.
    """
    from .bench import run_bench

    split = load_dataset(paths)
    windows = ingest.stack_tokens(split.test[: cfg.bench.windows])
    fpaths, qpaths = paths.variant(False), paths.variant(True)
    float_pipe = _scoring_pipeline(fpaths)
    model = artifacts.load_artifact(fpaths.model, "model").model
    qpipe, qbytes = None, None
    have_q = all(p.exists() for p in (qpaths.qmodel, qpaths.forest, qpaths.threshold))
    if quantized or (quantized is None and have_q):
        qpipe = _scoring_pipeline(qpaths)
        qbytes = quantized_payload_bytes(qpipe.engine.qmodel)
    report = run_bench(float_pipe, windows, cfg.bench.repetitions, qpipe, float_payload_bytes(model), qbytes)
    paths.bench.write_text(report.to_json(), encoding="utf-8")
    return report
