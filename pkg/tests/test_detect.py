import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from light_hids.bench import BenchReport, Timing, run_bench
from light_hids.detect import (
    DetectionReport,
    Metrics,
    Pipeline,
    Threshold,
    as_engine,
    batch_features,
    calibrate_threshold,
    classify,
    deploy_pipeline,
    evaluate,
    score_skewness,
)
from light_hids.errors import ArtifactMismatch, InsufficientScores, LengthMismatch, NonFiniteScore
from light_hids.iforest import fit
from light_hids.kernels import init_model
from light_hids.quantize import quantize_model

scores_st = st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50)


def test_threshold_zero_variance():
    t = calibrate_threshold([0.4, 0.4, 0.4], k=2)
    assert (t.mean, t.std, t.value) == (0.4, 0.0, 0.4)


def test_threshold_hand_value():
    t = calibrate_threshold([1, 2, 3], k=2)
    assert t.mean == 2
    assert abs(t.std - math.sqrt(2 / 3)) < 1e-15
    assert abs(t.value - (2 + 2 * math.sqrt(2 / 3))) < 1e-12


def test_threshold_k_zero():
    assert calibrate_threshold([1, 2, 3], k=0).value == 2


def test_threshold_errors():
    with pytest.raises(InsufficientScores):
        calibrate_threshold([1.0])
    with pytest.raises(NonFiniteScore):
        calibrate_threshold([1.0, float("nan")])
    with pytest.raises(ValueError):
        Threshold(1.0, 1.0, 2.0, value=5.0)


@given(scores_st, st.floats(0.01, 100), st.floats(-100, 100), st.floats(0, 4))
def test_threshold_affine_equivariance(scores, a, b, k):
    base = calibrate_threshold(scores, k)
    moved = calibrate_threshold([a * s + b for s in scores], k)
    assert moved.value == pytest.approx(a * base.value + b, rel=1e-9, abs=1e-6)


def test_classify_boundary():
    t = Threshold(0.5, 0.1, 2.0)
    assert classify(t.value, t) == 0
    assert classify(t.value + 1e-9, t) == 1
    assert classify(t.value - 1, t) == 0
    assert classify(math.nextafter(t.value, math.inf), t) == 1


def prf(m: Metrics):
    return (m.precision, m.recall, m.f1)


def test_evaluate_examples():
    assert prf(evaluate([1, 0, 1], [1, 0, 1])) == (1, 1, 1)
    m = evaluate([1, 1, 1, 0], [1, 0, 1, 1])
    assert (m.tp, m.fp, m.fn) == (2, 1, 1)
    assert prf(m) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
    assert prf(evaluate([0, 0, 0], [0, 1, 0])) == (0, 0, 0)


def test_evaluate_length_mismatch():
    with pytest.raises(LengthMismatch):
        evaluate([1, 0], [1])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_metric_identities(pairs):
    pred, truth = zip(*pairs)
    m = evaluate(list(pred), list(truth))
    if m.precision + m.recall:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    else:
        assert m.f1 == 0
    if m.fp == m.fn:
        assert m.precision == m.recall == pytest.approx(m.f1)


def test_skewness():
    assert score_skewness([1, 1, 1]) == 0
    assert score_skewness([0, 0, 0, 10]) > 0


# -- pipeline -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_pipeline():
    model = init_model(6, seq_len=16, embed_dim=4, channels=(8, 8), pools=(2, 2), feature_dim=4, seed=0)
    rng = np.random.default_rng(0)
    windows = rng.integers(1, 4, size=(200, 16))
    feats = batch_features(as_engine(model), windows)
    pipe = Pipeline(model, fit(feats, t=50, psi=64))
    val = pipe.scores(windows[:100])
    pipe.threshold = calibrate_threshold(val)
    return pipe, model, windows


def test_pipeline_rejects_dim_mismatch():
    model = init_model(6, seq_len=16, embed_dim=4, channels=(8,), pools=(2,), feature_dim=4)
    with pytest.raises(ArtifactMismatch):
        Pipeline(model, fit(np.random.default_rng(0).normal(size=(10, 3)), t=2))


def test_pipeline_rejects_wrong_window(small_pipeline):
    pipe, _, _ = small_pipeline
    with pytest.raises(ArtifactMismatch):
        pipe.run(np.zeros(8, dtype=int))


def test_unreachable_threshold_is_benign(small_pipeline):
    pipe, model, windows = small_pipeline
    t = Threshold(0.5, 0.1, 1e6)
    assert deploy_pipeline(windows[0], model, pipe.forest, t).label == 0


def test_deploy_repeatable(small_pipeline):
    pipe, model, windows = small_pipeline
    a = deploy_pipeline(windows[3], pipe, None, None)
    b = deploy_pipeline(windows[3], model, pipe.forest, pipe.threshold)
    assert (a.score, a.label) == (b.score, b.label)
    assert a.elapsed_seconds >= 0


def test_batch_scores_match_single(small_pipeline):
    pipe, _, windows = small_pipeline
    batch = pipe.scores(windows[:10])
    single = [pipe.run(w).score for w in windows[:10]]
    assert batch.tolist() == single


def test_deploy_concurrent(small_pipeline):
    pipe, _, windows = small_pipeline
    expected = [pipe.run(w).score for w in windows[:40]]
    results = {}

    def worker(k):
        results[k] = [pipe.run(w).score for w in windows[:40]]

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == expected for r in results.values())


def test_quantized_pipeline_runs(small_pipeline):
    pipe, model, windows = small_pipeline
    qpipe = Pipeline(quantize_model(model), pipe.forest, pipe.threshold)
    assert qpipe.engine.kind == "quantized"
    assert 0 < qpipe.run(windows[0]).score < 1


# -- reports ----------------------------------------------------------------------------


def test_report_roundtrip_fields():
    t = Threshold(0.5, 0.1, 2.0)
    rep = DetectionReport.build([0.1, 0.9, 0.8, 0.2], [0, 1, 0, 1], t, {"dataset": "x"}, [0.01] * 4, ["a", "a", "b", "c"])
    assert rep.predicted == [0, 1, 1, 0]
    assert rep.metrics == evaluate([0, 1, 1, 0], [0, 1, 0, 1])
    doc = json.loads(rep.to_json())
    assert doc["metadata"] == {"dataset": "x"}
    assert doc["threshold"]["value"] == t.value
    assert doc["samples"][1] == {"score": 0.9, "predicted": 1, "truth": 1, "recording": "a", "seconds": 0.01}
    assert "latency" in doc
    rec = rep.recording_metrics()
    # recordings: a -> (1, 1), b -> (1, 0), c -> (0, 1)
    assert (rec.tp, rec.fp, rec.fn) == (1, 1, 1)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "index,score,predicted,truth,recording,seconds"
    assert len(lines) == 5
    assert "seconds" not in rep.to_csv(include_timing=False)
    assert "latency" not in json.loads(rep.to_json(include_timing=False))


# -- bench --------------------------------------------------------------------------------


def test_bench_single_sample(small_pipeline):
    pipe, _, windows = small_pipeline
    rep = run_bench(pipe, windows[:1], repetitions=1, float_payload=100)
    assert len(rep.float_timing.per_sample_seconds) == 1
    assert rep.float_timing.mean == rep.float_timing.per_sample_seconds[0]
    assert rep.quantized_timing is None and rep.payload_ratio is None


def test_bench_aggregates_consistent(small_pipeline):
    pipe, model, windows = small_pipeline
    qpipe = Pipeline(quantize_model(model), pipe.forest, pipe.threshold)
    rep = run_bench(pipe, windows[:7], 3, qpipe, 400, 110)
    assert len(rep.quantized_timing.per_sample_seconds) == 21
    assert rep.consistent()
    assert rep.payload_ratio == 110 / 400
    doc = json.loads(rep.to_json())
    again = Timing.from_samples(doc["float"]["per_sample_seconds"])
    assert (again.mean, again.median, again.p95) == (doc["float"]["mean"], doc["float"]["median"], doc["float"]["p95"])


def test_bench_tampered_report_inconsistent():
    t = Timing.from_samples([0.1, 0.2, 0.3])
    t.mean = 0.25
    assert not BenchReport(t, None, 1, None).consistent()


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=30))
def test_timing_mean_exact(xs):
    t = Timing.from_samples(xs)
    assert t.mean == math.fsum(xs) / len(xs)
    assert min(xs) <= t.median <= max(xs)
