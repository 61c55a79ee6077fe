import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from light_hids.errors import BadParameter
from light_hids.ingest import TraceFormat, read_trace
from light_hids.synth import (
    NOVEL_PREFIX,
    AnomalyKind,
    AnomalySpec,
    CorpusConfig,
    MarkovModel,
    gen_normal_model,
    generate_corpus,
    inject_anomaly,
    read_manifest,
    sample_trace,
    write_corpus,
)


def test_model_deterministic():
    a = gen_normal_model(2, 0.5, seed=3)
    b = gen_normal_model(2, 0.5, seed=3)
    assert a.transition.tobytes() == b.transition.tobytes()
    assert a.initial.tobytes() == b.initial.tobytes()


def test_rows_stochastic():
    m = gen_normal_model(16, 0.5, seed=0)
    assert np.all(m.transition >= 0)
    assert np.all(np.abs(m.transition.sum(axis=1) - 1) <= 1e-9)
    assert abs(m.initial.sum() - 1) <= 1e-9


def test_large_concentration_is_near_uniform():
    m = gen_normal_model(8, 1e4, seed=0)
    assert np.all(np.abs(m.transition - 1 / 8) <= 0.05)


def test_tiny_concentration_still_stochastic():
    m = gen_normal_model(8, 1e-3, seed=1)
    assert np.all(np.isfinite(m.transition))
    assert np.all(np.abs(m.transition.sum(axis=1) - 1) <= 1e-9)


def test_model_validation():
    with pytest.raises(BadParameter):
        gen_normal_model(1, 0.5, 0)
    with pytest.raises(BadParameter):
        gen_normal_model(4, 0.0, 0)


def test_sample_length_one_uses_initial():
    m = MarkovModel(("a", "b"), np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([0.0, 1.0]), 0)
    assert sample_trace(m, 1, 0) == ["b"]


def test_forced_cycle():
    cycle = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    m = MarkovModel(("a", "b", "c"), cycle, np.array([1.0, 0, 0]), 0)
    assert sample_trace(m, 7, 5) == list("abcabca")


def test_sample_deterministic_and_stream_dependent():
    m = gen_normal_model(8, 0.5, 1)
    assert sample_trace(m, 100, 2) == sample_trace(m, 100, 2)
    assert sample_trace(m, 100, 2) != sample_trace(m, 100, 3)
    with pytest.raises(BadParameter):
        sample_trace(m, 0, 0)


def test_bigram_distribution_matches_model():
    m = gen_normal_model(16, 0.5, seed=0)
    trace = sample_trace(m, 10_000, 0)
    idx = {n: i for i, n in enumerate(m.states)}
    counts = np.zeros((16, 16))
    for a, b in zip(trace, trace[1:]):
        counts[idx[a], idx[b]] += 1
    visited = counts.sum(axis=1) > 0
    empirical = counts[visited] / counts[visited].sum(axis=1, keepdims=True)
    weights = counts[visited].sum(axis=1) / counts.sum()
    tv = 0.5 * np.abs(empirical - m.transition[visited]).sum(axis=1)
    assert float(weights @ tv) < 0.1


def test_inject_noop_when_rounding_to_zero():
    trace = ["read"] * 10
    assert inject_anomaly(trace, AnomalySpec("repeat_burst", 0.01), 0) == trace


def test_full_burst():
    out = inject_anomaly(["read", "write"] * 8, AnomalySpec(AnomalyKind.REPEAT_BURST, 1.0, "failauth"), 1)
    assert out == ["failauth"] * 16


def test_novel_calls_count():
    trace = ["read"] * 64
    out = inject_anomaly(trace, AnomalySpec("novel_calls", 0.25), 2)
    assert sum(c.startswith(NOVEL_PREFIX) for c in out) == 16


def test_burst_is_contiguous():
    out = inject_anomaly(["read"] * 40, AnomalySpec("repeat_burst", 0.25, "failauth"), 3)
    hits = [i for i, c in enumerate(out) if c == "failauth"]
    assert len(hits) == 10 and hits == list(range(hits[0], hits[0] + 10))


def test_shuffle_is_permutation():
    trace = [f"c{i}" for i in range(30)]
    out = inject_anomaly(trace, AnomalySpec("shuffled", 0.5), 4)
    assert sorted(out) == sorted(trace)


def test_spec_validation():
    with pytest.raises(BadParameter):
        AnomalySpec("repeat_burst", 0.0)
    with pytest.raises(BadParameter):
        AnomalySpec("repeat_burst", 1.5)
    with pytest.raises(BadParameter):
        AnomalySpec("novel_calls", 0.5, novel_count=0)
    with pytest.raises(BadParameter):
        inject_anomaly([], AnomalySpec("repeat_burst", 0.5), 0)


@given(
    st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=100),
    st.sampled_from(list(AnomalyKind)),
    st.floats(0.01, 1.0),
    st.integers(0, 2**32 - 1),
)
def test_length_preserved(trace, kind, intensity, seed):
    assert len(inject_anomaly(trace, AnomalySpec(kind, intensity), seed)) == len(trace)


def test_corpus_layout(tmp_path):
    cfg = CorpusConfig(n_normal=5, n_anomalous=2, trace_length=64)
    traces = generate_corpus(cfg)
    assert [t.anomalous for t in traces] == [False] * 5 + [True] * 2
    assert generate_corpus(cfg)[6].calls == traces[6].calls
    manifest = write_corpus(traces, tmp_path)
    rows = read_manifest(manifest)
    assert [label for _, label in rows] == ["normal"] * 5 + ["anomalous"] * 2
    events, skipped = read_trace(rows[6][0], TraceFormat.PLAIN_NAMES)
    assert [e.call_name for e in events] == traces[6].calls and skipped == 0


def test_corpus_segments_each_carry_a_burst():
    cfg = CorpusConfig(n_normal=1, n_anomalous=3, trace_length=128, segment=16)
    for t in generate_corpus(cfg)[1:]:
        for start in range(0, 128, 16):
            assert t.calls[start : start + 16].count("failauth") == 8
