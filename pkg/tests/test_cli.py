import json

import pytest

from light_hids import cli
from light_hids.config import THREADS_ENV, PipelineConfig, dump_config, load_config, parse_config
from light_hids.errors import ConfigError
from light_hids.svdd import TrainConfig
from light_hids.synth import CorpusConfig

SMALL = """
[run]
seed = 1
[synth]
n_normal = 24
n_anomalous = 6
trace_length = 256
[train]
epochs = 2
[forest]
trees = 20
psi = 64
[bench]
repetitions = 2
windows = 10
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


# -- config -------------------------------------------------------------------------


def test_defaults_match_module_defaults():
    cfg = parse_config("")
    assert cfg.synth == CorpusConfig()
    assert cfg.train == TrainConfig()
    assert (cfg.ingest.window, cfg.ingest.train_stride, cfg.ingest.detect_stride) == (64, 64, 16)
    assert (cfg.forest.trees, cfg.forest.psi, cfg.calibrate.k) == (100, 256, 2.0)
    assert cfg.model.channels == (32, 64, 64) and cfg.model.feature_dim == 16


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("[forest]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="nowhere"):
        parse_config("[nowhere]\nx = 1\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config("[forest]\ntrees = many\n")
    with pytest.raises(ConfigError):
        parse_config("[train]\nepochs = -3\n")
    with pytest.raises(ConfigError, match="split_dataset"):
        parse_config("[ingest]\ntrain_frac = 0.9\nval_frac = 0.1\n")
    with pytest.raises(ConfigError, match="divide"):
        parse_config("[ingest]\nwindow = 60\n")


def test_seed_propagation():
    cfg = parse_config("[run]\nseed = 7\n")
    assert cfg.synth.seed == 7 and cfg.train.seed == 7
    cfg = parse_config("[run]\nseed = 7\n[train]\nseed = 3\n")
    assert cfg.synth.seed == 7 and cfg.train.seed == 3
    assert PipelineConfig().with_seed(9).train.seed == 9


def test_echo_roundtrip():
    cfg = parse_config("[model]\nchannels = 8, 16\npools = 4, 2\n[train]\nobjective = soft_boundary\n")
    text = dump_config(cfg)
    assert parse_config(text) == cfg


def test_every_field_is_overridable():
    text = dump_config(PipelineConfig())
    assert parse_config(text) == parse_config("")
    assert text.count(" = ") == sum(len(vars(getattr(PipelineConfig(), s))) for s in vars(PipelineConfig()))


def test_threads_env(monkeypatch):
    cfg = parse_config("[run]\nthreads = 3\n")
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert cfg.workers() == 3
    monkeypatch.setenv(THREADS_ENV, "1")
    assert cfg.workers() == 1
    monkeypatch.setenv(THREADS_ENV, "x")
    with pytest.raises(ConfigError):
        cfg.workers()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


# -- command line ---------------------------------------------------------------------


def test_echo_config_flags_anywhere(capsys):
    assert cli.main(["--seed", "5", "echo-config"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["echo-config", "--seed", "5"]) == 0
    assert capsys.readouterr().out == first
    assert "seed = 5" in first


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "bad.ini", "[ingest]\ntrain_frac = 0.8\nval_frac = 0.3\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "split_dataset" in capsys.readouterr().err


def test_missing_artifact_exit_code(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == 4
    assert "stage train" in capsys.readouterr().err


def test_corrupt_artifact_exit_code(tmp_path, capsys):
    (tmp_path / "vocab.txt").write_text("garbage\n")
    assert cli.main(["train", "--out", str(tmp_path)]) == 4


def test_data_error_exit_code(tmp_path, capsys):
    corpus = tmp_path / "c"
    corpus.mkdir()
    (corpus / "manifest.tsv").write_text("file\tlabel\nempty.trace\tnormal\n")
    (corpus / "empty.trace").write_text("")
    cfg = write(tmp_path, "c.ini", f"[run]\ncorpus = {corpus}\n")
    assert cli.main(["ingest", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "stage ingest" in capsys.readouterr().err


def test_smoke_one_trace_zero_epochs(tmp_path, capsys):
    corpus = tmp_path / "c"
    corpus.mkdir()
    calls = ["openat", "read", "write", "close", "mmap", "brk", "read", "read"] * 64
    (corpus / "only.trace").write_text("\n".join(calls) + "\n")
    (corpus / "manifest.tsv").write_text("file\tlabel\nonly.trace\tnormal\n")
    cfg = write(
        tmp_path, "smoke.ini",
        f"[run]\ncorpus = {corpus}\nquantize = false\n[ingest]\ntrain_stride = 16\n[train]\nepochs = 0\n",
    )
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["aggregates"]["f1"] == 0.0  # no anomalous windows to find
    assert not (tmp_path / "o" / "model_q.bin").exists()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = write(root, "small.ini", SMALL)
    assert cli.main(["run", "--config", cfg, "--out", str(root / "run")]) == 0
    return root, cfg


def test_run_writes_every_artifact(small_run):
    root, _ = small_run
    names = {p.name for p in (root / "run").iterdir()}
    for n in [
        "corpus", "vocab.txt", "dataset.bin", "model.bin", "train_log.jsonl", "model_q.bin",
        "forest.bin", "forest_q.bin", "threshold.json", "threshold_q.json",
        "detections.csv", "detections_q.csv", "report.json", "report.csv", "report_q.json", "report_q.csv",
    ]:
        assert n in names
    log = [json.loads(line) for line in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]


def test_stage_isolation(small_run):
    root, cfg = small_run
    run = root / "run"
    before = {n: (run / n).read_bytes() for n in ["report.json", "report_q.json", "forest.bin", "threshold.json"]}
    for name in ["forest.bin", "threshold.json", "detections.csv", "report.json"]:
        (run / name).unlink()
    for stage in ["fit-forest", "calibrate", "detect", "eval"]:
        assert cli.main([stage, "--config", cfg, "--out", str(run)]) == 0
    (run / "report_q.json").unlink()
    (run / "threshold_q.json").unlink()
    for stage in ["calibrate", "detect", "eval"]:
        assert cli.main([stage, "--quantized", "--config", cfg, "--out", str(run)]) == 0
    for n, data in before.items():
        assert (run / n).read_bytes() == data, n


def test_detect_raw_trace(small_run, capsys):
    root, cfg = small_run
    run = root / "run"
    trace = run / "corpus" / "attack_0000.trace"
    capsys.readouterr()
    assert cli.main(["detect", "--trace", str(trace), "--config", cfg, "--out", str(run)]) == 0
    result = json.loads(capsys.readouterr().out)
    n_calls = len(trace.read_text().split())
    assert len(result["windows"]) == (n_calls - 1) // 16 + 1
    assert result["unknown_calls"] > 0  # the burst call is outside the normal vocabulary
    assert result["verdict"] == 1


def test_bench_cli(small_run, capsys):
    root, cfg = small_run
    run = root / "run"
    assert cli.main(["bench", "--config", cfg, "--out", str(run), "--repetitions", "1", "--windows", "3"]) == 0
    doc = json.loads((run / "bench.json").read_text())
    assert len(doc["float"]["per_sample_seconds"]) == 3
    assert len(doc["quantized"]["per_sample_seconds"]) == 3
    assert doc["payload_ratio"] <= 0.30
