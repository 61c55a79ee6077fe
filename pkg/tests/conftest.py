import time

import pytest

from light_hids.config import PipelineConfig
from light_hids.pipeline import RunPaths, run_all

# (criterion number, title, passed, detail) collected by the acceptance suite
CRITERIA: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        CRITERIA.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


class PinnedRun:
    def __init__(self, root):
        self.cfg = PipelineConfig()
        self.cfg.run.out_dir = str(root)
        self.paths = RunPaths(root)
        self.stage_seconds: dict[str, float] = {}
        self.reports = {}

    def execute(self):
        marks = []

        def on_stage(name, variant):
            marks.append((f"{name}:{variant}", time.perf_counter()))

        started = time.perf_counter()
        self.reports = run_all(self.cfg, self.paths, on_stage)
        marks.append(("end", time.perf_counter()))
        for (name, t0), (_, t1) in zip(marks, marks[1:]):
            self.stage_seconds[name] = t1 - t0
        self.total_seconds = time.perf_counter() - started
        return self


@pytest.fixture(scope="session")
def pinned_run(tmp_path_factory):
    """The default configuration, end to end, run once per session."""
    return PinnedRun(tmp_path_factory.mktemp("pinned")).execute()
