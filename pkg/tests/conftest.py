import shutil
import time

import pytest

from rgenima import cli, pipeline

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance result line and echo it; returns the passed flag."""
    def _report(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def stage_run(out, cmd, cfg, **kw):
    argv = [cmd, "--config", str(cfg), "--out", str(out)]
    for k, v in kw.items():
        argv += [f"--{k}", str(v)]
    t0 = time.perf_counter()
    code = cli.main(argv)
    assert code == 0, f"{cmd} exited {code}"
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Default-config pipeline, one stage at a time, with per-stage wall time."""
    d = tmp_path_factory.mktemp("accept")
    cfg = d / "default.ini"
    cfg.write_text("", encoding="utf-8")
    out = d / "run"
    times = {s: stage_run(out, s, cfg) for s in pipeline.PIPELINE}
    return out, cfg, times


@pytest.fixture(scope="session")
def gene_only_run(default_run, tmp_path_factory):
    src, _, _ = default_run
    d = tmp_path_factory.mktemp("gene_only")
    out = d / "run"
    for stage in ("synth", "qc"):
        shutil.copytree(src / stage, out / stage)
    cfg = d / "gene_only.ini"
    cfg.write_text("[dataset]\nmode = gene_only\n", encoding="utf-8")
    for s in ("dataset", "train", "eval"):
        stage_run(out, s, cfg)
    return out
