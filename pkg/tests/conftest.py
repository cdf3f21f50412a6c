from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {name} {detail}".rstrip())


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """Full default pipeline (all ICs, all eight methods, attribution, report) in a temp dir."""
    from icr.config import ExperimentConfig
    from icr.pipeline import Pipeline

    out = tmp_path_factory.mktemp("run")
    pipe = Pipeline(ExperimentConfig(), out, jobs=2)
    pipe.ablate()
    pipe.stage3()
    pipe.report()
    return pipe
