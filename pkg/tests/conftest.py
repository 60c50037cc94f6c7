from __future__ import annotations

import pytest

from optr1.executor import Executor
from optr1.mock import write_mock_repo
from optr1.problem import OptimizationTask, RegionOfInterest
from optr1.tools import MicrobenchConfig


@pytest.fixture
def executor():
    with Executor(workers=2) as ex:
        yield ex


@pytest.fixture
def mock_task(tmp_path):
    """Deterministic mock application (reported time = 1 ms + delay)."""
    return write_mock_repo(tmp_path / "repo")


@pytest.fixture
def baseline_task(mock_task):
    return mock_task.with_baseline(21.0)


@pytest.fixture
def light_task(tmp_path):
    """A task whose build and run are shell no-ops, for fast dispatch checks."""
    repo = tmp_path / "light"
    (repo / "src").mkdir(parents=True)
    (repo / "src" / "k.c").write_text("int a;\nint b;\nint c;\n")
    (repo / "notes.txt").write_text("alpha\nbeta gamma\n")
    return OptimizationTask(
        task_id="light",
        repo_root=repo,
        roi=RegionOfInterest.from_file(repo, "src/k.c", 2, 2),
        build_command="true",
        run_script="sh -c 'echo OPTBENCH_TIME_MS: 2.0; echo OPTBENCH_CORRECT: 1'",
        analysis_command="echo Used 7 registers",
        microbench=MicrobenchConfig(build_command="true", run_command="echo OPTBENCH_TIME_MS: 1.5"),
        baseline_time_ms=2.0,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
