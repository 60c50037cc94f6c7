from __future__ import annotations

import time

import pytest

from optr1.executor import (
    TIMING,
    TRUNCATION_MARKER,
    Executor,
    ExecutorError,
    ExecutorShutdown,
    HandleConsumed,
    Job,
    default_worker_count,
    parse_run_protocol,
    run_job,
)


@pytest.mark.parametrize(
    "stdout, correct, times",
    [
        ("OPTBENCH_TIME_MS: 4.17\nOPTBENCH_CORRECT: 1\n", True, (4.17,)),
        ("OPTBENCH_TIME_MS: 1\nOPTBENCH_TIME_MS: 3e0\nnoise\nOPTBENCH_CORRECT: 1", True, (1.0, 3.0)),
        ("OPTBENCH_TIME_MS: 4.17\nOPTBENCH_CORRECT: 0\n", False, (4.17,)),
        ("OPTBENCH_TIME_MS: 4.17\n", False, (4.17,)),
        ("OPTBENCH_CORRECT: 1\nOPTBENCH_CORRECT: 1\n", False, ()),
        ("OPTBENCH_TIME_MS: -1\nOPTBENCH_TIME_MS: 0\nOPTBENCH_TIME_MS: abc\nOPTBENCH_CORRECT: 1", True, ()),
        ("prefix OPTBENCH_CORRECT: 1\n", False, ()),
    ],
)
def test_parse_run_protocol(stdout, correct, times):
    r = parse_run_protocol(stdout)
    assert (r.correct, r.times_ms) == (correct, times)


def test_run_job_basic(tmp_path):
    out = run_job(Job(("sh", "-c", "echo out; echo err >&2; exit 3"), tmp_path))
    assert out.exit_code == 3 and out.stdout == "out\n" and out.stderr == "err\n" and not out.ok


def test_run_job_missing_binary(tmp_path):
    out = run_job(Job(("/nonexistent/tool",), tmp_path))
    assert out.exit_code == 127 and not out.ok


def test_timeout_kills_process_group(tmp_path):
    t0 = time.perf_counter()
    out = run_job(Job(("sh", "-c", "sleep 30 & sleep 30; echo never"), tmp_path, timeout_ms=300))
    assert out.timed_out and not out.ok and "never" not in out.stdout
    assert time.perf_counter() - t0 < 3


def test_output_cap(tmp_path):
    out = run_job(Job(("sh", "-c", "head -c 5000 /dev/zero | tr '\\0' a"), tmp_path), output_cap=1000)
    assert out.stdout.startswith("a" * 1000) and out.stdout.endswith(TRUNCATION_MARKER)


def test_env_is_scrubbed(tmp_path, monkeypatch):
    monkeypatch.setenv("SECRET_TOKEN", "x")
    out = run_job(Job(("sh", "-c", "echo ${SECRET_TOKEN:-unset} $EXTRA"), tmp_path, env={"EXTRA": "y"}))
    assert out.stdout == "unset y\n"


def test_job_validation(tmp_path):
    with pytest.raises(ValueError):
        Job((), tmp_path)
    with pytest.raises(ValueError):
        Job(("true",), tmp_path, timeout_ms=0)
    with pytest.raises(ValueError):
        Job(("true",), tmp_path, lane="fast")


def test_default_worker_count(monkeypatch):
    monkeypatch.setenv("OPTBENCH_WORKERS", "3")
    assert default_worker_count() == 3
    monkeypatch.delenv("OPTBENCH_WORKERS")
    assert default_worker_count() >= 1


def test_handles_are_single_use(executor):
    ws = executor.make_workspace("h")
    h = executor.submit(Job(("echo", "hi"), ws))
    assert executor.await_result(h).stdout == "hi\n"
    with pytest.raises(HandleConsumed):
        executor.await_result(h)


def test_jobs_must_run_in_workspaces(executor, tmp_path):
    with pytest.raises(ExecutorError):
        executor.submit(Job(("true",), tmp_path))


def test_shutdown_rejects_new_jobs(tmp_path):
    ex = Executor(1, workspace_root=tmp_path / "ws")
    ws = ex.make_workspace("x")
    ex.shutdown()
    with pytest.raises(ExecutorShutdown):
        ex.submit(Job(("true",), ws))
    ex.shutdown()


def test_workspace_copy_and_release(executor, tmp_path):
    (tmp_path / "src").mkdir()
    (tmp_path / "src" / "a.txt").write_text("A")
    ws = executor.make_workspace("copy me/../", tmp_path / "src")
    assert (ws / "a.txt").read_text() == "A"
    assert ws.parent == executor.workspace_root
    executor.release_workspace(ws)
    assert not ws.exists()


def _spans(outcomes):
    spans = [tuple(map(float, o.stdout.split())) for o in outcomes]
    events = sorted([(s, 1) for s, _ in spans] + [(e, -1) for _, e in spans], key=lambda x: (x[0], x[1]))
    cur = best = 0
    for _, d in events:
        cur += d
        best = max(best, cur)
    return best


STAMP = "python3 -c 'import time; print(time.time())'"


def test_general_pool_bound_and_timing_lane_exclusive():
    with Executor(workers=3, timing_slots=1) as ex:
        ws = ex.make_workspace("c")
        cmd = ("sh", "-c", f"{STAMP}; sleep 0.4; {STAMP}")
        general = [ex.submit(Job(cmd, ws)) for _ in range(6)]
        timing = [ex.submit(Job(cmd, ws, lane=TIMING)) for _ in range(3)]
        g = [ex.await_result(h) for h in general]
        t = [ex.await_result(h) for h in timing]
    assert 2 <= _spans(g) <= 3
    assert _spans(t) == 1


def test_stress_no_loss_no_duplicates():
    with Executor(workers=4) as ex:
        ws = ex.make_workspace("stress")
        handles = [ex.submit(Job(("echo", str(i)), ws)) for i in range(1000)]
        outs = [ex.await_result(h).stdout.strip() for h in handles]
    assert outs == [str(i) for i in range(1000)]
    assert len({h.job_id for h in handles}) == 1000
