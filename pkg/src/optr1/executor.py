"""Bounded asynchronous process execution.

Every build and run in the harness goes through an :class:`Executor`.  Jobs are
queued on a general worker pool; timing-sensitive runs go to a separate
single-slot lane so measurements are never taken while other benchmark runs
compete for the machine.

Run scripts report results through two stdout lines::

    OPTBENCH_TIME_MS: <decimal float>     (one per repetition)
    OPTBENCH_CORRECT: <0|1>               (exactly one)
"""

from __future__ import annotations

import itertools
import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

OUTPUT_CAP_BYTES = 1 << 20
TRUNCATION_MARKER = "\n[... output truncated ...]\n"
KILL_GRACE_S = 0.5

DEFAULT_TOOL_TIMEOUT_MS = 120_000
DEFAULT_BENCHMARK_TIMEOUT_MS = 600_000

ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "USER", "SHELL")

GENERAL = "general"
TIMING = "timing"

_TIME_RE = re.compile(r"^OPTBENCH_TIME_MS:\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*$")
_CORRECT_RE = re.compile(r"^OPTBENCH_CORRECT:\s*([01])\s*$")


class ExecutorError(RuntimeError):
    pass


class ExecutorShutdown(ExecutorError):
    pass


class HandleConsumed(ExecutorError):
    pass


@dataclass(frozen=True)
class Job:
    command: tuple[str, ...]
    working_dir: Path
    timeout_ms: int = DEFAULT_TOOL_TIMEOUT_MS
    env: dict[str, str] = field(default_factory=dict)
    job_id: str = ""
    lane: str = GENERAL

    def __post_init__(self):
        if not self.command:
            raise ValueError("job command must be non-empty")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.lane not in (GENERAL, TIMING):
            raise ValueError(f"unknown lane {self.lane!r}")
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))
        object.__setattr__(self, "working_dir", Path(self.working_dir))


@dataclass(frozen=True)
class JobOutcome:
    exit_code: int
    stdout: str
    stderr: str
    timed_out: bool
    duration_ms: float

    @property
    def ok(self) -> bool:
        return self.exit_code == 0 and not self.timed_out


@dataclass(frozen=True)
class RunReport:
    correct: bool
    times_ms: tuple[float, ...] = ()


def parse_run_protocol(stdout: str) -> RunReport:
    """Extract the correctness flag and per-repetition times from run output.

    Anything that is not a protocol line is ignored.  A missing or repeated
    correctness line means the run is not trusted (``correct=False``).
    Non-positive or non-finite times are dropped.
    """
    times: list[float] = []
    flags: list[str] = []
    for line in stdout.splitlines():
        line = line.strip()
        m = _TIME_RE.match(line)
        if m:
            value = float(m.group(1))
            if value > 0 and value != float("inf"):
                times.append(value)
            continue
        m = _CORRECT_RE.match(line)
        if m:
            flags.append(m.group(1))
    correct = len(flags) == 1 and flags[0] == "1"
    return RunReport(correct=correct, times_ms=tuple(times))


class JobHandle:
    """Ticket for a submitted job; its outcome can be collected exactly once."""

    def __init__(self, job_id: str, future: Future):
        self.job_id = job_id
        self._future = future
        self._consumed = False
        self._lock = threading.Lock()

    def done(self) -> bool:
        return self._future.done()

    def _take(self) -> Future:
        with self._lock:
            if self._consumed:
                raise HandleConsumed(f"outcome of job {self.job_id} already consumed")
            self._consumed = True
        return self._future

    def __repr__(self):
        return f"JobHandle({self.job_id!r}, done={self.done()})"


def default_worker_count() -> int:
    env = os.environ.get("OPTBENCH_WORKERS")
    if env:
        n = int(env)
        if n <= 0:
            raise ValueError("OPTBENCH_WORKERS must be positive")
        return n
    return max(1, (os.cpu_count() or 2) - 1)


def _drain(stream, sink: list[bytes], cap: int, flag: list[bool]):
    kept = 0
    for chunk in iter(lambda: stream.read(65536), b""):
        if kept < cap:
            take = chunk[: cap - kept]
            sink.append(take)
            kept += len(take)
            if len(take) < len(chunk):
                flag[0] = True
        else:
            flag[0] = True
    stream.close()


def _decode(parts: list[bytes], truncated: bool) -> str:
    text = b"".join(parts).decode("utf-8", errors="replace")
    return text + TRUNCATION_MARKER if truncated else text


def run_job(job: Job, output_cap: int = OUTPUT_CAP_BYTES) -> JobOutcome:
    """Run one job synchronously in its own process group."""
    env = {k: os.environ[k] for k in ENV_ALLOWLIST if k in os.environ}
    env.update(job.env)
    start = time.perf_counter()
    try:
        proc = subprocess.Popen(
            job.command,
            cwd=job.working_dir,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
    except OSError as exc:
        return JobOutcome(127, "", f"failed to start {job.command[0]!r}: {exc}", False,
                          (time.perf_counter() - start) * 1e3)

    out: list[bytes] = []
    err: list[bytes] = []
    out_trunc, err_trunc = [False], [False]
    readers = [
        threading.Thread(target=_drain, args=(proc.stdout, out, output_cap, out_trunc), daemon=True),
        threading.Thread(target=_drain, args=(proc.stderr, err, output_cap, err_trunc), daemon=True),
    ]
    for t in readers:
        t.start()

    timed_out = False
    try:
        proc.wait(timeout=job.timeout_ms / 1e3)
    except subprocess.TimeoutExpired:
        timed_out = True
        _kill_group(proc)
    # a grandchild holding the pipes open must not stall us past the grace period
    for t in readers:
        t.join(timeout=KILL_GRACE_S)
    if any(t.is_alive() for t in readers):
        _kill_group(proc)
        for t in readers:
            t.join(timeout=KILL_GRACE_S)

    return JobOutcome(
        exit_code=proc.returncode,
        stdout=_decode(out, out_trunc[0]),
        stderr=_decode(err, err_trunc[0]),
        timed_out=timed_out,
        duration_ms=(time.perf_counter() - start) * 1e3,
    )


def _kill_group(proc: subprocess.Popen):
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
    try:
        proc.wait(timeout=KILL_GRACE_S)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()


class Executor:
    """Bounded worker pool plus a contention-free timing lane.

    ``workers`` bounds concurrently running general jobs (builds, compiler
    runs, file-independent probes).  ``timing_slots`` bounds concurrently
    running jobs submitted with ``lane="timing"``.  Workspaces handed out by
    :meth:`make_workspace` live under ``workspace_root``; jobs may only run
    inside it.
    """

    def __init__(self, workers: int | None = None, timing_slots: int = 1,
                 workspace_root: str | Path | None = None, keep_workspaces: bool = False,
                 tool_timeout_ms: int = DEFAULT_TOOL_TIMEOUT_MS,
                 benchmark_timeout_ms: int = DEFAULT_BENCHMARK_TIMEOUT_MS):
        self.workers = workers if workers is not None else default_worker_count()
        if self.workers <= 0 or timing_slots <= 0:
            raise ValueError("worker counts must be positive")
        self.timing_slots = timing_slots
        self.tool_timeout_ms = tool_timeout_ms
        self.benchmark_timeout_ms = benchmark_timeout_ms
        self.keep_workspaces = keep_workspaces
        self._owns_root = workspace_root is None
        root = Path(tempfile.mkdtemp(prefix="optr1-ws-")) if workspace_root is None else Path(workspace_root)
        root.mkdir(parents=True, exist_ok=True)
        self.workspace_root = root.resolve()
        self._pools = {
            GENERAL: ThreadPoolExecutor(self.workers, thread_name_prefix="optr1-job"),
            TIMING: ThreadPoolExecutor(timing_slots, thread_name_prefix="optr1-timing"),
        }
        self._ids = itertools.count()
        self._closed = False
        self._lock = threading.Lock()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def submit(self, job: Job) -> JobHandle:
        if not _is_within(job.working_dir, self.workspace_root):
            raise ExecutorError(f"working_dir {job.working_dir} is outside the managed workspace root")
        with self._lock:
            if self._closed:
                raise ExecutorShutdown("executor has been shut down")
            job_id = job.job_id or f"job-{next(self._ids)}"
            future = self._pools[job.lane].submit(run_job, job)
        return JobHandle(job_id, future)

    def await_result(self, handle: JobHandle, timeout: float | None = None) -> JobOutcome:
        return handle._take().result(timeout=timeout)

    def run(self, job: Job) -> JobOutcome:
        return self.await_result(self.submit(job))

    def make_workspace(self, key: str, source: str | Path | None = None) -> Path:
        """Create a fresh directory (optionally a copy of ``source``) for one call."""
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", key)[:80] or "ws"
        path = Path(tempfile.mkdtemp(prefix=f"{safe}-", dir=self.workspace_root))
        if source is not None:
            shutil.copytree(source, path, symlinks=True, dirs_exist_ok=True)
        return path

    def release_workspace(self, path: Path):
        if not self.keep_workspaces and _is_within(path, self.workspace_root):
            shutil.rmtree(path, ignore_errors=True)

    def status(self) -> dict:
        return {
            "workers": self.workers,
            "timing_slots": self.timing_slots,
            "workspace_root": str(self.workspace_root),
            "tool_timeout_ms": self.tool_timeout_ms,
            "benchmark_timeout_ms": self.benchmark_timeout_ms,
            "accepting": not self._closed,
        }

    def shutdown(self, wait: bool = True):
        with self._lock:
            if self._closed:
                return
            self._closed = True
        for pool in self._pools.values():
            pool.shutdown(wait=wait)
        if self._owns_root and not self.keep_workspaces:
            shutil.rmtree(self.workspace_root, ignore_errors=True)


def _is_within(path: Path, root: Path) -> bool:
    try:
        Path(path).resolve().relative_to(root)
    except ValueError:
        return False
    return True
