"""The six performance tools a policy may call, and the dispatcher that routes to them.

All tools read the full repository, but the only write they ever perform is
the ROI splice into a disposable workspace copy.  Tool failures come back as
``ToolResult(ok=False, ...)`` so the policy can see and react to them.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import shlex
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Sequence

import jsonschema

from .executor import GENERAL, TIMING, Executor, Job, JobOutcome, parse_run_protocol

if TYPE_CHECKING:
    from .problem import OptimizationTask, RegionOfInterest

log = logging.getLogger(__name__)

VIEW_MAX_LINES = 400
VIEW_MAX_BYTES = 16 * 1024
LOG_TAIL_CHARS = 4000
ASM_EXCERPT_LINES = 80
SEARCH_MAX_FILE_BYTES = 2 * 1024 * 1024


class ToolName(str, enum.Enum):
    benchmark_code = "benchmark_code"
    microbench_code = "microbench_code"
    compiler_analysis = "compiler_analysis"
    file_viewer = "file_viewer"
    list_dir = "list_dir"
    search = "search"

    def __str__(self):
        return self.value


ALL_TOOLS: tuple[ToolName, ...] = tuple(ToolName)
TOOL_NAMES = frozenset(t.value for t in ToolName)


class ToolError(Exception):
    """A tool could not do what was asked.  ``kind`` becomes the result's error_kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.message = message


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    tool: str
    arguments: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"call_id": self.call_id, "tool": str(self.tool), "arguments": self.arguments}

    @classmethod
    def from_dict(cls, d: dict) -> "ToolCall":
        return cls(call_id=str(d["call_id"]), tool=str(d["tool"]), arguments=dict(d.get("arguments") or {}))


@dataclass(frozen=True)
class ToolResult:
    call_id: str
    ok: bool
    payload: dict
    # wall clock, deliberately excluded from equality so replayed runs compare equal
    duration_ms: float = field(default=0.0, compare=False)

    @classmethod
    def error(cls, call_id: str, kind: str, message: str, duration_ms: float = 0.0) -> "ToolResult":
        return cls(call_id, False, {"error_kind": kind, "message": message}, duration_ms)

    @property
    def error_kind(self) -> str | None:
        return None if self.ok else self.payload.get("error_kind")

    def to_dict(self, with_duration: bool = True) -> dict:
        d = {"call_id": self.call_id, "ok": self.ok, "payload": self.payload}
        if with_duration:
            d["duration_ms"] = self.duration_ms
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToolResult":
        return cls(str(d["call_id"]), bool(d["ok"]), dict(d["payload"]), float(d.get("duration_ms", 0.0)))


@dataclass(frozen=True)
class BenchmarkOutcome:
    compiled: bool
    correct: bool
    time_ms: float | None
    compile_log: str = ""
    run_log: str = ""
    times_ms: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.compiled and (self.correct or self.time_ms is not None):
            raise ValueError("an uncompiled outcome cannot be correct or timed")
        if self.time_ms is not None and not self.time_ms > 0:
            raise ValueError("time_ms must be positive")

    @classmethod
    def failed(cls, reason: str) -> "BenchmarkOutcome":
        return cls(compiled=False, correct=False, time_ms=None, compile_log=reason)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["times_ms"] = list(self.times_ms)
        return d

    def to_payload(self) -> dict:
        return {
            "compiled": self.compiled,
            "correct": self.correct,
            "time_ms": self.time_ms,
            "times_ms": list(self.times_ms),
            "compile_log": _tail(self.compile_log),
            "run_log": _tail(self.run_log),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkOutcome":
        return cls(
            compiled=bool(d["compiled"]),
            correct=bool(d["correct"]),
            time_ms=None if d.get("time_ms") is None else float(d["time_ms"]),
            compile_log=d.get("compile_log", ""),
            run_log=d.get("run_log", ""),
            times_ms=tuple(float(t) for t in d.get("times_ms", ())),
        )


@dataclass(frozen=True)
class CompilerDiagnostics:
    """Resource usage parsed from a verbose compile.  ``None`` means the log did not say."""

    registers_per_thread: int | None
    spill_store_bytes: int | None
    spill_load_bytes: int | None
    assembly_excerpt: str = ""
    raw_log: str = ""
    compiled: bool = True

    def to_payload(self) -> dict:
        return {
            "compiled": self.compiled,
            "registers_per_thread": self.registers_per_thread,
            "spill_store_bytes": self.spill_store_bytes,
            "spill_load_bytes": self.spill_load_bytes,
            "assembly_excerpt": self.assembly_excerpt,
            "raw_log": _tail(self.raw_log),
        }


@dataclass(frozen=True)
class FileChunk:
    file: str
    line_start: int
    line_end: int
    total_lines: int
    text: str
    truncated: bool


@dataclass(frozen=True)
class SearchHit:
    file: str
    line_number: int
    line_text: str


@dataclass(frozen=True)
class SearchResult:
    hits: tuple[SearchHit, ...]
    truncated: bool


def _tail(text: str, limit: int = LOG_TAIL_CHARS) -> str:
    return text if len(text) <= limit else "[...]" + text[-limit:]


# -- ROI patching -----------------------------------------------------------

def split_lines(text: str) -> list[str]:
    """Split on ``\\n`` only, keeping terminators.  ``"".join`` inverts it."""
    parts = text.split("\n")
    lines = [p + "\n" for p in parts[:-1]]
    if parts[-1]:
        lines.append(parts[-1])
    return lines


def read_text(path: Path) -> str:
    with open(path, encoding="utf-8", errors="surrogateescape", newline="") as fh:
        return fh.read()


def write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", errors="surrogateescape", newline="") as fh:
        fh.write(text)


def splice_roi(text: str, roi: "RegionOfInterest", replacement: str) -> str:
    lines = split_lines(text)
    if roi.line_end > len(lines):
        raise ToolError("roi_drift", f"{roi.file_path} has {len(lines)} lines, ROI ends at {roi.line_end}")
    current = "".join(lines[roi.line_start - 1 : roi.line_end])
    if current != roi.original_text:
        raise ToolError("roi_drift", f"{roi.file_path} lines {roi.line_start}-{roi.line_end} changed since task creation")
    return "".join(lines[: roi.line_start - 1]) + replacement + "".join(lines[roi.line_end :])


def apply_roi_patch(workspace: str | Path, roi: "RegionOfInterest", replacement: str) -> Path:
    """Replace the ROI lines of ``workspace/roi.file_path`` in place.

    The workspace must be a disposable copy; the pristine task repository is
    never passed here.  Raises :class:`ToolError` (``roi_drift`` or
    ``not_found``) when the file no longer matches the task.
    """
    path = Path(workspace) / roi.file_path
    if not path.is_file():
        raise ToolError("not_found", f"{roi.file_path} does not exist in the workspace")
    write_text(path, splice_roi(read_text(path), roi, replacement))
    return path


def tree_digest(root: str | Path) -> str:
    """SHA-256 over every relative path and file content under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(p.read_bytes() if not p.is_symlink() else os.readlink(p).encode())
            h.update(b"\0")
    return h.hexdigest()


# -- command templates ------------------------------------------------------

def render_command(template: str | Sequence[str], compile_args: Sequence[str] = (),
                   **subs: str) -> list[str]:
    """Turn a command template into argv.

    A ``{compile_args}`` token is replaced by the extra arguments; without one
    they are appended, so they come after (and override) the template's flags.
    Other ``{name}`` tokens are filled from ``subs``.
    """
    argv = shlex.split(template) if isinstance(template, str) else list(template)
    out: list[str] = []
    placed = False
    for tok in argv:
        if tok == "{compile_args}":
            out.extend(compile_args)
            placed = True
        else:
            out.append(tok.format(**subs) if subs and "{" in tok else tok)
    if not placed:
        out.extend(compile_args)
    return out


# -- benchmarking -----------------------------------------------------------

def _median(values: Iterable[float]) -> float:
    return float(statistics.median(values))


def build_and_run(task: "OptimizationTask", replacement: str, compile_args: Sequence[str] = (),
                  *, executor: Executor, key: str = "bench", runs: int = 1) -> BenchmarkOutcome:
    """Patch a fresh workspace, build once, run ``runs`` times.

    ``time_ms`` is the median of the per-run medians.  The outcome is correct
    only if every run reported ``OPTBENCH_CORRECT: 1`` and exited cleanly.
    """
    ws = executor.make_workspace(key, task.repo_root)
    try:
        try:
            apply_roi_patch(ws, task.roi, replacement)
        except ToolError as exc:
            return BenchmarkOutcome.failed(f"patch failed ({exc.kind}): {exc.message}")
        build = executor.run(Job(
            command=tuple(render_command(task.build_command, compile_args)),
            working_dir=ws,
            timeout_ms=task.tool_timeout_ms or executor.tool_timeout_ms,
            lane=GENERAL,
        ))
        compile_log = _job_log(build)
        if not build.ok:
            return BenchmarkOutcome.failed(compile_log)

        run_logs, per_run, all_times, correct = [], [], [], True
        for _ in range(runs):
            res = executor.run(Job(
                command=tuple(render_command(task.run_script)),
                working_dir=ws,
                timeout_ms=task.benchmark_timeout_ms or executor.benchmark_timeout_ms,
                lane=TIMING,
            ))
            run_logs.append(_job_log(res))
            report = parse_run_protocol(res.stdout)
            correct = correct and report.correct and res.ok
            if report.times_ms:
                per_run.append(_median(report.times_ms))
                all_times.extend(report.times_ms)
        time_ms = _median(per_run) if per_run else None
        return BenchmarkOutcome(True, correct, time_ms, compile_log, "\n".join(run_logs), tuple(all_times))
    finally:
        executor.release_workspace(ws)


def benchmark_code(task: "OptimizationTask", replacement: str, compile_args: Sequence[str] | None = None,
                   *, executor: Executor, key: str = "bench") -> BenchmarkOutcome:
    if not replacement:
        raise ValueError("replacement must be non-empty")
    return build_and_run(task, replacement, list(compile_args or ()), executor=executor, key=key)


def _job_log(res: JobOutcome) -> str:
    parts = [res.stdout, res.stderr]
    if res.timed_out:
        parts.append("[timed out]")
    elif res.exit_code != 0:
        parts.append(f"[exit status {res.exit_code}]")
    return "".join(p if p.endswith("\n") or not p else p + "\n" for p in parts if p)


@dataclass(frozen=True)
class MicrobenchConfig:
    filename: str = "bench.c"
    build_command: str = "cc -O2 -o bench bench.c"
    run_command: str = "./bench"

    @classmethod
    def from_dict(cls, d: dict | None) -> "MicrobenchConfig":
        return cls(**(d or {}))


def microbench_code(source: str, compile_args: Sequence[str] | None = None,
                    launch_params: dict | None = None, *, executor: Executor,
                    config: MicrobenchConfig | None = None, key: str = "micro",
                    timeout_ms: int | None = None) -> BenchmarkOutcome:
    """Compile and run a standalone single-file program in a scratch directory.

    Launch parameters reach the program as JSON in ``OPTBENCH_LAUNCH_PARAMS``.
    """
    if not source:
        raise ValueError("source must be non-empty")
    config = config or MicrobenchConfig()
    ws = executor.make_workspace(key)
    try:
        write_text(ws / config.filename, source)
        build = executor.run(Job(tuple(render_command(config.build_command, list(compile_args or ()))),
                                 ws, executor.tool_timeout_ms, lane=GENERAL))
        compile_log = _job_log(build)
        if not build.ok:
            return BenchmarkOutcome.failed(compile_log)
        env = {"OPTBENCH_LAUNCH_PARAMS": json.dumps(launch_params or {}, sort_keys=True)}
        res = executor.run(Job(tuple(render_command(config.run_command)), ws,
                               timeout_ms or executor.benchmark_timeout_ms, env=env, lane=TIMING))
        report = parse_run_protocol(res.stdout)
        time_ms = _median(report.times_ms) if report.times_ms else None
        # a standalone test without a correctness line is only trusted if it timed something
        correct = res.ok and time_ms is not None and (report.correct or "OPTBENCH_CORRECT" not in res.stdout)
        return BenchmarkOutcome(True, correct, time_ms, compile_log, _job_log(res), report.times_ms)
    finally:
        executor.release_workspace(ws)


# -- compiler diagnostics ---------------------------------------------------

_REGS_RE = re.compile(r"Used\s+(\d+)\s+registers")
_SPILL_STORE_RE = re.compile(r"(\d+)\s+bytes\s+spill\s+stores")
_SPILL_LOAD_RE = re.compile(r"(\d+)\s+bytes\s+spill\s+loads")


def parse_compiler_log(log_text: str, compiled: bool = True, assembly: str = "") -> CompilerDiagnostics:
    """Pull register and spill figures out of a verbose (ptxas-style) log.

    With several functions in the log the worst value of each metric is kept.
    Metrics the log never mentions stay ``None``.
    """
    def worst(pattern: re.Pattern) -> int | None:
        vals = [int(m) for m in pattern.findall(log_text)]
        return max(vals) if vals else None

    return CompilerDiagnostics(
        registers_per_thread=worst(_REGS_RE),
        spill_store_bytes=worst(_SPILL_STORE_RE),
        spill_load_bytes=worst(_SPILL_LOAD_RE),
        assembly_excerpt=assembly,
        raw_log=log_text,
        compiled=compiled,
    )


def _excerpt(text: str, max_lines: int = ASM_EXCERPT_LINES) -> str:
    lines = text.splitlines()
    out = "\n".join(lines[:max_lines])
    if len(lines) > max_lines:
        out += f"\n[... {len(lines) - max_lines} more lines ...]"
    return out


def compiler_analysis(task: "OptimizationTask", replacement: str | None = None, config: dict | None = None,
                      *, executor: Executor, key: str = "analysis") -> CompilerDiagnostics:
    """Compile (optionally patched) sources verbosely and parse resource usage.

    The compile command is ``config["command"]``, else the task's
    ``analysis_command``, else its build command.  ``config["flags"]`` and
    ``config["arch"]`` (as ``-arch=<arch>``) are appended.  If the task defines
    ``asm_command``, its stdout supplies the assembly excerpt.
    """
    config = dict(config or {})
    template = config.get("command") or task.analysis_command or task.build_command
    extra = list(config.get("flags") or ())
    if config.get("arch"):
        extra.append(f"-arch={config['arch']}")
    ws = executor.make_workspace(key, task.repo_root)
    try:
        if replacement:
            try:
                apply_roi_patch(ws, task.roi, replacement)
            except ToolError as exc:
                return parse_compiler_log(f"patch failed ({exc.kind}): {exc.message}", compiled=False)
        res = executor.run(Job(tuple(render_command(template, extra)), ws,
                               task.tool_timeout_ms or executor.tool_timeout_ms, lane=GENERAL))
        log_text = res.stdout + res.stderr
        asm = ""
        if res.ok and task.asm_command:
            asm_res = executor.run(Job(tuple(render_command(task.asm_command, extra)), ws,
                                       task.tool_timeout_ms or executor.tool_timeout_ms, lane=GENERAL))
            asm = _excerpt(asm_res.stdout)
        return parse_compiler_log(log_text, compiled=res.ok, assembly=asm)
    finally:
        executor.release_workspace(ws)


# -- repository inspection --------------------------------------------------

def resolve_inside(repo_root: str | Path, rel: str) -> Path:
    root = Path(repo_root).resolve()
    if os.path.isabs(rel):
        raise ToolError("path_escape", f"absolute paths are not allowed: {rel}")
    p = (root / rel).resolve()
    try:
        p.relative_to(root)
    except ValueError:
        raise ToolError("path_escape", f"{rel} resolves outside the repository") from None
    return p


def file_viewer(repo_root: str | Path, file: str, line_start: int = 1, line_end: int | None = None) -> FileChunk:
    open_ended = line_end is None
    if open_ended:
        line_end = line_start + VIEW_MAX_LINES - 1
    if not 1 <= line_start <= line_end:
        raise ToolError("invalid_argument", f"bad line range {line_start}-{line_end}")
    path = resolve_inside(repo_root, file)
    if not path.is_file():
        raise ToolError("not_found", f"{file} is not a file in the repository")
    lines = split_lines(read_text(path))
    total = len(lines)
    end = min(line_end, total)
    out, size, last, truncated = [], 0, line_start - 1, False
    for n in range(line_start, end + 1):
        row = f"{n}\t{lines[n - 1].rstrip(chr(10))}\n"
        if n - line_start >= VIEW_MAX_LINES or size + len(row.encode()) > VIEW_MAX_BYTES:
            truncated = True
            break
        out.append(row)
        size += len(row.encode())
        last = n
    # an open-ended view that stopped before the end of the file was capped
    truncated = truncated or (open_ended and last < total)
    return FileChunk(file, line_start, last, total, "".join(out), truncated)


def list_dir(repo_root: str | Path, dir: str = ".") -> list[str]:
    path = resolve_inside(repo_root, dir)
    if not path.is_dir():
        raise ToolError("not_found", f"{dir} is not a directory in the repository")
    return [e.name + "/" if e.is_dir() else e.name for e in sorted(path.iterdir(), key=lambda e: e.name)]


def search(repo_root: str | Path, pattern: str, is_regex: bool = False, max_hits: int = 100) -> SearchResult:
    if not pattern:
        raise ToolError("invalid_argument", "pattern must be non-empty")
    if is_regex:
        try:
            rx = re.compile(pattern)
        except re.error as exc:
            raise ToolError("invalid_regex", str(exc)) from None
        match = rx.search
    else:
        def match(line: str) -> bool:
            return pattern in line
    root = Path(repo_root).resolve()
    hits: list[SearchHit] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
        for name in sorted(filenames):
            p = Path(dirpath) / name
            if p.is_symlink() or p.stat().st_size > SEARCH_MAX_FILE_BYTES:
                continue
            data = p.read_bytes()
            if b"\0" in data:
                continue
            rel = p.relative_to(root).as_posix()
            for i, line in enumerate(data.decode("utf-8", errors="replace").split("\n"), start=1):
                if match(line):
                    if len(hits) >= max_hits:
                        return SearchResult(tuple(hits), True)
                    hits.append(SearchHit(rel, i, line))
    return SearchResult(tuple(hits), False)


# -- catalog ----------------------------------------------------------------

_STR_LIST = {"type": "array", "items": {"type": "string"}}

TOOL_SPECS: dict[ToolName, dict[str, Any]] = {
    ToolName.benchmark_code: {
        "description": "Replace the ROI with `replacement`, build the whole application "
                       "(optional compile_args are appended to the build command) and run it. The "
                       "replacement is inserted verbatim, so end it with a newline.",
        "arguments": {
            "type": "object",
            "properties": {"replacement": {"type": "string", "minLength": 1}, "compile_args": _STR_LIST},
            "required": ["replacement"],
            "additionalProperties": False,
        },
        "returns": "{compiled: bool, correct: bool, time_ms: number|null, times_ms: [number], "
                   "compile_log: str, run_log: str}",
    },
    ToolName.microbench_code: {
        "description": "Compile and run a standalone single-file test program. It reports "
                       "results by printing `OPTBENCH_TIME_MS: <ms>` lines (and optionally "
                       "`OPTBENCH_CORRECT: <0|1>`). launch_params are passed as JSON in the "
                       "OPTBENCH_LAUNCH_PARAMS environment variable.",
        "arguments": {
            "type": "object",
            "properties": {
                "source": {"type": "string", "minLength": 1},
                "compile_args": _STR_LIST,
                "launch_params": {"type": "object"},
            },
            "required": ["source"],
            "additionalProperties": False,
        },
        "returns": "{compiled: bool, correct: bool, time_ms: number|null, times_ms: [number], "
                   "compile_log: str, run_log: str}",
    },
    ToolName.compiler_analysis: {
        "description": "Compile the current ROI (or `replacement` in its place) with verbose "
                       "resource usage output. Unknown metrics are null.",
        "arguments": {
            "type": "object",
            "properties": {
                "replacement": {"type": "string", "minLength": 1},
                "config": {
                    "type": "object",
                    "properties": {"arch": {"type": "string"}, "flags": _STR_LIST},
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "returns": "{compiled: bool, registers_per_thread: int|null, spill_store_bytes: int|null, "
                   "spill_load_bytes: int|null, assembly_excerpt: str, raw_log: str}",
    },
    ToolName.file_viewer: {
        "description": f"Show numbered lines of a repository file (at most {VIEW_MAX_LINES} lines "
                       f"or {VIEW_MAX_BYTES // 1024} KiB per call; paginate with line_start).",
        "arguments": {
            "type": "object",
            "properties": {
                "file": {"type": "string", "minLength": 1},
                "line_start": {"type": "integer", "minimum": 1},
                "line_end": {"type": "integer", "minimum": 1},
            },
            "required": ["file"],
            "additionalProperties": False,
        },
        "returns": "{file: str, line_start: int, line_end: int, total_lines: int, text: str, truncated: bool}",
    },
    ToolName.list_dir: {
        "description": "List a repository directory, sorted; directories end with '/'.",
        "arguments": {
            "type": "object",
            "properties": {"dir": {"type": "string"}},
            "additionalProperties": False,
        },
        "returns": "{dir: str, entries: [str]}",
    },
    ToolName.search: {
        "description": "Find a substring (or regex when is_regex is true) across repository files.",
        "arguments": {
            "type": "object",
            "properties": {
                "pattern": {"type": "string", "minLength": 1},
                "is_regex": {"type": "boolean"},
                "max_hits": {"type": "integer", "minimum": 1, "maximum": 1000},
            },
            "required": ["pattern"],
            "additionalProperties": False,
        },
        "returns": "{hits: [{file: str, line_number: int, line_text: str}], truncated: bool}",
    },
}


def parse_tool_names(names: Iterable[str | ToolName]) -> list[ToolName]:
    out = []
    for n in names:
        try:
            out.append(ToolName(str(n)))
        except ValueError:
            raise ValueError(f"unknown tool name {n!r}") from None
    return out


def render_tool_catalog(subset: Sequence[str | ToolName]) -> str:
    tools = parse_tool_names(subset)
    if not tools:
        raise ValueError("tool subset is empty")
    if len(set(tools)) != len(tools):
        raise ValueError("tool subset contains duplicates")
    blocks = []
    for t in tools:
        spec = TOOL_SPECS[t]
        blocks.append(
            f"### {t.value}\n{spec['description']}\n"
            f"Arguments (JSON schema): {json.dumps(spec['arguments'], sort_keys=True)}\n"
            f"Returns: {spec['returns']}\n"
        )
    return "\n".join(blocks)


def tool_function_schemas(subset: Sequence[str | ToolName]) -> list[dict]:
    """Chat-completions ``tools`` entries for the given tools."""
    return [
        {"type": "function",
         "function": {"name": t.value, "description": TOOL_SPECS[t]["description"],
                      "parameters": TOOL_SPECS[t]["arguments"]}}
        for t in parse_tool_names(subset)
    ]


# -- dispatch ---------------------------------------------------------------

def dispatch(call: ToolCall, task: "OptimizationTask", subset: Iterable[str | ToolName],
             executor: Executor) -> ToolResult:
    """Run one tool call.  Never raises; every failure is an ``ok=False`` result."""
    start = time.perf_counter()
    call_id = str(getattr(call, "call_id", "") or "")

    def elapsed() -> float:
        return (time.perf_counter() - start) * 1e3

    try:
        name = getattr(call, "tool", None)
        args = getattr(call, "arguments", None)
        available = {str(t) for t in subset}
        if not isinstance(name, str) or name not in TOOL_NAMES:
            return ToolResult.error(call_id, "unknown_tool", f"no tool named {name!r}", elapsed())
        if name not in available:
            return ToolResult.error(call_id, "tool_unavailable", f"{name} is not available in this session", elapsed())
        if not isinstance(args, dict):
            return ToolResult.error(call_id, "schema", "arguments must be a JSON object", elapsed())
        try:
            jsonschema.validate(args, TOOL_SPECS[ToolName(name)]["arguments"])
        except jsonschema.ValidationError as exc:
            return ToolResult.error(call_id, "schema", exc.message, elapsed())
        payload = _route(ToolName(name), args, task, executor, call_id or "call")
        return ToolResult(call_id, True, payload, elapsed())
    except ToolError as exc:
        return ToolResult.error(call_id, exc.kind, exc.message, elapsed())
    except Exception as exc:  # noqa: BLE001 - the policy must always get a result back
        log.exception("tool call %s failed", call_id)
        return ToolResult.error(call_id, "internal", f"{type(exc).__name__}: {exc}", elapsed())


def _route(tool: ToolName, args: dict, task: "OptimizationTask", executor: Executor, key: str) -> dict:
    if tool is ToolName.benchmark_code:
        return benchmark_code(task, args["replacement"], args.get("compile_args"),
                              executor=executor, key=key).to_payload()
    if tool is ToolName.microbench_code:
        return microbench_code(args["source"], args.get("compile_args"), args.get("launch_params"),
                               executor=executor, config=task.microbench, key=key).to_payload()
    if tool is ToolName.compiler_analysis:
        return compiler_analysis(task, args.get("replacement"), args.get("config"),
                                 executor=executor, key=key).to_payload()
    if tool is ToolName.file_viewer:
        return asdict(file_viewer(task.repo_root, args["file"], args.get("line_start", 1), args.get("line_end")))
    if tool is ToolName.list_dir:
        d = args.get("dir", ".")
        return {"dir": d, "entries": list_dir(task.repo_root, d)}
    if tool is ToolName.search:
        res = search(task.repo_root, args["pattern"], args.get("is_regex", False), args.get("max_hits", 100))
        return {"hits": [asdict(h) for h in res.hits], "truncated": res.truncated}
    raise AssertionError(tool)
