"""Optimization tasks: loading, region expansion, baselines and tool subsets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from .executor import Executor
from .tools import (
    ALL_TOOLS,
    MicrobenchConfig,
    ToolName,
    benchmark_code,
    build_and_run,
    parse_tool_names,
    read_text,
    split_lines,
    write_text,
)

if TYPE_CHECKING:
    from .policy import PolicyBackend

log = logging.getLogger(__name__)

DEFAULT_BASELINE_TRIALS = 5

DEFAULT_SYSTEM_INSTRUCTION = (
    "You are optimizing the performance of a GPU kernel. Only the region of interest may be "
    "changed; the result must stay correct and should run faster than the baseline. Use the "
    "available tools to inspect, compile and benchmark candidate changes before answering."
)

HOLE_BEGIN = "OPTBENCH_KERNEL_BEGIN"
HOLE_END = "OPTBENCH_KERNEL_END"


class TaskError(ValueError):
    pass


class BrokenBaseline(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionOfInterest:
    file_path: str
    line_start: int
    line_end: int
    original_text: str

    def __post_init__(self):
        if not 1 <= self.line_start <= self.line_end:
            raise TaskError(f"invalid ROI line range {self.line_start}-{self.line_end}")

    @classmethod
    def from_file(cls, repo_root: str | Path, file_path: str, line_start: int, line_end: int) -> "RegionOfInterest":
        if not 1 <= line_start <= line_end:
            raise TaskError(f"invalid ROI line range {line_start}-{line_end}")
        path = Path(repo_root) / file_path
        if not path.is_file():
            raise TaskError(f"ROI file {file_path} not found under {repo_root}")
        lines = split_lines(read_text(path))
        if line_end > len(lines):
            raise TaskError(f"ROI {line_start}-{line_end} is out of bounds for {file_path} ({len(lines)} lines)")
        return cls(file_path, line_start, line_end, "".join(lines[line_start - 1 : line_end]))

    @property
    def num_lines(self) -> int:
        return self.line_end - self.line_start + 1

    def overlaps(self, other: "RegionOfInterest") -> bool:
        return (self.file_path == other.file_path
                and self.line_start <= other.line_end and other.line_start <= self.line_end)


@dataclass(frozen=True)
class KernelSpan:
    name: str
    roi: RegionOfInterest


@dataclass(frozen=True)
class OptimizationTask:
    task_id: str
    repo_root: Path
    roi: RegionOfInterest
    build_command: str
    run_script: str
    tool_catalog: tuple[ToolName, ...] = ALL_TOOLS
    system_instruction: str = DEFAULT_SYSTEM_INSTRUCTION
    baseline_time_ms: float | None = None
    category: str = "uncategorized"
    analysis_command: str | None = None
    asm_command: str | None = None
    microbench: MicrobenchConfig = field(default_factory=MicrobenchConfig)
    tool_timeout_ms: int | None = None
    benchmark_timeout_ms: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "repo_root", Path(self.repo_root))
        object.__setattr__(self, "tool_catalog", tuple(parse_tool_names(self.tool_catalog)))
        if not self.task_id:
            raise TaskError("task_id must be non-empty")
        if ToolName.benchmark_code not in self.tool_catalog:
            raise TaskError("tool catalog must include benchmark_code")
        if self.baseline_time_ms is not None and not self.baseline_time_ms > 0:
            raise TaskError("baseline_time_ms must be positive")
        if not (self.repo_root / self.roi.file_path).is_file():
            raise TaskError(f"{self.roi.file_path} does not exist under {self.repo_root}")

    def with_baseline(self, baseline_time_ms: float) -> "OptimizationTask":
        return dataclasses.replace(self, baseline_time_ms=baseline_time_ms)

    def to_manifest(self, relative_to: Path | None = None) -> dict:
        repo = self.repo_root
        if relative_to is not None:
            try:
                repo = Path(os.path.relpath(repo.resolve(), relative_to.resolve()))
            except ValueError:
                pass
        d = {
            "task_id": self.task_id,
            "repo_root": str(repo),
            "roi": {"file": self.roi.file_path, "line_start": self.roi.line_start, "line_end": self.roi.line_end},
            "build_command": self.build_command,
            "run_script": self.run_script,
            "tools": [t.value for t in self.tool_catalog],
            "system_instruction": self.system_instruction,
            "category": self.category,
        }
        if self.baseline_time_ms is not None:
            d["baseline_time_ms"] = self.baseline_time_ms
        for key in ("analysis_command", "asm_command", "tool_timeout_ms", "benchmark_timeout_ms"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.microbench != MicrobenchConfig():
            d["microbench"] = dataclasses.asdict(self.microbench)
        return d


_MANIFEST_KEYS = {
    "task_id", "repo_root", "roi", "build_command", "run_script", "baseline_time_ms", "tools",
    "system_instruction", "category", "analysis_command", "asm_command", "microbench",
    "tool_timeout_ms", "benchmark_timeout_ms",
}


def task_from_manifest(doc: dict, base_dir: str | Path = ".") -> OptimizationTask:
    if not isinstance(doc, dict):
        raise TaskError("manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise TaskError(f"unknown manifest fields: {sorted(unknown)}")
    try:
        roi = doc["roi"]
        repo_root = (Path(base_dir) / doc["repo_root"]).resolve()
        region = RegionOfInterest.from_file(repo_root, roi["file"], int(roi["line_start"]), int(roi["line_end"]))
        return OptimizationTask(
            task_id=str(doc["task_id"]),
            repo_root=repo_root,
            roi=region,
            build_command=doc["build_command"],
            run_script=doc["run_script"],
            tool_catalog=tuple(doc.get("tools", [t.value for t in ALL_TOOLS])),
            system_instruction=doc.get("system_instruction", DEFAULT_SYSTEM_INSTRUCTION),
            baseline_time_ms=doc.get("baseline_time_ms"),
            category=doc.get("category", "uncategorized"),
            analysis_command=doc.get("analysis_command"),
            asm_command=doc.get("asm_command"),
            microbench=MicrobenchConfig.from_dict(doc.get("microbench")),
            tool_timeout_ms=doc.get("tool_timeout_ms"),
            benchmark_timeout_ms=doc.get("benchmark_timeout_ms"),
        )
    except KeyError as exc:
        raise TaskError(f"manifest is missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, TaskError):
            raise
        raise TaskError(f"malformed manifest: {exc}") from None


def load_task(manifest_path: str | Path) -> OptimizationTask:
    """Read and validate a task manifest; ``repo_root`` is relative to the manifest."""
    path = Path(manifest_path)
    if not path.is_file():
        raise TaskError(f"manifest {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TaskError(f"manifest {path} is not valid JSON: {exc}") from None
    return task_from_manifest(doc, path.parent)


def save_task(task: OptimizationTask, manifest_path: str | Path) -> Path:
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(task.to_manifest(relative_to=path.parent), indent=2) + "\n")
    return path


def expand_kernel_regions(repo_root: str | Path, spans: Sequence[KernelSpan], *, build_command: str,
                          run_script: str, task_prefix: str = "", **task_fields) -> list[OptimizationTask]:
    """One task per span, plus one covering all spans of each multi-span file.

    For kernels A and B in one file this gives A, B and A+B.  The combined
    ROI is the smallest line range containing every span in that file.
    Spans in different files are never combined.
    """
    for i, a in enumerate(spans):
        for b in spans[i + 1 :]:
            if a.roi.overlaps(b.roi):
                raise TaskError(f"kernel spans {a.name} and {b.name} overlap")

    def make(task_id: str, roi: RegionOfInterest) -> OptimizationTask:
        return OptimizationTask(task_id=task_prefix + task_id, repo_root=Path(repo_root), roi=roi,
                                build_command=build_command, run_script=run_script, **task_fields)

    tasks = [make(s.name, s.roi) for s in spans]
    by_file: dict[str, list[KernelSpan]] = {}
    for s in spans:
        by_file.setdefault(s.roi.file_path, []).append(s)
    for file_path, group in by_file.items():
        if len(group) < 2:
            continue
        group = sorted(group, key=lambda s: s.roi.line_start)
        roi = RegionOfInterest.from_file(repo_root, file_path, group[0].roi.line_start,
                                         max(s.roi.line_end for s in group))
        tasks.append(make("+".join(s.name for s in group), roi))
    return tasks


def measure_baseline(task: OptimizationTask, trials: int = DEFAULT_BASELINE_TRIALS, *,
                     executor: Executor) -> float:
    """Build the unmodified program once, run it ``trials`` times, return the median time."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    outcome = build_and_run(task, task.roi.original_text, executor=executor,
                            key=f"{task.task_id}-baseline", runs=trials)
    if not outcome.compiled:
        raise BrokenBaseline(f"{task.task_id}: unmodified program failed to build:\n{outcome.compile_log}")
    if not outcome.correct:
        raise BrokenBaseline(f"{task.task_id}: broken baseline, unmodified program is not correct")
    if outcome.time_ms is None:
        raise BrokenBaseline(f"{task.task_id}: run script reported no OPTBENCH_TIME_MS line")
    return outcome.time_ms


def sample_tool_subset(catalog: Sequence[str | ToolName] = ALL_TOOLS, rng_seed: int = 0) -> list[ToolName]:
    """Draw 4 to 6 tools (uniform size, then uniform subset); benchmark_code always included.

    The result keeps catalog order and depends only on ``catalog`` and the seed.
    """
    tools = parse_tool_names(catalog)
    if len(set(tools)) != len(tools):
        raise ValueError("catalog contains duplicates")
    if len(tools) < 4:
        raise ValueError("catalog needs at least 4 tools")
    if ToolName.benchmark_code not in tools:
        raise ValueError("catalog must include benchmark_code")
    rng = random.Random(rng_seed)
    size = rng.choice([n for n in (4, 5, 6) if n <= len(tools)])
    others = [t for t in tools if t is not ToolName.benchmark_code]
    chosen = set(rng.sample(others, size - 1)) | {ToolName.benchmark_code}
    return [t for t in tools if t in chosen]


# -- synthetic tasks --------------------------------------------------------

@dataclass(frozen=True)
class TemplateHole:
    file_path: str
    begin_line: int  # line number of the BEGIN marker
    end_line: int    # line number of the END marker


def find_template_hole(template_repo: str | Path) -> TemplateHole:
    """Locate the single ``OPTBENCH_KERNEL_BEGIN`` / ``OPTBENCH_KERNEL_END`` marker pair."""
    root = Path(template_repo)
    found = []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or any(part.startswith(".") for part in p.relative_to(root).parts):
            continue
        try:
            lines = split_lines(read_text(p))
        except OSError:
            continue
        begins = [i + 1 for i, l in enumerate(lines) if HOLE_BEGIN in l]
        ends = [i + 1 for i, l in enumerate(lines) if HOLE_END in l]
        if begins or ends:
            if len(begins) != 1 or len(ends) != 1 or ends[0] <= begins[0]:
                raise TaskError(f"{p.relative_to(root)}: malformed kernel hole markers")
            found.append(TemplateHole(p.relative_to(root).as_posix(), begins[0], ends[0]))
    if len(found) != 1:
        raise TaskError(f"template must contain exactly one kernel hole, found {len(found)}")
    return found[0]


_FENCE_RE = re.compile(r"```[A-Za-z0-9_+-]*\n(.*?)```", re.S)


def extract_code(raw: str) -> str:
    """Code from a policy answer: a ``final_code`` JSON field, a fenced block, or the raw text."""
    text = raw.strip()
    try:
        doc = json.loads(text)
        if isinstance(doc, dict) and isinstance(doc.get("final_code"), str):
            return doc["final_code"]
    except json.JSONDecodeError:
        pass
    m = _FENCE_RE.search(raw)
    return m.group(1) if m else text


def synth_generate(template_repo: str | Path, inspiration_snippet: str, policy: "PolicyBackend", *,
                   out_dir: str | Path, build_command: str, run_script: str,
                   category: str = "synthetic", **task_fields) -> OptimizationTask:
    """Ask the policy to write only the kernel (and its launch) into the template hole.

    The template is copied to ``out_dir/<task_id>`` and the generated code goes
    between the hole markers; every other byte of the template is kept.
    """
    from .policy import FinalAnswer, Message, PolicyError, ReasoningText

    hole = find_template_hole(template_repo)
    tpl_lines = split_lines(read_text(Path(template_repo) / hole.file_path))
    context = "".join(tpl_lines)
    history = [
        Message("system", "You write GPU kernels for an existing benchmark driver. Write ONLY the code that "
                          f"goes between the {HOLE_BEGIN} and {HOLE_END} markers: the kernel and its launch. "
                          "Do not redefine anything the driver already provides."),
        Message("user", f"Driver file {hole.file_path}:\n```\n{context}```\n\n"
                        f"Use this snippet as loose inspiration:\n```\n{inspiration_snippet}\n```"),
    ]
    session = policy.open_session()
    event = session.next_event(history, [], 4096)
    if isinstance(event, (FinalAnswer, ReasoningText)):
        raw = event.raw_text if isinstance(event, FinalAnswer) else event.text
    else:
        raise PolicyError(f"expected generated code, got {type(event).__name__}")
    code = extract_code(raw)
    if not code.strip():
        raise TaskError("policy produced no kernel code")
    if HOLE_BEGIN in code or HOLE_END in code:
        raise TaskError("generated code does not fit the template hole (contains hole markers)")
    if not code.endswith("\n"):
        code += "\n"

    digest = hashlib.sha256((inspiration_snippet + "\0" + code).encode()).hexdigest()[:12]
    task_id = f"synth-{digest}"
    dest = Path(out_dir) / task_id
    if dest.exists():
        shutil.rmtree(dest)
    shutil.copytree(template_repo, dest)
    new_lines = tpl_lines[: hole.begin_line] + split_lines(code) + tpl_lines[hole.end_line - 1 :]
    write_text(dest / hole.file_path, "".join(new_lines))
    n_code = len(split_lines(code))
    roi = RegionOfInterest.from_file(dest, hole.file_path, hole.begin_line + 1, hole.begin_line + n_code)
    return OptimizationTask(task_id=task_id, repo_root=dest, roi=roi, build_command=build_command,
                            run_script=run_script, category=category, **task_fields)


def filter_runnable(candidates: Iterable[OptimizationTask], executor: Executor) -> list[OptimizationTask]:
    """Keep candidates whose unmodified program builds, runs and reports correct."""
    kept = []
    for task in candidates:
        outcome = benchmark_code(task, task.roi.original_text, executor=executor, key=f"{task.task_id}-filter")
        if not outcome.compiled:
            log.info("dropping %s: build failed", task.task_id)
        elif not outcome.correct:
            log.info("dropping %s: run incorrect or protocol violation", task.task_id)
        else:
            kept.append(task)
    return kept
