"""Reasoning traces: segments, marker serialization, JSONL storage and tool statistics.

Marker form (human readable, used for SFT targets)::

    <|trace|> {"task_id": ..., "terminated_reason": ..., "tools_available": [...]}
    <|reasoning|>
    free text, one or more lines
    <|tool|> {"arguments": {...}, "call_id": "c1", "tool": "file_viewer"}
    <|result|> {"call_id": "c1", "ok": true, "payload": {...}}
    <|final|> {"explanation": "...", "final_code": "..."}

Reasoning lines that begin with ``<|`` or ``\\`` are escaped with a leading
backslash.  Wall-clock durations are kept only in the JSONL form.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from .tools import TOOL_NAMES, ToolCall, ToolName, ToolResult, parse_tool_names

HEADER = "<|trace|>"
REASONING = "<|reasoning|>"
TOOL = "<|tool|>"
RESULT = "<|result|>"
FINAL = "<|final|>"

TERMINATION_REASONS = ("final", "budget_exhausted", "backend_error", "invalid_final")


class TraceError(ValueError):
    pass


class FinalValidationError(ValueError):
    pass


@dataclass(frozen=True)
class FinalSolution:
    final_code: str
    explanation: str

    def to_dict(self) -> dict:
        return {"final_code": self.final_code, "explanation": self.explanation}


@dataclass(frozen=True)
class Reasoning:
    text: str


@dataclass(frozen=True)
class Tool:
    call: ToolCall


@dataclass(frozen=True)
class Result:
    result: ToolResult


@dataclass(frozen=True)
class Final:
    solution: FinalSolution


TraceSegment = Union[Reasoning, Tool, Result, Final]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def validate_final(raw_text: str) -> FinalSolution:
    """Parse the policy's final JSON answer; exactly ``final_code`` and ``explanation``."""
    text = raw_text.strip()
    if text.startswith("```"):
        text = text.split("\n", 1)[1] if "\n" in text else ""
        text = text.rsplit("```", 1)[0].strip()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FinalValidationError(f"final answer is not JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FinalValidationError("final answer must be a JSON object")
    missing = {"final_code", "explanation"} - set(doc)
    if missing:
        raise FinalValidationError(f"final answer is missing {sorted(missing)}")
    extra = set(doc) - {"final_code", "explanation"}
    if extra:
        raise FinalValidationError(f"final answer has unexpected keys {sorted(extra)}")
    code, expl = doc["final_code"], doc["explanation"]
    if not isinstance(code, str) or not isinstance(expl, str):
        raise FinalValidationError("final_code and explanation must be strings")
    if not code.strip():
        raise FinalValidationError("final_code is empty")
    if not expl.strip():
        raise FinalValidationError("explanation is empty")
    return FinalSolution(code, expl)


@dataclass
class Trace:
    task_id: str
    tools_available: tuple[ToolName, ...] = ()
    segments: list[TraceSegment] = field(default_factory=list)
    terminated_reason: str | None = None

    def __post_init__(self):
        self.tools_available = tuple(parse_tool_names(self.tools_available))
        if self.terminated_reason is not None and self.terminated_reason not in TERMINATION_REASONS:
            raise TraceError(f"unknown termination reason {self.terminated_reason!r}")

    @property
    def final(self) -> FinalSolution | None:
        if self.segments and isinstance(self.segments[-1], Final):
            return self.segments[-1].solution
        return None

    @property
    def tool_calls(self) -> list[ToolCall]:
        return [s.call for s in self.segments if isinstance(s, Tool)]

    def append(self, segment: TraceSegment) -> "Trace":
        """Append a segment, enforcing the ordering rules."""
        if self.final is not None:
            raise TraceError("cannot append after the final segment")
        if isinstance(segment, Result):
            prev = self.segments[-1] if self.segments else None
            if not isinstance(prev, Tool) or prev.call.call_id != segment.result.call_id:
                raise TraceError(f"result {segment.result.call_id!r} does not follow its tool call")
        elif not isinstance(segment, (Reasoning, Tool, Final)):
            raise TraceError(f"not a trace segment: {segment!r}")
        self.segments.append(segment)
        return self

    def finish(self, reason: str) -> "Trace":
        if reason not in TERMINATION_REASONS:
            raise TraceError(f"unknown termination reason {reason!r}")
        if reason == "final" and self.final is None:
            raise TraceError("a trace terminated as final needs a Final segment")
        self.terminated_reason = reason
        return self

    def header(self) -> dict:
        return {
            "task_id": self.task_id,
            "tools_available": [t.value for t in self.tools_available],
            "terminated_reason": self.terminated_reason,
        }


def append_event(trace: Trace, item) -> Trace:
    """Add a policy event, tool result, final solution or raw segment to ``trace``."""
    from .policy import ReasoningText, ToolCallRequest

    if isinstance(item, ReasoningText):
        item = Reasoning(item.text)
    elif isinstance(item, ToolCallRequest):
        item = Tool(item.call)
    elif isinstance(item, ToolResult):
        item = Result(item)
    elif isinstance(item, FinalSolution):
        item = Final(item)
    return trace.append(item)


# -- marker serialization ---------------------------------------------------

def _escape(text: str) -> str:
    return "\n".join("\\" + l if l.startswith(("<|", "\\")) else l for l in text.split("\n"))


def _unescape(lines: list[str]) -> str:
    return "\n".join(l[1:] if l.startswith("\\") else l for l in lines)


def serialize(trace: Trace) -> str:
    out = [f"{HEADER} {_dumps(trace.header())}\n"]
    for seg in trace.segments:
        if isinstance(seg, Reasoning):
            out.append(f"{REASONING}\n{_escape(seg.text)}\n")
        elif isinstance(seg, Tool):
            out.append(f"{TOOL} {_dumps(seg.call.to_dict())}\n")
        elif isinstance(seg, Result):
            out.append(f"{RESULT} {_dumps(seg.result.to_dict(with_duration=False))}\n")
        else:
            out.append(f"{FINAL} {_dumps(seg.solution.to_dict())}\n")
    return "".join(out)


def _json_body(marker: str, line: str) -> dict:
    body = line[len(marker):].strip()
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise TraceError(f"malformed {marker} body: {exc}") from None
    if not isinstance(doc, dict):
        raise TraceError(f"{marker} body must be a JSON object")
    return doc


def parse(text: str) -> Trace:
    """Inverse of :func:`serialize`; rejects unknown markers and ordering violations."""
    if not text.endswith("\n"):
        raise TraceError("trace document must end with a newline")
    lines = text[:-1].split("\n")
    if not lines[0].startswith(HEADER):
        raise TraceError("trace document must start with a <|trace|> header")
    head = _json_body(HEADER, lines[0])
    try:
        trace = Trace(head["task_id"], tuple(head.get("tools_available", ())))
    except KeyError:
        raise TraceError("trace header lacks task_id") from None
    except ValueError as exc:
        raise TraceError(str(exc)) from None

    i = 1
    while i < len(lines):
        line = lines[i]
        if line == REASONING:
            j = i + 1
            while j < len(lines) and not lines[j].startswith("<|"):
                j += 1
            if j == i + 1:
                raise TraceError("reasoning segment has no body line")
            trace.append(Reasoning(_unescape(lines[i + 1 : j])))
            i = j
            continue
        try:
            if line.startswith(TOOL + " "):
                trace.append(Tool(ToolCall.from_dict(_json_body(TOOL, line))))
            elif line.startswith(RESULT + " "):
                trace.append(Result(ToolResult.from_dict(_json_body(RESULT, line))))
            elif line.startswith(FINAL + " "):
                doc = _json_body(FINAL, line)
                trace.append(Final(FinalSolution(doc["final_code"], doc["explanation"])))
            else:
                raise TraceError(f"unknown marker on line {i + 1}: {line[:40]!r}")
        except KeyError as exc:
            raise TraceError(f"line {i + 1}: missing field {exc.args[0]!r}") from None
        i += 1
    reason = head.get("terminated_reason")
    if reason is not None:
        trace.finish(reason)
    return trace


# -- JSONL ------------------------------------------------------------------

def to_jsonl(trace: Trace) -> str:
    rows = [{"kind": "header", **trace.header()}]
    for seg in trace.segments:
        if isinstance(seg, Reasoning):
            rows.append({"kind": "reasoning", "text": seg.text})
        elif isinstance(seg, Tool):
            rows.append({"kind": "tool", "call": seg.call.to_dict()})
        elif isinstance(seg, Result):
            rows.append({"kind": "result", "result": seg.result.to_dict()})
        else:
            rows.append({"kind": "final", **seg.solution.to_dict()})
    return "".join(_dumps(r) + "\n" for r in rows)


def from_jsonl(text: str) -> Trace:
    rows = [json.loads(l) for l in text.split("\n") if l.strip()]
    if not rows or rows[0].get("kind") != "header":
        raise TraceError("JSONL trace must start with a header row")
    head = rows[0]
    trace = Trace(head["task_id"], tuple(head.get("tools_available", ())))
    for row in rows[1:]:
        kind = row.get("kind")
        if kind == "reasoning":
            trace.append(Reasoning(row["text"]))
        elif kind == "tool":
            trace.append(Tool(ToolCall.from_dict(row["call"])))
        elif kind == "result":
            trace.append(Result(ToolResult.from_dict(row["result"])))
        elif kind == "final":
            trace.append(Final(FinalSolution(row["final_code"], row["explanation"])))
        else:
            raise TraceError(f"unknown JSONL row kind {kind!r}")
    if head.get("terminated_reason") is not None:
        trace.finish(head["terminated_reason"])
    return trace


def write_trace(store: str | Path, trace: Trace, rollout_id: str, sidecar: dict | None = None) -> Path:
    """Write ``<store>/<task_id>/<rollout_id>.trace.jsonl`` (+ ``.trace.txt``, ``.outcome.json``)."""
    d = Path(store) / trace.task_id
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{rollout_id}.trace.jsonl"
    path.write_text(to_jsonl(trace), encoding="utf-8")
    (d / f"{rollout_id}.trace.txt").write_text(serialize(trace), encoding="utf-8")
    if sidecar is not None:
        (d / f"{rollout_id}.outcome.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def iter_trace_store(store: str | Path):
    """Yield ``(trace, sidecar_or_None, path)`` for every stored trace, in path order."""
    for path in sorted(Path(store).glob("*/*.trace.jsonl")):
        sidecar_path = path.with_name(path.name.replace(".trace.jsonl", ".outcome.json"))
        sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else None
        yield from_jsonl(path.read_text(encoding="utf-8")), sidecar, path


# -- statistics -------------------------------------------------------------

def unique_tools_used(trace: Trace) -> set[ToolName]:
    """Distinct known tools the trace called, whether or not the call succeeded."""
    return {ToolName(c.tool) for c in trace.tool_calls if c.tool in TOOL_NAMES}


def tool_use_histogram(traces: Iterable[Trace]) -> dict[str, list[int]]:
    """Per-tool call counts, one entry per trace (zeros included)."""
    traces = list(traces)
    if not traces:
        return {}
    counts = [Counter(c.tool for c in t.tool_calls) for t in traces]
    return {name.value: [c[name.value] for c in counts] for name in ToolName}


def histogram_table(hist: dict[str, list[int]]) -> dict[str, dict[int, int]]:
    """For each tool, how many traces called it exactly n times."""
    return {tool: dict(sorted(Counter(per_trace).items())) for tool, per_trace in hist.items()}
