"""Language-model backends that drive a rollout.

A backend hands out one session per rollout.  Each call to
``session.next_event(history, available_tools, budget)`` yields exactly one
event: reasoning text, a tool call request, a malformed tool call, or the
final answer.  Backends never run tools themselves; tool results only reach
them as ``tool`` messages in the history.
"""

from __future__ import annotations

import json
import os
import re
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Protocol, Sequence, Union

import httpx

from .tools import ToolCall, ToolName, tool_function_schemas

DEFAULT_TOKEN_BUDGET = 32_768

TOOL_TOKEN = "<|tool|>"
FINAL_TOKEN = "<|final|>"
REASONING_TOKEN = "<|reasoning|>"


class PolicyError(RuntimeError):
    """The backend could not produce an event (unreachable, exhausted, ...)."""


class BudgetExhausted(PolicyError):
    pass


class ReplayDivergence(PolicyError):
    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Message:
    role: str
    content: str = ""
    tool_call: ToolCall | None = None
    tool_result_for: str | None = None

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.tool_call is not None and self.role != "assistant":
            raise ValueError("only assistant messages carry tool calls")
        if self.tool_result_for is not None and self.role != "tool":
            raise ValueError("only tool messages reference a call id")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_call is not None:
            d["tool_call"] = self.tool_call.to_dict()
        if self.tool_result_for is not None:
            d["tool_result_for"] = self.tool_result_for
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        tc = d.get("tool_call")
        return cls(d["role"], d.get("content", ""), ToolCall.from_dict(tc) if tc else None, d.get("tool_result_for"))


@dataclass(frozen=True)
class ReasoningText:
    text: str


@dataclass(frozen=True)
class ToolCallRequest:
    call: ToolCall


@dataclass(frozen=True)
class MalformedToolCall:
    """A tool call the policy tried to make but whose body could not be parsed."""
    call_id: str
    tool: str
    raw: str
    error: str


@dataclass(frozen=True)
class FinalAnswer:
    raw_text: str


PolicyEvent = Union[ReasoningText, ToolCallRequest, MalformedToolCall, FinalAnswer]


def event_to_dict(ev: PolicyEvent) -> dict:
    if isinstance(ev, ReasoningText):
        return {"type": "reasoning", "text": ev.text}
    if isinstance(ev, ToolCallRequest):
        return {"type": "tool_call", "call": ev.call.to_dict()}
    if isinstance(ev, MalformedToolCall):
        return {"type": "malformed", "call_id": ev.call_id, "tool": ev.tool, "raw": ev.raw, "error": ev.error}
    if isinstance(ev, FinalAnswer):
        return {"type": "final", "raw_text": ev.raw_text}
    raise TypeError(f"not a policy event: {ev!r}")


def event_from_dict(d: dict) -> PolicyEvent:
    kind = d["type"]
    if kind == "reasoning":
        return ReasoningText(d["text"])
    if kind == "tool_call":
        return ToolCallRequest(ToolCall.from_dict(d["call"]))
    if kind == "malformed":
        return MalformedToolCall(d["call_id"], d["tool"], d["raw"], d["error"])
    if kind == "final":
        return FinalAnswer(d["raw_text"])
    raise ValueError(f"unknown event type {kind!r}")


def estimate_tokens(text: str) -> int:
    """Rough token count (4 characters per token), never below 1."""
    return max(1, len(text) // 4)


def event_cost(ev: PolicyEvent) -> int:
    if isinstance(ev, ReasoningText):
        return estimate_tokens(ev.text)
    if isinstance(ev, ToolCallRequest):
        return estimate_tokens(json.dumps(ev.call.arguments) + ev.call.tool)
    if isinstance(ev, MalformedToolCall):
        return estimate_tokens(ev.raw)
    return estimate_tokens(ev.raw_text)


class PolicySession(Protocol):
    def next_event(self, history: Sequence[Message], available_tools: Sequence[ToolName],
                   budget: int) -> PolicyEvent: ...


class PolicyBackend(Protocol):
    def open_session(self) -> PolicySession: ...


# -- scripted ---------------------------------------------------------------

Step = Union[PolicyEvent, Callable[[Sequence[Message]], PolicyEvent]]


class ScriptedPolicy:
    """Replays programmed steps; a step may be an event or ``f(history) -> event``.

    ``script`` is either one list of steps shared by every session, a list of
    per-session lists (``per_session=True``), or a callable
    ``f(session_index) -> iterable of steps``.
    """

    def __init__(self, script: Sequence[Step] | Sequence[Sequence[Step]] | Callable[[int], Iterable[Step]],
                 *, per_session: bool = False):
        self._script = script
        self._per_session = per_session
        self._count = 0
        self._lock = threading.Lock()

    def open_session(self) -> "ScriptedSession":
        with self._lock:
            idx = self._count
            self._count += 1
        if callable(self._script):
            steps = self._script(idx)
        elif self._per_session:
            steps = self._script[idx % len(self._script)]
        else:
            steps = self._script
        return ScriptedSession(iter(steps))


class ScriptedSession:
    def __init__(self, steps: Iterator[Step]):
        self._steps = steps

    def next_event(self, history, available_tools, budget) -> PolicyEvent:
        if budget <= 0:
            raise BudgetExhausted("token budget exhausted")
        try:
            step = next(self._steps)
        except StopIteration:
            raise PolicyError("scripted policy has no more steps") from None
        return step(history) if callable(step) else step


# -- record / replay --------------------------------------------------------

class RecordingPolicy:
    """Wraps a backend and appends every event it produces to a JSONL transcript."""

    def __init__(self, backend: PolicyBackend, path: str | Path):
        self.backend = backend
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self._lock = threading.Lock()
        self._count = 0

    def open_session(self) -> "RecordingSession":
        with self._lock:
            idx = self._count
            self._count += 1
            inner = self.backend.open_session()
        return RecordingSession(self, idx, inner)

    def _write(self, line: dict):
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


class RecordingSession:
    def __init__(self, owner: RecordingPolicy, index: int, inner: PolicySession):
        self._owner = owner
        self._index = index
        self._inner = inner
        self._step = 0
        self._seen = 0

    def next_event(self, history, available_tools, budget) -> PolicyEvent:
        line = {
            "session": self._index,
            "step": self._step,
            "history_len": len(history),
            "new_messages": [m.to_dict() for m in history[self._seen :]],
        }
        self._step += 1
        self._seen = len(history)
        try:
            ev = self._inner.next_event(history, available_tools, budget)
        except PolicyError as exc:
            line["error"] = {"type": type(exc).__name__, "message": str(exc)}
            self._owner._write(line)
            raise
        line["event"] = event_to_dict(ev)
        self._owner._write(line)
        return ev


class ReplayPolicy:
    """Backend that re-emits a recorded transcript.

    Sessions are handed out in recording order.  Before each event the live
    history is compared with the recorded one; with ``strict`` a mismatch
    raises :class:`ReplayDivergence` naming the first differing message.
    """

    def __init__(self, path: str | Path, *, strict: bool = True):
        self.path = Path(path)
        self.strict = strict
        self._sessions: dict[int, list[dict]] = {}
        with open(self.path) as fh:
            for raw in fh:
                if raw.strip():
                    line = json.loads(raw)
                    self._sessions.setdefault(int(line["session"]), []).append(line)
        for lines in self._sessions.values():
            lines.sort(key=lambda l: l["step"])
        self._count = 0
        self._lock = threading.Lock()

    def open_session(self) -> "ReplaySession":
        with self._lock:
            idx = self._count
            self._count += 1
        return ReplaySession(self._sessions.get(idx, []), self.strict)


class ReplaySession:
    def __init__(self, lines: list[dict], strict: bool):
        self._lines = lines
        self._strict = strict
        self._pos = 0
        self._recorded: list[dict] = []

    def next_event(self, history, available_tools, budget) -> PolicyEvent:
        if self._pos >= len(self._lines):
            raise PolicyError("transcript exhausted" if self._lines else "transcript is empty")
        line = self._lines[self._pos]
        self._pos += 1
        self._recorded.extend(line["new_messages"])
        if self._strict:
            live = [m.to_dict() for m in history]
            for i in range(max(len(live), len(self._recorded))):
                a = live[i] if i < len(live) else None
                b = self._recorded[i] if i < len(self._recorded) else None
                if a != b:
                    raise ReplayDivergence(f"history diverges from transcript at message index {i}", i)
        if "error" in line:
            cls = BudgetExhausted if line["error"]["type"] == "BudgetExhausted" else PolicyError
            raise cls(line["error"]["message"])
        return event_from_dict(line["event"])


# -- remote chat-completions endpoint --------------------------------------

class RemotePolicy:
    """Chat-completions style HTTP endpoint with function calling.

    Tool calls are read from the response's ``tool_calls`` field, or from
    ``<|tool|>{"name": ..., "arguments": {...}}`` spans in the text.  A
    ``<|final|>`` span, or a bare JSON object with ``final_code``, is the
    final answer.  Anything else is reasoning.
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None, *,
                 temperature: float = 0.7, max_tokens: int = 4096, stream: bool = False,
                 timeout_s: float = 600.0, transport: httpx.BaseTransport | None = None):
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.stream = stream
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                    timeout=timeout_s, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "RemotePolicy":
        endpoint = os.environ.get("OPTR1_ENDPOINT")
        if not endpoint:
            raise PolicyError("OPTR1_ENDPOINT is not set")
        return cls(endpoint, os.environ.get("OPTR1_MODEL", "default"), os.environ.get("OPTR1_API_KEY"), **kwargs)

    def open_session(self) -> "RemoteSession":
        return RemoteSession(self)

    def complete(self, messages: list[dict], tools: list[dict], max_tokens: int) -> dict:
        """POST one completion request; returns ``{"content": str, "tool_calls": [...]}``."""
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": max_tokens,
        }
        if tools:
            body["tools"] = tools
        try:
            if self.stream:
                body["stream"] = True
                with self._client.stream("POST", "/chat/completions", json=body) as resp:
                    _raise_for_status(resp)
                    return accumulate_stream(resp.iter_lines())
            resp = self._client.post("/chat/completions", json=body)
            _raise_for_status(resp)
            msg = resp.json()["choices"][0]["message"]
        except httpx.HTTPError as exc:
            raise PolicyError(f"endpoint unreachable: {exc}") from exc
        except (KeyError, IndexError, ValueError) as exc:
            raise PolicyError(f"unexpected endpoint response: {exc}") from exc
        return {"content": msg.get("content") or "", "tool_calls": msg.get("tool_calls") or []}


def _raise_for_status(resp: httpx.Response):
    if resp.status_code >= 400:
        resp.read()
        raise PolicyError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:500]}")


def accumulate_stream(lines: Iterable[str]) -> dict:
    """Fold server-sent ``data:`` chunks into one message."""
    content: list[str] = []
    calls: dict[int, dict] = {}
    for line in lines:
        line = line.strip()
        if not line.startswith("data:"):
            continue
        data = line[5:].strip()
        if data == "[DONE]":
            break
        chunk = json.loads(data)
        for choice in chunk.get("choices", []):
            delta = choice.get("delta") or {}
            if delta.get("content"):
                content.append(delta["content"])
            for tc in delta.get("tool_calls") or []:
                slot = calls.setdefault(tc.get("index", 0), {"id": None, "function": {"name": "", "arguments": ""}})
                if tc.get("id"):
                    slot["id"] = tc["id"]
                fn = tc.get("function") or {}
                slot["function"]["name"] += fn.get("name") or ""
                slot["function"]["arguments"] += fn.get("arguments") or ""
    return {"content": "".join(content), "tool_calls": [calls[i] for i in sorted(calls)]}


def history_to_chat(history: Sequence[Message]) -> list[dict]:
    out = []
    for m in history:
        if m.role == "assistant" and m.tool_call is not None:
            out.append({
                "role": "assistant",
                "content": m.content or None,
                "tool_calls": [{
                    "id": m.tool_call.call_id,
                    "type": "function",
                    "function": {"name": m.tool_call.tool, "arguments": json.dumps(m.tool_call.arguments)},
                }],
            })
        elif m.role == "tool":
            out.append({"role": "tool", "tool_call_id": m.tool_result_for, "content": m.content})
        else:
            out.append({"role": m.role, "content": m.content})
    return out


_MARKER_RE = re.compile(re.escape(TOOL_TOKEN) + "|" + re.escape(FINAL_TOKEN))


def parse_completion(content: str, tool_calls: Sequence[dict], next_id: Callable[[], str]) -> list[PolicyEvent]:
    """Split one completion into events, in the order they appear."""
    events: list[PolicyEvent] = []
    content = content.replace(REASONING_TOKEN, "")
    pieces = _MARKER_RE.split(content)
    markers = _MARKER_RE.findall(content)
    lead = pieces[0]
    if not markers and not tool_calls and _looks_final(lead):
        return [FinalAnswer(lead.strip())]
    if lead.strip():
        events.append(ReasoningText(lead.strip()))
    for marker, body in zip(markers, pieces[1:]):
        if marker == FINAL_TOKEN:
            events.append(FinalAnswer(body.strip()))
            return events
        events.extend(_parse_inline_call(body, next_id()))
    for tc in tool_calls:
        fn = tc.get("function") or {}
        call_id = tc.get("id") or next_id()
        name = fn.get("name") or ""
        raw = fn.get("arguments") or "{}"
        try:
            args = json.loads(raw) if isinstance(raw, str) else raw
            if not isinstance(args, dict):
                raise ValueError("arguments are not a JSON object")
        except ValueError as exc:
            events.append(MalformedToolCall(call_id, name, str(raw), str(exc)))
            continue
        events.append(ToolCallRequest(ToolCall(call_id, name, args)))
    return events


def _looks_final(text: str) -> bool:
    try:
        doc = json.loads(text.strip())
    except ValueError:
        return False
    return isinstance(doc, dict) and "final_code" in doc


def _parse_inline_call(body: str, call_id: str) -> list[PolicyEvent]:
    text = body.lstrip()
    try:
        doc, end = json.JSONDecoder().raw_decode(text)
        if not isinstance(doc, dict):
            raise ValueError("tool call body is not a JSON object")
        name = doc.get("name", doc.get("tool"))
        args = doc.get("arguments", {})
        if not isinstance(name, str) or not isinstance(args, dict):
            raise ValueError("tool call needs a string name and object arguments")
    except ValueError as exc:
        return [MalformedToolCall(call_id, "", body.strip(), str(exc))]
    events: list[PolicyEvent] = [ToolCallRequest(ToolCall(str(doc.get("id") or call_id), name, args))]
    rest = text[end:].strip()
    if rest:
        events.append(ReasoningText(rest))
    return events


class RemoteSession:
    def __init__(self, backend: RemotePolicy):
        self._backend = backend
        self._pending: deque[PolicyEvent] = deque()
        self._n = 0

    def _next_id(self) -> str:
        self._n += 1
        return f"call-{self._n}"

    def next_event(self, history, available_tools, budget) -> PolicyEvent:
        if budget <= 0:
            raise BudgetExhausted("token budget exhausted")
        if not self._pending:
            msg = self._backend.complete(history_to_chat(history), tool_function_schemas(available_tools),
                                         min(self._backend.max_tokens, budget))
            events = parse_completion(msg["content"], msg["tool_calls"], self._next_id)
            if not events:
                raise PolicyError("endpoint returned an empty completion")
            self._pending.extend(events)
        return self._pending.popleft()
