"""Builders shared by the test modules."""

from __future__ import annotations

import json
import random
import string

from optr1.policy import FinalAnswer, ReasoningText, ToolCallRequest
from optr1.tools import ALL_TOOLS, ToolCall, ToolResult
from optr1.trace import TERMINATION_REASONS, Final, FinalSolution, Reasoning, Result, Tool, Trace


def final(code: str, explanation: str = "removed the artificial delay") -> FinalAnswer:
    return FinalAnswer(json.dumps({"final_code": code, "explanation": explanation}))


def call(tool: str, call_id: str, **arguments) -> ToolCallRequest:
    return ToolCallRequest(ToolCall(call_id, tool, arguments))


def think(text: str = "thinking") -> ReasoningText:
    return ReasoningText(text)


_ALPHABET = string.ascii_letters + string.digits + " \t{}[]\"\\<|>_-/.:;é漢\u2028"


def random_text(rng: random.Random, max_lines: int = 4) -> str:
    lines = []
    for _ in range(rng.randint(1, max_lines)):
        prefix = rng.choice(["", "", "", "<|", "\\", "<|tool|> ", "\\\\"])
        lines.append(prefix + "".join(rng.choice(_ALPHABET) for _ in range(rng.randint(0, 30))))
    return "\n".join(lines)


def random_json(rng: random.Random, depth: int = 0):
    kind = rng.randrange(7 if depth < 2 else 5)
    if kind == 0:
        return rng.randint(-10**6, 10**6)
    if kind == 1:
        return rng.uniform(-1e6, 1e6)
    if kind == 2:
        return random_text(rng, 2)
    if kind == 3:
        return rng.choice([True, False, None])
    if kind == 4:
        return rng.choice([0.5, -0.0, 1e-300, 3.91])
    if kind == 5:
        return [random_json(rng, depth + 1) for _ in range(rng.randint(0, 3))]
    return {random_text(rng, 1): random_json(rng, depth + 1) for _ in range(rng.randint(0, 3))}


def random_trace(rng: random.Random) -> Trace:
    """A valid trace: tools from any name, results right after their call, optional final last."""
    tools = rng.sample(ALL_TOOLS, rng.randint(0, len(ALL_TOOLS)))
    trace = Trace("task-" + str(rng.randrange(1000)), tuple(tools))
    for i in range(rng.randint(0, 12)):
        kind = rng.randrange(3)
        if kind == 0:
            trace.append(Reasoning(random_text(rng)))
        else:
            name = rng.choice([t.value for t in ALL_TOOLS] + ["not_a_tool", "<|x|>"])
            args = {random_text(rng, 1): random_json(rng) for _ in range(rng.randint(0, 3))}
            cid = f"c{i}-" + random_text(rng, 1)
            trace.append(Tool(ToolCall(cid, name, args)))
            if kind == 2 or rng.random() < 0.5:
                payload = {random_text(rng, 1): random_json(rng) for _ in range(rng.randint(0, 3))}
                trace.append(Result(ToolResult(cid, rng.random() < 0.7, payload)))
    has_final = rng.random() < 0.6
    if has_final:
        trace.append(Final(FinalSolution(random_text(rng), random_text(rng))))
    reasons = [r for r in TERMINATION_REASONS if has_final or r != "final"]
    if rng.random() < 0.9:
        trace.finish(rng.choice(reasons))
    return trace
