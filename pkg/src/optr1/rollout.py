"""Rollout loop, GRPO groups, and the data handed to external trainers."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .executor import Executor
from .policy import (
    DEFAULT_TOKEN_BUDGET,
    BudgetExhausted,
    FinalAnswer,
    MalformedToolCall,
    Message,
    PolicyError,
    ReasoningText,
    ToolCallRequest,
    estimate_tokens,
    event_cost,
)
from .problem import OptimizationTask, sample_tool_subset
from .reward import GroupAdvantages, RewardBreakdown, group_advantages, total_reward
from .tools import BenchmarkOutcome, ToolCall, ToolName, ToolResult, benchmark_code, dispatch, render_tool_catalog
from .trace import Final, FinalValidationError, Reasoning, Result, Tool, Trace, serialize, validate_final, write_trace

log = logging.getLogger(__name__)

DEFAULT_GROUP_SIZE = 12
BATCH_SCHEMA_VERSION = 1

OUTPUT_INSTRUCTIONS = (
    "When you are done, answer with a JSON object and nothing else: "
    '{"final_code": "<complete replacement for the region of interest>", '
    '"explanation": "<what the kernel does, what you changed, and why it is faster>"}. '
    "The final_code replaces exactly the region of interest, verbatim (end it with a newline); "
    "nothing outside it may change."
)


def build_messages(task: OptimizationTask, tool_subset: Sequence[ToolName]) -> list[Message]:
    """System and user messages carrying the task inputs."""
    system = task.system_instruction
    if tool_subset:
        system += "\n\nAvailable tools:\n\n" + render_tool_catalog(tool_subset)
    system += "\n\n" + OUTPUT_INSTRUCTIONS
    baseline = "unknown" if task.baseline_time_ms is None else f"{task.baseline_time_ms:.6g} ms"
    user = (
        f"Repository: {task.repo_root.name}\n"
        f"Region of interest: {task.roi.file_path}, lines {task.roi.line_start}-{task.roi.line_end}\n"
        f"Baseline execution time: {baseline}\n\n"
        f"Region of interest text:\n```\n{task.roi.original_text}```\n"
    )
    return [Message("system", system), Message("user", user)]


def prompt_text(messages: Sequence[Message]) -> str:
    return "\n\n".join(m.content for m in messages if m.role in ("system", "user"))


def _result_message(result: ToolResult) -> str:
    return json.dumps(result.to_dict(with_duration=False), sort_keys=True)


@dataclass
class RolloutResult:
    trace: Trace
    outcome: BenchmarkOutcome
    prompt: str

    def __iter__(self):
        return iter((self.trace, self.outcome))


def run_rollout(task: OptimizationTask, tool_subset: Sequence[ToolName], policy, executor: Executor,
                budget: int = DEFAULT_TOKEN_BUDGET, *, rollout_id: str = "r0", max_events: int | None = None,
                on_event: Callable[[str, object, float], None] | None = None) -> RolloutResult:
    """Run one reasoning session and benchmark its final code on a fresh workspace.

    ``policy`` is a backend (a session is opened) or an already-open session.
    Nothing is raised for policy or tool failures; they end up in the trace
    and in an incorrect outcome.  The loop charges every event (and every
    tool result fed back) against ``budget``, so it always terminates.
    """
    session = policy.open_session() if hasattr(policy, "open_session") else policy
    tool_subset = list(tool_subset)
    history = build_messages(task, tool_subset)
    prompt = prompt_text(history)
    trace = Trace(task.task_id, tuple(tool_subset))
    seen_ids: set[str] = set()
    budget_left = budget
    n_events = 0
    reason = "budget_exhausted"

    def note(ev):
        if on_event is not None:
            on_event(rollout_id, ev, time.perf_counter())

    def fresh_id(proposed: str) -> str:
        cid = proposed if proposed and proposed not in seen_ids else f"{rollout_id}-call{len(seen_ids) + 1}"
        while cid in seen_ids:
            cid += "x"
        seen_ids.add(cid)
        return cid

    while budget_left > 0 and (max_events is None or n_events < max_events):
        try:
            ev = session.next_event(history, tool_subset, budget_left)
        except BudgetExhausted:
            reason = "budget_exhausted"
            break
        except PolicyError as exc:
            log.warning("rollout %s: backend error: %s", rollout_id, exc)
            reason = "backend_error"
            break
        except Exception:  # noqa: BLE001 - a faulty backend must not take down the group
            log.exception("rollout %s: backend raised", rollout_id)
            reason = "backend_error"
            break
        n_events += 1
        budget_left -= event_cost(ev)
        note(ev)

        if isinstance(ev, ReasoningText):
            trace.append(Reasoning(ev.text))
            history.append(Message("assistant", ev.text))
        elif isinstance(ev, (ToolCallRequest, MalformedToolCall)):
            if isinstance(ev, ToolCallRequest):
                call = ToolCall(fresh_id(ev.call.call_id), ev.call.tool, ev.call.arguments)
                result = dispatch(call, task, tool_subset, executor)
            else:
                call = ToolCall(fresh_id(ev.call_id), ev.tool, {"_raw": ev.raw})
                result = ToolResult.error(call.call_id, "schema", f"could not parse tool call: {ev.error}")
            trace.append(Tool(call))
            trace.append(Result(result))
            content = _result_message(result)
            history.append(Message("assistant", "", tool_call=call))
            history.append(Message("tool", content, tool_result_for=call.call_id))
            budget_left -= estimate_tokens(content)
            note(result)
        elif isinstance(ev, FinalAnswer):
            try:
                trace.append(Final(validate_final(ev.raw_text)))
                reason = "final"
            except FinalValidationError as exc:
                log.info("rollout %s: invalid final answer: %s", rollout_id, exc)
                trace.append(Reasoning(ev.raw_text))
                reason = "invalid_final"
            break
        else:
            log.warning("rollout %s: ignoring unknown event %r", rollout_id, ev)
    trace.finish(reason)

    if trace.final is not None:
        outcome = benchmark_code(task, trace.final.final_code, executor=executor, key=f"{rollout_id}-final")
    else:
        outcome = BenchmarkOutcome.failed(f"no final solution ({reason})")
    return RolloutResult(trace, outcome, prompt)


@dataclass
class RolloutGroup:
    task_id: str
    group_id: str
    k: int
    seed: int
    tool_subset: tuple[ToolName, ...]
    prompt: str
    baseline_ms: float
    traces: list[Trace]
    outcomes: list[BenchmarkOutcome]
    rewards: list[RewardBreakdown]
    advantages: GroupAdvantages


def run_rollout_group(task: OptimizationTask, k: int = DEFAULT_GROUP_SIZE, policy=None, executor: Executor = None,
                      seed: int = 0, budget: int = DEFAULT_TOKEN_BUDGET, *,
                      tool_subset: Sequence[ToolName] | None = None,
                      on_event: Callable[[str, object, float], None] | None = None) -> RolloutGroup:
    """Sample one tool subset, run ``k`` rollouts concurrently, score and normalize them."""
    if k < 2:
        raise ValueError("a rollout group needs k >= 2")
    if task.baseline_time_ms is None:
        raise ValueError(f"task {task.task_id} has no baseline time; measure it first")
    subset = list(tool_subset) if tool_subset is not None else sample_tool_subset(task.tool_catalog, seed)
    group_id = f"{task.task_id}-s{seed}"
    # sessions are opened in rollout order so record/replay lines up
    sessions = [policy.open_session() for _ in range(k)]
    with ThreadPoolExecutor(max_workers=k, thread_name_prefix="optr1-rollout") as pool:
        futures = [
            pool.submit(run_rollout, task, subset, sessions[i], executor, budget,
                        rollout_id=f"{group_id}-r{i}", on_event=on_event)
            for i in range(k)
        ]
        results = [f.result() for f in futures]
    traces = [r.trace for r in results]
    outcomes = [r.outcome for r in results]
    rewards = [total_reward(t, o, task.baseline_time_ms) for t, o in zip(traces, outcomes)]
    return RolloutGroup(
        task_id=task.task_id, group_id=group_id, k=k, seed=seed, tool_subset=tuple(subset),
        prompt=results[0].prompt, baseline_ms=task.baseline_time_ms, traces=traces, outcomes=outcomes,
        rewards=rewards, advantages=group_advantages([r.total for r in rewards]),
    )


def store_group(group: RolloutGroup, store: str | Path) -> list[Path]:
    """Persist every trace of a group with an outcome sidecar for later distillation."""
    paths = []
    for i, (trace, outcome, reward) in enumerate(zip(group.traces, group.outcomes, group.rewards)):
        sidecar = {
            "prompt": group.prompt,
            "baseline_ms": group.baseline_ms,
            "outcome": outcome.to_dict(),
            "reward": reward.to_dict(),
            "advantage": group.advantages.advantages[i],
            "group_id": group.group_id,
            "seed": group.seed,
        }
        paths.append(write_trace(store, trace, f"{group.group_id}-r{i}", sidecar))
    return paths


# -- trainer handoff --------------------------------------------------------

@dataclass(frozen=True)
class TrainingRecord:
    group_id: str
    task_id: str
    prompt: str
    completion: str
    reward: float
    advantage: float
    reward_perf: float
    reward_tools: float

    def to_dict(self) -> dict:
        return {"kind": "record", **self.__dict__}


def training_records(group: RolloutGroup) -> list[TrainingRecord]:
    return [
        TrainingRecord(group.group_id, group.task_id, group.prompt, serialize(trace),
                       reward.total, adv, reward.perf, reward.tools)
        for trace, reward, adv in zip(group.traces, group.rewards, group.advantages.advantages)
    ]


def export_training_batch(groups: Iterable[RolloutGroup], path: str | Path, config: dict | None = None) -> Path:
    """JSONL: a versioned header line, then one record per rollout."""
    groups = list(groups)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [r for g in groups for r in training_records(g)]
    header = {
        "kind": "header",
        "schema_version": BATCH_SCHEMA_VERSION,
        "n_groups": len(groups),
        "n_records": len(records),
        "config": config or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_training_batch(path: str | Path) -> tuple[dict, list[TrainingRecord]]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(l) for l in fh if l.strip()]
    if not rows or rows[0].get("kind") != "header":
        raise ValueError(f"{path} has no batch header")
    if rows[0].get("schema_version") != BATCH_SCHEMA_VERSION:
        raise ValueError(f"unsupported batch schema {rows[0].get('schema_version')}")
    fields = TrainingRecord.__dataclass_fields__
    return rows[0], [TrainingRecord(**{k: r[k] for k in fields}) for r in rows[1:]]


# -- distillation -----------------------------------------------------------

@dataclass(frozen=True)
class SFTRecord:
    prompt: str
    target: str
    speedup: float

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "target": self.target, "speedup": self.speedup}


@dataclass(frozen=True)
class DistillInput:
    trace: Trace
    outcome: BenchmarkOutcome
    baseline_ms: float
    prompt: str = ""


def distill_filter(items: Iterable[DistillInput | tuple]) -> list[SFTRecord]:
    """Keep traces whose final code compiled, was correct, and beat the baseline (speedup > 1)."""
    out = []
    for item in items:
        if not isinstance(item, DistillInput):
            item = DistillInput(*item)
        o = item.outcome
        if item.trace.final is None or not (o.compiled and o.correct) or o.time_ms is None:
            continue
        s = item.baseline_ms / o.time_ms
        if s > 1.0:
            out.append(SFTRecord(item.prompt, serialize(item.trace), s))
    return out


def distill_store(store: str | Path) -> list[SFTRecord]:
    """Distill every trace in a trace store that has an outcome sidecar."""
    from .trace import iter_trace_store

    items = [
        DistillInput(trace, BenchmarkOutcome.from_dict(side["outcome"]), float(side["baseline_ms"]), side.get("prompt", ""))
        for trace, side, _ in iter_trace_store(store)
        if side is not None
    ]
    return distill_filter(items)


def export_sft(records: Iterable[SFTRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    return path
