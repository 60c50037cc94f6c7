from __future__ import annotations

import json

import pytest

from helpers import call, final, think
from optr1.mock import BROKEN_BODY, FAST_BODY, WRONG_BODY, delay_body
from optr1.policy import FinalAnswer, MalformedToolCall, RecordingPolicy, ReplayPolicy, ScriptedPolicy
from optr1.reward import perf_reward, tool_reward
from optr1.rollout import (
    DistillInput,
    build_messages,
    distill_filter,
    distill_store,
    export_sft,
    export_training_batch,
    read_training_batch,
    run_rollout,
    run_rollout_group,
    store_group,
)
from optr1.tools import ALL_TOOLS, BenchmarkOutcome, ToolCall, ToolName
from optr1.trace import Final, FinalSolution, Result, Tool, Trace, parse, serialize

TOOLS = list(ALL_TOOLS)


def test_prompt_carries_task_inputs(baseline_task):
    msgs = build_messages(baseline_task, [ToolName.benchmark_code, ToolName.search])
    system, user = msgs[0].content, msgs[1].content
    assert "### benchmark_code" in system and "### search" in system and "### list_dir" not in system
    assert "final_code" in system
    assert "21 ms" in user and baseline_task.roi.original_text in user and "kernel.c, lines" in user


def test_failure_then_recovery(baseline_task, executor):
    policy = ScriptedPolicy([
        think("the delay looks removable"),
        call("benchmark_code", "c1", replacement=BROKEN_BODY),
        think("build error, missing semicolon"),
        call("benchmark_code", "c2", replacement=FAST_BODY),
        final(FAST_BODY),
    ])
    res = run_rollout(baseline_task, TOOLS, policy, executor)
    t = res.trace
    assert t.terminated_reason == "final"
    results = [s.result for s in t.segments if isinstance(s, Result)]
    assert not results[0].payload["compiled"] and results[1].payload["correct"]
    assert res.outcome.correct and res.outcome.time_ms == 1.0
    assert tool_reward(t) == 0.5 / 6 and perf_reward(res.outcome, 21.0) == 10.0


def test_malformed_and_unavailable_calls_are_observed(baseline_task, executor):
    policy = ScriptedPolicy([
        MalformedToolCall("m1", "search", "{pattern:", "bad json"),
        call("list_dir", "c1"),
        call("search", "c1", pattern="delay"),
        final(delay_body(5)),
    ])
    res = run_rollout(baseline_task, [ToolName.benchmark_code, ToolName.search], policy, executor)
    results = [s.result for s in res.trace.segments if isinstance(s, Result)]
    assert [r.error_kind for r in results] == ["schema", "tool_unavailable", None]
    ids = [s.call.call_id for s in res.trace.segments if isinstance(s, Tool)]
    assert len(set(ids)) == 3
    assert res.outcome.time_ms == 6.0


def test_invalid_final_and_backend_errors(baseline_task, executor):
    res = run_rollout(baseline_task, TOOLS, ScriptedPolicy([FinalAnswer("it is faster now")]), executor)
    assert res.trace.terminated_reason == "invalid_final" and res.trace.final is None
    assert not res.outcome.compiled and perf_reward(res.outcome, 21.0) == -2.0
    res = run_rollout(baseline_task, TOOLS, ScriptedPolicy([think("x")]), executor)
    assert res.trace.terminated_reason == "backend_error"


def test_budget_is_enforced(baseline_task, executor):
    policy = ScriptedPolicy(lambda i: iter(lambda: think("x" * 400), None))
    res = run_rollout(baseline_task, TOOLS, policy, executor, budget=1000)
    assert res.trace.terminated_reason == "budget_exhausted"
    assert len(res.trace.segments) == 10


def test_wrong_final_scores_incorrect(baseline_task, executor):
    res = run_rollout(baseline_task, TOOLS, ScriptedPolicy([final(WRONG_BODY)]), executor)
    assert res.outcome.compiled and not res.outcome.correct


def _group_script(i):
    bodies = [FAST_BODY, delay_body(5), BROKEN_BODY, delay_body(30)]
    return [think(f"rollout {i}"), call("benchmark_code", "b", replacement=bodies[i % 4]), final(bodies[i % 4])]


def test_group_rewards_advantages_and_batch(baseline_task, executor, tmp_path):
    g = run_rollout_group(baseline_task, 4, ScriptedPolicy(_group_script), executor, seed=3)
    assert g.group_id == "mock-scale-s3" and len(g.traces) == 4
    assert 4 <= len(g.tool_subset) <= 6
    tools = 0.5 / len(g.tool_subset)
    assert [r.perf for r in g.rewards] == [10.0, 2.5, -2.0, -1.0]
    assert [r.total for r in g.rewards] == [10.0 + tools, 2.5 + tools, -2.0 + tools, -1.0 + tools]
    assert max(g.advantages.advantages) == g.advantages.advantages[0]
    assert abs(sum(g.advantages.advantages)) < 1e-12
    paths = store_group(g, tmp_path / "traces")
    assert len(paths) == 4
    batch = export_training_batch([g], tmp_path / "batch.jsonl", config={"seed": 3})
    header, records = read_training_batch(batch)
    assert header["n_records"] == 4 and header["config"] == {"seed": 3}
    assert parse(records[0].completion) == g.traces[0]
    assert records[2].advantage == g.advantages.advantages[2]
    sft = distill_store(tmp_path / "traces")
    assert sorted(r.speedup for r in sft) == [3.5, 21.0]


def test_group_requires_baseline(mock_task, executor):
    with pytest.raises(ValueError):
        run_rollout_group(mock_task, 2, ScriptedPolicy(_group_script), executor)


def test_recorded_group_replays_identically(baseline_task, executor, tmp_path):
    path = tmp_path / "rec.jsonl"
    g1 = run_rollout_group(baseline_task, 3, RecordingPolicy(ScriptedPolicy(_group_script), path), executor, seed=1)
    g2 = run_rollout_group(baseline_task, 3, ReplayPolicy(path), executor, seed=1)
    assert [serialize(t) for t in g1.traces] == [serialize(t) for t in g2.traces]
    assert g1.advantages == g2.advantages


def _labelled(perf, compiled=True, correct=True, final_present=True):
    t = Trace("k", ("benchmark_code",))
    t.append(Tool(ToolCall("c1", "benchmark_code", {"replacement": "x"})))
    if final_present:
        t.append(Final(FinalSolution("x", "y")))
    time_ms = None if perf is None else 10.0 / perf
    o = BenchmarkOutcome(compiled, correct and compiled, time_ms if compiled else None)
    return DistillInput(t, o, 10.0, "prompt")


def test_distill_filter(tmp_path):
    items = [_labelled(2.0), _labelled(1.0), _labelled(0.5), _labelled(3.0, correct=False),
             _labelled(None, compiled=False), _labelled(4.0, final_present=False)]
    out = distill_filter(items)
    assert [r.speedup for r in out] == [2.0]
    assert "<|tool|>" in out[0].target and "benchmark_code" in out[0].target
    p = export_sft(out, tmp_path / "sft.jsonl")
    assert json.loads(p.read_text())["prompt"] == "prompt"
