"""Optimize one kernel end to end on the mock toolchain.

A scripted policy stands in for the language model: it tries an edit that
does not compile, reads the build log, fixes it, and answers.  Run with
``python demos/01_optimize_mock_kernel.py``.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from optr1 import Executor, FinalAnswer, ReasoningText, ScriptedPolicy, ToolCall, ToolCallRequest, run_rollout
from optr1.mock import BROKEN_BODY, delay_body, write_mock_repo
from optr1.problem import measure_baseline, sample_tool_subset
from optr1.reward import total_reward
from optr1.trace import serialize, write_trace

work = Path(tempfile.mkdtemp(prefix="optr1-demo-"))

# The mock application sleeps 20 ms inside its region of interest.  Real
# timing here (synthetic=False), so the numbers below are measured.
task = write_mock_repo(work / "app", delay_ms=20, synthetic=False)
print("region of interest:", task.roi.file_path, f"lines {task.roi.line_start}-{task.roi.line_end}")
print(task.roi.original_text)

executor = Executor(workers=2)

# The baseline is the median of five runs of the unmodified program.
task = task.with_baseline(measure_baseline(task, 5, executor=executor))
print(f"baseline: {task.baseline_time_ms:.3f} ms")

# Each rollout sees a random 4-6 tool subset; benchmark_code is always in it.
tools = sample_tool_subset(task.tool_catalog, rng_seed=1)
print("tools this session:", [t.value for t in tools])

fixed = delay_body(2)
policy = ScriptedPolicy([
    ReasoningText("The delay call is not part of the computation; shrink it."),
    ToolCallRequest(ToolCall("c1", "benchmark_code", {"replacement": BROKEN_BODY})),
    ReasoningText("The build failed: a semicolon is missing. Fix and retry."),
    ToolCallRequest(ToolCall("c2", "benchmark_code", {"replacement": fixed})),
    FinalAnswer(json.dumps({"final_code": fixed, "explanation": "Cut the artificial delay from 20 ms to 2 ms."})),
])

result = run_rollout(task, tools, policy, executor)
trace, outcome = result

# The trace in marker form is what a distillation target looks like.
print()
print(serialize(trace))

# The final code is re-benchmarked on a fresh workspace and scored.
reward = total_reward(trace, outcome, task.baseline_time_ms)
print(f"final: compiled={outcome.compiled} correct={outcome.correct} time={outcome.time_ms:.3f} ms")
print(f"speedup {task.baseline_time_ms / outcome.time_ms:.2f}x")
print(f"reward = perf {reward.perf:.4f} + tools {reward.tools:.4f} = {reward.total:.4f}")

path = write_trace(work / "traces", trace, "demo-r0", {"outcome": outcome.to_dict(),
                                                       "baseline_ms": task.baseline_time_ms})
print("trace written to", path)
executor.shutdown()
