"""One GRPO group: K rollouts of the same prompt, scored and normalized.

Four scripted "model samples" of varying quality show how the reward
separates them and how group-relative advantages come out.  The batch file
at the end is what an external trainer consumes.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from optr1 import Executor, FinalAnswer, ReasoningText, ScriptedPolicy, ToolCall, ToolCallRequest
from optr1.mock import BROKEN_BODY, FAST_BODY, WRONG_BODY, delay_body, write_mock_repo
from optr1.rollout import export_training_batch, run_rollout_group, store_group

work = Path(tempfile.mkdtemp(prefix="optr1-grpo-"))

# Synthetic timing: reported time is 1 ms plus the delay, so this demo is
# deterministic.  Baseline is 21 ms.
task = write_mock_repo(work / "app", delay_ms=20).with_baseline(21.0)


def answer(code):
    return FinalAnswer(json.dumps({"final_code": code, "explanation": "see trace"}))


def look(cid):
    return ToolCallRequest(ToolCall(cid, "file_viewer", {"file": "kernel.c"}))


samples = [
    # explores, then removes the delay entirely
    [ReasoningText("Read the file first."), look("a"), answer(FAST_BODY)],
    # halves the delay without looking around
    [answer(delay_body(10))],
    # introduces a bug
    [ReasoningText("Tripling is surely faster?"), answer(WRONG_BODY)],
    # does not even compile
    [answer(BROKEN_BODY)],
]

with Executor(workers=2) as executor:
    group = run_rollout_group(task, k=4, policy=ScriptedPolicy(samples, per_session=True),
                              executor=executor, seed=7)

print("group", group.group_id, "tools", [t.value for t in group.tool_subset])
print(f"{'rollout':>8} {'time':>8} {'perf':>8} {'tools':>8} {'total':>8} {'advantage':>10}")
for i, (o, r, a) in enumerate(zip(group.outcomes, group.rewards, group.advantages.advantages)):
    t = "-" if o.time_ms is None or not o.correct else f"{o.time_ms:.1f}"
    print(f"{i:>8} {t:>8} {r.perf:>8.3f} {r.tools:>8.3f} {r.total:>8.3f} {a:>10.4f}")

# Only the first sample called a tool that was available: if file_viewer
# was not in this group's subset its tool reward is zero as well.

store_group(group, work / "traces")
batch = export_training_batch([group], work / "batch.jsonl", config={"seed": 7, "k": 4})
print("batch written to", batch)
print(batch.read_text().splitlines()[0])
