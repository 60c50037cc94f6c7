"""Record a model session, then replay it offline.

Replays re-run every tool call for real and check that the conversation
matches the recording message by message.  With the deterministic mock
timing, the replayed trace is byte-identical.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from optr1 import Executor, FinalAnswer, ScriptedPolicy, ToolCall, ToolCallRequest, run_rollout
from optr1.mock import delay_body, write_mock_repo
from optr1.policy import RecordingPolicy, ReplayPolicy
from optr1.trace import serialize

work = Path(tempfile.mkdtemp(prefix="optr1-replay-"))
task = write_mock_repo(work / "app", delay_ms=20).with_baseline(21.0)
tools = list(task.tool_catalog)
code = delay_body(3)
script = [
    ToolCallRequest(ToolCall("c1", "search", {"pattern": "delay("})),
    ToolCallRequest(ToolCall("c2", "benchmark_code", {"replacement": code})),
    FinalAnswer(json.dumps({"final_code": code, "explanation": "shorter delay"})),
]

transcript = work / "session.jsonl"
with Executor(workers=2) as executor:
    recorded, _ = run_rollout(task, tools, RecordingPolicy(ScriptedPolicy(script), transcript), executor)
    replayed, _ = run_rollout(task, tools, ReplayPolicy(transcript), executor)
    print("transcript lines:", len(transcript.read_text().splitlines()))
    print("replay identical:", serialize(recorded) == serialize(replayed))

    # Change the repository and the search result differs, so the replay stops
    # with a backend error instead of feeding the model a history it never saw.
    (task.repo_root / "NOTES").write_text("delay( is mentioned here too\n")
    out, _ = run_rollout(task, tools, ReplayPolicy(transcript), executor)
    print("after editing the repo the replay ends with:", out.terminated_reason)
