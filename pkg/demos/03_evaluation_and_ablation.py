"""Evaluate a small suite, then ablate each tool in turn.

Trials that do not compile, are wrong, or give no parsable answer score a
speedup of 0.  Reports go to CSV and JSON.
"""

from __future__ import annotations

import itertools
import json
import tempfile
from pathlib import Path

from optr1 import Executor, FinalAnswer, ScriptedPolicy
from optr1.evaluation import EvalConfig, TimingComparison, export_report, run_ablation, run_suite
from optr1.mock import BROKEN_BODY, FAST_BODY, delay_body, write_mock_repo

work = Path(tempfile.mkdtemp(prefix="optr1-eval-"))
tasks = [
    write_mock_repo(work / "stream", delay_ms=20, task_id="stream-triad", category="stream"),
    write_mock_repo(work / "basic", delay_ms=8, task_id="basic-daxpy", category="basic"),
]

answers = itertools.cycle([FAST_BODY, delay_body(4), BROKEN_BODY, None, delay_body(1)])


def one_trial(_session):
    code = next(answers)
    if code is None:
        return [FinalAnswer("I improved it, trust me.")]
    return [FinalAnswer(json.dumps({"final_code": code, "explanation": "shorter delay"}))]


policy = ScriptedPolicy(one_trial)

with Executor(workers=2) as executor:
    full = run_suite(tasks, policy, executor, EvalConfig(trials=5, baseline_trials=3))
    ablation = run_ablation(tasks, policy, executor, EvalConfig(trials=5, baseline_trials=3))

for k in full.kernels:
    print(k.kernel_id, "trial speedups:", [round(s, 2) for s in k.trial_speedups], "best", round(k.best_speedup, 2))

summary, notes = full.category_summary()
for cat, s in summary.items():
    print(f"{cat}: median per-trial speedup {s['per_trial']['median']:.2f}, failures {s['failures']}")

# This scripted policy ignores tools, so removing one changes nothing; a real
# model shows which tools it leans on.
for name, rep in ablation.items():
    best = [round(k.best_speedup, 2) for k in rep.kernels]
    print(f"{name:>22}: tools={len(rep.tools_available)} best={best}")

# Before/after comparisons use the same arithmetic as a results table.
full.comparisons = [TimingComparison("0.881 -> 0.75", 0.881, 0.75), TimingComparison("4.295 -> 4.165", 4.295, 4.165)]
for c in full.comparisons:
    print(f"{c.label}: speedup {c.speedup:.4f}, +{c.improvement_pct:.2f}%, time -{c.time_reduction_pct:.2f}%")

paths = export_report({"full": full, **ablation}, work / "reports")
print("reports:", *paths)
