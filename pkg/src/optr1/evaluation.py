"""Repeated-trial evaluation, tool ablation and report export.

A trial whose final code is incorrect or does not build scores a speedup of 0.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .executor import Executor
from .policy import DEFAULT_TOKEN_BUDGET
from .problem import OptimizationTask, measure_baseline
from .rollout import run_rollout
from .tools import ALL_TOOLS, ToolName, parse_tool_names
from .trace import Trace, histogram_table, tool_use_histogram

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEFAULT_TRIALS = 5
CSV_COLUMNS = ["kernel_id", "category", "variant", "trial", "speedup", "correct", "compiled", "time_ms", "baseline_ms"]


def speedup(t_orig: float, t_opt: float) -> float:
    if not (t_orig > 0 and t_opt > 0):
        raise ValueError("times must be positive")
    return t_orig / t_opt


@dataclass(frozen=True)
class TimingComparison:
    """Before/after timing of one configuration, as in a results table."""
    label: str
    t_orig: float
    t_opt: float

    @property
    def speedup(self) -> float:
        return speedup(self.t_orig, self.t_opt)

    @property
    def improvement_pct(self) -> float:
        """Speedup expressed as a percentage gain, ``(t_orig / t_opt - 1) * 100``."""
        return (self.speedup - 1.0) * 100.0

    @property
    def time_reduction_pct(self) -> float:
        return (1.0 - self.t_opt / self.t_orig) * 100.0

    def to_dict(self) -> dict:
        return {"label": self.label, "t_orig": self.t_orig, "t_opt": self.t_opt, "speedup": self.speedup,
                "improvement_pct": self.improvement_pct, "time_reduction_pct": self.time_reduction_pct}


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    speedup: float
    compiled: bool
    correct: bool
    time_ms: float | None
    baseline_ms: float | None

    @property
    def failed(self) -> bool:
        return self.speedup == 0.0


@dataclass
class KernelResult:
    kernel_id: str
    category: str
    trials: list[TrialRecord]
    note: str = ""
    traces: list[Trace] = field(default_factory=list, repr=False, compare=False)

    @property
    def trial_speedups(self) -> list[float]:
        return [t.speedup for t in self.trials]

    @property
    def failures(self) -> int:
        return sum(t.failed for t in self.trials)

    @property
    def best_speedup(self) -> float:
        return max(self.trial_speedups, default=0.0)

    def to_dict(self) -> dict:
        d = {
            "kernel_id": self.kernel_id,
            "category": self.category,
            "trial_speedups": self.trial_speedups,
            "best_speedup": self.best_speedup,
            "failures": self.failures,
            "trials": [t.__dict__ for t in self.trials],
        }
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelResult":
        return cls(d["kernel_id"], d["category"], [TrialRecord(**t) for t in d["trials"]], d.get("note", ""))


@dataclass
class EvalConfig:
    trials: int = DEFAULT_TRIALS
    tools: tuple[ToolName, ...] | None = None  # None: each task's own catalog
    mode: str = "tools"                         # or "single_shot" (no tools, one answer)
    budget: int = DEFAULT_TOKEN_BUDGET
    baseline_trials: int = 5
    categories: tuple[str, ...] | None = None
    variant: str = "full"

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "tools": None if self.tools is None else [t.value for t in self.tools],
            "mode": self.mode,
            "budget": self.budget,
            "baseline_trials": self.baseline_trials,
            "categories": None if self.categories is None else list(self.categories),
            "variant": self.variant,
        }


def distribution(values: Sequence[float]) -> dict:
    """Plot-ready summary: min, quartiles, max, mean."""
    a = np.asarray(values, dtype=float)
    q = np.percentile(a, [0, 25, 50, 75, 100])
    return {"n": int(a.size), "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4]), "mean": float(a.mean())}


@dataclass
class EvalReport:
    variant: str
    kernels: list[KernelResult]
    tools_available: tuple[str, ...] | None = None
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    comparisons: list[TimingComparison] = field(default_factory=list)

    @property
    def traces(self) -> list[Trace]:
        return [t for k in self.kernels for t in k.traces]

    def category_summary(self, categories: Iterable[str] | None = None) -> tuple[dict, list[str]]:
        """Per-category speedup distributions over all trials and over per-kernel bests."""
        present = sorted({k.category for k in self.kernels})
        wanted = list(categories) if categories is not None else present
        summary, notes = {}, []
        for cat in wanted:
            ks = [k for k in self.kernels if k.category == cat]
            if not ks:
                notes.append(f"category {cat!r} has no kernels; omitted from aggregation")
                continue
            summary[cat] = {
                "kernels": len(ks),
                "per_trial": distribution([s for k in ks for s in k.trial_speedups]),
                "per_kernel_best": distribution([k.best_speedup for k in ks]),
                "failures": sum(k.failures for k in ks),
            }
        return summary, notes

    def to_dict(self) -> dict:
        cats = self.config.get("categories") if self.config else None
        summary, cat_notes = self.category_summary(cats)
        hist = tool_use_histogram(self.traces)
        return {
            "variant": self.variant,
            "tools_available": None if self.tools_available is None else list(self.tools_available),
            "config": self.config,
            "kernels": [k.to_dict() for k in self.kernels],
            "categories": summary,
            "tool_use": {"per_trace": hist, "table": {t: {str(n): c for n, c in row.items()}
                                                      for t, row in histogram_table(hist).items()}},
            "comparisons": [c.to_dict() for c in self.comparisons],
            "notes": self.notes,
            "category_notes": cat_notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        tools = d.get("tools_available")
        return cls(
            variant=d["variant"],
            kernels=[KernelResult.from_dict(k) for k in d["kernels"]],
            tools_available=None if tools is None else tuple(tools),
            config=d.get("config", {}),
            notes=list(d.get("notes", [])),
            comparisons=[TimingComparison(c["label"], c["t_orig"], c["t_opt"]) for c in d.get("comparisons", [])],
        )


def _trial_record(i: int, outcome, baseline: float) -> TrialRecord:
    if outcome.compiled and outcome.correct and outcome.time_ms is not None:
        s = speedup(baseline, outcome.time_ms)
    else:
        s = 0.0
    return TrialRecord(i, s, outcome.compiled, outcome.correct, outcome.time_ms, baseline)


def evaluate_kernel(task: OptimizationTask, policy, executor: Executor, trials: int = DEFAULT_TRIALS, *,
                    tools: Sequence[ToolName] | None = None, mode: str = "tools",
                    budget: int = DEFAULT_TOKEN_BUDGET, variant: str = "full") -> KernelResult:
    """Optimize one kernel ``trials`` times; each trial is scored on its fresh final benchmark."""
    if task.baseline_time_ms is None:
        raise ValueError(f"task {task.task_id} has no baseline time")
    if mode not in ("tools", "single_shot"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "single_shot":
        subset, max_events = [], 1
    else:
        subset = list(tools) if tools is not None else list(task.tool_catalog)
        max_events = None
    records, traces = [], []
    for i in range(trials):
        res = run_rollout(task, subset, policy, executor, budget,
                          rollout_id=f"{variant}-{task.task_id}-t{i}", max_events=max_events)
        records.append(_trial_record(i, res.outcome, task.baseline_time_ms))
        traces.append(res.trace)
    return KernelResult(task.task_id, task.category, records, traces=traces)


def run_suite(tasks: Sequence[OptimizationTask], policy, executor: Executor,
              config: EvalConfig | None = None) -> EvalReport:
    """Evaluate every task.  A task that cannot be evaluated records zero-speedup trials and a note."""
    config = config or EvalConfig()
    if not tasks:
        raise ValueError("no tasks to evaluate")
    kernels, notes = [], []
    for task in tasks:
        try:
            if task.baseline_time_ms is None:
                task = task.with_baseline(measure_baseline(task, config.baseline_trials, executor=executor))
            kernels.append(evaluate_kernel(task, policy, executor, config.trials, tools=config.tools,
                                           mode=config.mode, budget=config.budget, variant=config.variant))
        except Exception as exc:  # noqa: BLE001 - the suite must always complete
            log.exception("evaluation of %s failed", task.task_id)
            msg = f"{task.task_id}: {type(exc).__name__}: {exc}"
            notes.append(msg)
            kernels.append(KernelResult(task.task_id, task.category,
                                        [TrialRecord(i, 0.0, False, False, None, task.baseline_time_ms)
                                         for i in range(config.trials)], note=msg))
    if config.mode == "single_shot":
        tools_available: tuple[str, ...] | None = ()
    else:
        tools_available = None if config.tools is None else tuple(t.value for t in config.tools)
    return EvalReport(config.variant, kernels, tools_available, config.to_dict(), notes)


def ablation_variants(catalog: Sequence[ToolName] = ALL_TOOLS) -> dict[str, tuple[ToolName, ...]]:
    """``no_<tool>`` -> the catalog without that tool, for each tool in the catalog."""
    catalog = parse_tool_names(catalog)
    return {f"no_{t.value}": tuple(x for x in catalog if x is not t) for t in catalog}


def run_ablation(tasks: Sequence[OptimizationTask], policy, executor: Executor,
                 config: EvalConfig | None = None) -> dict[str, EvalReport]:
    """Run the suite once per removed tool.  Removing benchmark_code is allowed here."""
    base = config or EvalConfig()
    # measure baselines once so every variant scores against the same reference
    measured = []
    for t in tasks:
        if t.baseline_time_ms is None:
            try:
                t = t.with_baseline(measure_baseline(t, base.baseline_trials, executor=executor))
            except Exception:  # noqa: BLE001 - run_suite records the failure per variant
                log.warning("baseline of %s failed; it will score zero in every variant", t.task_id)
        measured.append(t)
    tasks = measured
    reports = {}
    for name, subset in ablation_variants().items():
        cfg = EvalConfig(base.trials, subset, "tools", base.budget, base.baseline_trials, base.categories, name)
        reports[name] = run_suite(tasks, policy, executor, cfg)
    return reports


# -- export -----------------------------------------------------------------

def _as_variants(reports: EvalReport | dict[str, EvalReport]) -> dict[str, EvalReport]:
    return {reports.variant: reports} if isinstance(reports, EvalReport) else dict(reports)


def report_rows(reports: EvalReport | dict[str, EvalReport]) -> list[dict]:
    rows = []
    for name, rep in _as_variants(reports).items():
        for k in rep.kernels:
            for t in k.trials:
                rows.append({
                    "kernel_id": k.kernel_id, "category": k.category, "variant": name, "trial": t.trial,
                    "speedup": t.speedup, "correct": t.correct, "compiled": t.compiled,
                    "time_ms": t.time_ms, "baseline_ms": t.baseline_ms,
                })
    return rows


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def export_report(reports: EvalReport | dict[str, EvalReport], out_dir: str | Path,
                  formats: Sequence[str] = ("csv", "json"), stem: str = "report") -> list[Path]:
    """Write ``<stem>.csv`` (kernel x trial x variant rows) and/or ``<stem>.json`` (full structure)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = _as_variants(reports)
    paths = []
    for fmt in formats:
        if fmt == "csv":
            p = out_dir / f"{stem}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.DictWriter(fh, CSV_COLUMNS)
                w.writeheader()
                for row in report_rows(variants):
                    w.writerow({k: _csv_value(v) for k, v in row.items()})
        elif fmt == "json":
            p = out_dir / f"{stem}.json"
            doc = {"schema_version": REPORT_SCHEMA_VERSION,
                   "variants": {name: rep.to_dict() for name, rep in variants.items()}}
            p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        paths.append(p)
    return paths


def load_report_json(path: str | Path) -> dict[str, EvalReport]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
    return {name: EvalReport.from_dict(d) for name, d in doc["variants"].items()}


def load_report_csv(path: str | Path) -> dict[str, EvalReport]:
    """Rebuild per-kernel trial data from CSV (configuration and tool statistics are not in the CSV)."""
    variants: dict[str, dict[str, KernelResult]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            opt = lambda s: float(s) if s != "" else None  # noqa: E731
            kernels = variants.setdefault(row["variant"], {})
            k = kernels.setdefault(row["kernel_id"], KernelResult(row["kernel_id"], row["category"], []))
            k.trials.append(TrialRecord(int(row["trial"]), float(row["speedup"]), row["compiled"] == "1",
                                        row["correct"] == "1", opt(row["time_ms"]), opt(row["baseline_ms"])))
    return {name: EvalReport(name, list(ks.values())) for name, ks in variants.items()}
