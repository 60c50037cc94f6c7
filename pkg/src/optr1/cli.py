"""``optr1`` command line: optimize, rollout, distill, eval, dataset, worker.

Settings are layered: built-in defaults, then a JSON config file
(``--config`` or ``OPTR1_CONFIG``), then environment variables, then flags.
Every command prints one JSON summary line on stdout.

Exit status: 0 success, 1 invalid solution or evaluation failure,
2 configuration error.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import click

from . import __version__
from .evaluation import EvalConfig, export_report, run_ablation, run_suite, speedup
from .executor import Executor, Job
from .policy import PolicyError, RecordingPolicy, RemotePolicy, ReplayPolicy, ScriptedPolicy, event_from_dict
from .problem import (
    KernelSpan,
    RegionOfInterest,
    TaskError,
    expand_kernel_regions,
    filter_runnable,
    load_task,
    measure_baseline,
    save_task,
    synth_generate,
)
from .rollout import distill_store, export_sft, export_training_batch, run_rollout, run_rollout_group, store_group
from .tools import parse_tool_names
from .trace import write_trace

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


@dataclass
class Config:
    endpoint: str | None = None
    model: str = "default"
    api_key: str | None = None
    workers: int | None = None
    timing_slots: int = 1
    tool_timeout_ms: int = 120_000
    benchmark_timeout_ms: int = 600_000
    budget: int = 32_768
    trials: int = 5
    k: int = 12
    seed: int = 0
    baseline_trials: int = 5
    trace_store: str = "traces"
    report_dir: str = "reports"

    def validate(self):
        for name in ("timing_slots", "tool_timeout_ms", "benchmark_timeout_ms", "budget", "trials", "k",
                     "baseline_trials"):
            if getattr(self, name) <= 0:
                raise click.UsageError(f"{name} must be positive")
        if self.workers is not None and self.workers <= 0:
            raise click.UsageError("workers must be positive")

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("api_key")
        return d


_ENV = {"OPTR1_ENDPOINT": "endpoint", "OPTR1_MODEL": "model", "OPTR1_API_KEY": "api_key",
        "OPTBENCH_WORKERS": "workers"}


def load_config(path: str | None, overrides: dict) -> Config:
    cfg = Config()
    path = path or os.environ.get("OPTR1_CONFIG")
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise click.UsageError(f"cannot read config {path}: {exc}")
        unknown = set(doc) - {f.name for f in dataclasses.fields(Config)}
        if unknown:
            raise click.UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = dataclasses.replace(cfg, **doc)
    for var, name in _ENV.items():
        if os.environ.get(var):
            value = os.environ[var]
            cfg = dataclasses.replace(cfg, **{name: int(value) if name == "workers" else value})
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


def _summary(command: str, cfg: Config, **fields):
    click.echo(json.dumps({"command": command, **fields, "seed": cfg.seed, "config": cfg.snapshot()},
                          sort_keys=True))


def _executor(cfg: Config) -> Executor:
    return Executor(cfg.workers, cfg.timing_slots, tool_timeout_ms=cfg.tool_timeout_ms,
                    benchmark_timeout_ms=cfg.benchmark_timeout_ms)


def _policy(cfg: Config, script: str | None, replay: str | None, record: str | None, lenient: bool = False):
    if script and replay:
        raise click.UsageError("--script and --replay are mutually exclusive")
    if script:
        doc = json.loads(Path(script).read_text())
        if doc and isinstance(doc[0], list):
            backend = ScriptedPolicy([[event_from_dict(e) for e in s] for s in doc], per_session=True)
        else:
            backend = ScriptedPolicy([event_from_dict(e) for e in doc])
    elif replay:
        backend = ReplayPolicy(replay, strict=not lenient)
    else:
        if not cfg.endpoint:
            raise click.UsageError("no policy: set OPTR1_ENDPOINT or pass --script/--replay")
        backend = RemotePolicy(cfg.endpoint, cfg.model, cfg.api_key)
    return RecordingPolicy(backend, record) if record else backend


def policy_options(f):
    f = click.option("--record", type=click.Path(dir_okay=False), help="Write a JSONL transcript.")(f)
    f = click.option("--replay-lenient", is_flag=True, help="Do not stop when tool results differ from the transcript.")(f)
    f = click.option("--replay", type=click.Path(exists=True, dir_okay=False), help="Replay a recorded transcript.")(f)
    f = click.option("--script", type=click.Path(exists=True, dir_okay=False), help="JSON list of scripted events.")(f)
    return f


def _load_task_or_exit(manifest: str):
    try:
        return load_task(manifest)
    except TaskError as exc:
        raise click.UsageError(str(exc))


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON config file.")
@click.option("--workers", type=int, help="Executor worker count (default: cores - 1).")
@click.option("--seed", type=int, help="Seed recorded into every output.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config_path, workers, seed, verbose):
    """Tool-assisted kernel optimization harness."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config_path": config_path, "overrides": {"workers": workers, "seed": seed}}


def _cfg(ctx, **more) -> Config:
    return load_config(ctx.obj["config_path"], {**ctx.obj["overrides"], **more})


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--budget", type=int)
@click.option("--tools", help="Comma-separated tool subset (default: the task's catalog).")
@click.option("--trace-store", type=click.Path(file_okay=False))
@policy_options
@click.pass_context
def optimize(ctx, manifest, budget, tools, trace_store, script, replay, replay_lenient, record):
    """Optimize one task and report the speedup of its final code."""
    cfg = _cfg(ctx, budget=budget, trace_store=trace_store)
    task = _load_task_or_exit(manifest)
    policy = _policy(cfg, script, replay, record, replay_lenient)
    subset = parse_tool_names(tools.split(",")) if tools else list(task.tool_catalog)
    with _executor(cfg) as ex:
        if task.baseline_time_ms is None:
            task = task.with_baseline(measure_baseline(task, cfg.baseline_trials, executor=ex))
        res = run_rollout(task, subset, policy, ex, cfg.budget, rollout_id=f"{task.task_id}-opt-s{cfg.seed}")
    path = write_trace(cfg.trace_store, res.trace, f"{task.task_id}-opt-s{cfg.seed}",
                       {"prompt": res.prompt, "baseline_ms": task.baseline_time_ms,
                        "outcome": res.outcome.to_dict(), "seed": cfg.seed})
    o = res.outcome
    valid = res.trace.final is not None and o.compiled and o.correct and o.time_ms is not None
    s = speedup(task.baseline_time_ms, o.time_ms) if valid else 0.0
    if valid:
        click.echo(res.trace.final.explanation, err=True)
    else:
        click.echo(f"invalid final solution: {res.trace.terminated_reason}; "
                   f"compiled={o.compiled} correct={o.correct}", err=True)
    _summary("optimize", cfg, task_id=task.task_id, valid=valid, speedup=s, time_ms=o.time_ms,
             baseline_ms=task.baseline_time_ms, terminated_reason=res.trace.terminated_reason, trace=str(path))
    ctx.exit(EXIT_OK if valid else EXIT_FAILED)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=int, help="Rollouts per group (default 12).")
@click.option("--budget", type=int)
@click.option("--out", type=click.Path(dir_okay=False), default="batch.jsonl", show_default=True)
@click.option("--trace-store", type=click.Path(file_okay=False))
@policy_options
@click.pass_context
def rollout(ctx, manifest, k, budget, out, trace_store, script, replay, replay_lenient, record):
    """Run one GRPO rollout group and export an advantage-annotated batch."""
    cfg = _cfg(ctx, k=k, budget=budget, trace_store=trace_store)
    task = _load_task_or_exit(manifest)
    policy = _policy(cfg, script, replay, record, replay_lenient)
    with _executor(cfg) as ex:
        if task.baseline_time_ms is None:
            task = task.with_baseline(measure_baseline(task, cfg.baseline_trials, executor=ex))
        group = run_rollout_group(task, cfg.k, policy, ex, cfg.seed, cfg.budget)
    store_group(group, cfg.trace_store)
    export_training_batch([group], out, config=cfg.snapshot())
    _summary("rollout", cfg, task_id=task.task_id, group_id=group.group_id, records=group.k, out=out,
             tool_subset=[t.value for t in group.tool_subset], rewards=[r.total for r in group.rewards])


@main.command()
@click.argument("trace_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default="sft.jsonl", show_default=True)
@click.pass_context
def distill(ctx, trace_dir, out):
    """Export SFT records for stored traces that compiled, passed and beat the baseline."""
    cfg = _cfg(ctx)
    records = distill_store(trace_dir)
    export_sft(records, out)
    _summary("distill", cfg, records=len(records), out=out)


@main.command("eval")
@click.argument("manifests", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trials", type=int, help="Optimization trials per kernel (default 5).")
@click.option("--ablate", is_flag=True, help="Run once per removed tool (six variants).")
@click.option("--single-shot", is_flag=True, help="Baseline mode: one answer, no tools.")
@click.option("--budget", type=int)
@click.option("--out", type=click.Path(file_okay=False))
@policy_options
@click.pass_context
def eval_cmd(ctx, manifests, trials, ablate, single_shot, budget, out, script, replay, replay_lenient, record):
    """Evaluate tasks over repeated trials and write CSV/JSON reports."""
    cfg = _cfg(ctx, trials=trials, budget=budget, report_dir=out)
    tasks = [_load_task_or_exit(m) for m in manifests]
    policy = _policy(cfg, script, replay, record, replay_lenient)
    ecfg = EvalConfig(trials=cfg.trials, mode="single_shot" if single_shot else "tools", budget=cfg.budget,
                      baseline_trials=cfg.baseline_trials)
    with _executor(cfg) as ex:
        reports = run_ablation(tasks, policy, ex, ecfg) if ablate else run_suite(tasks, policy, ex, ecfg)
    variants = reports if isinstance(reports, dict) else {reports.variant: reports}
    for rep in variants.values():
        rep.config["run"] = cfg.snapshot()
    paths = export_report(variants, cfg.report_dir)
    failed_kernels = sum(1 for rep in variants.values() for k in rep.kernels if k.note)
    _summary("eval", cfg, variants=sorted(variants), kernels=len(tasks), files=[str(p) for p in paths],
             harness_failures=failed_kernels)
    ctx.exit(EXIT_FAILED if failed_kernels else EXIT_OK)


@main.group()
def dataset():
    """Build task manifests: expand kernels, generate synthetic tasks, filter runnable ones."""


def _parse_span(repo: str, spec: str) -> KernelSpan:
    try:
        name, file, start, end = spec.rsplit(":", 3)
        return KernelSpan(name, RegionOfInterest.from_file(repo, file, int(start), int(end)))
    except ValueError as exc:
        raise click.BadParameter(f"{spec!r}: expected NAME:FILE:START:END ({exc})")


@dataset.command("expand")
@click.option("--repo", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--span", "spans", multiple=True, required=True, help="NAME:FILE:START:END, repeatable.")
@click.option("--build", "build_command", required=True)
@click.option("--run", "run_script", required=True)
@click.option("--category", default="uncategorized")
@click.option("--prefix", default="")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def dataset_expand(ctx, repo, spans, build_command, run_script, category, prefix, out):
    """One task per kernel span plus the combined span per file."""
    cfg = _cfg(ctx)
    try:
        tasks = expand_kernel_regions(repo, [_parse_span(repo, s) for s in spans], build_command=build_command,
                                      run_script=run_script, task_prefix=prefix, category=category)
    except TaskError as exc:
        raise click.UsageError(str(exc))
    written = [str(save_task(t, Path(out) / f"{t.task_id}.json")) for t in tasks]
    _summary("dataset expand", cfg, tasks=[t.task_id for t in tasks], manifests=written)


@dataset.command("synth")
@click.option("--template", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--snippet", "snippets", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--build", "build_command", required=True)
@click.option("--run", "run_script", required=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@policy_options
@click.pass_context
def dataset_synth(ctx, template, snippets, build_command, run_script, out, script, replay, replay_lenient, record):
    """Generate one candidate task per inspiration snippet (unfiltered)."""
    cfg = _cfg(ctx)
    policy = _policy(cfg, script, replay, record, replay_lenient)
    written, errors = [], []
    for snip in snippets:
        try:
            task = synth_generate(template, Path(snip).read_text(), policy, out_dir=Path(out) / "repos",
                                  build_command=build_command, run_script=run_script)
            written.append(str(save_task(task, Path(out) / f"{task.task_id}.json")))
        except (TaskError, PolicyError) as exc:
            errors.append(f"{snip}: {exc}")
    _summary("dataset synth", cfg, manifests=written, errors=errors)


@dataset.command("filter")
@click.argument("manifests", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def dataset_filter(ctx, manifests, out):
    """Keep tasks whose unmodified program builds, runs and reports correct."""
    cfg = _cfg(ctx)
    tasks = [_load_task_or_exit(m) for m in manifests]
    with _executor(cfg) as ex:
        kept = filter_runnable(tasks, ex)
    written = [str(save_task(t, Path(out) / f"{t.task_id}.json")) for t in kept]
    _summary("dataset filter", cfg, candidates=len(tasks), retained=len(kept), manifests=written)


@main.command()
@click.option("--probe", type=int, default=0, help="Run N short probe jobs and report observed concurrency.")
@click.pass_context
def worker(ctx, probe):
    """Show executor pool settings; optionally probe it."""
    cfg = _cfg(ctx)
    sh = shutil.which("sh") or "/bin/sh"
    with _executor(cfg) as ex:
        status = ex.status()
        if probe > 0:
            ws = ex.make_workspace("probe")
            cmd = (sh, "-c", 'python3 -c "import time;print(time.time())"; sleep 0.2; '
                             'python3 -c "import time;print(time.time())"')
            t0 = time.perf_counter()
            handles = [ex.submit(Job(cmd, ws)) for _ in range(probe)]
            spans = []
            for h in handles:
                lines = ex.await_result(h).stdout.split()
                if len(lines) == 2:
                    spans.append((float(lines[0]), float(lines[1])))
            status["probe"] = {
                "jobs": probe,
                "completed": len(spans),
                "wall_s": round(time.perf_counter() - t0, 3),
                "max_concurrent": _max_overlap(spans),
            }
    _summary("worker", cfg, status=status)


def _max_overlap(spans: list[tuple[float, float]]) -> int:
    events = sorted([(s, 1) for s, _ in spans] + [(e, -1) for _, e in spans], key=lambda x: (x[0], x[1]))
    cur = best = 0
    for _, d in events:
        cur += d
        best = max(best, cur)
    return best


if __name__ == "__main__":
    main()
