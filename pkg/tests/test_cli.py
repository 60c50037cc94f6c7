from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from helpers import call, final, think
from optr1.cli import Config, load_config, main
from optr1.mock import BROKEN_BODY, FAST_BODY, delay_body, write_mock_repo
from optr1.policy import FinalAnswer, event_to_dict
from optr1.problem import save_task
from optr1.rollout import read_training_batch


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for var in ("OPTR1_ENDPOINT", "OPTR1_MODEL", "OPTR1_API_KEY", "OPTR1_CONFIG", "OPTBENCH_WORKERS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("OPTR1_API_KEY", "sk-very-secret")
    task = write_mock_repo(tmp_path / "repo")
    manifest = save_task(task, tmp_path / "task.json")
    return tmp_path, manifest


def _script(path, events):
    doc = [[event_to_dict(e) for e in s] for s in events] if isinstance(events[0], list) else \
          [event_to_dict(e) for e in events]
    path.write_text(json.dumps(doc))
    return str(path)


def _run(args):
    result = CliRunner().invoke(main, args, catch_exceptions=False)
    summary = json.loads(result.stdout.strip().splitlines()[-1]) if result.stdout.strip() else None
    return result, summary


def test_config_layering(tmp_path, monkeypatch):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"k": 4, "budget": 100, "model": "from-file"}))
    monkeypatch.setenv("OPTR1_MODEL", "from-env")
    monkeypatch.setenv("OPTBENCH_WORKERS", "3")
    cfg = load_config(str(cfg_file), {"budget": 50, "seed": None})
    assert (cfg.k, cfg.budget, cfg.model, cfg.workers) == (4, 50, "from-env", 3)
    assert "api_key" not in Config(api_key="x").snapshot()


def test_optimize_success_and_trace(env):
    tmp, manifest = env
    script = _script(tmp / "s.json", [think("drop delay"), call("benchmark_code", "c1", replacement=BROKEN_BODY),
                                      call("benchmark_code", "c2", replacement=FAST_BODY), final(FAST_BODY)])
    result, s = _run(["--seed", "9", "optimize", str(manifest), "--script", script, "--record", "rec.jsonl"])
    assert result.exit_code == 0, result.output
    assert s["valid"] and s["speedup"] == 21.0 and s["seed"] == 9 and s["config"]["seed"] == 9
    assert "api_key" not in s["config"]
    assert (tmp / s["trace"]).is_file()
    for p in tmp.rglob("*"):
        if p.is_file() and p.suffix in (".json", ".jsonl", ".txt"):
            assert "sk-very-secret" not in p.read_text(errors="ignore")
    # the recorded transcript replays to the same outcome
    result, s2 = _run(["--seed", "9", "optimize", str(manifest), "--replay", "rec.jsonl"])
    assert result.exit_code == 0 and s2["speedup"] == 21.0


def test_optimize_invalid_solution_exits_1(env):
    tmp, manifest = env
    script = _script(tmp / "s.json", [FinalAnswer("I think it is faster")])
    result, s = _run(["optimize", str(manifest), "--script", script])
    assert result.exit_code == 1 and not s["valid"] and s["terminated_reason"] == "invalid_final"


def test_configuration_errors_exit_2(env):
    tmp, manifest = env
    result, _ = _run(["optimize", str(manifest)])
    assert result.exit_code == 2 and "OPTR1_ENDPOINT" in result.output
    (tmp / "bad.json").write_text('{"nope": 1}')
    result, _ = _run(["--config", str(tmp / "bad.json"), "worker"])
    assert result.exit_code == 2
    (tmp / "broken.json").write_text('{"task_id": "x"}')
    result, _ = _run(["optimize", str(tmp / "broken.json"), "--script", _script(tmp / "s.json", [think()])])
    assert result.exit_code == 2
    result, _ = _run(["--workers", "0", "worker"])
    assert result.exit_code == 2


def test_rollout_and_distill(env):
    tmp, manifest = env
    script = _script(tmp / "s.json", [[final(FAST_BODY)], [final(delay_body(30))], [final(delay_body(5))]])
    result, s = _run(["--seed", "2", "rollout", str(manifest), "--k", "3", "--script", script, "--out", "b.jsonl"])
    assert result.exit_code == 0, result.output
    assert s["records"] == 3 and s["group_id"].endswith("-s2")
    header, records = read_training_batch(tmp / "b.jsonl")
    assert header["config"]["k"] == 3 and header["config"]["seed"] == 2 and len(records) == 3
    result, s = _run(["distill", "traces", "--out", "sft.jsonl"])
    assert result.exit_code == 0 and s["records"] == 2
    assert len((tmp / "sft.jsonl").read_text().splitlines()) == 2


def test_eval_and_ablate(env):
    tmp, manifest = env
    script = _script(tmp / "s.json", [final(delay_body(5))])
    result, s = _run(["eval", str(manifest), "--trials", "2", "--script", script, "--out", "rep"])
    assert result.exit_code == 0, result.output
    assert s["variants"] == ["full"] and (tmp / "rep" / "report.csv").exists()
    result, s = _run(["eval", str(manifest), "--trials", "1", "--ablate", "--script", script, "--out", "abl"])
    assert result.exit_code == 0 and len(s["variants"]) == 6
    doc = json.loads((tmp / "abl" / "report.json").read_text())
    assert doc["variants"]["no_search"]["config"]["run"]["trials"] == 1


def test_dataset_commands(env):
    tmp, manifest = env
    roi_lines = "kernel.c:20:26"
    result, s = _run(["dataset", "expand", "--repo", "repo", "--span", "A:kernel.c:10:18", "--span",
                      f"B:{roi_lines}", "--build", "cc -o kernel kernel.c", "--run", "./kernel", "--out", "ds"])
    assert result.exit_code == 0, result.output
    assert s["tasks"] == ["A", "B", "A+B"]
    result, s = _run(["dataset", "filter", *s["manifests"], str(manifest), "--out", "kept"])
    assert result.exit_code == 0 and s["retained"] == 4
    result, _ = _run(["dataset", "expand", "--repo", "repo", "--span", "bad", "--build", "x", "--run", "y",
                      "--out", "ds"])
    assert result.exit_code == 2


def test_dataset_synth(env):
    tmp, _ = env
    (tmp / "tpl").mkdir()
    (tmp / "tpl" / "main.c").write_text('#include <stdio.h>\n// OPTBENCH_KERNEL_BEGIN\n// OPTBENCH_KERNEL_END\n'
                                        'int main(void){run();printf("OPTBENCH_TIME_MS: 1\\nOPTBENCH_CORRECT: 1\\n");}\n')
    (tmp / "snip.c").write_text("x[i] += y[i];")
    script = _script(tmp / "s.json", [final("static void run(void) {}\n")])
    result, s = _run(["dataset", "synth", "--template", "tpl", "--snippet", "snip.c", "--build",
                      "cc -o p main.c", "--run", "./p", "--out", "syn", "--script", script])
    assert result.exit_code == 0 and len(s["manifests"]) == 1 and not s["errors"]
    result, s = _run(["dataset", "filter", s["manifests"][0], "--out", "synkept"])
    assert s["retained"] == 1


def test_worker_probe(env):
    result, s = _run(["--workers", "2", "worker", "--probe", "4"])
    assert result.exit_code == 0
    assert s["status"]["workers"] == 2 and s["status"]["probe"]["completed"] == 4
    assert 1 <= s["status"]["probe"]["max_concurrent"] <= 2
