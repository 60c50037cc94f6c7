from __future__ import annotations

import json
import os

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from optr1.mock import BROKEN_BODY, FAST_BODY, WRONG_BODY
from optr1.problem import RegionOfInterest
from optr1.tools import (
    TOOL_SPECS,
    ToolCall,
    ToolError,
    apply_roi_patch,
    benchmark_code,
    compiler_analysis,
    dispatch,
    file_viewer,
    list_dir,
    microbench_code,
    parse_compiler_log,
    render_command,
    render_tool_catalog,
    search,
    splice_roi,
    tool_function_schemas,
    tree_digest,
)


def oracle_splice(data: bytes, start: int, end: int, replacement: bytes) -> bytes:
    """Byte-level splice: keep everything before line ``start`` and after line ``end``."""
    breaks = [i + 1 for i, b in enumerate(data) if b == 0x0A]
    line_starts = [0] + [b for b in breaks if b < len(data)]
    head = line_starts[start - 1]
    tail = line_starts[end] if end < len(line_starts) else len(data)
    return data[:head] + replacement + data[tail:]


line_text = st.text(st.characters(blacklist_characters="\n", blacklist_categories=("Cs",)), max_size=12)


@settings(max_examples=300, deadline=None)
@given(st.lists(line_text, min_size=1, max_size=15), st.booleans(), st.data(), st.text(max_size=40))
def test_splice_matches_oracle(lines, trailing_newline, data, replacement):
    if not trailing_newline and lines[-1] == "":
        lines[-1] = "x"  # an empty unterminated last line is not a line
    text = "\n".join(lines) + ("\n" if trailing_newline else "")
    n = len(lines)
    start = data.draw(st.integers(1, n))
    end = data.draw(st.integers(start, n))
    original = "".join(text.split("\n")[i] + "\n" for i in range(start - 1, end))
    if end == n and not trailing_newline:
        original = original[:-1]
    roi = RegionOfInterest("f", start, end, original)
    got = splice_roi(text, roi, replacement)
    assert got.encode() == oracle_splice(text.encode(), start, end, replacement.encode())


def test_identity_and_shrinking_patch(tmp_path):
    lines = [f"line {i}\n" for i in range(1, 21)]
    (tmp_path / "f.c").write_text("".join(lines))
    roi = RegionOfInterest.from_file(tmp_path, "f.c", 5, 15)
    apply_roi_patch(tmp_path, roi, roi.original_text)
    assert (tmp_path / "f.c").read_text() == "".join(lines)
    apply_roi_patch(tmp_path, roi, "a\nb\nc\n")
    out = (tmp_path / "f.c").read_text().split("\n")
    assert len(out) - 1 == 20 - 8
    assert out[:4] == [l.rstrip() for l in lines[:4]] and out[7:-1] == [l.rstrip() for l in lines[15:]]


def test_patch_detects_drift_and_missing_file(tmp_path):
    (tmp_path / "f.c").write_text("a\nb\nc\n")
    roi = RegionOfInterest.from_file(tmp_path, "f.c", 2, 2)
    (tmp_path / "f.c").write_text("a\nB\nc\n")
    with pytest.raises(ToolError) as e:
        apply_roi_patch(tmp_path, roi, "x\n")
    assert e.value.kind == "roi_drift"
    os.remove(tmp_path / "f.c")
    with pytest.raises(ToolError) as e:
        apply_roi_patch(tmp_path, roi, "x\n")
    assert e.value.kind == "not_found"


def test_render_command():
    assert render_command("cc -O2 -o k k.c", ["-O3"]) == ["cc", "-O2", "-o", "k", "k.c", "-O3"]
    assert render_command("nvcc {compile_args} k.cu", ["-O3", "-g"]) == ["nvcc", "-O3", "-g", "k.cu"]
    assert render_command(["sh", "-c", "echo hi"]) == ["sh", "-c", "echo hi"]


@pytest.mark.parametrize(
    "log, regs, stores, loads",
    [
        ("ptxas info    : Used 72 registers, 384 bytes cmem[0]", 72, None, None),
        ("0 bytes stack frame, 0 bytes spill stores, 0 bytes spill loads", None, 0, 0),
        ("Used 80 registers\nUsed 64 registers\n16 bytes spill stores, 8 bytes spill loads", 80, 16, 8),
        ("", None, None, None),
        ("garbage \x00 � Used registers", None, None, None),
    ],
)
def test_parse_compiler_log(log, regs, stores, loads):
    d = parse_compiler_log(log)
    assert (d.registers_per_thread, d.spill_store_bytes, d.spill_load_bytes) == (regs, stores, loads)


@given(st.text())
def test_parse_compiler_log_is_total(log):
    d = parse_compiler_log(log)
    assert d.registers_per_thread is None or d.registers_per_thread >= 0


def test_file_viewer_list_dir_search(light_task):
    root = light_task.repo_root
    chunk = file_viewer(root, "src/k.c", 2, 99)
    assert chunk.text == "2\tint b;\n3\tint c;\n" and chunk.line_end == 3 and chunk.total_lines == 3
    assert list_dir(root) == ["notes.txt", "src/"]
    res = search(root, "gamma")
    assert [(h.file, h.line_number) for h in res.hits] == [("notes.txt", 2)]
    assert len(search(root, r"int [ab];", is_regex=True).hits) == 2
    assert search(root, "int", max_hits=1).truncated


def test_file_viewer_caps_output(tmp_path):
    (tmp_path / "big.txt").write_text("".join(f"{i}\n" for i in range(1000)))
    chunk = file_viewer(tmp_path, "big.txt")
    assert chunk.truncated and chunk.line_end == 400


@pytest.mark.parametrize("path", ["../outside", "/etc/passwd", "src/../../x", "link/secret"])
def test_path_escape_rejected(light_task, tmp_path, path):
    (light_task.repo_root / "link").symlink_to(tmp_path)
    with pytest.raises(ToolError) as e:
        file_viewer(light_task.repo_root, path)
    assert e.value.kind == "path_escape"
    with pytest.raises(ToolError):
        list_dir(light_task.repo_root, path)


def test_invalid_regex(light_task):
    with pytest.raises(ToolError) as e:
        search(light_task.repo_root, "(", is_regex=True)
    assert e.value.kind == "invalid_regex"


def test_catalog_rendering():
    text = render_tool_catalog(["benchmark_code", "search"])
    assert text.count("### ") == 2 and "replacement" in text
    with pytest.raises(ValueError):
        render_tool_catalog([])
    with pytest.raises(ValueError):
        render_tool_catalog(["search", "search"])
    with pytest.raises(ValueError):
        render_tool_catalog(["hammer"])
    assert [s["function"]["name"] for s in tool_function_schemas(["search"])] == ["search"]


def test_dispatch_examples(light_task, executor):
    subset = ["benchmark_code", "file_viewer", "search", "compiler_analysis", "microbench_code"]
    r = dispatch(ToolCall("1", "list_dir", {}), light_task, subset, executor)
    assert not r.ok and r.error_kind == "tool_unavailable" and r.call_id == "1"
    r = dispatch(ToolCall("2", "file_viewer", {"file": "notes.txt"}), light_task, subset, executor)
    assert r.ok and "beta gamma" in r.payload["text"]
    r = dispatch(ToolCall("3", "benchmark_code", {}), light_task, subset, executor)
    assert not r.ok and r.error_kind == "schema"
    r = dispatch(ToolCall("4", "benchmark_code", {"replacement": "int q;\n"}), light_task, subset, executor)
    assert r.ok and r.payload["compiled"] and r.payload["correct"] and r.payload["time_ms"] == 2.0
    r = dispatch(ToolCall("5", "compiler_analysis", {}), light_task, subset, executor)
    assert r.ok and r.payload["registers_per_thread"] == 7 and r.payload["spill_load_bytes"] is None
    r = dispatch(ToolCall("6", "microbench_code", {"source": "x"}), light_task, subset, executor)
    assert r.ok and r.payload["time_ms"] == 1.5 and r.payload["correct"]
    r = dispatch(ToolCall("7", "file_viewer", {"file": "../x"}), light_task, subset, executor)
    assert r.error_kind == "path_escape"
    r = dispatch(ToolCall("8", "hammer", {}), light_task, subset, executor)
    assert r.error_kind == "unknown_tool"


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=10),
    lambda children: st.lists(children, max_size=3) | st.dictionaries(st.text(max_size=8), children, max_size=3),
    max_leaves=8,
)
tool_names = st.sampled_from(sorted(TOOL_SPECS)) .map(str) | st.text(max_size=12)
arguments = json_values | st.dictionaries(
    st.sampled_from(["replacement", "file", "pattern", "dir", "source", "line_start", "is_regex", "config", "x"]),
    json_values, max_size=3)


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(call_id=st.text(max_size=8), tool=tool_names, args=arguments)
def test_dispatch_never_raises(light_task, executor, call_id, tool, args):
    before = tree_digest(light_task.repo_root)
    r = dispatch(ToolCall(call_id, tool, args), light_task, ["benchmark_code", "file_viewer", "search",
                                                             "list_dir", "compiler_analysis"], executor)
    assert r.call_id == call_id
    if not r.ok:
        assert r.payload["error_kind"] and "message" in r.payload
    json.dumps(r.to_dict())
    assert tree_digest(light_task.repo_root) == before


def test_dispatch_tolerates_non_call_objects(light_task, executor):
    for junk in (None, 42, object()):
        r = dispatch(junk, light_task, ["search"], executor)
        assert not r.ok and r.error_kind == "unknown_tool"


def test_benchmark_on_mock_toolchain(mock_task, executor):
    before = tree_digest(mock_task.repo_root)
    fast = benchmark_code(mock_task, FAST_BODY, executor=executor)
    assert fast.compiled and fast.correct and fast.time_ms == 1.0 and len(fast.times_ms) == 3
    broken = benchmark_code(mock_task, BROKEN_BODY, executor=executor)
    assert not broken.compiled and broken.time_ms is None and "error" in broken.compile_log
    wrong = benchmark_code(mock_task, WRONG_BODY, ["-O1"], executor=executor)
    assert wrong.compiled and not wrong.correct
    with pytest.raises(ValueError):
        benchmark_code(mock_task, "", executor=executor)
    diag = compiler_analysis(mock_task, FAST_BODY, executor=executor)
    assert diag.compiled and diag.registers_per_thread == 24
    bad = compiler_analysis(mock_task, BROKEN_BODY, executor=executor)
    assert not bad.compiled
    assert tree_digest(mock_task.repo_root) == before


def test_microbench_real_program(executor):
    src = r'''
#include <stdio.h>
#include <stdlib.h>
int main(void) {
    const char *p = getenv("OPTBENCH_LAUNCH_PARAMS");
    printf("params %s\n", p ? p : "none");
    printf("OPTBENCH_TIME_MS: 3.91\n");
    return 0;
}
'''
    out = microbench_code(src, ["-O1"], {"block": 256}, executor=executor)
    assert out.compiled and out.correct and out.time_ms == 3.91
    assert '{"block": 256}' in out.run_log
    fail = microbench_code("int main( {", executor=executor)
    assert not fail.compiled
