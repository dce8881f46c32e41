#!/usr/bin/env python3
"""Smoke test for the lei_py extension module.

Expects `cargo build -p lei-py` (debug or release) to have produced
liblei_py.so already. The library is copied into a temp directory under the
importable name lei_py.so, the pure helpers are exercised, and one full
fixture-driven pipeline run is executed end to end.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]

GOOD_SCRIPT = (
    "import json, sys\n"
    "rows = sum(1 for _ in open(sys.argv[1])) - 1\n"
    'print(json.dumps({"rows": rows}))\n'
)


def find_library() -> Path:
    for profile in ("release", "debug"):
        candidate = REPO / "target" / profile / "liblei_py.so"
        if candidate.is_file():
            return candidate
    sys.exit("liblei_py.so not found; run `cargo build -p lei-py` first")


def expect_value_error(fn, *args):
    try:
        fn(*args)
    except ValueError:
        return
    raise AssertionError(f"{fn.__name__}{args} should have raised ValueError")


def check_helpers(lei_py):
    assert lei_py.__version__

    value = lei_py.extract_json('prose first\n```json\n{"a": [1, 2.5, "x"]}\n```\nmore prose')
    assert value == {"a": [1, 2.5, "x"]}, value
    expect_value_error(lei_py.extract_json, "no structure here")

    src = lei_py.normalize_source("```python\nprint(1)\n```")
    assert src == "print(1)\n", repr(src)
    expect_value_error(lei_py.normalize_source, "```python\n```")

    assert lei_py.normalize_task_name("Daily PM2.5 Mean") == "daily_pm2_5_mean"
    assert lei_py.normalize_task_name("!!!") is None

    batches = lei_py.partition_batches(["a", "b", "c", "d", "e"], 2)
    assert batches == [["a", "b"], ["c", "d"], ["e"]], batches
    expect_value_error(lei_py.partition_batches, ["a"], 0)

    merged, added = lei_py.merge_task_lists([("a", "old")], [("a", "dup"), ("b", "new")])
    assert merged == [("a", "old"), ("b", "new")], merged
    assert added == [("b", "new")], added

    statuses = ["passed_initial"] * 21 + ["passed_after_fix"] * 10 + ["failed"] * 17
    assert abs(lei_py.reliability(statuses) - 31 / 48) < 1e-9
    expect_value_error(lei_py.reliability, [])
    expect_value_error(lei_py.reliability, ["nonsense"])

    assert abs(lei_py.prompt_tokens_per_second(804, 804_000_000) - 1000.0) < 1e-9
    assert abs(lei_py.completion_tokens_per_second(1210, 24_200_000_000) - 50.0) < 1e-9
    assert lei_py.prompt_tokens_per_second(10, 0) is None


def build_workspace(root: Path) -> Path:
    domain = root / "data" / "air_quality"
    domain.mkdir(parents=True)
    (domain / "sample_data.csv").write_text(
        "timestamp,aqi,pm2_5\n"
        "2025-10-28 17:24:12,2,11.48\n"
        "2025-10-28 17:24:17,2,11.57\n"
    )
    (domain / "meta_data.json").write_text(json.dumps({"sensor": "bench"}))
    (domain / "context.txt").write_text("bench deployment\n")
    shutil.copytree(REPO / "prompts", root / "prompts")

    tasks = [{"name": f"t{i}", "description": f"task {i}"} for i in (1, 2, 3)]
    replies = {
        "tasks.txt": json.dumps(tasks),
        "code0.txt": json.dumps(
            [{"name": n, "description": "bench", "code": GOOD_SCRIPT} for n in ("t1", "t2")]
        ),
        "code1.txt": json.dumps([{"name": "t3", "description": "bench", "code": GOOD_SCRIPT}]),
    }
    fixtures = root / "fixtures"
    fixtures.mkdir()
    for name, body in replies.items():
        (fixtures / name).write_text(body)
    manifest = {
        "entries": [
            # One task-generation reply per run; the second run proposes the
            # same names again and nothing new is admitted.
            {"step": "task_gen", "uses": 2, "response_file": "tasks.txt"},
            {"step": "code_gen", "batch": 0, "uses": 1, "response_file": "code0.txt"},
            {"step": "code_gen", "batch": 1, "uses": 1, "response_file": "code1.txt"},
        ]
    }
    (fixtures / "manifest.json").write_text(json.dumps(manifest))

    config = root / "config.toml"
    config.write_text(
        'data_type = "air_quality"\n'
        'backend_mode = "fixture"\n'
        'backend_fixture_dir = "fixtures"\n'
    )
    return config


def check_pipeline(lei_py, root: Path):
    config = build_workspace(root)
    pipe = lei_py.Pipeline(str(config), test_clock="2025-10-28T17:24:12Z")

    outcome = pipe.run()
    assert outcome["halted"] is False, outcome
    assert outcome["exit_code"] == 0
    counts = outcome["manifest"]["counts"]
    assert counts["tasks_proposed"] == 3, counts
    assert counts["scripts_generated"] == 3, counts
    assert counts["passed_validation"] == 3, counts
    assert counts["executed_ok"] == 3, counts
    statuses = [step["status"] for step in outcome["manifest"]["steps"]]
    assert statuses == ["ok", "ok", "ok", "ok"], statuses
    assert Path(outcome["report_path"]).is_file()

    report = pipe.report()
    assert len(report["runs"]) == 1
    assert report["aggregate"]["counts"]["executed_ok"] == 3
    assert abs(report["aggregate"]["reliability"] - 1.0) < 1e-9

    # A second run proposes the same task names; nothing new is admitted,
    # generated, or executed, and the run completes without halting.
    second = pipe.run()
    assert second["halted"] is False, second
    counts2 = second["manifest"]["counts"]
    assert counts2["tasks_proposed"] == 0, counts2
    assert counts2["scripts_generated"] == 0, counts2
    assert counts2["executed_ok"] == 0, counts2

    # The aggregate report still carries the first run's funnel.
    report2 = pipe.report()
    assert len(report2["runs"]) == 2
    assert report2["aggregate"]["counts"]["executed_ok"] == 3


def main():
    workdir = Path(tempfile.mkdtemp(prefix="lei_py_smoke_"))
    try:
        shutil.copy2(find_library(), workdir / "lei_py.so")
        sys.path.insert(0, str(workdir))
        import lei_py

        check_helpers(lei_py)
        check_pipeline(lei_py, workdir / "ws")
        print("lei_py smoke test: all checks passed")
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


if __name__ == "__main__":
    main()
