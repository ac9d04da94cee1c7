import json
import subprocess
import sys

import pytest
import yaml

from toolcodebook.cli import main
from toolcodebook.dataset import DEFAULT_REGISTRY, read_jsonl

TINY = {
    "per_tool": 10,
    "plain_samples": 40,
    "echo_samples": 20,
    "C": 8,
    "D": 4,
    "H": 12,
    "N": 12,
    "tools": ["asr", "ocr", "text-to-video", "action-recognition"],
    "groups": "2x2",
    "steps_per_1k": {"prior": 50, "1": 20, "2": 50, "3": 50},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_synth_writes_splits_and_manifest(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert main(["synth", "--out", str(out), "--per-tool", "20", "--tools", "asr", "ocr"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tools"]["asr"]["train"] == 18 and manifest["tools"]["asr"]["test"] == 2
    assert len(read_jsonl(out / "ocr_instruction_train.jsonl")) == 18
    assert (out / "resolved_config.yaml").exists()
    # a second run refuses to clobber, --force overwrites identically
    assert main(["synth", "--out", str(out), "--per-tool", "20", "--tools", "asr", "ocr"]) == 1
    first = (out / "manifest.json").read_text()
    assert main(["synth", "--out", str(out), "--per-tool", "20", "--tools", "asr", "ocr", "--force"]) == 0
    assert (out / "manifest.json").read_text() == first


def test_validate_exit_codes(tmp_path, capsys):
    out = tmp_path / "corpus"
    main(["synth", "--out", str(out), "--per-tool", "10", "--tools", "asr"])
    capsys.readouterr()
    clean = out / "asr_instruction_train.jsonl"
    assert main(["validate", str(clean)]) == 0
    assert capsys.readouterr().out == ""

    lines = clean.read_text().splitlines()
    bad = json.loads(lines[0])
    bad["conversations"][1]["actions"][0]["API_name"] = "teleport"
    dirty = tmp_path / "dirty.jsonl"
    dirty.write_text("\n".join([lines[1], json.dumps(bad), "{not json"]) + "\n")
    assert main(["validate", str(dirty), "--report", str(tmp_path / "r.jsonl")]) == 1
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [(r["index"], r["code"]) for r in rows] == [(1, "UNKNOWN_TOOL"), (2, "PARSE_ERROR")]
    assert (tmp_path / "r.jsonl").read_text().count("\n") == 2

    assert main(["validate", str(tmp_path / "missing.jsonl")]) == 2
    assert main(["validate", str(clean), "--registry", str(tmp_path / "nope.json")]) == 2


def test_train_stages_and_resume(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(config), "--output", str(a), "--stage", "3"]) == 1
    assert main(["train", "--config", str(config), "--output", str(a)]) == 0
    for n in (1, 2, 3):
        assert (a / f"stage{n}.ckpt").exists() and (a / f"stage{n}.log.jsonl").exists()
    assert main(["train", "--config", str(config), "--output", str(b), "--stage", "1"]) == 0
    assert main(["train", "--config", str(config), "--output", str(b), "--stage", "2"]) == 0
    assert (a / "stage2.ckpt").read_bytes() == (b / "stage2.ckpt").read_bytes()
    # a different seed invalidates the stage-1 checkpoint
    assert main(["train", "--config", str(config), "--output", str(b), "--stage", "2", "--seed", "7", "--force"]) == 1
    assert main(["train", "--config", str(config), "--output", str(a)]) == 1


def test_resolved_config_records_effective_values(tmp_path, config, monkeypatch):
    monkeypatch.setenv("TOOLCB_SEED", "5")
    assert main(["train", "--config", str(config), "--output", str(tmp_path / "r"), "--stage", "1"]) == 0
    resolved = yaml.safe_load((tmp_path / "r" / "resolved_config.yaml").read_text())
    assert resolved["seed"] == 5 and resolved["per_tool"] == 10
    assert [s["stage"] for s in resolved["stages"]] == [1, 2, 3]


def test_bad_config_exits_3(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("learning_rate: 3\n")
    assert main(["train", "--config", str(path), "--output", str(tmp_path / "o")]) == 3
    path.write_text("groups: 3x3\n")
    assert main(["continual", "--config", str(path), "--output", str(tmp_path / "o")]) == 3
    assert main(["continual", "--config", str(path), "--strategy", "ewc"]) == 3


def test_continual_and_report(tmp_path, config, capsys):
    out = tmp_path / "runs"
    argv = ["continual", "--config", str(config), "--output", str(out),
            "--strategy", "sequential", "--strategy", "rehearsal:3", "--strategy", "colt"]
    assert main(argv) == 0
    for d in ("sequential", "rehearsal-3", "colt"):
        summary = json.loads((out / d / "summary.json").read_text())
        assert len(summary["AA"]) == 2 and summary["AF"][0] is None
        assert (out / d / "log.jsonl").stat().st_size > 0
    audit = json.loads((out / "rehearsal-3" / "summary.json").read_text())["buffer_audit"]
    assert all(n <= 3 for step in audit for n in step.values())
    assert main(argv) == 1
    capsys.readouterr()

    assert main(["report", str(out)]) == 0
    table = capsys.readouterr().out
    assert "rehearsal:3" in table and "AF (dn)" in table
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "strategy,AA_final,AF_final"
    assert sorted(x.split(",")[0] for x in lines[1:]) == ["colt", "rehearsal:3", "sequential"]


def test_report_flags_incomplete_runs(tmp_path, config):
    out = tmp_path / "runs"
    main(["continual", "--config", str(config), "--output", str(out), "--strategy", "sequential"])
    (out / "broken").mkdir()
    (out / "broken" / "matrix.csv").write_text("k,j,accuracy\n1,1,0.5\n2,2,0.5\n")
    assert main(["report", str(out)]) == 1
    assert "sequential" in (out / "report.csv").read_text()
    assert main(["report", str(tmp_path / "nowhere")]) == 2


def test_groups_from_file(tmp_path, config):
    groups = tmp_path / "groups.yaml"
    groups.write_text(yaml.safe_dump([["ocr"], ["asr", "text-to-video", "action-recognition"]]))
    out = tmp_path / "runs"
    assert main(["continual", "--config", str(config), "--output", str(out), "--strategy", "sequential",
                 "--groups", str(groups)]) == 0
    assert json.loads((out / "sequential" / "summary.json").read_text())["groups"][0] == ["ocr"]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "toolcodebook.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("validate", "synth", "train", "continual", "report"):
        assert cmd in res.stdout


def test_registry_default_has_ten_tools():
    assert len(DEFAULT_REGISTRY) == 10
