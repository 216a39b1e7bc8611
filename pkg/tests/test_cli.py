import csv
import hashlib
import json
import subprocess
from pathlib import Path

import pydot
import pytest

from mupod.cli import main

FIX = Path(__file__).parent / "fixtures"
GEN = ["--n-patients", "60", "--n-months", "6", "--med-vocab-size", "5", "--diag-vocab-size", "5"]


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(d / "data"), "--seed", "7", *GEN]) == 0
    args = ["train", "--data", str(d / "data"), "--out", str(d / "model"), "--seed", "1",
            "--iterations", "10", "--eval-every", "5", "--pretrain-iterations", "5", "--batch-size", "16"]
    assert main(args) == 0
    return d


def test_generate_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["generate", "--out", str(tmp_path / name), "--seed", "7", *GEN]) == 0
    for f in ("patients.jsonl", "splits.json", "truth.json", "vocab.json"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 7 and man["command"] == "generate"
    assert set(man["outputs"]) == {str(tmp_path / "a" / f) for f in ("patients.jsonl", "splits.json", "truth.json", "vocab.json")}


def test_generate_line_count(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--n-patients", "2000", "--n-months", "4"]) == 0
    assert len((tmp_path / "patients.jsonl").read_text().splitlines()) == 2000


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generate": {"n_patients": 30, "n_months": 5}, "seed": 3}))
    assert main(["generate", "--out", str(tmp_path / "x"), "--config", str(cfg), "--n-months", "4"]) == 0
    first = json.loads((tmp_path / "x" / "patients.jsonl").read_text().splitlines()[0])
    assert len(first["months"]) == 4
    assert len((tmp_path / "x" / "patients.jsonl").read_text().splitlines()) == 30
    assert json.loads((tmp_path / "x" / "manifest.json").read_text())["seed"] == 3


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_values_exit_2(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--strength", "2"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["generate", "--out", str(tmp_path), "--config", str(cfg)]) == 2


def test_usage_error_exit_2():
    assert main(["train"]) == 2
    assert main(["no-such-command"]) == 2


def _preprocess(tmp_path, claims, *extra):
    return main(["preprocess", "--claims", str(claims), "--enrollees", str(FIX / "toy_enrollees.csv"),
                 "--vocab", str(FIX / "toy_vocab.json"), "--out", str(tmp_path), *extra])


def test_preprocess_matches_golden(tmp_path):
    assert _preprocess(tmp_path, FIX / "toy_claims.csv", "--min-entries", "1") == 0
    assert (tmp_path / "patients.jsonl").read_text() == (FIX / "toy_expected.jsonl").read_text()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert str(FIX / "toy_claims.csv") in man["inputs"]


def test_preprocess_drops_short_patients(tmp_path):
    assert _preprocess(tmp_path, FIX / "toy_claims.csv") == 0
    ids = [json.loads(l)["id"] for l in (tmp_path / "patients.jsonl").read_text().splitlines()]
    assert ids == ["p1", "p2"]


def test_preprocess_all_dropped_is_empty(tmp_path, caplog):
    assert _preprocess(tmp_path, FIX / "toy_claims.csv", "--min-entries", "9") == 0
    assert (tmp_path / "patients.jsonl").read_text() == ""
    assert "empty dataset" in caplog.text


def test_preprocess_schema_violation(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("enrollee_id,month,kind,code\np1,0,medication,OXY\np1,0,surgery,X\n")
    assert _preprocess(tmp_path / "o", bad) == 2
    assert "line 3" in capsys.readouterr().err


def test_preprocess_deterministic(tmp_path):
    for name in ("a", "b"):
        assert _preprocess(tmp_path / name, FIX / "toy_claims.csv", "--min-entries", "1", "--seed", "4") == 0
    assert digest(tmp_path / "a" / "splits.json") == digest(tmp_path / "b" / "splits.json")


def _rows(path):
    return list(csv.DictReader(open(path)))


def test_evaluate_repeatable(run_dir, tmp_path):
    ckpt = str(run_dir / "model" / "model.json")
    for name in ("a", "b"):
        assert main(["evaluate", "--data", str(run_dir / "data"), "--checkpoint", ckpt, "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a" / "metrics.csv") == digest(tmp_path / "b" / "metrics.csv")


def test_ratio_one_equals_plain(run_dir, tmp_path):
    ckpt = str(run_dir / "model" / "model.json")
    data = str(run_dir / "data")
    assert main(["evaluate", "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path / "p"), "--split", "train"]) == 0
    assert main(["evaluate", "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path / "r"), "--split", "train",
                 "--ratios", "1.0", "--repeats", "1"]) == 0
    plain, ratio = _rows(tmp_path / "p" / "metrics.csv")[0], _rows(tmp_path / "r" / "metrics.csv")[0]
    for k in ("precision", "recall", "f1", "auc"):
        assert plain[k] == ratio[k]


def test_explain_patient_dot(run_dir, tmp_path):
    data = str(run_dir / "data")
    pid = json.loads((run_dir / "data" / "patients.jsonl").read_text().splitlines()[0])["id"]
    assert main(["explain", "--data", data, "--checkpoint", str(run_dir / "model" / "model.json"),
                 "--out", str(tmp_path), "--patient", pid]) == 0
    assert pydot.graph_from_dot_data((tmp_path / "attention.dot").read_text())
    side = json.loads((tmp_path / "attention.json").read_text())
    assert [g["patient_id"] for g in side["graphs"]] == [pid]


def test_explain_unknown_patient(run_dir, tmp_path):
    assert main(["explain", "--data", str(run_dir / "data"), "--checkpoint", str(run_dir / "model" / "model.json"),
                 "--out", str(tmp_path), "--patient", "nobody"]) == 2


def test_checkpoint_mismatch_names_dims(run_dir, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["generate", "--out", str(other), "--n-patients", "20", "--n-months", "4", "--med-vocab-size", "7"]) == 0
    code = main(["evaluate", "--data", str(other), "--checkpoint", str(run_dir / "model" / "model.json"), "--out", str(tmp_path / "e")])
    assert code == 2
    assert "med_input_dim" in capsys.readouterr().err


def test_replay_reproduces_hashes(run_dir, capsys):
    assert main(["replay", str(run_dir / "model" / "manifest.json")]) == 0
    out = capsys.readouterr().out
    assert "MISMATCH" not in out and "model.json" in out


def test_replay_detects_tampering(run_dir, tmp_path):
    d = tmp_path / "g"
    assert main(["generate", "--out", str(d), "--seed", "2", *GEN]) == 0
    man = json.loads((d / "manifest.json").read_text())
    first = next(iter(man["outputs"]))
    man["outputs"][first] = "0" * 64
    (d / "m.json").write_text(json.dumps(man))
    assert main(["replay", str(d / "m.json")]) == 3


def test_console_script(tmp_path):
    res = subprocess.run(["mupod", "generate", "--out", str(tmp_path), *GEN], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "manifest.json").exists()
