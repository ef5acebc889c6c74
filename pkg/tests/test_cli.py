import csv
import io
import json
import subprocess
import sys

import pytest

from lassornet import __version__
from lassornet.cli import main

SYNTH = {"n_people": 12, "n_samples": 6, "n_genes": 12, "n_rhythmic": 6, "noise_sd": 0.1, "sample_interval": 4}
QUICK = {
    "search": {"n_trials": 2, "max_epochs": 20, "patience": 10, "hidden_sizes": [3], "output_sizes": [2]},
    "en_n_lambda": 5,
    "en_alphas": [1.0],
    "plsr_latents": [1, 2],
    "plsr_ks": [6],
}


def run(*argv, stdin=None):
    return subprocess.run(
        [sys.executable, "-m", "lassornet", *map(str, argv)], input=stdin, capture_output=True, text=True
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "synth.json").write_text(json.dumps({"synth": SYNTH}))
    assert main(["synth", "--config", str(d / "synth.json"), "--seed", "3", "--out", str(d / "cohort.csv")]) == 0
    cfg = {"data": "cohort.csv", "method": "lassornet",
           "hyperparameters": {"lam": 1e-3, "tau": 1.0, "step_size": 0.03, "max_epochs": 20, "patience": 10,
                               "hidden_size": 3, "output_size": 2},
           "options": QUICK}
    (d / "train.json").write_text(json.dumps(cfg))
    (d / "eval.json").write_text(json.dumps({"data": "cohort.csv", "options": QUICK,
                                             "methods": ["intercept", "plsr", "lassornet"]}))
    return d


def test_version_json():
    r = run("--version")
    assert r.returncode == 0
    assert json.loads(r.stdout) == {"name": "lassornet", "version": __version__}


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--bogus"], ["evaluate", "--repeats", "0"]])
def test_usage_errors_exit_1(argv):
    assert run(*argv).returncode == 1


def test_missing_files_exit_2(tmp_path):
    r = run("train", "--config", tmp_path / "absent.json")
    assert r.returncode == 2
    r = run("predict", "--model", tmp_path / "absent.json", "--data", tmp_path / "absent.csv")
    assert r.returncode == 2


def test_no_cohort_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    assert run("train", "--config", tmp_path / "c.json").returncode == 1


def test_synth_writes_provenance(workspace):
    text = (workspace / "cohort.csv").read_text()
    assert text.startswith("# seed=3 config_digest=")
    assert f"version={__version__}" in text.splitlines()[0]


def test_train_then_predict(workspace):
    model = workspace / "model.json"
    assert main(["train", "--config", str(workspace / "train.json"), "--seed", "1", "--out", str(model)]) == 0
    doc = json.loads(model.read_text())
    assert doc["method"] == "lassornet" and doc["variant"] == "augmented"
    out = workspace / "pred.csv"
    assert main(["predict", "--model", str(model), "--data", str(workspace / "cohort.csv"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("#")
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert list(rows[0]) == ["person_id", "sample_index", "zt", "predicted_ict", "flagged", "predicted_dlmo"]
    assert len(rows) == 12 * 6
    for row in rows:
        if row["flagged"] == "0":
            assert 0.0 <= float(row["predicted_ict"]) < 24.0


def test_predict_reports_missing_gene(workspace, tmp_path):
    model = tmp_path / "model.json"
    assert main(["train", "--config", str(workspace / "train.json"), "--out", str(model)]) == 0
    text = (workspace / "cohort.csv").read_text().replace(",g03,", ",g99,")
    data = tmp_path / "other.csv"
    data.write_text(text)
    r = run("predict", "--model", model, "--data", data)
    assert r.returncode == 2
    assert "g03" in r.stderr


def test_evaluate_is_byte_identical_and_reports(workspace, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}.jsonl"
        assert main(["evaluate", "--config", str(workspace / "eval.json"), "--seed", "4", "--repeats", "2",
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    records = [json.loads(line) for line in outs[0].decode().splitlines() if line.strip()]
    assert sorted({(r["method"], r["seed"]) for r in records}) == sorted(
        (m, s) for m in ("intercept", "plsr", "lassornet") for s in (4, 5)
    )
    r = run("report", "--in", tmp_path / "r0.jsonl")
    assert r.returncode == 0
    assert "MAE_ICT" in r.stdout and "lassornet" in r.stdout and __version__ in r.stdout


def test_search_writes_audit(workspace, tmp_path):
    audit = tmp_path / "audit.jsonl"
    model = tmp_path / "m.json"
    assert main(["search", "--config", str(workspace / "train.json"), "--audit", str(audit), "--out", str(model)]) == 0
    trials = [json.loads(x) for x in audit.read_text().splitlines() if x.strip()]
    assert len(trials) == QUICK["search"]["n_trials"]
    assert json.loads(model.read_text())["hyperparameters"]["trials"] == 2
