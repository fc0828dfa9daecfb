import csv
import json
import subprocess
import sys

import pytest

from pco.cli import main, read_config_file, UsageError

TINY = ["--d-model", "8", "--n-blocks", "1", "--ff-dim", "16", "--max-len", "12", "--epochs", "2",
        "--batch-size", "8"]


@pytest.fixture()
def data(tmp_path):
    path = tmp_path / "syn.jsonl"
    assert main(["gen", "--phonemes", "4", "--utterances", "30", "--min-phones", "3", "--max-phones", "10",
                 "--seed", "5", "-o", str(path)]) == 0
    return path


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert main(["gen", "--phonemes", "10", "--utterances", "500", "--seed", "7", "-o", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text(encoding="utf-8").splitlines()) == 500
    m = json.loads((tmp_path / "a.jsonl.manifest.json").read_text(encoding="utf-8"))
    assert m["status"] == "complete" and m["config"]["seed"] == 7


def test_gen_rejects_single_phoneme(tmp_path, capsys):
    assert main(["gen", "--phonemes", "1", "-o", str(tmp_path / "x.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.jsonl"
    r = subprocess.run([sys.executable, "-m", "pco", "gen", "--utterances", "3", "-o", str(out)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert len(out.read_text(encoding="utf-8").splitlines()) == 3
    r = subprocess.run([sys.executable, "-m", "pco", "train"], capture_output=True, text=True)
    assert r.returncode == 2


def test_train_writes_per_seed_artifacts(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--seeds", "3", "--out-dir", str(out), *TINY]) == 0
    for s in range(3):
        assert (out / f"seed{s}" / "checkpoint.bin").exists()
        assert (out / f"seed{s}" / "eval.txt").exists()
    with open(out / "metrics.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["seed"] for r in rows} == {"0", "1", "2"}
    m = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert m["status"] == "complete" and m["seeds"] == [0, 1, 2]
    assert "phone" in capsys.readouterr().out

    again = tmp_path / "again"
    assert main(["train", "--data", str(data), "--seeds", "3", "--out-dir", str(again), *TINY]) == 0
    for s in range(3):
        for f in ("checkpoint.bin", "eval.txt", "geometry.txt"):
            assert (out / f"seed{s}" / f).read_bytes() == (again / f"seed{s}" / f).read_bytes()
    assert (out / "reports.csv").read_bytes() == (again / "reports.csv").read_bytes()


def test_run_dir_from_environment(tmp_path, data, monkeypatch):
    monkeypatch.setenv("PCO_RUN_DIR", str(tmp_path / "root"))
    assert main(["train", "--data", str(data), "--seeds", "1", *TINY]) == 0
    (run,) = (tmp_path / "root").iterdir()
    assert run.name.startswith("train-") and (run / "seed0" / "checkpoint.bin").exists()


def test_sweep_rows(tmp_path, data):
    out = tmp_path / "sweep.csv"
    argv = ["sweep", "--param", "lambda_d", "--values", "0,1,5,10", "--data", str(data), "--seeds", "2",
            "--out-dir", str(tmp_path / "sw"), "-o", str(out), *TINY[:-4], "--epochs", "1", "--batch-size", "8"]
    assert main(argv) == 0
    with open(out, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert [float(r["value"]) for r in rows] == [0, 0, 1, 1, 5, 5, 10, 10]


def test_sweep_rejects_empty_values(tmp_path, data, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--param", "lambda_d", "--values", "", "--data", str(data)])
    assert exc.value.code == 2


def test_export_and_evaluate(tmp_path, data, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--seeds", "1", "--out-dir", str(run), *TINY]) == 0
    ckpt = str(run / "seed0" / "checkpoint.bin")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["export-embeddings", "--checkpoint", ckpt, "--data", str(data), "-o", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text(encoding="utf-8").splitlines()
    n_tokens = sum(len(json.loads(l)["phones"]) for l in data.read_text(encoding="utf-8").splitlines())
    assert len(lines) == n_tokens + 1
    assert all(len(l.split(",")) == 4 + 8 for l in lines)
    assert lines[0].startswith("utt_id,position,phoneme_id,phone_score,e0")

    assert main(["export-embeddings", "--checkpoint", ckpt, "--data", str(data), "--d-model", "24",
                 "-o", str(tmp_path / "c.csv")]) == 2
    assert "does not match" in capsys.readouterr().err

    assert main(["evaluate", "--checkpoint", ckpt, "--data", str(data)]) == 0
    assert "phone" in capsys.readouterr().out


def test_missing_data_file(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path / "r")]) == 2


def test_config_file_defaults_and_override(tmp_path, data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# tiny run\ndata = {data}\nd-model = 8\nn_blocks = 1\nff-dim = 16\nmax-len = 12\n"
                   "epochs = 1\nseeds = 1\nlambda-d = 2.5\n", encoding="utf-8")
    out = tmp_path / "r"
    assert main(["--config", str(cfg), "train", "--lambda-d", "1.5", "--out-dir", str(out)]) == 0
    conf = json.loads((out / "manifest.json").read_text(encoding="utf-8"))["config"]
    assert conf["lambda_d"] == 1.5 and conf["d_model"] == 8 and conf["epochs"] == 1


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs 3\n", encoding="utf-8")
    with pytest.raises(UsageError, match=":1:"):
        read_config_file(bad)
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("colour = red\n", encoding="utf-8")
    with pytest.raises(SystemExit):
        main(["--config", str(unknown), "gen", "-o", str(tmp_path / "x")])
