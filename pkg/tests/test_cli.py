import json
import os

import pytest

from cohhgn import cli

SMALL_TRAIN = ["--d", "8", "--heads", "2", "--time-dim", "4", "--epochs", "2", "--batch-size", "32",
               "--n-layers", "1"]


def run(root, *argv):
    return cli.main([argv[0], "--data-dir", str(root), *argv[1:]])


def pipeline(root, capsys):
    assert run(root, "synth", "--n-sessions", "400", "--n-items", "15", "--seed", "2") == 0
    assert run(root, "ingest", "--price-bins", "4", "--min-freq", "3") == 0
    assert run(root, "build-graphs", "--epsilon", "2", "--top-n", "5") == 0
    assert run(root, "train", *SMALL_TRAIN) == 0
    capsys.readouterr()
    assert run(root, "evaluate") == 0
    return capsys.readouterr().out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")

    class Cap:  # module-scoped stand-in for capsys
        @staticmethod
        def readouterr():
            return type("o", (), {"out": ""})()

    pipeline(root, Cap)
    return root


def test_pipeline_writes_every_artifact(workdir):
    for rel in ("corpus.csv", "sessions.jsonl", "vocab.json", "split.json", "ingest.json",
                "graphs/graphs.json", "run/model.ckpt", "run/metrics.jsonl", "run/report_test.json"):
        assert (workdir / rel).exists(), rel
    manifest = json.loads((workdir / "manifest.json").read_text())
    assert set(manifest["steps"]) == {"synth", "ingest", "build-graphs", "train", "evaluate:test"}
    train = manifest["steps"]["train"]
    assert train["config"]["epsilon"] == 2 and train["config"]["n_price_bins"] == 4
    assert "run/model.ckpt" in train["outputs"]
    assert len(train["outputs"]["run/model.ckpt"]) == 64


def test_evaluate_prints_table(workdir, capsys):
    assert run(workdir, "evaluate", "--split", "validation") == 0
    head = capsys.readouterr().out.splitlines()[0]
    for col in ("P@10", "P@20", "M@10", "M@20"):
        assert col in head


def test_rerun_is_byte_identical(tmp_path, capsys, workdir):
    table = pipeline(tmp_path, capsys)
    for rel in ("run/model.ckpt", "run/report_test.json", "run/metrics.jsonl", "graphs/global_id.txt"):
        assert (tmp_path / rel).read_bytes() == (workdir / rel).read_bytes(), rel
    assert "P@10" in table


def test_recommend_top_three(workdir, capsys):
    vocab = json.loads((workdir / "vocab.json").read_text())
    items = vocab["id"][:2]
    assert run(workdir, "recommend", "--items", ",".join(items), "--week", "50", "--gender", "F",
               "--region", "Kanto", "-k", "3") == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 3
    probs = [float(p) for _, p in rows]
    assert probs == sorted(probs, reverse=True) and 0 < sum(probs) <= 1.0 + 1e-6


def test_error_exit_codes(workdir, tmp_path, capsys):
    assert run(workdir, "train", *SMALL_TRAIN, "--epsilon", "7") == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[config]: ") and "\n" not in err
    assert run(workdir, "evaluate", "--checkpoint", "nope.ckpt") == 3
    assert capsys.readouterr().err.startswith("error[data]: ")
    assert run(tmp_path, "ingest") == 3
    assert run(workdir, "recommend", "--items", "x", "--week", "1", "--gender", "F", "--region", "Kanto",
               "-k", "0") == 2


def test_gradcheck_failure_exits_numeric(monkeypatch, tmp_path, capsys):
    class Bad:
        passed = False

        def lines(self):
            return ["W1 FAIL"]

    monkeypatch.setattr(cli.gc, "run", lambda seed=0: Bad())
    assert run(tmp_path, "gradcheck") == 4
    assert capsys.readouterr().err.startswith("error[numeric]: ")


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "synth": {"n_sessions": 30, "n_items": 5}}))
    assert run(tmp_path, "synth", "--config", str(cfg), "--n-sessions", "40") == 0
    step = json.loads((tmp_path / "manifest.json").read_text())["steps"]["synth"]["config"]
    assert step["n_sessions"] == 40 and step["n_items"] == 5 and step["seed"] == 3
    assert step["pattern_strength"] == 0.9
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(tmp_path, "synth", "--config", str(cfg)) == 2


def test_data_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("COHHGN_DATA_DIR", str(tmp_path))
    assert cli.main(["synth", "--n-sessions", "20", "--n-items", "5"]) == 0
    assert (tmp_path / "corpus.csv").exists()
    assert os.path.exists(tmp_path / "manifest.json")
