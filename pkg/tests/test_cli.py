import json
import subprocess
import sys

import pytest

from fgmn import cli

TINY_MODEL = {"hidden": 8, "rank": 4, "mlp_hidden": 8, "iterations": 2, "max_atoms": 10, "k_clusters": 4}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def dataset(tmp_path):
    cfg = write_config(tmp_path, {"dataset": {"count": 12, "min_heavy": 4, "max_heavy": 7}}, "data_cfg.json")
    out = tmp_path / "data.jsonl"
    assert cli.main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    return out


def test_gen_data(dataset, capsys):
    lines = dataset.read_text().splitlines()
    assert len(lines) == 12
    assert {"smiles", "formula", "peaks", "matrix", "n_atoms"} <= set(json.loads(lines[0]))


def test_decode_noise_writes_report_and_figure(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path, {"noise": {"trials": 2, "decode_rounds": 2}})
    out = tmp_path / "noise.json"
    code = cli.main(["decode-noise", "--config", cfg, "--data", str(dataset), "--beta", "0.5", "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert {r["combination"] for r in doc["rows"]} == {"initial", "sum", "multiply"}
    assert all(r["beta"] == 0.5 for r in doc["rows"])
    assert len(doc["dataset_hash"]) == 40
    assert out.with_suffix(".png").stat().st_size > 0
    assert out.with_suffix(".tsv").read_text().startswith("beta\tcombination")
    assert "multiply" in capsys.readouterr().out


def test_train_then_eval(tmp_path, dataset):
    cfg = write_config(tmp_path, {"model": TINY_MODEL, "training": {"epochs": 2, "batch_size": 4},
                                  "split": {"test_fraction": 0.25}})
    ckpt = tmp_path / "model.json"
    assert cli.main(["train", "--config", cfg, "--data", str(dataset), "--sharing", "high",
                     "--out", str(ckpt)]) == 0
    doc = json.loads(ckpt.read_text())
    assert doc["config"]["sharing_b"] == "high"
    history = tmp_path / "model.history.json"
    assert len(json.loads(history.read_text())["rows"]) == 2
    assert history.with_suffix(".png").exists()

    report = tmp_path / "eval.json"
    assert cli.main(["eval", "--data", str(dataset), "--checkpoint", str(ckpt), "--ablate-type-a",
                     "--out", str(report)]) == 0
    rows = json.loads(report.read_text())["rows"]
    assert [r["variant"] for r in rows] == ["full", "no_type_a"]


def test_ablate(tmp_path, dataset):
    cfg = write_config(tmp_path, {"model": TINY_MODEL, "training": {"epochs": 1, "batch_size": 8},
                                  "ablation": {"variants": ["medium", "no_type_a", "no_bc"]},
                                  "split": {"test_fraction": 0.25}})
    out = tmp_path / "abl.json"
    assert cli.main(["ablate", "--config", cfg, "--data", str(dataset), "--seed", "2", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert [r["variant"] for r in rows] == ["medium", "no_type_a", "no_bc"]
    assert all(r["seed"] == 2 for r in rows)
    assert out.with_suffix(".png").exists()


def test_oracle_check(tmp_path, capsys):
    cfg = write_config(tmp_path, {"oracles": {"valence_cases": 20, "tree_cases": 5, "lowrank_cases": 10}})
    out = tmp_path / "oracles.json"
    assert cli.main(["oracle-check", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert all(r["passed"] for r in doc["rows"])
    assert "PASS" in capsys.readouterr().out


def test_no_figures_flag(tmp_path, dataset):
    cfg = write_config(tmp_path, {"noise": {"trials": 1}})
    out = tmp_path / "noise.json"
    assert cli.main(["decode-noise", "--config", cfg, "--data", str(dataset), "--beta", "1",
                     "--no-figures", "--out", str(out)]) == 0
    assert not out.with_suffix(".png").exists()


# --- exit codes


@pytest.mark.parametrize("doc", [
    {"dataset": {"count": 3, "colour": "red"}},
    {"nonsense": {}},
    {"dataset": {"min_heavy": 3}},
    [1, 2, 3],
])
def test_invalid_config_exits_2(tmp_path, doc, capsys):
    cfg = write_config(tmp_path, doc)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path, dataset):
    assert cli.main(["gen-data", "--config", str(tmp_path / "absent.json")]) == 2
    assert cli.main(["decode-noise", "--data", str(tmp_path / "absent.jsonl")]) == 2
    assert cli.main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "absent.json")]) == 2


def test_bad_values_exit_2(tmp_path, dataset):
    assert cli.main(["decode-noise", "--data", str(dataset), "--beta", "-1"]) == 2
    cfg = write_config(tmp_path, {"split": {"test_fraction": 1.5}})
    assert cli.main(["train", "--config", cfg, "--data", str(dataset)]) == 2
    cfg = write_config(tmp_path, {"training": {"optimizer": "lbfgs"}})
    assert cli.main(["train", "--config", cfg, "--data", str(dataset)]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"smiles": "C(", "peaks": [], "matrix": [], "n_atoms": 0}\n')
    assert cli.main(["decode-noise", "--data", str(bad)]) == 2


def test_runtime_error_exits_1(tmp_path, monkeypatch, capsys):
    def boom(spec):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "generate_dataset", boom)
    assert cli.main(["gen-data", "--out", str(tmp_path / "x.jsonl")]) == 1
    assert "disk on fire" in capsys.readouterr().err


def test_argparse_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])  # --data is required
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x", "--sharing", "extreme"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.jsonl"
    cfg = write_config(tmp_path, {"dataset": {"count": 2}})
    proc = subprocess.run([sys.executable, "-m", "fgmn", "gen-data", "--config", cfg, "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(out.read_text().splitlines()) == 2
