import csv
import json

import pytest

from tabprobe import cli, expharness, toymodel


@pytest.fixture
def ckpt(tmp_path, tiny_net):
    path = tmp_path / "toy.ckpt"
    toymodel.save_checkpoint(tiny_net, path)
    return path


def test_usage_error_exit_code(capsys):
    assert cli.main(["probe", "--layer", "not-an-int"]) == 2
    assert cli.main([]) == 2


def test_domain_error_exit_code(tmp_path):
    assert cli.main(["report", "--run", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["lens", "--model", "toy:/no/such.ckpt", "--dataset", str(tmp_path)]) == 1


def test_gen_capture_probe_lens(tmp_path, ckpt):
    data = tmp_path / "data"
    ds_dir = tmp_path / "ds"
    assert cli.main(["gen", "--family", "compound", "--seed", "4", "--out", str(ds_dir)]) == 0
    assert (ds_dir / "spec.json").exists()
    model = f"toy:{ckpt}"
    common = ["--data-dir", str(data)]
    assert cli.main(["capture", "--model", model, "--dataset", str(ds_dir), "--run-id", "r", "--layers", "0,2", *common]) == 0
    assert sorted(p.name for p in (data / "r").glob("*/*.f32")) == ["L00_all.f32", "L02_all.f32"]
    assert cli.main(["probe", "--dataset", str(ds_dir), "--run-id", "r", "--layer", "2", "--target", "answer", *common]) == 0
    line = json.loads((data / "r" / "probe_results.jsonl").read_text().splitlines()[0])
    assert line["layer"] == 2 and line["target_name"] == "answer"
    assert cli.main(["probe", "--dataset", str(ds_dir), "--run-id", "r", "--layer", "5", *common]) == 1
    assert cli.main(["lens", "--model", model, "--dataset", str(ds_dir), "--out", str(tmp_path / "lens.json")]) == 0
    assert len(json.loads((tmp_path / "lens.json").read_text())["layers"]) == 4


def test_experiment_and_report(tmp_path, ckpt):
    cfg = {
        "experiment": "coeff_switch",
        "model": f"toy:{ckpt}",
        "task": {"family": "switch", "n_pairs": 4, "n_per_pair": 12, "n_test_per_pair": 8},
        "depths": [0, 1],
        "seeds": [0],
        "probe": {"width": 16, "epochs": 5},
    }
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(cfg))
    data = tmp_path / "data"
    assert cli.main(["experiment", "--config", str(cfg_path), "--run-id", "sw", "--data-dir", str(data)]) == 0
    out = tmp_path / "report"
    assert cli.main(["report", "--run", "sw", "--out", str(out), "--data-dir", str(data)]) == 0
    summary = expharness.load_summary(data / "sw")
    n_layers = len(summary["curves"]["by_layer"]["alpha"])
    with open(out / "by_layer.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "depth", "seed", "r2_test", "mse_test"]
    assert len(rows) - 1 == n_layers
    with open(out / "by_depth_beta.csv") as fh:
        assert len(list(csv.reader(fh))) - 1 == 2


def test_train_toy_smoke(tmp_path):
    cfg = {"model": {"n_layers": 2, "embed_dim": 16, "n_heads": 2}, "train": {"batch_size": 2, "n_test": 4, "warmup": 1}}
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "m.ckpt"
    assert cli.main(["train-toy", "--config", str(cfg_path), "--steps", "3", "--out", str(out)]) == 0
    state = json.loads((tmp_path / "train_state.json").read_text())
    assert state["steps"] == 3 and set(state["heldout"]) == {"linear", "compound"}
    model, _ = toymodel.load_checkpoint(out)
    assert toymodel.parameter_digest(model) == state["digest"]
