import json

import pytest

from tabprobe import expharness, report
from tabprobe.errors import ConfigurationError
from tabprobe.expharness import ExperimentConfig


def test_lens_report(tmp_path, tiny_model):
    run = expharness.run(
        ExperimentConfig("logit_lens", task={"family": "compound", "n_train": 48, "n_test": 24}, run_id="L"),
        tmp_path,
        tiny_model,
    )
    files = report.render(run, tmp_path / "out")
    lines = (tmp_path / "out" / "lens.csv").read_text().splitlines()
    assert lines[0] == "layer,mse,r2,converged"
    assert len(lines) == tiny_model.layer_count + 2
    assert lines[-1].endswith("true")
    assert tmp_path / "out" / "lens.csv" in files


def test_report_is_deterministic(tmp_path, tiny_model):
    cfg = ExperimentConfig(
        "input_copy", task={"family": "compound", "n_train": 48, "n_test": 24}, run_id="c", depths=[0], seeds=[0]
    )
    run = expharness.run(cfg, tmp_path, tiny_model)
    report.render(run, tmp_path / "o1")
    report.render(run, tmp_path / "o2")
    for name in ("by_layer.csv", "by_layer_input_ab.csv", "by_depth_input_c.csv"):
        assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o2" / name).read_bytes()
    assert (tmp_path / "o1" / "by_layer.csv").read_text() == (tmp_path / "o1" / "by_layer_input_a.csv").read_text()


def test_missing_summary(tmp_path):
    with pytest.raises(ConfigurationError):
        report.render(tmp_path, tmp_path / "o")
