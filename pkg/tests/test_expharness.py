import json

import pytest

from tabprobe import expharness
from tabprobe.actstore import ActivationStore
from tabprobe.errors import ComparisonError, ConfigurationError
from tabprobe.expharness import ExperimentConfig

SMALL_SWITCH = {"family": "switch", "n_pairs": 4, "n_per_pair": 12, "n_test_per_pair": 8}
SMALL_COMPOUND = {"family": "compound", "n_train": 48, "n_test": 40}
PROBE = {"width": 16, "epochs": 8, "patience": 3}


def _cfg(experiment, task, run_id, **kw):
    return ExperimentConfig(
        experiment, task=task, run_id=run_id, depths=kw.pop("depths", [0, 1]), seeds=kw.pop("seeds", [0, 1]),
        probe=PROBE, **kw
    )


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig("coeff_switch", task={"family": "compound"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig("intermediary", depths=[1, 2])
    with pytest.raises(ConfigurationError):
        ExperimentConfig("telepathy")
    assert ExperimentConfig("input_copy").targets == ["input_a", "input_b", "input_c", "input_ab"]


def test_switch_run_summary(tmp_path, tiny_model):
    run = expharness.run(_cfg("coeff_switch", SMALL_SWITCH, "sw"), tmp_path, tiny_model)
    summary = json.loads((run / "summary.json").read_text())
    n_layers = tiny_model.layer_count + 1
    assert len(summary["grid"]) == 2 * n_layers * 2 * 2
    assert all(c["status"] == "completed" for c in summary["grid"])
    assert set(summary["curves"]["by_layer"]["alpha"]) == {str(L) for L in range(n_layers)}
    assert summary["best"]["alpha"]["layer"] in range(n_layers)
    assert set(summary["curves"]["by_depth"]["alpha"]) == {"0", "1"}
    assert summary["config"]["experiment"] == "coeff_switch"
    lines = (run / "results.jsonl").read_text().splitlines()
    assert len(lines) == len(summary["grid"])


def test_resume_gives_identical_summary(tmp_path, tiny_model):
    cfg = _cfg("intermediary", SMALL_COMPOUND, "inter")
    full = expharness.run(cfg, tmp_path / "a", tiny_model)
    partial = expharness.run(cfg, tmp_path / "b", tiny_model, max_cells=5)
    pending = json.loads((partial / "summary.json").read_text())["grid"]
    assert sum(c["status"] == "pending" for c in pending) == len(pending) - 5
    resumed = expharness.run(cfg, tmp_path / "b", tiny_model)
    assert (full / "summary.json").read_bytes() == (resumed / "summary.json").read_bytes()
    assert (full / "results.jsonl").read_bytes() == (resumed / "results.jsonl").read_bytes()


def test_errors_are_recorded_per_cell(tmp_path, tiny_model):
    # 10 fits give 10 probe rows, under the 20-row minimum: every cell errors, run completes
    cfg = _cfg("coeff_crossfit", {"n_datasets": 10, "n_train": 16, "n_test": 4}, "cf", depths=[0], seeds=[0])
    run = expharness.run(cfg, tmp_path, tiny_model)
    grid = json.loads((run / "summary.json").read_text())["grid"]
    assert grid and all(c["status"] == "error" and "ProbeSizeError" in c["error"] for c in grid)


def test_crossfit_run_and_digest_chain(tmp_path, tiny_model):
    cfg = _cfg("coeff_crossfit", {"n_datasets": 25, "n_train": 16, "n_test": 4}, "cf", depths=[0], seeds=[0])
    run = expharness.run(cfg, tmp_path, tiny_model)
    summary = json.loads((run / "summary.json").read_text())
    assert all(c["status"] == "completed" for c in summary["grid"])
    fits = json.loads((run / "fits.json").read_text())
    manifest = ActivationStore(tmp_path).manifest("cf")
    for line in (run / "results.jsonl").read_text().splitlines():
        prov = json.loads(line)["provenance"]
        assert len(prov["fit_digests"]) == 25
        for fit in prov["fit_digests"]:
            spec_digest = fits[fit]
            assert spec_digest in manifest["spec_digests"]
            spec = json.loads((run / "datasets" / spec_digest / "spec.json").read_text())
            assert spec["digest"] == spec_digest
            assert any(k.startswith(f"cf/{fit}/") for k in manifest["keys"])


def test_lens_run_and_compare(tmp_path, tiny_model):
    ans = expharness.run(_cfg("answer_probe", SMALL_COMPOUND, "ans"), tmp_path, tiny_model)
    lens_run = expharness.run(ExperimentConfig("logit_lens", task=SMALL_COMPOUND, run_id="lens"), tmp_path, tiny_model)
    lens_json = json.loads((lens_run / "lens.json").read_text())
    assert len(lens_json["layers"]) == tiny_model.layer_count + 1
    report = expharness.compare_answer_vs_lens(ans, lens_run)
    # an untrained model neither decodes the answer nor aligns its output head
    assert report["answer_probe_layer"] is None
    assert report["lens_convergence_layer"] is None
    assert report["gap"] is None and report["probe_before_lens"] is None
    other = expharness.run(
        ExperimentConfig("logit_lens", task={**SMALL_COMPOUND, "n_train": 50}, run_id="lens2"), tmp_path, tiny_model
    )
    with pytest.raises(ComparisonError):
        expharness.compare_answer_vs_lens(ans, other)


def test_input_copy_uses_answer_token(tmp_path, tiny_model):
    run = expharness.run(_cfg("input_copy", SMALL_COMPOUND, "copy", depths=[0], seeds=[0]), tmp_path, tiny_model)
    line = json.loads((run / "results.jsonl").read_text().splitlines()[0])
    assert line["provenance"]["tokensel"] == "answer_only"
    assert line["provenance"]["n_features"] == tiny_model.embed_dim
    summary = json.loads((run / "summary.json").read_text())
    assert set(summary["best"]) == {"input_a", "input_b", "input_c", "input_ab"}
