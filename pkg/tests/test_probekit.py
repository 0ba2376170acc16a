import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import linear_encoding_oracle, oracle_ridge
from tabprobe import probekit, synthgen
from tabprobe.actstore import ActivationRecord
from tabprobe.errors import BuildError, ConfigurationError, ProbeSizeError, SchemaError
from tabprobe.probekit import ProbeSpec, ProbingDataset


def _rec(values, roles=None, rows=None, layer=1, tokensel="all"):
    n, t, _ = values.shape
    return ActivationRecord(
        "r", "fit", layer, roles or ["feature"] * (t - 1) + ["label"], rows or ["test"] * n, values, tokensel
    )


# ---------------------------------------------------------------- builders


def test_build_crossfit_shapes_and_targets():
    rng = np.random.default_rng(0)
    recs = [_rec(rng.standard_normal((64, 3, 32)).astype(np.float32)) for _ in range(100)]
    alphas = list(rng.uniform(-2, 2, 100))
    data = probekit.build_crossfit(recs, alphas)
    assert data.shape == (100, 6144)
    np.testing.assert_array_equal(data.targets, alphas)
    # row-major (sample, token, channel)
    assert data.rows[7, 1 * 3 * 32 + 2 * 32 + 5] == recs[7].values[1, 2, 5]
    with pytest.raises(BuildError):
        probekit.build_crossfit(recs[:5], alphas[:5])
    bad = recs[:9] + [_rec(rng.standard_normal((64, 3, 16)).astype(np.float32))]
    with pytest.raises(BuildError):
        probekit.build_crossfit(bad, alphas[:10])


def test_build_withinfit(switch_ds):
    n_test = switch_ds.test_mask.sum()
    vals = np.random.default_rng(1).standard_normal((n_test, 4, 64)).astype(np.float32)
    rec = _rec(vals, roles=["feature", "feature", "switch", "label"])
    data = probekit.build_withinfit(rec, switch_ds)
    assert data.shape == (n_test, 3 * 64)
    # x, y and label tokens kept in order; switch token dropped
    np.testing.assert_array_equal(data.rows[0, 128:], vals[0, 3])
    u = switch_ds.X[switch_ds.test_mask, 2]
    for value in np.unique(u):
        assert len(np.unique(data.targets[u == value])) == 1
    with pytest.raises(BuildError):
        probekit.build_withinfit(_rec(vals, rows=["train"] + ["test"] * (n_test - 1)), switch_ds)


def test_build_withinfit_needs_switch(compound_ds):
    vals = np.zeros((40, 4, 8), np.float32)
    with pytest.raises(SchemaError):
        probekit.build_withinfit(_rec(vals), compound_ds)


def test_build_pertoken_targets(compound_ds):
    n_test = compound_ds.test_mask.sum()
    vals = np.random.default_rng(2).standard_normal((n_test, 1, 64)).astype(np.float32)
    rec = _rec(vals, roles=["label"], tokensel="answer_only")
    inter = probekit.build_pertoken_target(rec, compound_ds, "intermediary")
    X_te, z_te = compound_ds.test_xy()
    np.testing.assert_array_equal(inter.targets, X_te[:, 0] * X_te[:, 1])
    assert inter.shape[1] == 64
    np.testing.assert_array_equal(probekit.build_pertoken_target(rec, compound_ds, "answer").targets, z_te)
    np.testing.assert_array_equal(probekit.build_pertoken_target(rec, compound_ds, "input_c").targets, X_te[:, 2])
    lin = synthgen.gen_linear(1, 1, 10, n_test, seed=0)
    with pytest.raises(BuildError):
        probekit.build_pertoken_target(rec, lin, "intermediary")


def test_intermediary_example():
    ds = synthgen.gen_compound(4, 1, seed=0)
    ds.X[4, :2] = (2, 3)
    ds.intermediaries[4] = 6.0
    assert probekit.pertoken_targets(ds, "intermediary")[0] == 6.0


def test_non_finite_rejected():
    with pytest.raises(BuildError):
        ProbingDataset(np.array([[np.inf]]), np.array([1.0]), "answer", {})


# ---------------------------------------------------------------- fitting


def _linear_data(m=200, p=20, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, p)) * rng.uniform(0.5, 3, p) + rng.uniform(-2, 2, p)
    w = rng.standard_normal(p)
    y = X @ w + 0.7 + noise * rng.standard_normal(m)
    return ProbingDataset(X, y, "answer", {"layer": 3})


def test_realizable_target_is_exact():
    res = probekit.fit_probe(_linear_data(), ProbeSpec(depth=0, ridge_lambda=1e-12), 0)
    assert res.r2_test == pytest.approx(1.0, abs=1e-10)
    assert res.mse_test == pytest.approx(0.0, abs=1e-10)


def test_constant_target_r2_convention():
    data = ProbingDataset(np.random.default_rng(0).standard_normal((50, 4)), np.full(50, 3.0), "answer", {})
    res = probekit.fit_probe(data, ProbeSpec(depth=0), 0)
    assert res.r2_test == 0.0 and res.r2_train == 0.0
    res = probekit.fit_probe(data, ProbeSpec(depth=1, width=8, epochs=5), 0)
    assert res.r2_test == 0.0


@pytest.mark.parametrize("m, p", [(500, 50), (120, 10), (30, 5), (25, 40)])
def test_ridge_matches_normal_equation_oracle(m, p):
    data = _linear_data(m, p, seed=m + p, noise=0.3)
    spec = ProbeSpec(depth=0, ridge_lambda=1e-3)
    res = probekit.fit_probe(data, spec, split_seed=4)
    tr, _ = probekit.split_indices(m, 4)
    mean, std = probekit.standardize(data.rows[tr])
    w, b = oracle_ridge((data.rows[tr] - mean) / std, data.targets[tr], 1e-3)
    np.testing.assert_allclose(res.coef, w, rtol=1e-8, atol=1e-8 * np.abs(w).max())
    assert res.intercept == pytest.approx(b, rel=1e-8)


def test_permuted_targets_have_no_signal():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((200, 50))
    y = rng.permutation(X @ rng.standard_normal(50))
    data = ProbingDataset(X, y, "answer", {})
    res = probekit.fit_probe(data, ProbeSpec(depth=0), 0)
    # the oracle on the same split agrees, and both see no held-out signal
    tr, te = probekit.split_indices(200, 0)
    mean, std = probekit.standardize(X[tr])
    w, b = oracle_ridge((X[tr] - mean) / std, y[tr], 1e-3)
    oracle_r2 = probekit.r2(y[te], (X[te] - mean) / std @ w + b)
    assert res.r2_test == pytest.approx(oracle_r2, abs=1e-8)
    assert res.r2_test <= 0.05


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.01, 100).map(lambda s: s * np.random.default_rng(0).choice([-1, 1])), shift=st.floats(-50, 50))
def test_affine_invariance(scale, shift):
    data = _linear_data(120, 8, seed=2, noise=0.5)
    moved = ProbingDataset(data.rows, scale * data.targets + shift, "answer", {})
    a = probekit.fit_probe(data, ProbeSpec(depth=0), 3)
    b = probekit.fit_probe(moved, ProbeSpec(depth=0), 3)
    assert b.r2_test == pytest.approx(a.r2_test, abs=1e-10)


def test_split_hygiene():
    data = _linear_data(100, 5, seed=3)
    tr, te = probekit.split_indices(100, 7)
    assert len(te) == 20 and not set(tr) & set(te)
    mean, std = probekit.standardize(data.rows[tr])
    poisoned = data.rows.copy()
    poisoned[te] += 1e6  # test rows must not move the train statistics
    mean2, std2 = probekit.standardize(poisoned[tr])
    np.testing.assert_array_equal(mean, mean2)
    np.testing.assert_array_equal(std, std2)
    res = probekit.fit_probe(data, ProbeSpec(depth=0), 7)
    assert res.provenance["n_train"] == 80 and res.provenance["n_test"] == 20


def test_group_split_keeps_groups_together():
    groups = np.repeat(np.arange(25), 4)
    tr, te = probekit.split_indices(100, 1, groups)
    assert not set(groups[tr]) & set(groups[te])
    assert len(set(groups[te])) == 5


def test_seed_determinism_and_mlp_runs():
    data = _linear_data(150, 6, seed=5, noise=0.1)
    spec = ProbeSpec(depth=2, width=32, epochs=30)
    a = probekit.fit_probe(data, spec, 1)
    b = probekit.fit_probe(data, spec, 1)
    assert a.to_json() == b.to_json()
    assert a.r2_test > 0.5 and a.r2_test <= 1.0


def test_too_few_rows():
    data = ProbingDataset(np.zeros((19, 2)), np.arange(19.0), "answer", {})
    with pytest.raises(ProbeSizeError):
        probekit.fit_probe(data, ProbeSpec(), 0)


def test_probe_spec_validation():
    with pytest.raises(ConfigurationError):
        ProbeSpec(depth=-1)
    with pytest.raises(ConfigurationError):
        ProbeSpec(ridge_lambda=0)


def test_result_json_fields():
    res = probekit.fit_probe(_linear_data(), ProbeSpec(), 0)
    assert list(res.to_json()) == [
        "spec_digest", "target_name", "layer", "depth", "split_seed",
        "r2_train", "r2_test", "mse_train", "mse_test", "provenance",
    ]
    assert res.provenance["ridge_lambda"] == 1e-3


def test_complexity_sweep_contract_and_linear_oracle():
    data = linear_encoding_oracle()
    results = probekit.complexity_sweep(data, [0, 1, 2, 3], [0, 1, 2], ProbeSpec(width=64, epochs=60))
    assert len(results) == 12
    assert {(r.depth, r.split_seed) for r in results} == {(d, s) for d in range(4) for s in range(3)}
    for seed in range(3):
        sizes = {r.provenance["n_test"] for r in results if r.split_seed == seed}
        assert len(sizes) == 1
    mean = {d: np.mean([r.r2_test for r in results if r.depth == d]) for d in range(4)}
    assert mean[0] >= mean[3] - 0.02
    with pytest.raises(ConfigurationError):
        probekit.complexity_sweep(data, [1, 2], [0])
    with pytest.raises(ConfigurationError):
        probekit.complexity_sweep(data, [0, 2, 1], [0])
