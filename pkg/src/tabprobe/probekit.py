"""Probing datasets built from captured activations, and the probes trained on them.

A depth-0 probe is ridge regression solved in closed form; depth >= 1 is an
MLP with that many ReLU hidden layers, trained with Adam and early stopping.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import torch
from torch import nn

from .actstore import ActivationRecord
from .errors import BuildError, ConfigurationError, DivergenceError, ProbeSizeError, SchemaError
from .synthgen import TabularDataset

TARGETS = ("alpha", "beta", "answer", "intermediary", "input_a", "input_b", "input_c", "input_ab")
MIN_ROWS = 20
TEST_FRACTION = 0.2
VAL_FRACTION = 0.2


@dataclass
class ProbingDataset:
    rows: np.ndarray  # (m, p)
    targets: np.ndarray  # (m,)
    target_name: str
    provenance: dict
    groups: np.ndarray | None = None  # rows sharing a group never straddle the split

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.target_name not in TARGETS:
            raise BuildError(f"unknown target {self.target_name!r}")
        if self.rows.ndim != 2 or len(self.rows) != len(self.targets):
            raise BuildError(f"rows {self.rows.shape} do not match targets {self.targets.shape}")
        if not (np.isfinite(self.rows).all() and np.isfinite(self.targets).all()):
            raise BuildError("probing dataset contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


@dataclass(frozen=True)
class ProbeSpec:
    depth: int = 0
    width: int = 256
    ridge_lambda: float = 1e-3
    epochs: int = 200
    patience: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ConfigurationError("probe depth must be >= 0")
        if self.ridge_lambda <= 0:
            raise ConfigurationError("ridge lambda must be > 0")

    @property
    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class ProbeResult:
    spec_digest: str
    target_name: str
    layer: int | None
    depth: int
    split_seed: int
    r2_train: float
    r2_test: float
    mse_train: float
    mse_test: float
    provenance: dict
    coef: np.ndarray | None = field(default=None, repr=False)
    intercept: float | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "spec_digest": self.spec_digest,
            "target_name": self.target_name,
            "layer": self.layer,
            "depth": self.depth,
            "split_seed": self.split_seed,
            "r2_train": self.r2_train,
            "r2_test": self.r2_test,
            "mse_train": self.mse_train,
            "mse_test": self.mse_test,
            "provenance": self.provenance,
        }


# ---------------------------------------------------------------- builders


def build_crossfit(
    records: Sequence[ActivationRecord], targets: Sequence[float], target_name: str = "alpha"
) -> ProbingDataset:
    """One row per fit: the whole (sample, token, channel) grid flattened row-major."""
    if len(records) < 10:
        raise BuildError(f"cross-fit probing needs >= 10 fits, got {len(records)}")
    if len(targets) != len(records):
        raise BuildError("one target per fit is required")
    shape = records[0].shape
    for r in records:
        if r.shape != shape:
            raise BuildError(f"fit {r.fit_digest} has shape {r.shape}, expected {shape}")
    rows = np.stack([r.values.reshape(-1) for r in records])
    provenance = {
        "config": "crossfit",
        "layer": records[0].layer,
        "tokensel": records[0].tokensel,
        "flatten_order": "sample,token,channel",
        "fit_digests": [r.fit_digest for r in records],
    }
    return ProbingDataset(rows, np.asarray(targets, dtype=float), target_name, provenance, np.arange(len(records)))


def _require_test_rows(record: ActivationRecord) -> None:
    if any(role != "test" for role in record.row_roles):
        raise BuildError("probing uses held-out test rows only; record contains train rows")


def build_withinfit(record: ActivationRecord, dataset: TabularDataset, target_name: str = "alpha") -> ProbingDataset:
    """Per test row: every token except the switch token, flattened (token, channel)."""
    u_col = dataset.switch_column
    if u_col is None:
        raise SchemaError("within-fit probing needs a dataset with a switch column")
    if target_name not in ("alpha", "beta"):
        raise BuildError(f"within-fit targets are alpha or beta, not {target_name!r}")
    _require_test_rows(record)
    if record.tokensel != "all":
        raise BuildError("within-fit probing needs all tokens")
    keep = [i for i in range(record.shape[1]) if i != u_col]
    rows = record.values[:, keep].reshape(record.shape[0], -1)
    coeffs = dataset.coefficients_per_row()[dataset.test_mask]
    if len(coeffs) != len(rows):
        raise BuildError(f"record has {len(rows)} rows, dataset has {len(coeffs)} test rows")
    provenance = {
        "config": "withinfit",
        "layer": record.layer,
        "tokensel": "all_but_switch",
        "flatten_order": "token,channel",
        "fit_digests": [record.fit_digest],
        "spec_digest": dataset.spec_digest,
    }
    return ProbingDataset(rows, coeffs[:, 0 if target_name == "alpha" else 1], target_name, provenance)


def pertoken_targets(dataset: TabularDataset, target_name: str) -> np.ndarray:
    mask = dataset.test_mask
    fam = dataset.spec.family
    X = dataset.X[mask]
    if target_name == "answer":
        return dataset.z[mask]
    if target_name in ("alpha", "beta") and fam in ("linear", "switch"):
        return dataset.coefficients_per_row()[mask][:, 0 if target_name == "alpha" else 1]
    if fam != "compound":
        raise BuildError(f"target {target_name!r} is unavailable for the {fam} family")
    if target_name == "intermediary":
        return dataset.intermediaries[mask]
    if target_name == "input_ab":
        return X[:, 0] * X[:, 1]
    cols = {"input_a": 0, "input_b": 1, "input_c": 2}
    if target_name in cols:
        return X[:, cols[target_name]]
    raise BuildError(f"target {target_name!r} is unavailable for the {fam} family")


def build_pertoken_target(record: ActivationRecord, dataset: TabularDataset, target_name: str) -> ProbingDataset:
    """Per test row: the record's token selection flattened (token, channel)."""
    _require_test_rows(record)
    targets = pertoken_targets(dataset, target_name)
    if len(targets) != record.shape[0]:
        raise BuildError(f"record has {record.shape[0]} rows, dataset has {len(targets)} test rows")
    provenance = {
        "config": "pertoken",
        "layer": record.layer,
        "tokensel": record.tokensel,
        "flatten_order": "token,channel",
        "fit_digests": [record.fit_digest],
        "spec_digest": dataset.spec_digest,
    }
    return ProbingDataset(record.values.reshape(record.shape[0], -1), targets, target_name, provenance)


# ---------------------------------------------------------------- fitting


def r2(y: np.ndarray, pred: np.ndarray) -> float:
    """1 - SSE/SST on the evaluated rows; 0 when SST is 0."""
    y = np.asarray(y, dtype=float)
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return 0.0
    return 1.0 - float(((y - pred) ** 2).sum()) / sst


def mse(y: np.ndarray, pred: np.ndarray) -> float:
    return float(np.mean((np.asarray(y, dtype=float) - pred) ** 2))


def split_indices(m: int, split_seed: int, groups: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """80/20 train/test split, by group when groups are given."""
    rng = np.random.default_rng(split_seed)
    if groups is None:
        perm = rng.permutation(m)
        n_test = max(1, int(round(TEST_FRACTION * m)))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    uniq = np.unique(groups)
    perm = rng.permutation(uniq)
    n_test = max(1, int(round(TEST_FRACTION * len(uniq))))
    test_groups = perm[:n_test]
    is_test = np.isin(groups, test_groups)
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def standardize(train: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and stds of the train split; constant columns get std 1."""
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Ridge with an unpenalized intercept.

    Centering makes the intercept exactly the target mean; the weights solve
    (XᵀX + λI) w = Xᵀy, or the equivalent dual system when p > m.
    """
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    m, p = Xc.shape
    if p <= m:
        A = Xc.T @ Xc
        A[np.diag_indices_from(A)] += lam
        w = scipy.linalg.solve(A, Xc.T @ yc, assume_a="pos")
    else:
        K = Xc @ Xc.T
        K[np.diag_indices_from(K)] += lam
        w = Xc.T @ scipy.linalg.solve(K, yc, assume_a="pos")
    return w, float(y_mean - x_mean @ w)


def _mlp(p: int, depth: int, width: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d_in = p
    for _ in range(depth):
        layers += [nn.Linear(d_in, width), nn.ReLU()]
        d_in = width
    layers.append(nn.Linear(d_in, 1))
    return nn.Sequential(*layers).double()


def _train_mlp(X: np.ndarray, y: np.ndarray, spec: ProbeSpec) -> nn.Sequential:
    gen = torch.Generator().manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(X))
    n_val = max(1, int(round(VAL_FRACTION * len(X))))
    val, fit = perm[:n_val], perm[n_val:]
    Xt, yt = torch.as_tensor(X[fit]), torch.as_tensor(y[fit])
    Xv, yv = torch.as_tensor(X[val]), torch.as_tensor(y[val])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        net = _mlp(X.shape[1], spec.depth, spec.width)
    opt = torch.optim.Adam(net.parameters(), lr=spec.lr)
    best = (float("inf"), None)
    stale = 0
    for _ in range(spec.epochs):
        net.train()
        order = torch.randperm(len(Xt), generator=gen)
        for start in range(0, len(order), spec.batch_size):
            idx = order[start : start + spec.batch_size]
            loss = torch.mean((net(Xt[idx]).squeeze(-1) - yt[idx]) ** 2)
            if not torch.isfinite(loss):
                raise DivergenceError("probe training produced a non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            val_loss = float(torch.mean((net(Xv).squeeze(-1) - yv) ** 2))
        if val_loss < best[0]:
            best = (val_loss, {k: v.clone() for k, v in net.state_dict().items()})
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    net.load_state_dict(best[1])
    net.eval()
    return net


def fit_probe(data: ProbingDataset, spec: ProbeSpec, split_seed: int) -> ProbeResult:
    m = len(data.targets)
    if m < MIN_ROWS:
        raise ProbeSizeError(f"probing needs >= {MIN_ROWS} rows, got {m}")
    tr, te = split_indices(m, split_seed, data.groups)
    mean, std = standardize(data.rows[tr])
    Xtr = (data.rows[tr] - mean) / std
    Xte = (data.rows[te] - mean) / std
    ytr, yte = data.targets[tr], data.targets[te]
    coef = intercept = None
    if spec.depth == 0:
        coef, intercept = ridge_fit(Xtr, ytr, spec.ridge_lambda)
        ptr, pte = Xtr @ coef + intercept, Xte @ coef + intercept
    else:
        y_mu, y_sd = ytr.mean(), ytr.std() or 1.0
        net = _train_mlp(Xtr, (ytr - y_mu) / y_sd, spec)
        with torch.no_grad():
            ptr = net(torch.as_tensor(Xtr)).squeeze(-1).numpy() * y_sd + y_mu
            pte = net(torch.as_tensor(Xte)).squeeze(-1).numpy() * y_sd + y_mu
    provenance = dict(data.provenance)
    provenance.update(
        {
            "ridge_lambda": spec.ridge_lambda if spec.depth == 0 else None,
            "width": spec.width if spec.depth > 0 else None,
            "n_train": int(len(tr)),
            "n_test": int(len(te)),
            "n_features": int(data.rows.shape[1]),
        }
    )
    return ProbeResult(
        spec.digest,
        data.target_name,
        data.provenance.get("layer"),
        spec.depth,
        split_seed,
        r2(ytr, ptr),
        r2(yte, pte),
        mse(ytr, ptr),
        mse(yte, pte),
        provenance,
        coef,
        intercept,
    )


def complexity_sweep(
    data: ProbingDataset,
    depths: Sequence[int],
    seeds: Sequence[int],
    base: ProbeSpec | None = None,
) -> list[ProbeResult]:
    """One result per (depth, seed); a given seed uses the same split at every depth."""
    depths = list(depths)
    if 0 not in depths or depths != sorted(depths):
        raise ConfigurationError("depths must be sorted ascending and include 0")
    base = base or ProbeSpec()
    out = []
    for seed in seeds:
        for depth in depths:
            spec = ProbeSpec(**{**asdict(base), "depth": depth, "seed": seed})
            out.append(fit_probe(data, spec, seed))
    return out
