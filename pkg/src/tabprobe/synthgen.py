"""Seeded synthetic regression tasks: linear, switch and compound families.

Every generator is a pure function of its arguments; the same spec and seed
always produce bit-identical arrays.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

FAMILIES = ("linear", "switch", "compound")

DEFAULT_RANGE = (-1.0, 1.0)
DEFAULT_COEFF_RANGE = (-2.0, 2.0)

Range = tuple[float, float]


@dataclass(frozen=True)
class TaskSpec:
    family: str
    coefficient_table: tuple[tuple[float, ...], ...]
    input_ranges: tuple[Range, ...]
    n_train: int
    n_test: int
    seed: int
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_train", "n_test", "seed"):
            object.__setattr__(self, name, int(getattr(self, name)))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.n_train < 2:
            raise ConfigurationError(f"n_train must be >= 2, got {self.n_train}")
        if self.n_test < 1:
            raise ConfigurationError(f"n_test must be >= 1, got {self.n_test}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        for lo, hi in self.input_ranges:
            if not lo < hi:
                raise ConfigurationError(f"invalid input range ({lo}, {hi})")
        if self.family == "switch":
            ids = [int(row[0]) for row in self.coefficient_table]
            if ids != list(range(len(ids))):
                raise ConfigurationError("switch ids must be consecutive integers 0..S-1")
            pairs = [tuple(row[1:]) for row in self.coefficient_table]
            if len(pairs) < 2:
                raise ConfigurationError("switch table needs at least 2 coefficient pairs")
            if len(set(pairs)) != len(pairs):
                raise ConfigurationError("switch table has duplicate coefficient pairs")

    def to_json(self) -> dict:
        d = asdict(self)
        d["coefficient_table"] = [list(r) for r in self.coefficient_table]
        d["input_ranges"] = [list(r) for r in self.input_ranges]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(
            family=d["family"],
            coefficient_table=tuple(tuple(r) for r in d["coefficient_table"]),
            input_ranges=tuple((float(lo), float(hi)) for lo, hi in d["input_ranges"]),
            n_train=int(d["n_train"]),
            n_test=int(d["n_test"]),
            seed=int(d["seed"]),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
        )

    @property
    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    @property
    def alpha(self) -> float:
        if self.family != "linear":
            raise AttributeError("alpha is defined for the linear family only")
        return float(self.coefficient_table[0][0])

    @property
    def beta(self) -> float:
        if self.family != "linear":
            raise AttributeError("beta is defined for the linear family only")
        return float(self.coefficient_table[0][1])


@dataclass
class TabularDataset:
    X: np.ndarray
    z: np.ndarray
    feature_names: tuple[str, ...]
    column_roles: tuple[str, ...]
    split: np.ndarray  # "train" / "test" per row
    spec: TaskSpec
    intermediaries: np.ndarray | None = None
    spec_digest: str = field(init=False)

    def __post_init__(self) -> None:
        self.spec_digest = self.spec.digest

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def train_mask(self) -> np.ndarray:
        return self.split == "train"

    @property
    def test_mask(self) -> np.ndarray:
        return self.split == "test"

    @property
    def switch_column(self) -> int | None:
        return self.column_roles.index("switch") if "switch" in self.column_roles else None

    def train_xy(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.train_mask
        return self.X[m], self.z[m]

    def test_xy(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.test_mask
        return self.X[m], self.z[m]

    def coefficients_per_row(self) -> np.ndarray:
        """(n_rows, 2) array of the (alpha, beta) that generated each row."""
        table = self.spec.coefficient_table
        if self.spec.family == "linear":
            return np.tile(np.array(table[0], dtype=float), (len(self.z), 1))
        if self.spec.family == "switch":
            lookup = np.array([row[1:] for row in table], dtype=float)
            return lookup[self.X[:, self.switch_column].astype(int)]
        raise ConfigurationError("compound tasks have no coefficients")


def _ranges(ranges: Sequence[Range] | None, d: int) -> tuple[Range, ...]:
    if ranges is None:
        return (DEFAULT_RANGE,) * d
    ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
    if len(ranges) == 1 and d > 1:
        ranges = ranges * d
    if len(ranges) != d:
        raise ConfigurationError(f"expected {d} input ranges, got {len(ranges)}")
    for lo, hi in ranges:
        if not lo < hi:
            raise ConfigurationError(f"invalid input range ({lo}, {hi})")
    return ranges


def _uniform(rng: np.random.Generator, n: int, ranges: tuple[Range, ...]) -> np.ndarray:
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return lo + (hi - lo) * rng.random((n, len(ranges)))


def _noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    return sigma * rng.standard_normal(n) if sigma > 0 else np.zeros(n)


def _split(n_train: int, n_test: int) -> np.ndarray:
    return np.array(["train"] * n_train + ["test"] * n_test)


def gen_linear(
    alpha: float,
    beta: float,
    n_train: int,
    n_test: int,
    seed: int,
    ranges: Sequence[Range] | None = None,
    noise_sigma: float = 0.0,
) -> TabularDataset:
    """z = alpha * x + beta * y on uniformly sampled (x, y)."""
    spec = TaskSpec(
        "linear", ((float(alpha), float(beta)),), _ranges(ranges, 2), n_train, n_test, seed, noise_sigma
    )
    rng = np.random.default_rng(seed)
    X = _uniform(rng, n_train + n_test, spec.input_ranges)
    z = alpha * X[:, 0] + beta * X[:, 1]
    z = z + _noise(rng, len(z), noise_sigma)
    return TabularDataset(X, z, ("x", "y"), ("input", "input"), _split(n_train, n_test), spec)


def gen_switch(
    coefficient_table: Sequence[tuple[int, float, float]],
    n_per_pair: int,
    n_test_per_pair: int,
    seed: int,
    ranges: Sequence[Range] | None = None,
    noise_sigma: float = 0.0,
) -> TabularDataset:
    """One dataset holding several linear maps, selected by an integer switch column u.

    Train and test rows are stratified per pair, then shuffled within each
    split by a seed-derived permutation.
    """
    table = tuple((int(u), float(a), float(b)) for u, a, b in coefficient_table)
    n_pairs = len(table)
    spec = TaskSpec(
        "switch",
        table,
        _ranges(ranges, 2),
        n_per_pair * n_pairs,
        n_test_per_pair * n_pairs,
        seed,
        noise_sigma,
    )
    if n_per_pair < 1:
        raise ConfigurationError("n_per_pair must be >= 1")
    rng = np.random.default_rng(seed)
    coeffs = np.array([row[1:] for row in table])
    parts = []
    for n_each in (n_per_pair, n_test_per_pair):
        u = np.repeat(np.arange(n_pairs), n_each)
        u = u[rng.permutation(len(u))]
        xy = _uniform(rng, len(u), spec.input_ranges)
        parts.append(np.column_stack([xy, u.astype(float)]))
    X = np.vstack(parts)
    u = X[:, 2].astype(int)
    z = coeffs[u, 0] * X[:, 0] + coeffs[u, 1] * X[:, 1]
    z = z + _noise(rng, len(z), noise_sigma)
    return TabularDataset(
        X,
        z,
        ("x", "y", "u"),
        ("input", "input", "switch"),
        _split(spec.n_train, spec.n_test),
        spec,
    )


def gen_compound(
    n_train: int,
    n_test: int,
    seed: int,
    ranges: Sequence[Range] | None = None,
    noise_sigma: float = 0.0,
) -> TabularDataset:
    """z = a * b + c; the product a * b is kept as the intermediary."""
    spec = TaskSpec("compound", (), _ranges(ranges, 3), n_train, n_test, seed, noise_sigma)
    rng = np.random.default_rng(seed)
    X = _uniform(rng, n_train + n_test, spec.input_ranges)
    inter = X[:, 0] * X[:, 1]
    z = inter + X[:, 2]
    z = z + _noise(rng, len(z), noise_sigma)
    return TabularDataset(
        X,
        z,
        ("a", "b", "c"),
        ("input",) * 3,
        _split(n_train, n_test),
        spec,
        intermediaries=inter,
    )


def random_switch_table(
    n_pairs: int, seed: int, coeff_range: Range = DEFAULT_COEFF_RANGE
) -> list[tuple[int, float, float]]:
    rng = np.random.default_rng(seed)
    lo, hi = coeff_range
    ab = lo + (hi - lo) * rng.random((n_pairs, 2))
    return [(u, float(a), float(b)) for u, (a, b) in enumerate(ab)]


def gen_crossfit_suite(
    n_datasets: int,
    seed: int,
    ranges: Sequence[Range] | None = None,
    coeff_range: Range = DEFAULT_COEFF_RANGE,
    n_train: int = 128,
    n_test: int = 64,
) -> list[tuple[TaskSpec, TabularDataset]]:
    """Independent linear datasets, each with its own (alpha, beta)."""
    if n_datasets < 10:
        raise ConfigurationError(f"cross-fit suite needs >= 10 datasets, got {n_datasets}")
    lo, hi = coeff_range
    if not lo < hi:
        raise ConfigurationError(f"invalid coefficient range {coeff_range}")
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    coeffs = lo + (hi - lo) * rng.random((n_datasets, 2))
    child_seeds = [int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(n_datasets)]
    suite = []
    for (a, b), s in zip(coeffs, child_seeds):
        ds = gen_linear(float(a), float(b), n_train, n_test, s, ranges)
        suite.append((ds.spec, ds))
    return suite


def family_formula(ds: TabularDataset) -> np.ndarray:
    """Recompute noiseless targets from the stored columns."""
    fam = ds.spec.family
    if fam == "compound":
        return ds.X[:, 0] * ds.X[:, 1] + ds.X[:, 2]
    coeffs = ds.coefficients_per_row()
    return coeffs[:, 0] * ds.X[:, 0] + coeffs[:, 1] * ds.X[:, 1]


def sample_task_batch(
    family: str,
    batch: int,
    n_train: int,
    n_test: int,
    rng: np.random.Generator,
    coeff_range: Range = DEFAULT_COEFF_RANGE,
    input_range: Range = DEFAULT_RANGE,
    n_pairs: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized batch of fresh prior tasks for meta-training.

    Returns X with shape (batch, n_train + n_test, d) and z with shape
    (batch, n_train + n_test). Same formulas as the single-dataset
    generators, without per-task bookkeeping.
    """
    n = n_train + n_test
    lo, hi = input_range
    clo, chi = coeff_range
    if family == "linear":
        X = lo + (hi - lo) * rng.random((batch, n, 2))
        ab = clo + (chi - clo) * rng.random((batch, 1, 2))
        z = (X * ab).sum(-1)
    elif family == "compound":
        X = lo + (hi - lo) * rng.random((batch, n, 3))
        z = X[..., 0] * X[..., 1] + X[..., 2]
    elif family == "switch":
        xy = lo + (hi - lo) * rng.random((batch, n, 2))
        ab = clo + (chi - clo) * rng.random((batch, n_pairs, 2))
        per = -(-n_train // n_pairs)
        u_train = np.tile(np.arange(n_pairs), per)[:n_train]
        u_train = np.stack([rng.permutation(u_train) for _ in range(batch)])
        u_test = rng.integers(0, n_pairs, (batch, n_test))
        u = np.concatenate([u_train, u_test], axis=1)
        coeff = np.take_along_axis(ab, u[..., None].repeat(2, -1), axis=1)
        z = (xy * coeff).sum(-1)
        X = np.concatenate([xy, u[..., None].astype(float)], axis=-1)
    else:
        raise ConfigurationError(f"unknown family {family!r}")
    return X, z


# ---------------------------------------------------------------- serialization


def save_dataset(ds: TabularDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = list(ds.feature_names) + ["z", "split"]
    if ds.intermediaries is not None:
        header.append("intermediary")
    with open(directory / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds.z)):
            row = [repr(float(v)) for v in ds.X[i]] + [repr(float(ds.z[i])), ds.split[i]]
            if ds.intermediaries is not None:
                row.append(repr(float(ds.intermediaries[i])))
            w.writerow(row)
    meta = ds.spec.to_json()
    meta["digest"] = ds.spec_digest
    meta["feature_names"] = list(ds.feature_names)
    meta["column_roles"] = list(ds.column_roles)
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path) -> TabularDataset:
    directory = Path(directory)
    meta = json.loads((directory / "spec.json").read_text())
    spec = TaskSpec.from_json(meta)
    with open(directory / "data.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    names = tuple(meta["feature_names"])
    d = len(names)
    X = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    z = np.array([float(r[d]) for r in body])
    split = np.array([r[d + 1] for r in body])
    inter = None
    if "intermediary" in header:
        inter = np.array([float(r[d + 2]) for r in body])
    ds = TabularDataset(X, z, names, tuple(meta["column_roles"]), split, spec, inter)
    if ds.spec_digest != meta["digest"]:
        raise ConfigurationError(f"spec digest mismatch in {directory}")
    return ds


def generate(family: str, seed: int, **params) -> TabularDataset:
    """Dispatch helper used by the CLI and the experiment harness."""
    ranges = params.get("ranges")
    noise = float(params.get("noise_sigma", 0.0))
    if family == "linear":
        return gen_linear(
            params.get("alpha", 1.0),
            params.get("beta", 1.0),
            params.get("n_train", 128),
            params.get("n_test", 64),
            seed,
            ranges,
            noise,
        )
    if family == "switch":
        table = params.get("coefficient_table")
        if table is None:
            table = random_switch_table(
                params.get("n_pairs", 16), seed, tuple(params.get("coeff_range", DEFAULT_COEFF_RANGE))
            )
        return gen_switch(
            table, params.get("n_per_pair", 64), params.get("n_test_per_pair", 32), seed, ranges, noise
        )
    if family == "compound":
        return gen_compound(params.get("n_train", 512), params.get("n_test", 256), seed, ranges, noise)
    raise ConfigurationError(f"unknown family {family!r}")
