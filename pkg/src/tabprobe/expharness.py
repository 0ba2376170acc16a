"""End-to-end probing experiments over a (target, layer, depth, seed) grid.

A run directory holds the activation store records, one JSON file per
completed grid cell (so interrupted runs resume where they stopped),
``results.jsonl`` and ``summary.json``. The summary contains no timestamps
and is rebuilt from the cell files in a fixed order, so an interrupted and
an uninterrupted run produce the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import adapter, synthgen
from .actstore import ActivationRecord, ActivationStore
from .adapter import FitHandle, ProbeableModel
from .errors import ComparisonError, ConfigurationError, TabprobeError
from .lens import DEFAULT_TAU, run_lens
from .probekit import (
    ProbeSpec,
    build_crossfit,
    build_pertoken_target,
    build_withinfit,
    fit_probe,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("coeff_crossfit", "coeff_switch", "intermediary", "answer_probe", "logit_lens", "input_copy")

DEFAULT_FAMILY = {
    "coeff_crossfit": "linear",
    "coeff_switch": "switch",
    "intermediary": "compound",
    "answer_probe": "compound",
    "logit_lens": "compound",
    "input_copy": "compound",
}
COMPATIBLE = {
    "coeff_crossfit": ("linear",),
    "coeff_switch": ("switch",),
    "intermediary": ("compound",),
    "input_copy": ("compound",),
    "answer_probe": ("linear", "compound", "switch"),
    "logit_lens": ("linear", "compound", "switch"),
}
DEFAULT_TARGETS = {
    "coeff_crossfit": ["alpha", "beta"],
    "coeff_switch": ["alpha", "beta"],
    "intermediary": ["intermediary"],
    "answer_probe": ["answer"],
    "logit_lens": ["answer"],
    "input_copy": ["input_a", "input_b", "input_c", "input_ab"],
}
# all tokens (minus the switch token) for coefficient / intermediary probes,
# the answer token alone for answer and copy probes
TOKENSEL = {
    "coeff_crossfit": "all",
    "coeff_switch": "all",
    "intermediary": "all",
    "answer_probe": "answer_only",
    "logit_lens": "answer_only",
    "input_copy": "answer_only",
}


@dataclass
class ExperimentConfig:
    experiment: str
    model: str = ""
    task: dict = field(default_factory=dict)
    layers: Any = "all"
    depths: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    run_id: str = "run"
    seed: int = 0
    targets: list[str] | None = None
    probe: dict = field(default_factory=dict)
    tau: float = DEFAULT_TAU
    workers: int = 1

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        family = self.family
        if family not in COMPATIBLE[self.experiment]:
            raise ConfigurationError(f"experiment {self.experiment} cannot run on the {family} family")
        if self.targets is None:
            self.targets = list(DEFAULT_TARGETS[self.experiment])
        if self.experiment != "logit_lens" and (0 not in self.depths or sorted(self.depths) != self.depths):
            raise ConfigurationError("depths must be sorted ascending and include 0")

    @property
    def family(self) -> str:
        return self.task.get("family", DEFAULT_FAMILY[self.experiment])

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:20]


def _atomic_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def data_root(root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get("TABPROBE_DATA_DIR", "runs"))


# ---------------------------------------------------------------- data + capture


def _datasets(cfg: ExperimentConfig) -> list[synthgen.TabularDataset]:
    params = {k: v for k, v in cfg.task.items() if k != "family"}
    if cfg.experiment == "coeff_crossfit":
        suite = synthgen.gen_crossfit_suite(
            params.get("n_datasets", 100),
            cfg.seed,
            params.get("ranges"),
            tuple(params.get("coeff_range", synthgen.DEFAULT_COEFF_RANGE)),
            params.get("n_train", 128),
            params.get("n_test", 64),
        )
        return [ds for _, ds in suite]
    return [synthgen.generate(cfg.family, cfg.seed, **params)]


def _layer_ids(model: ProbeableModel, layers) -> list[int]:
    return adapter._layers(model, layers)


def _capture_all(
    cfg: ExperimentConfig,
    model: ProbeableModel,
    store: ActivationStore,
    datasets: list[synthgen.TabularDataset],
    layers: list[int],
) -> tuple[list[FitHandle], dict[str, dict[int, str]]]:
    """Fit every dataset, capture the needed layers, persist them. Returns
    the handles and fit_digest -> layer -> store key."""
    tokensel = TOKENSEL[cfg.experiment]
    handles, keys = [], {}
    for ds in datasets:
        handle = adapter.fit_context(model, ds)
        handles.append(handle)
        wanted = {
            L: f"{cfg.run_id}/{handle.context_digest}/L{L:02d}_{tokensel}" for L in layers
        }
        if not all(store.exists(k) for k in wanted.values()):
            X_te, _ = ds.test_xy()
            for rec in adapter.capture(model, handle, X_te, layers, tokensel, cfg.run_id):
                store.put(rec)
        keys[handle.context_digest] = wanted
    return handles, keys


# ---------------------------------------------------------------- grid cells


def _probe_spec(cfg: ExperimentConfig, depth: int, seed: int) -> ProbeSpec:
    return ProbeSpec(**{**cfg.probe, "depth": depth, "seed": seed})


def _cells(cfg: ExperimentConfig, layers: list[int]) -> list[dict]:
    return [
        {"target": t, "layer": L, "depth": d, "seed": s}
        for t in cfg.targets
        for L in layers
        for d in cfg.depths
        for s in cfg.seeds
    ]


def _build(
    cfg: ExperimentConfig,
    target: str,
    layer: int,
    store: ActivationStore,
    datasets,
    handles,
    keys,
):
    if cfg.experiment == "coeff_crossfit":
        records = [store.get(keys[h.context_digest][layer]) for h in handles]
        coeffs = [ds.spec.alpha if target == "alpha" else ds.spec.beta for ds in datasets]
        return build_crossfit(records, coeffs, target)
    ds, h = datasets[0], handles[0]
    record = store.get(keys[h.context_digest][layer])
    if cfg.experiment == "coeff_switch":
        return build_withinfit(record, ds, target)
    return build_pertoken_target(record, ds, target)


def _run_cell(cell: dict, cfg, store, datasets, handles, keys, cache: dict) -> dict:
    out = dict(cell)
    try:
        key = (cell["target"], cell["layer"])
        if key not in cache:
            cache[key] = _build(cfg, cell["target"], cell["layer"], store, datasets, handles, keys)
        result = fit_probe(cache[key], _probe_spec(cfg, cell["depth"], cell["seed"]), cell["seed"])
        out.update(status="completed", result=result.to_json())
        out["r2_test"] = result.r2_test
        out["mse_test"] = result.mse_test
    except TabprobeError as exc:
        out.update(status="error", error=f"{type(exc).__name__}: {exc}", r2_test=None, mse_test=None)
    return out


# ---------------------------------------------------------------- summary


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max()), "n": int(arr.size)}


def summarize(cfg: ExperimentConfig, model_desc: str, grid: list[dict]) -> dict:
    by_layer: dict[str, dict[str, dict]] = {}
    by_depth: dict[str, dict[str, dict]] = {}
    best: dict[str, dict] = {}
    for target in cfg.targets:
        done = [c for c in grid if c["target"] == target and c["status"] == "completed"]
        layers = sorted({c["layer"] for c in done})
        curve = {}
        for L in layers:
            cells = [c for c in done if c["layer"] == L and c["depth"] == 0]
            if cells:
                curve[str(L)] = {
                    "r2_test": _stats([c["r2_test"] for c in cells]),
                    "mse_test": _stats([c["mse_test"] for c in cells]),
                    "r2_train": _stats([c["result"]["r2_train"] for c in cells]),
                }
        by_layer[target] = curve
        if not curve:
            continue
        best_layer = max(curve, key=lambda L: (curve[L]["r2_test"]["mean"], -int(L)))
        best[target] = {
            "layer": int(best_layer),
            "r2_test": curve[best_layer]["r2_test"]["mean"],
            "mse_test": curve[best_layer]["mse_test"]["mean"],
        }
        dcurve = {}
        for d in cfg.depths:
            cells = [c for c in done if c["layer"] == int(best_layer) and c["depth"] == d]
            if cells:
                dcurve[str(d)] = {
                    "r2_test": _stats([c["r2_test"] for c in cells]),
                    "mse_test": _stats([c["mse_test"] for c in cells]),
                }
        by_depth[target] = dcurve
    slim = [
        {k: c.get(k) for k in ("target", "layer", "depth", "seed", "status", "r2_test", "mse_test", "error")}
        for c in grid
    ]
    for c in slim:
        if c["error"] is None:
            del c["error"]
    return {
        "experiment": cfg.experiment,
        "model": model_desc,
        "config": cfg.to_json(),
        "grid": slim,
        "curves": {"by_layer": by_layer, "by_depth": by_depth},
        "best": best,
    }


# ---------------------------------------------------------------- entry points


def run(
    cfg: ExperimentConfig,
    root: str | Path | None = None,
    model: ProbeableModel | None = None,
    max_cells: int | None = None,
) -> Path:
    """Execute (or resume) one experiment; returns the run directory.

    ``max_cells`` stops after that many new grid cells, leaving a partial
    run that a later call completes.
    """
    root = data_root(root)
    if model is None:
        if not cfg.model:
            raise ConfigurationError("experiment config names no model")
        model = adapter.load_model(cfg.model)
    run_dir = root / cfg.run_id
    store = ActivationStore(root)
    datasets = _datasets(cfg)
    store.open_run(cfg.run_id, model.descriptor, sorted({ds.spec_digest for ds in datasets}))
    _atomic_json(run_dir / "config.json", cfg.to_json())
    for ds in datasets:
        if not (run_dir / "datasets" / ds.spec_digest / "spec.json").exists():
            synthgen.save_dataset(ds, run_dir / "datasets" / ds.spec_digest)

    layers = _layer_ids(model, cfg.layers)
    handles, keys = _capture_all(cfg, model, store, datasets, layers)
    _atomic_json(
        run_dir / "fits.json",
        {h.context_digest: ds.spec_digest for h, ds in zip(handles, datasets)},
    )

    if cfg.experiment == "logit_lens":
        return _run_lens_experiment(cfg, model, run_dir, datasets[0], handles[0])

    cell_dir = run_dir / "cells"
    base = {
        "experiment": cfg.experiment,
        "fits": sorted(keys),
        "probe": cfg.probe,
        "targets": cfg.targets,
    }
    cells = _cells(cfg, layers)
    pending = []
    for cell in cells:
        cell["digest"] = _digest({**base, **cell})
        if not (cell_dir / f"{cell['digest']}.json").exists():
            pending.append(cell)
    if max_cells is not None:
        pending = pending[:max_cells]
    logger.info("%s: %d cells, %d pending", cfg.run_id, len(cells), len(pending))

    cache: dict = {}

    def job(cell):
        return _run_cell(cell, cfg, store, datasets, handles, keys, cache)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        for done in pool.map(job, pending):
            _atomic_json(cell_dir / f"{done['digest']}.json", done)
            logger.debug("cell %s %s", done["digest"], done["status"])

    grid = []
    for cell in cells:
        path = cell_dir / f"{cell['digest']}.json"
        if path.exists():
            grid.append(json.loads(path.read_text()))
        else:
            grid.append({**cell, "status": "pending", "r2_test": None, "mse_test": None})
    with open(run_dir / "results.jsonl", "w") as fh:
        for c in grid:
            if c["status"] == "completed":
                fh.write(json.dumps(c["result"], sort_keys=True) + "\n")
    _atomic_json(run_dir / "summary.json", summarize(cfg, model.descriptor, grid))
    return run_dir


def _run_lens_experiment(cfg, model, run_dir: Path, ds, handle) -> Path:
    X_te, z_te = ds.test_xy()
    result = run_lens(model, handle, X_te, z_te, cfg.tau)
    lens_json = result.to_json()
    _atomic_json(run_dir / "lens.json", lens_json)
    grid = [
        {"target": "answer", "layer": L, "depth": None, "seed": None, "status": "completed", "r2_test": r, "mse_test": m}
        for L, r, m in zip(result.layers, result.r2_per_layer, result.mse_per_layer)
    ]
    summary = {
        "experiment": cfg.experiment,
        "model": model.descriptor,
        "config": cfg.to_json(),
        "grid": grid,
        "curves": {
            "by_layer": {
                "answer": {
                    str(L): {"mse_test": m, "r2_test": r}
                    for L, r, m in zip(result.layers, result.r2_per_layer, result.mse_per_layer)
                }
            },
            "by_depth": {},
        },
        "best": {},
        "lens": lens_json,
    }
    _atomic_json(run_dir / "summary.json", summary)
    return run_dir


def load_summary(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise ConfigurationError(f"no summary.json in {run_dir}")
    return json.loads(path.read_text())


def earliest_layer(summary: dict, target: str, threshold: float) -> int | None:
    curve = summary["curves"]["by_layer"].get(target, {})
    hits = [int(L) for L, v in curve.items() if v["r2_test"]["mean"] >= threshold]
    return min(hits) if hits else None


def compare_answer_vs_lens(
    run_answer: str | Path,
    run_lens: str | Path,
    threshold: float = 0.95,
    lens_min_r2: float = 0.5,
) -> dict:
    """Earliest layer where a linear probe reads the answer vs the layer where
    the output head itself converges. The lens counts as aligned only when its
    final-layer R^2 reaches ``lens_min_r2``."""
    ans = load_summary(run_answer)
    lens = load_summary(run_lens)
    if ans["experiment"] != "answer_probe" or lens["experiment"] != "logit_lens":
        raise ComparisonError("compare needs an answer_probe run and a logit_lens run")
    fits_a = json.loads((Path(run_answer) / "fits.json").read_text())
    fits_l = json.loads((Path(run_lens) / "fits.json").read_text())
    if sorted(fits_a) != sorted(fits_l):
        raise ComparisonError(f"fit digests differ: {sorted(fits_a)} vs {sorted(fits_l)}")
    probe_layer = earliest_layer(ans, "answer", threshold)
    lens_info = lens["lens"]
    conv = lens_info["convergence_layer"]
    if lens_info["r2_per_layer"][-1] < lens_min_r2:
        conv = None
    gap = None if probe_layer is None or conv is None else conv - probe_layer
    return {
        "fit_digests": sorted(fits_a),
        "answer_threshold": threshold,
        "answer_probe_layer": probe_layer,
        "lens_convergence_layer": conv,
        "lens_final_r2": lens_info["r2_per_layer"][-1],
        "gap": gap,
        "probe_before_lens": None if gap is None else gap > 0,
    }


def iter_results(run_dir: str | Path) -> Iterable[dict]:
    path = Path(run_dir) / "results.jsonl"
    with open(path) as fh:
        for line in fh:
            yield json.loads(line)
