"""Command-line entry point: ``tabprobe <subcommand> --config file.json [flags]``.

Exit codes: 0 success, 1 domain error, 2 usage error. Logs go to stderr;
machine-readable output is written to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import adapter, expharness, lens, probekit, report, synthgen, toymodel
from .actstore import ActivationStore
from .errors import TabprobeError

logger = logging.getLogger("tabprobe")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _override(cfg: dict, **flags) -> dict:
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _layers_arg(text: str | None):
    if text is None or text == "all":
        return text
    return [int(x) for x in text.split(",")]


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> None:
    cfg = _override(_load_config(args.config), family=args.family, seed=args.seed)
    family = cfg.pop("family", "linear")
    seed = int(cfg.pop("seed", 0))
    ds = synthgen.generate(family, seed, **cfg)
    out = synthgen.save_dataset(ds, args.out)
    logger.info("wrote %s dataset (%d rows) to %s", family, len(ds.z), out)


def cmd_train_toy(args) -> None:
    cfg = _load_config(args.config)
    model_cfg = dict(cfg.get("model", {}))
    train_cfg = dict(cfg.get("train", {}))
    _override(train_cfg, n_steps=args.steps, seed=args.seed)
    if "prior_mix" in train_cfg:
        train_cfg["prior_mix"] = [tuple(p) for p in train_cfg["prior_mix"]]
    for key in ("n_train_range", "n_pairs_range"):
        if key in train_cfg:
            train_cfg[key] = tuple(train_cfg[key])
    mc = toymodel.ModelConfig(**model_cfg)
    tc = toymodel.TrainConfig(**train_cfg)
    out = Path(args.out) if args.out else expharness.data_root(args.data_dir) / "toy" / "model.ckpt"
    t0 = time.time()
    model, state = toymodel.meta_train(mc, tc, out)
    elapsed = time.time() - t0
    evals = {
        "linear": toymodel.evaluate_prior(model, "linear", 128, 128, 64),
        "compound": toymodel.evaluate_prior(model, "compound", 128, 512, 64),
    }
    _write_json(
        out.parent / "train_state.json",
        {
            "digest": state.digest,
            "steps": state.step,
            "running_loss": state.running_loss,
            "prior_mix": state.prior_mix,
            "wall_seconds": elapsed,
            "heldout": evals,
            "model_config": asdict(mc),
            "train_config": json.loads(json.dumps(asdict(tc))),
        },
    )
    logger.info("checkpoint %s digest %s (%.0fs)", out, state.digest[:12], elapsed)


def _fits_path(root: Path, run_id: str) -> Path:
    return root / run_id / "fits.json"


def cmd_capture(args) -> None:
    cfg = _override(
        _load_config(args.config),
        model=args.model,
        dataset=args.dataset,
        run_id=args.run_id,
        layers=_layers_arg(args.layers),
        tokens=args.tokens,
    )
    root = expharness.data_root(args.data_dir)
    model = adapter.load_model(cfg["model"])
    ds = synthgen.load_dataset(cfg["dataset"])
    handle = adapter.fit_context(model, ds)
    store = ActivationStore(root)
    run_id = cfg.get("run_id", "capture")
    store.open_run(run_id, model.descriptor, [ds.spec_digest])
    X_te, _ = ds.test_xy()
    for rec in adapter.capture(model, handle, X_te, cfg.get("layers", "all"), cfg.get("tokens", "all"), run_id):
        store.put(rec)
    fits_path = _fits_path(root, run_id)
    fits = json.loads(fits_path.read_text()) if fits_path.exists() else {}
    fits[handle.context_digest] = ds.spec_digest
    _write_json(fits_path, fits)
    logger.info("captured fit %s into run %s", handle.context_digest, run_id)


def cmd_probe(args) -> None:
    cfg = _override(
        _load_config(args.config),
        dataset=args.dataset,
        run_id=args.run_id,
        fit=args.fit,
        layer=args.layer,
        target=args.target,
        tokens=args.tokens,
        depth=args.depth,
        seed=args.seed,
    )
    root = expharness.data_root(args.data_dir)
    ds = synthgen.load_dataset(cfg["dataset"])
    run_id = cfg.get("run_id", "capture")
    fit = cfg.get("fit")
    if fit is None:
        fits = json.loads(_fits_path(root, run_id).read_text())
        matches = [f for f, spec in fits.items() if spec == ds.spec_digest]
        if len(matches) != 1:
            raise TabprobeError(f"cannot pick a fit for dataset {ds.spec_digest} in run {run_id}")
        fit = matches[0]
    store = ActivationStore(root)
    key = f"{run_id}/{fit}/L{int(cfg.get('layer', 0)):02d}_{cfg.get('tokens', 'all')}"
    record = store.get(key)
    target = cfg.get("target", "answer")
    if ds.switch_column is not None and target in ("alpha", "beta"):
        data = probekit.build_withinfit(record, ds, target)
    else:
        data = probekit.build_pertoken_target(record, ds, target)
    seed = int(cfg.get("seed", 0))
    spec = probekit.ProbeSpec(**{**cfg.get("probe", {}), "depth": int(cfg.get("depth", 0)), "seed": seed})
    result = probekit.fit_probe(data, spec, seed)
    out = Path(args.out) if args.out else root / run_id / "probe_results.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "a") as fh:
        fh.write(json.dumps(result.to_json(), sort_keys=True) + "\n")
    logger.info("%s layer %s depth %d: test R2 %.4f", target, result.layer, result.depth, result.r2_test)


def cmd_lens(args) -> None:
    cfg = _override(_load_config(args.config), model=args.model, dataset=args.dataset, tau=args.tau)
    model = adapter.load_model(cfg["model"])
    ds = synthgen.load_dataset(cfg["dataset"])
    handle = adapter.fit_context(model, ds)
    X_te, z_te = ds.test_xy()
    result = lens.run_lens(model, handle, X_te, z_te, float(cfg.get("tau", lens.DEFAULT_TAU)))
    out = Path(args.out) if args.out else Path(cfg["dataset"]) / "lens.json"
    _write_json(out, result.to_json())
    logger.info("lens convergence layer %s", result.convergence_layer)


def cmd_experiment(args) -> None:
    cfg = _override(_load_config(args.config), run_id=args.run_id, model=args.model, seed=args.seed)
    if args.experiment:
        cfg["experiment"] = args.experiment
    if "experiment" not in cfg:
        raise TabprobeError("experiment config must name an experiment")
    config = expharness.ExperimentConfig.from_json(cfg)
    run_dir = expharness.run(config, args.data_dir)
    logger.info("run directory %s", run_dir)


def cmd_compare(args) -> None:
    root = expharness.data_root(args.data_dir)
    a = Path(args.answer_run) if Path(args.answer_run).is_dir() else root / args.answer_run
    b = Path(args.lens_run) if Path(args.lens_run).is_dir() else root / args.lens_run
    result = expharness.compare_answer_vs_lens(a, b, args.threshold)
    out = Path(args.out) if args.out else b / f"compare_{a.name}.json"
    _write_json(out, result)
    logger.info(
        "answer probe layer %s, lens convergence layer %s", result["answer_probe_layer"], result["lens_convergence_layer"]
    )


def cmd_report(args) -> None:
    root = expharness.data_root(args.data_dir)
    run = Path(args.run) if Path(args.run).is_dir() else root / args.run
    files = report.render(run, args.out)
    logger.info("wrote %d files to %s", len(files), args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabprobe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--data-dir", help="run-directory root (default $TABPROBE_DATA_DIR or ./runs)")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic dataset")
    p.add_argument("--family", choices=synthgen.FAMILIES)
    p.add_argument("--out", required=True)

    p = add("train-toy", cmd_train_toy, "meta-train the toy model")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="checkpoint path")

    p = add("capture", cmd_capture, "capture activations into the store")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--run-id")
    p.add_argument("--layers")
    p.add_argument("--tokens", choices=("all", "answer_only"))

    p = add("probe", cmd_probe, "fit one probe on stored activations")
    p.add_argument("--dataset")
    p.add_argument("--run-id")
    p.add_argument("--fit")
    p.add_argument("--layer", type=int)
    p.add_argument("--target", choices=probekit.TARGETS)
    p.add_argument("--tokens", choices=("all", "answer_only"))
    p.add_argument("--depth", type=int)
    p.add_argument("--out")

    p = add("lens", cmd_lens, "run the logit lens on one dataset")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--tau", type=float)
    p.add_argument("--out")

    p = add("experiment", cmd_experiment, "run a full experiment grid")
    p.add_argument("--experiment", choices=expharness.EXPERIMENTS)
    p.add_argument("--run-id")
    p.add_argument("--model")

    p = add("compare", cmd_compare, "compare answer-probe and lens layers")
    p.add_argument("--answer-run", required=True)
    p.add_argument("--lens-run", required=True)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--out")

    p = add("report", cmd_report, "render CSV tables and plots for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (TabprobeError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
