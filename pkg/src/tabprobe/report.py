"""Render run summaries into CSV tables and, when matplotlib is present, plots."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

CSV_HEADER = ["layer", "depth", "seed", "r2_test", "mse_test"]


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    path.write_text(buf.getvalue())


def _cell_key(c: dict):
    return (c["layer"], c["depth"] if c["depth"] is not None else -1, c["seed"] if c["seed"] is not None else -1)


def render(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise ConfigurationError(f"no summary.json in {run_dir}")
    summary = json.loads(summary_path.read_text())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if summary["experiment"] == "logit_lens":
        lens = summary["lens"]
        conv = lens["convergence_layer"]
        rows = [
            [L, m, r, "true" if conv is not None and L >= conv else "false"]
            for L, m, r in zip(lens["layers"], lens["mse_per_layer"], lens["r2_per_layer"])
        ]
        path = out_dir / "lens.csv"
        _write_csv(path, ["layer", "mse", "r2", "converged"], rows)
        written.append(path)
        _plot_lens(summary, out_dir, written)
        return written

    targets = summary["config"]["targets"]
    grid = [c for c in summary["grid"] if c["status"] == "completed"]
    for i, target in enumerate(targets):
        cells = sorted((c for c in grid if c["target"] == target), key=_cell_key)
        layer_rows = [[c["layer"], c["depth"], c["seed"], c["r2_test"], c["mse_test"]] for c in cells if c["depth"] == 0]
        best = summary["best"].get(target)
        depth_rows = []
        if best is not None:
            depth_rows = [
                [c["layer"], c["depth"], c["seed"], c["r2_test"], c["mse_test"]]
                for c in cells
                if c["layer"] == best["layer"]
            ]
        names = [(f"by_layer_{target}.csv", layer_rows), (f"by_depth_{target}.csv", depth_rows)]
        if i == 0:
            names += [("by_layer.csv", layer_rows), ("by_depth.csv", depth_rows)]
        for name, rows in names:
            path = out_dir / name
            _write_csv(path, CSV_HEADER, rows)
            written.append(path)
    _plot_curves(summary, out_dir, written)
    return written


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not available; writing CSV files only")
        return None
    return plt


def _plot_curves(summary: dict, out_dir: Path, written: list[Path]) -> None:
    plt = _pyplot()
    if plt is None:
        return
    try:
        for kind, xlabel in (("by_layer", "layer"), ("by_depth", "probe hidden layers")):
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
            for target, curve in summary["curves"][kind].items():
                xs = sorted(curve, key=int)
                for ax, metric in zip(axes, ("r2_test", "mse_test")):
                    mean = [curve[x][metric]["mean"] for x in xs]
                    lo = [curve[x][metric]["min"] for x in xs]
                    hi = [curve[x][metric]["max"] for x in xs]
                    ax.plot([int(x) for x in xs], mean, marker="o", label=target)
                    ax.fill_between([int(x) for x in xs], lo, hi, alpha=0.2)
            for ax, metric in zip(axes, ("R²", "MSE")):
                ax.set_xlabel(xlabel)
                ax.set_ylabel(f"test {metric}")
                ax.legend()
            fig.suptitle(f"{summary['experiment']} ({kind.replace('_', ' ')})")
            fig.tight_layout()
            path = out_dir / f"{kind}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    except Exception as exc:  # plots never fail a report
        logger.warning("plotting failed: %s", exc)


def _plot_lens(summary: dict, out_dir: Path, written: list[Path]) -> None:
    plt = _pyplot()
    if plt is None:
        return
    try:
        lens = summary["lens"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(lens["layers"], lens["mse_per_layer"], marker="o", label="head ∘ final norm")
        if lens.get("raw", {}).get("mse_per_layer"):
            ax.semilogy(lens["layers"], lens["raw"]["mse_per_layer"], marker="x", ls="--", label="bare head")
        if lens["convergence_layer"] is not None:
            ax.axvline(lens["convergence_layer"], color="gray", ls=":")
        ax.set_xlabel("layer")
        ax.set_ylabel("lens MSE vs true answer")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "lens.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    except Exception as exc:
        logger.warning("plotting failed: %s", exc)
