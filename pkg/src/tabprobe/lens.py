"""Logit lens for scalar regression heads.

The output head is applied to the answer-token state of every layer. The
primary variant includes the final LayerNorm (head ∘ norm); the raw variant
applies the bare linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapter
from .adapter import FitHandle, ProbeableModel
from .probekit import mse, r2

DEFAULT_TAU = 1.1


@dataclass
class LensResult:
    layers: list[int]
    decoded: dict[int, np.ndarray] = field(repr=False)
    mse_per_layer: list[float]
    r2_per_layer: list[float]
    convergence_layer: int | None
    normalization_variant: str = "final_norm"
    raw_mse_per_layer: list[float] | None = None
    raw_r2_per_layer: list[float] | None = None
    fit_digest: str = ""
    tau: float = DEFAULT_TAU
    approximation: str | None = None

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "mse_per_layer": self.mse_per_layer,
            "r2_per_layer": self.r2_per_layer,
            "convergence_layer": self.convergence_layer,
            "normalization_variant": self.normalization_variant,
            "raw": {"mse_per_layer": self.raw_mse_per_layer, "r2_per_layer": self.raw_r2_per_layer},
            "fit_digest": self.fit_digest,
            "tau": self.tau,
            "approximation": self.approximation,
        }


def convergence_layer(mse_per_layer: list[float], layers: list[int], tau: float = DEFAULT_TAU) -> int | None:
    """Smallest layer from which every later layer stays within tau x final MSE."""
    final = mse_per_layer[-1]
    if not np.isfinite(final):
        return None
    conv = None
    for layer, value in zip(reversed(layers), reversed(mse_per_layer)):
        if value <= tau * final:
            conv = layer
        else:
            break
    return conv


def run_lens(
    model: ProbeableModel,
    handle: FitHandle,
    test_rows: np.ndarray,
    z_true: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> LensResult:
    head = adapter.output_head(model)
    records = adapter.capture(model, handle, test_rows, "all", "answer_only")
    layers = [r.layer for r in records]
    decoded, raw = {}, {}
    for rec in records:
        state = rec.values[:, 0]
        decoded[rec.layer] = head.apply(state, handle, normalize=True)
        raw[rec.layer] = head.apply(state, handle, normalize=False)
    mses = [mse(z_true, decoded[L]) for L in layers]
    r2s = [r2(z_true, decoded[L]) for L in layers]
    return LensResult(
        layers,
        decoded,
        mses,
        r2s,
        convergence_layer(mses, layers, tau),
        "final_norm",
        [mse(z_true, raw[L]) for L in layers],
        [r2(z_true, raw[L]) for L in layers],
        handle.context_digest,
        tau,
        head.approximation,
    )
