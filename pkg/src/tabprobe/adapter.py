"""Uniform access to probeable models.

Two backends: the built-in toy model (``toy:<checkpoint>``) and real TabPFN v2
(``tabpfn-v2[:<device>]``), the latter only when the ``tabpfn`` package and
its weights are importable. There is never a silent fallback between them.
"""

from __future__ import annotations

import hashlib
import importlib.util
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .actstore import ActivationRecord
from .errors import BackendUnavailableError, CapabilityError, ConfigurationError, SelectionError
from .synthgen import TabularDataset
from .toymodel import ToyTabPFN, denormalize, label_stats, load_checkpoint, normalize_task

BACKENDS = ("toy", "tabpfn_v2")


@dataclass
class ProbeableModel:
    backend: str
    checkpoint_ref: str
    layer_count: int
    embed_dim: int
    has_unembedding_head: bool = True
    supports_regression: bool = True
    impl: object = field(default=None, repr=False)

    @property
    def descriptor(self) -> str:
        return f"{self.backend}:{self.checkpoint_ref}"


@dataclass(frozen=True)
class FitHandle:
    session_id: str
    context_digest: str
    feature_names: tuple[str, ...]
    column_roles: tuple[str, ...]
    model_ref: str
    # train context, kept read-only
    X_train: np.ndarray = field(repr=False, compare=False)
    z_train: np.ndarray = field(repr=False, compare=False)

    @property
    def token_roles(self) -> tuple[str, ...]:
        return tuple("switch" if r == "switch" else "feature" for r in self.column_roles) + ("label",)


@dataclass
class HeadDescriptor:
    """The model's final mapping from an answer-token state to a raw-unit prediction.

    ``apply(states, handle, normalize=True)`` includes the pre-head
    normalization; ``normalize=False`` gives the bare linear head.
    """

    backend: str
    apply: Callable[..., np.ndarray]
    approximation: str | None = None


def toy_model(checkpoint: str | Path | ToyTabPFN) -> ProbeableModel:
    if isinstance(checkpoint, ToyTabPFN):
        model, ref = checkpoint, "<in-memory>"
    else:
        model, _ = load_checkpoint(checkpoint)
        ref = str(checkpoint)
    model.eval()
    return ProbeableModel("toy", ref, model.cfg.n_layers, model.cfg.embed_dim, impl=model)


def load_model(selector: str) -> ProbeableModel:
    """Parse a backend selection string: ``toy:<path>`` or ``tabpfn-v2[:<device>]``."""
    if selector.startswith("toy:"):
        return toy_model(selector[4:])
    if selector == "tabpfn-v2" or selector.startswith("tabpfn-v2:"):
        device = selector.split(":", 1)[1] if ":" in selector else "cpu"
        return _tabpfn_model(device)
    raise ConfigurationError(f"unknown backend selector {selector!r}")


def _context_digest(X: np.ndarray, z: np.ndarray, roles: Sequence[str], model_ref: str) -> str:
    h = hashlib.sha256()
    h.update(model_ref.encode())
    h.update(",".join(roles).encode())
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(z, dtype="<f8").tobytes())
    return h.hexdigest()[:32]


def fit_context(model: ProbeableModel, dataset: TabularDataset) -> FitHandle:
    """Bind a train split as in-context examples. No parameters change."""
    X_tr, z_tr = dataset.train_xy()
    if len(X_tr) == 0:
        raise ConfigurationError("dataset has no train rows")
    if model.backend == "tabpfn_v2":
        model.impl.fit(X_tr, z_tr)
    X_tr = X_tr.copy()
    z_tr = z_tr.copy()
    X_tr.flags.writeable = False
    z_tr.flags.writeable = False
    digest = _context_digest(X_tr, z_tr, dataset.column_roles, model.descriptor)
    return FitHandle(
        uuid.uuid4().hex,
        digest,
        tuple(dataset.feature_names),
        tuple(dataset.column_roles),
        model.descriptor,
        X_tr,
        z_tr,
    )


def _layers(model: ProbeableModel, layers) -> list[int]:
    if layers is None or layers == "all":
        return list(range(model.layer_count + 1))
    out = [int(layer) for layer in layers]
    for layer in out:
        if not 0 <= layer <= model.layer_count:
            raise SelectionError(f"layer {layer} outside [0, {model.layer_count}]")
    return out


def _toy_states(model: ProbeableModel, handle: FitHandle, test_rows: np.ndarray):
    net: ToyTabPFN = model.impl
    n_train = len(handle.X_train)
    x = np.vstack([handle.X_train, test_rows])[None]
    xn, yn, y_mean, y_std = normalize_task(x, handle.z_train[None], n_train)
    with torch.no_grad():
        h = net.encode(torch.as_tensor(xn, dtype=torch.float32), torch.as_tensor(yn, dtype=torch.float32))
        states = net.run_blocks(h, n_train)
    return [s[0, n_train:] for s in states], float(y_mean[0]), float(y_std[0])


def capture(
    model: ProbeableModel,
    handle: FitHandle,
    test_rows: np.ndarray,
    layers="all",
    tokens: str = "all",
    run_id: str = "",
) -> list[ActivationRecord]:
    """Hidden states of the test rows at the requested layers (0 = embedding)."""
    if tokens not in ("all", "answer_only"):
        raise SelectionError(f"unknown token selection {tokens!r}")
    layer_ids = _layers(model, layers)
    test_rows = np.asarray(test_rows, dtype=float)
    if model.backend == "toy":
        states, _, _ = _toy_states(model, handle, test_rows)
        states = [s.numpy() for s in states]
    else:
        states = model.impl.capture(test_rows)
    roles = handle.token_roles
    if len(states[0][0]) != len(roles):
        # external preprocessing may change the token schema
        roles = tuple(f"token{i}" for i in range(len(states[0][0]) - 1)) + ("label",)
    records = []
    for layer in layer_ids:
        values = states[layer]
        token_roles = roles
        if tokens == "answer_only":
            values = values[:, -1:]
            token_roles = roles[-1:]
        records.append(
            ActivationRecord(
                run_id,
                handle.context_digest,
                layer,
                token_roles,
                ("test",) * len(values),
                np.array(values, dtype=np.float32),
                tokens,
            )
        )
    return records


def _toy_head_apply(net: ToyTabPFN):
    def apply(states: np.ndarray, handle: FitHandle, normalize: bool = True) -> np.ndarray:
        y_mean, y_std = (float(v[0]) for v in label_stats(handle.z_train[None]))
        with torch.no_grad():
            out = net.decode(torch.as_tensor(np.ascontiguousarray(states, dtype=np.float32)), normalize)
        return denormalize(out.double().numpy(), y_mean, y_std)

    return apply


def output_head(model: ProbeableModel) -> HeadDescriptor:
    if not model.has_unembedding_head:
        raise CapabilityError(f"backend {model.backend} exposes no output head")
    if model.backend == "toy":
        return HeadDescriptor("toy", _toy_head_apply(model.impl))
    raise CapabilityError(f"no output head adapter for backend {model.backend}")


def predict(model: ProbeableModel, handle: FitHandle, test_rows: np.ndarray) -> np.ndarray:
    """Model predictions, computed through exactly the path the lens uses at the last layer."""
    test_rows = np.asarray(test_rows, dtype=float)
    if model.backend == "toy":
        states, _, _ = _toy_states(model, handle, test_rows)
        answer = states[-1][:, -1].contiguous().numpy()
        return output_head(model).apply(answer, handle)
    return model.impl.predict(test_rows)


# ---------------------------------------------------------------- TabPFN v2 bridge


def _tabpfn_model(device: str) -> ProbeableModel:
    if importlib.util.find_spec("tabpfn") is None:
        raise BackendUnavailableError(
            "tabpfn-v2 backend requires the 'tabpfn' package (pip install tabpfn) and its weights"
        )
    bridge = _TabPFNBridge(device)
    return ProbeableModel(
        "tabpfn_v2",
        bridge.version,
        bridge.layer_count,
        bridge.embed_dim,
        has_unembedding_head=False,
        impl=bridge,
    )


class _TabPFNBridge:
    """In-process wrapper around ``tabpfn.TabPFNRegressor`` with forward hooks on
    every transformer block. Single ensemble member, no feature shuffling, so
    the captured token grid lines up with the input columns."""

    def __init__(self, device: str):
        import tabpfn

        try:
            self.reg = tabpfn.TabPFNRegressor(n_estimators=1, device=device, random_state=0)
        except Exception as exc:  # weights / config problems surface here
            raise BackendUnavailableError(f"tabpfn could not be initialised: {exc}") from exc
        self.version = f"tabpfn=={getattr(tabpfn, '__version__', 'unknown')}"
        self._fitted = False
        self.layer_count = 0
        self.embed_dim = 0

    def _net(self):
        models = getattr(self.reg, "models_", None) or [getattr(self.reg, "model_", None)]
        net = models[0]
        if net is None:
            raise BackendUnavailableError("tabpfn model weights are not loaded")
        return net

    def _blocks(self):
        net = self._net()
        if hasattr(net, "blocks"):
            return list(net.blocks)
        return list(net.transformer_encoder.layers)

    def fit(self, X: np.ndarray, z: np.ndarray) -> None:
        try:
            self.reg.fit(X, z)
        except Exception as exc:
            raise BackendUnavailableError(f"tabpfn fit failed: {exc}") from exc
        blocks = self._blocks()
        self.layer_count = len(blocks)
        self._fitted = True

    def capture(self, test_rows: np.ndarray) -> list[np.ndarray]:
        outputs: list[torch.Tensor] = []

        def hook(_mod, _inp, out):
            x = out[0] if isinstance(out, tuple) else out
            outputs.append(x.detach().float().cpu())

        def pre_hook(_mod, args, kwargs):
            x = args[0] if args else next(iter(kwargs.values()))
            if isinstance(x, list):
                x = x[0]
            outputs.append(x.detach().float().cpu())

        blocks = self._blocks()
        handles = [blocks[0].register_forward_pre_hook(pre_hook, with_kwargs=True)]
        handles += [b.register_forward_hook(hook) for b in blocks]
        try:
            self.reg.predict(test_rows)
        finally:
            for h in handles:
                h.remove()
        n_test = len(test_rows)
        states = []
        for t in outputs[: self.layer_count + 1]:
            # (batch, rows, tokens, emb) with test rows last
            t = t.reshape(-1, *t.shape[-3:])[0] if t.dim() == 4 else t
            states.append(t[-n_test:].numpy())
        self.embed_dim = states[0].shape[-1]
        return states

    def predict(self, test_rows: np.ndarray) -> np.ndarray:
        return np.asarray(self.reg.predict(test_rows), dtype=float)

