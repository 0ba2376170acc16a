"""Desk-scale TabPFN-style regressor with per-layer state access.

Every row of a table becomes ``d + 1`` tokens: one per feature and a final
label token. Train rows embed their label, test rows carry a learned dummy
label. Each block runs sample attention (rows attend to train rows, per
token column), feature attention (tokens of one row attend to each other)
and an MLP, all pre-norm with residual connections.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapacityError, ConfigurationError, DivergenceError
from .synthgen import FAMILIES, TabularDataset, sample_task_batch

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TBPRBCK1"
CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    mlp_ratio: float = 4.0
    context_cap: int = 2048
    feature_cap: int = 4
    attention_order: str = "sample_first"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ConfigurationError("embed_dim must be divisible by n_heads")
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if self.attention_order not in ("sample_first", "feature_first"):
            raise ConfigurationError(f"unknown attention_order {self.attention_order!r}")

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TokenGrid:
    """Hidden states of one table at one layer, rows ordered train-first."""

    states: torch.Tensor  # (n_rows, d + 1, k)
    token_roles: tuple[str, ...]
    row_roles: tuple[str, ...]
    n_train: int
    y_mean: float
    y_std: float
    layer: int = 0

    @property
    def answer_token(self) -> int:
        return len(self.token_roles) - 1


@dataclass
class TrainState:
    digest: str
    step: int
    running_loss: float
    prior_mix: list[tuple[str, float]]
    history: list[dict] = field(default_factory=list)


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, n_keys: int | None = None) -> torch.Tensor:
        # x: (batch, seq, dim); keys/values restricted to the first n_keys positions
        b, s, dim = x.shape
        h = self.heads
        src = x if n_keys is None else x[:, :n_keys]
        q = self.q(x).view(b, s, h, dim // h).transpose(1, 2)
        k, v = self.kv(src).view(b, src.shape[1], 2, h, dim // h).permute(2, 0, 3, 1, 4)
        o = F.scaled_dot_product_attention(q, k, v)
        return self.out(o.transpose(1, 2).reshape(b, s, dim))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.embed_dim
        self.order = cfg.attention_order
        self.norm_sample = nn.LayerNorm(k)
        self.attn_sample = _Attention(k, cfg.n_heads)
        self.norm_feature = nn.LayerNorm(k)
        self.attn_feature = _Attention(k, cfg.n_heads)
        self.norm_mlp = nn.LayerNorm(k)
        hidden = int(round(cfg.mlp_ratio * k))
        self.mlp = nn.Sequential(nn.Linear(k, hidden), nn.GELU(), nn.Linear(hidden, k))

    def _sample(self, h: torch.Tensor, n_train: int) -> torch.Tensor:
        b, r, t, k = h.shape
        x = self.norm_sample(h).transpose(1, 2).reshape(b * t, r, k)
        y = self.attn_sample(x, n_train).view(b, t, r, k).transpose(1, 2)
        return h + y

    def _feature(self, h: torch.Tensor) -> torch.Tensor:
        b, r, t, k = h.shape
        y = self.attn_feature(self.norm_feature(h).reshape(b * r, t, k))
        return h + y.view(b, r, t, k)

    def forward(self, h: torch.Tensor, n_train: int) -> torch.Tensor:
        if self.order == "sample_first":
            h = self._feature(self._sample(h, n_train))
        else:
            h = self._sample(self._feature(h), n_train)
        return h + self.mlp(self.norm_mlp(h))


class ToyTabPFN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        k, f = cfg.embed_dim, cfg.feature_cap
        self.feature_weight = nn.Parameter(torch.randn(f, k, generator=gen))
        self.feature_bias = nn.Parameter(torch.zeros(f, k))
        self.register_buffer("feature_offset", torch.randn(f, k, generator=gen) / math.sqrt(k))
        self.label_weight = nn.Parameter(torch.randn(k, generator=gen))
        self.label_bias = nn.Parameter(torch.zeros(k))
        self.dummy_label = nn.Parameter(torch.randn(k, generator=gen) / math.sqrt(k))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
            self.final_norm = nn.LayerNorm(k)
            self.head = nn.Linear(k, 1)

    # -- batched core -------------------------------------------------------

    def encode(self, x: torch.Tensor, y_train: torch.Tensor) -> torch.Tensor:
        """Normalized inputs (B, R, d) and train labels (B, n_train) -> (B, R, d+1, k)."""
        b, r, d = x.shape
        if d > self.cfg.feature_cap:
            raise CapacityError(f"{d} features exceed the feature cap {self.cfg.feature_cap}")
        n_train = y_train.shape[1]
        feats = x[..., None] * self.feature_weight[:d] + self.feature_bias[:d] + self.feature_offset[:d]
        lab_train = y_train[..., None] * self.label_weight + self.label_bias
        lab_test = self.dummy_label.expand(b, r - n_train, -1)
        label = torch.cat([lab_train, lab_test], dim=1)
        return torch.cat([feats, label[:, :, None]], dim=2)

    def run_blocks(self, h: torch.Tensor, n_train: int) -> list[torch.Tensor]:
        states = [h]
        for block in self.blocks:
            h = block(h, n_train)
            states.append(h)
        return states

    def decode(self, answer_state: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        """Output head on answer-token states (..., k) -> normalized scalar (...)."""
        if normalize:
            answer_state = self.final_norm(answer_state)
        return self.head(answer_state).squeeze(-1)

    def forward(self, x: torch.Tensor, y_train: torch.Tensor) -> torch.Tensor:
        n_train = y_train.shape[1]
        h = self.encode(x, y_train)
        for block in self.blocks:
            h = block(h, n_train)
        return self.decode(h[:, n_train:, -1])

    # -- single-table API ---------------------------------------------------

    def embed(self, dataset: TabularDataset) -> TokenGrid:
        X_tr, z_tr = dataset.train_xy()
        X_te, _ = dataset.test_xy()
        if len(X_tr) > self.cfg.context_cap:
            raise CapacityError(f"{len(X_tr)} train rows exceed context cap {self.cfg.context_cap}")
        x = np.vstack([X_tr, X_te])
        xn, yn, y_mean, y_std = normalize_task(x[None], z_tr[None], len(X_tr))
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            h = self.encode(torch.as_tensor(xn, dtype=dtype), torch.as_tensor(yn, dtype=dtype))[0]
        roles = tuple("feature" for _ in range(dataset.d)) + ("label",)
        rows = ("train",) * len(X_tr) + ("test",) * len(X_te)
        return TokenGrid(h, roles, rows, len(X_tr), float(y_mean[0]), float(y_std[0]), 0)

    def forward_grid(self, grid: TokenGrid) -> tuple[np.ndarray, list[TokenGrid]]:
        """Run all blocks on a layer-0 grid; returns de-normalized test predictions
        and the n_layers + 1 layer states (index 0 is the embedding)."""
        if grid.layer != 0:
            raise ConfigurationError("forward expects a layer-0 grid from embed")
        with torch.no_grad():
            states = self.run_blocks(grid.states[None], grid.n_train)
            pred = self.decode(states[-1][0, grid.n_train :, -1].contiguous())
        grids = [
            TokenGrid(s[0], grid.token_roles, grid.row_roles, grid.n_train, grid.y_mean, grid.y_std, i)
            for i, s in enumerate(states)
        ]
        return denormalize(pred.double().numpy(), grid.y_mean, grid.y_std), grids

    def predict(self, dataset: TabularDataset) -> np.ndarray:
        return self.forward_grid(self.embed(dataset))[0]


def normalize_task(
    x: np.ndarray, y_train: np.ndarray, n_train: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-task z-scoring with train-row statistics. x: (B, R, d), y_train: (B, n_train)."""
    mu = x[:, :n_train].mean(axis=1, keepdims=True)
    sd = np.maximum(x[:, :n_train].std(axis=1, keepdims=True), STD_FLOOR)
    y_mean, y_std = label_stats(y_train)
    return (x - mu) / sd, (y_train - y_mean[:, None]) / y_std[:, None], y_mean, y_std


def label_stats(y_train: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-task label mean and floored std over a (B, n_train) array."""
    return y_train.mean(axis=1), np.maximum(y_train.std(axis=1), STD_FLOOR)


def denormalize(pred: np.ndarray, y_mean: float, y_std: float) -> np.ndarray:
    return pred * y_std + y_mean


# ---------------------------------------------------------------- checkpoints


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(model: ToyTabPFN, path: str | Path, extra: dict | None = None) -> Path:
    """Single-file checkpoint: magic, version, manifest length, JSON manifest,
    then every tensor as little-endian float32 in manifest order.
    ``model.json`` next to it records the ModelConfig."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sd = model.state_dict()
    manifest = {
        "config": asdict(model.cfg),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in sd.items()],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for t in sd.values():
        buf.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    (path.parent / "model.json").write_text(json.dumps(asdict(model.cfg), indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[ToyTabPFN, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path} is not a tabprobe checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[16 : 16 + n])
    model = ToyTabPFN(ModelConfig.from_json(manifest["config"]))
    offset = 16 + n
    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    model.load_state_dict(state)
    model.eval()
    return model, manifest.get("extra", {})


# ---------------------------------------------------------------- meta-training


@dataclass
class TrainConfig:
    """Defaults finish in under 30 minutes on a single CPU core."""

    prior_mix: list[tuple[str, float]] = field(
        default_factory=lambda: [("linear", 0.3), ("compound", 0.3), ("switch", 0.4)]
    )
    n_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    warmup: int = 200
    n_train_range: tuple[int, int] = (16, 128)
    n_test: int = 16
    n_pairs_range: tuple[int, int] = (2, 16)
    eval_interval: int = 500
    eval_tasks: int = 64
    seed: int = 0


def _check_mix(prior_mix: Sequence[tuple[str, float]]) -> tuple[list[str], np.ndarray]:
    names = [f for f, _ in prior_mix]
    w = np.array([float(x) for _, x in prior_mix])
    if not names or any(f not in FAMILIES for f in names):
        raise ConfigurationError(f"prior families must come from {FAMILIES}, got {names}")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigurationError("prior weights must be positive and sum to 1")
    return names, w


def _batch(family: str, batch: int, n_train: int, n_test: int, rng, n_pairs: int = 4):
    X, z = sample_task_batch(family, batch, n_train, n_test, rng, n_pairs=n_pairs)
    xn, yn, y_mean, y_std = normalize_task(X, z[:, :n_train], n_train)
    target = (z[:, n_train:] - y_mean[:, None]) / y_std[:, None]
    return (
        torch.as_tensor(xn, dtype=torch.float32),
        torch.as_tensor(yn, dtype=torch.float32),
        torch.as_tensor(target, dtype=torch.float32),
        z[:, n_train:],
        y_mean,
        y_std,
    )


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    y = np.asarray(y, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return 0.0
    return 1.0 - float(((y - pred) ** 2).sum()) / sst


def evaluate_prior(
    model: ToyTabPFN,
    family: str,
    n_tasks: int = 64,
    n_train: int = 128,
    n_test: int = 64,
    seed: int = 12345,
) -> dict:
    """Pooled test-row R^2 and MSE (raw units) over fresh held-out prior tasks."""
    rng = np.random.default_rng(seed)
    x, y, _, z_test, y_mean, y_std = _batch(family, n_tasks, n_train, n_test, rng)
    model.eval()
    with torch.no_grad():
        pred = model(x, y).double().numpy()
    pred = pred * y_std[:, None] + y_mean[:, None]
    return {
        "family": family,
        "r2": r2_score(z_test, pred),
        "mse": float(np.mean((z_test - pred) ** 2)),
    }


def meta_train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint: str | Path | None = None,
    log_every: int = 100,
) -> tuple[ToyTabPFN, TrainState]:
    """Fit the toy model on freshly sampled prior tasks, one family per step.

    Deterministic for a fixed (model_config, train_config): the checkpoint
    digest of two identical runs is identical.
    """
    names, weights = _check_mix(train_config.prior_mix)
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    model = ToyTabPFN(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)
    total = max(train_config.n_steps, 1)

    def lr_at(step: int) -> float:
        if step < train_config.warmup:
            return (step + 1) / train_config.warmup
        frac = (step - train_config.warmup) / max(total - train_config.warmup, 1)
        return 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    history: list[dict] = []
    running = float("nan")
    t0 = time.time()
    lo, hi = train_config.n_train_range
    for step in range(train_config.n_steps):
        model.train()
        family = names[rng.choice(len(names), p=weights)]
        n_train = int(rng.integers(lo, hi + 1))
        n_pairs = int(rng.integers(train_config.n_pairs_range[0], train_config.n_pairs_range[1] + 1))
        x, y, target, *_ = _batch(family, train_config.batch_size, n_train, train_config.n_test, rng, n_pairs)
        loss = F.mse_loss(model(x, y), target)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step} (family={family}, n_train={n_train})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), train_config.clip_norm)
        opt.step()
        sched.step()
        lv = loss.item()
        running = lv if math.isnan(running) else 0.98 * running + 0.02 * lv
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.4f (%.1fs)", step + 1, running, time.time() - t0)
        if train_config.eval_interval and (step + 1) % train_config.eval_interval == 0:
            evals = [evaluate_prior(model, f, train_config.eval_tasks) for f in names]
            history.append({"step": step + 1, "loss": running, "eval": evals})
            logger.info("eval @%d: %s", step + 1, ", ".join(f"{e['family']} r2={e['r2']:.4f}" for e in evals))
    model.eval()
    state = TrainState(parameter_digest(model), train_config.n_steps, running, list(train_config.prior_mix), history)
    if checkpoint is not None:
        extra = {"train_config": _jsonable(asdict(train_config)), "digest": state.digest, "history": history}
        save_checkpoint(model, checkpoint, extra)
    return model, state


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))
