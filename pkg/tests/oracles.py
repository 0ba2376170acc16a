"""Independent reference computations shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from tabprobe import synthgen, toymodel
from tabprobe.probekit import ProbingDataset
from tabprobe.toymodel import ModelConfig, ToyTabPFN


def oracle_ridge(X, y, lam):
    """Augmented [1, X] normal equations, penalty diag(0, lam, ..., lam)."""
    A = np.column_stack([np.ones(len(X)), X])
    P = lam * np.eye(A.shape[1])
    P[0, 0] = 0.0
    beta = np.linalg.solve(A.T @ A + P, A.T @ y)
    return beta[1:], beta[0]


def linear_encoding_oracle(m=400, p=64, seed=0):
    """Targets are a fixed random linear functional of the activations."""
    rng = np.random.default_rng(seed)
    acts = rng.standard_normal((m, p)) @ rng.standard_normal((p, p)) / np.sqrt(p)
    return ProbingDataset(acts, acts @ rng.standard_normal(p), "answer", {"layer": 0})


def gradient_fd_errors(trials: int = 3, eps: float = 1e-6) -> list[tuple[float, float]]:
    """(analytic, central-difference) directional derivatives of the training
    loss on the frozen miniature config (k=8, one block, float64)."""
    torch.manual_seed(0)
    net = ToyTabPFN(ModelConfig(n_layers=1, embed_dim=8, n_heads=2, seed=7)).double()
    # move LayerNorm/bias parameters off their symmetric init so every path is exercised
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.1 * torch.randn_like(p))
    rng = np.random.default_rng(0)
    X, z = synthgen.sample_task_batch("compound", 2, 12, 5, rng)
    xn, yn, ym, ys = toymodel.normalize_task(X, z[:, :12], 12)
    x = torch.as_tensor(xn)
    y = torch.as_tensor(yn)
    target = torch.as_tensor((z[:, 12:] - ym[:, None]) / ys[:, None])

    def loss_fn():
        return torch.mean((net(x, y) - target) ** 2)

    params = list(net.parameters())
    grads = torch.autograd.grad(loss_fn(), params)
    out = []
    for trial in range(trials):
        gen = torch.Generator().manual_seed(trial)
        direction = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum((g * v).sum() for g, v in zip(grads, direction)).item()
        with torch.no_grad():
            for p, v in zip(params, direction):
                p.add_(eps * v)
            plus = loss_fn().item()
            for p, v in zip(params, direction):
                p.sub_(2 * eps * v)
            minus = loss_fn().item()
            for p, v in zip(params, direction):
                p.add_(eps * v)
        out.append((analytic, (plus - minus) / (2 * eps)))
    return out
