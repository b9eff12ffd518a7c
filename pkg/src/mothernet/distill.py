"""Dataset-specific dense MLPs: the distillation student and the plain MLP baseline.

Both are trained with Adam on minibatches in float64; they differ only in the
target: soft teacher distributions for the student, integer labels for the
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .childnet import DenseMLP
from .data import Standardizer
from .errors import DivergenceError


@dataclass(frozen=True)
class DistillConfig:
    hidden: int = 128
    layers: int = 2
    epochs: int = 300
    lr: float = 1e-3
    seed: int = 0
    batch_size: int = 128
    dropout: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.hidden <= 0 or self.layers <= 0 or self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("distillation sizes and rates must be positive")


def _build(n_in, n_out, cfg):
    mods = []
    width = n_in
    for _ in range(cfg.layers):
        mods += [nn.Linear(width, cfg.hidden), nn.ReLU()]
        if cfg.dropout > 0:
            mods.append(nn.Dropout(cfg.dropout))
        width = cfg.hidden
    mods.append(nn.Linear(width, n_out))
    return nn.Sequential(*mods).double()


def soft_cross_entropy(logits, targets):
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def hard_cross_entropy(logits, labels):
    return F.cross_entropy(logits, labels)


def _fit_dense(X, targets, n_classes, cfg, loss_fn):
    """Shared minibatch Adam loop; returns ``(DenseMLP, losses)``.

    ``losses[0]`` is the full-data objective at initialization and
    ``losses[e]`` the objective after epoch ``e``.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    st = Standardizer.fit(X)
    Z = torch.from_numpy(st.transform(X))
    net = _build(Z.shape[1], n_classes, cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    def full_loss():
        net.eval()
        with torch.no_grad():
            value = float(loss_fn(net(Z), targets))
        net.train()
        return value

    losses = [full_loss()]
    n = Z.shape[0]
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = loss_fn(net(Z[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        losses.append(full_loss())
    linears = [m for m in net if isinstance(m, nn.Linear)]
    mlp = DenseMLP(
        weights=[m.weight.detach().numpy() for m in linears],
        biases=[m.bias.detach().numpy() for m in linears],
        n_features=X.shape[1],
        n_classes=n_classes,
        input_offset=st.mean,
        input_scale=st.scale,
    )
    return mlp, losses


def distill(teacher_probs, train, cfg=DistillConfig(), return_losses=False):
    """Train a dense student on the teacher's class distributions over ``train.X``."""
    P = np.asarray(teacher_probs, dtype=np.float64)
    if P.shape[0] != train.n_rows:
        raise ValueError("one teacher distribution per training row required")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("teacher rows must be probability vectors")
    mlp, losses = _fit_dense(train.X, torch.from_numpy(P), P.shape[1], cfg, soft_cross_entropy)
    return (mlp, losses) if return_losses else mlp


def train_mlp(train, cfg=DistillConfig(), return_losses=False):
    """Ordinary supervised training on integer labels."""
    y = torch.as_tensor(train.y, dtype=torch.long)
    mlp, losses = _fit_dense(train.X, y, train.n_classes, cfg, hard_cross_entropy)
    return (mlp, losses) if return_losses else mlp
