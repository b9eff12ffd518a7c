"""Meta-training: minimize the child's held-out cross-entropy over sampled tasks."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import Standardizer, TabularDataset, pad_and_scale
from .encoder import (
    PRESETS,
    ModelConfig,
    MotherNet,
    class_average_pool,
    embed_tokens,
    save_checkpoint,
    transformer_forward,
    unpack_phi_torch,
)
from .errors import DivergenceError
from .prior import SyntheticTask, sample_valid_task

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 20000
    base_lr: float = 1e-3
    horizon: int = None
    lr_floor: float = 0.0
    batch_schedule: tuple = None
    checkpoint_every: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 1

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("learning rate must be nonnegative")
        sched = self.batch_schedule
        if sched is None:
            third = max(self.total_steps // 3, 1)
            sched = ((0, 8), (third, 16), (2 * third, 32))
        sched = tuple((int(s), int(b)) for s, b in sched)
        sizes = [b for _, b in sched]
        if any(b <= 0 for b in sizes) or sizes != sorted(sizes):
            raise ValueError("batch sizes must be positive and nondecreasing")
        object.__setattr__(self, "batch_schedule", sched)
        if self.horizon is None:
            object.__setattr__(self, "horizon", self.total_steps)

    def batch_size(self, step):
        size = self.batch_schedule[0][1]
        for start, b in self.batch_schedule:
            if step >= start:
                size = b
        return size


def cosine_lr(step, base_lr, horizon, floor=0.0):
    """Cosine annealing from ``base_lr`` at step 0 to ``floor`` at ``horizon``; clamped after."""
    if horizon <= 0 or step >= horizon:
        return floor
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * step / horizon))


def prepare_task(task):
    """Standardize with training statistics, then pad and scale both portions."""
    st = Standardizer.fit(task.train.X)
    return pad_and_scale(st.transform(task.train.X)), pad_and_scale(st.transform(task.test.X))


def collate(tasks, dtype=torch.float32):
    """Pad a list of tasks into batched tensors with row masks."""
    prepared = [prepare_task(t) for t in tasks]
    B = len(tasks)
    n_tr = max(t.train.n_rows for t in tasks)
    n_te = max(t.test.n_rows for t in tasks)
    d_max = prepared[0][0].shape[1]
    Xtr = np.zeros((B, n_tr, d_max))
    Xte = np.zeros((B, n_te, d_max))
    ytr = np.zeros((B, n_tr), dtype=np.int64)
    yte = np.zeros((B, n_te), dtype=np.int64)
    mtr = np.zeros((B, n_tr), dtype=bool)
    mte = np.zeros((B, n_te), dtype=bool)
    for i, (t, (a, b)) in enumerate(zip(tasks, prepared)):
        Xtr[i, : len(a)] = a
        Xte[i, : len(b)] = b
        ytr[i, : len(a)] = t.train.y
        yte[i, : len(b)] = t.test.y
        mtr[i, : len(a)] = True
        mte[i, : len(b)] = True
    return {
        "X_train": torch.as_tensor(Xtr, dtype=dtype),
        "y_train": torch.as_tensor(ytr),
        "mask_train": torch.as_tensor(mtr),
        "X_test": torch.as_tensor(Xte, dtype=dtype),
        "y_test": torch.as_tensor(yte),
        "mask_test": torch.as_tensor(mte),
        "n_classes": torch.as_tensor([t.n_classes for t in tasks]),
    }


def batch_loss(model, batch):
    """Mean over tasks of the mean test-row cross-entropy."""
    phi = model(batch["X_train"], batch["y_train"], batch["mask_train"])
    logits = model.child_logits(phi, batch["X_test"], batch["n_classes"])
    B, n, N = logits.shape
    ce = F.cross_entropy(logits.reshape(B * n, N), batch["y_test"].reshape(-1), reduction="none").reshape(B, n)
    mask = batch["mask_test"].to(ce.dtype)
    ce = torch.where(batch["mask_test"], ce, torch.zeros_like(ce))
    per_task = ce.sum(dim=1) / mask.sum(dim=1)
    return per_task.mean()


def task_loss(model, task):
    dtype = next(model.parameters()).dtype
    return batch_loss(model, collate([task], dtype=dtype))


def train(cfg, prior, model_config=None, out_dir=None, model=None, progress=None):
    """Run meta-training; returns ``(model, log_records)``.

    With ``out_dir`` set, writes ``train_log.jsonl`` and ``step_XXXXXX.mnck``
    checkpoints (plus ``latest.mnck``).  A non-finite loss aborts with
    :class:`DivergenceError`; checkpoints already on disk are left in place.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = MotherNet(model_config or PRESETS["desk"])
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    records = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    start_time = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            lr = cosine_lr(step, cfg.base_lr, cfg.horizon, cfg.lr_floor)
            for group in opt.param_groups:
                group["lr"] = lr
            bs = cfg.batch_size(step)
            tasks = [sample_valid_task(prior, rng) for _ in range(bs)]
            loss = batch_loss(model, collate(tasks))
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} at step {step}", step=step)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            if lr > 0:
                opt.step()
            rec = {"step": step, "lr": lr, "batch": bs, "loss": loss.item()}
            records.append(rec)
            if log_fh and step % cfg.log_every == 0:
                log_fh.write(json.dumps(rec) + "\n")
            if progress is not None:
                progress(rec)
            done = step + 1
            if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
                extra = {
                    "step": done,
                    "train_config": asdict(cfg),
                    "prior": asdict(prior),
                    "elapsed_s": time.perf_counter() - start_time,
                    "recent_loss": float(np.mean([r["loss"] for r in records[-100:]])),
                }
                save_checkpoint(os.path.join(out_dir, f"step_{done:06d}.mnck"), model, extra)
                save_checkpoint(os.path.join(out_dir, "latest.mnck"), model, extra)
                log.info("step %d loss %.4f", done, extra["recent_loss"])
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, records


# --------------------------------------------------------------------------
# Finite-difference gradient check


def tiny_task(seed=0, n_rows=6, n_features=3, n_classes=3):
    """Random labels on Gaussian inputs: ``n_rows`` training and ``n_rows`` test rows."""
    rng = np.random.default_rng(seed)
    while True:
        X = rng.standard_normal((2 * n_rows, n_features))
        y = rng.integers(0, n_classes, size=2 * n_rows)
        if len(np.unique(y[:n_rows])) == n_classes:
            break
    return SyntheticTask(
        train=TabularDataset(X=X[:n_rows], y=y[:n_rows], n_classes=n_classes),
        test=TabularDataset(X=X[n_rows:], y=y[n_rows:], n_classes=n_classes),
    )


def relu_margin(model, batch):
    """Smallest |pre-activation| over every ReLU on the task-loss path."""
    with torch.no_grad():
        H = transformer_forward(model, embed_tokens(model, batch["X_train"], batch["y_train"]), batch["mask_train"])
        E = class_average_pool(H, batch["y_train"], batch["mask_train"], model.config.encoder.n_class_slots)
        hid = model.decoder_hidden(E)
        p = unpack_phi_torch(model.config.child, model.decoder_out(F.relu(hid)))
        rows = batch["mask_test"]
        z1 = torch.einsum("bnr,bhr->bnh", batch["X_test"] @ model.wf1.T, p["w1p"]) + p["b1"][:, None, :]
        z2 = torch.einsum("bnr,bhr->bnh", F.relu(z1) @ model.wf2.T, p["w2p"]) + p["b2"][:, None, :]
        return min(float(hid.abs().min()), float(z1[rows].abs().min()), float(z2[rows].abs().min()))


def gradcheck(model=None, task=None, eps=1e-4, seed=0, min_margin=1e-2, max_tries=200):
    """Compare autograd gradients of the task loss with central differences (float64).

    Relative error per component is ``|a - n| / max(|a|, |n|, 1e-6)``.  When
    neither ``model`` nor ``task`` is given, seeds starting at ``seed`` are
    tried until every ReLU pre-activation is at least ``min_margin`` from
    zero, since a central difference straddling a kink is not a derivative.
    """
    if model is None and task is None:
        for s in range(seed, seed + max_tries):
            torch.manual_seed(s)
            cand = MotherNet(PRESETS["tiny"]).double()
            cand_task = tiny_task(s)
            if relu_margin(cand, collate([cand_task], dtype=torch.float64)) >= min_margin:
                model, task, seed = cand, cand_task, s
                break
        else:
            raise RuntimeError("no kink-free evaluation point found")
    if model is None:
        torch.manual_seed(seed)
        model = MotherNet(PRESETS["tiny"])
    model = model.double()
    task = task or tiny_task(seed)
    batch = collate([task], dtype=torch.float64)
    model.zero_grad()
    loss = batch_loss(model, batch)
    loss.backward()
    per_param = {}
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            numeric = torch.empty_like(analytic)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = batch_loss(model, batch).item()
                flat[i] = orig - eps
                down = batch_loss(model, batch).item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            floor = torch.tensor(1e-6, dtype=torch.float64)
            denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), floor)
            err = float(((analytic - numeric).abs() / denom).max())
            per_param[name] = err
            worst = max(worst, err)
    return {
        "seed": seed,
        "loss": float(loss.detach()),
        "max_rel_error": worst,
        "per_param": per_param,
        "n_params": sum(p.numel() for p in model.parameters()),
        "relu_margin": relu_margin(model, batch),
    }


def random_init_model(config=None, seed=0):
    torch.manual_seed(seed)
    model = MotherNet(config or PRESETS["desk"])
    model.eval()
    return model


__all__ = [
    "TrainConfig", "cosine_lr", "task_loss", "batch_loss", "train", "gradcheck", "collate", "prepare_task",
    "ModelConfig", "random_init_model", "tiny_task",
]
