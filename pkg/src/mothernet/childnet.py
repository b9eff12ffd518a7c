"""The generated low-rank child MLP, its prediction path and its file format.

Predictions here are plain numpy in float64 (weights are stored as float32).
Every matrix product accumulates over the contracted axis in a fixed
sequential order, which makes a row's output independent of the rest of
the batch and makes trailing zero inputs contribute exactly nothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .container import read_container, write_container
from .errors import DivergenceError, FormatError, PhiLayoutError, ShapeError

CHILD_MAGIC = b"MNCH1"
CHILD_VERSION = 1
PREDICT_CHUNK = 1024
GENERATED = ("w1p", "b1", "w2p", "b2", "w3p", "b3")
FIXED = ("wf1", "wf2", "wf3")


def seq_matmul(A, W):
    """``A @ W.T`` with a left-to-right sum over the shared axis."""
    out = A[:, 0:1] * W[None, :, 0]
    for j in range(1, A.shape[1]):
        out += A[:, j : j + 1] * W[None, :, j]
    return out


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ChildNetwork:
    """Generated factors and biases plus the shared fixed factors.

    ``wf1`` is kept at full width ``d_max``; only its first ``n_features``
    columns are used.  Likewise only the first ``n_classes`` rows of ``w3p``
    and entries of ``b3`` are active.  ``input_offset``/``input_scale`` are an
    optional per-feature affine map applied by :func:`predict_proba` before
    the network (identity by default).
    """

    w1p: np.ndarray
    b1: np.ndarray
    w2p: np.ndarray
    b2: np.ndarray
    w3p: np.ndarray
    b3: np.ndarray
    wf1: np.ndarray
    wf2: np.ndarray
    wf3: np.ndarray
    n_features: int
    n_classes: int
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        for name in GENERATED + FIXED:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        f = self.n_features
        if self.input_offset is None:
            object.__setattr__(self, "input_offset", np.zeros(f, dtype=np.float32))
        if self.input_scale is None:
            object.__setattr__(self, "input_scale", np.ones(f, dtype=np.float32))
        object.__setattr__(self, "input_offset", np.asarray(self.input_offset, dtype=np.float32))
        object.__setattr__(self, "input_scale", np.asarray(self.input_scale, dtype=np.float32))
        h, r = self.w1p.shape
        shapes = {
            "b1": (h,), "w2p": (h, r), "b2": (h,), "w3p": (self.n_out, r), "b3": (self.n_out,),
            "wf2": (r, h), "wf3": (r, h), "input_offset": (f,), "input_scale": (f,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.wf1.shape[0] != r:
            raise ShapeError("wf1 rank does not match w1p")
        if not 1 <= f <= self.d_max or not 1 <= self.n_classes <= self.n_out:
            raise ShapeError(f"active slice ({f}, {self.n_classes}) outside ({self.d_max}, {self.n_out})")

    @property
    def hidden(self):
        return self.w1p.shape[0]

    @property
    def rank(self):
        return self.w1p.shape[1]

    @property
    def d_max(self):
        return self.wf1.shape[1]

    @property
    def n_out(self):
        return self.w3p.shape[0]

    @property
    def input_factor(self):
        """Active ``r x f`` part of the fixed input factor."""
        return self.wf1[:, : self.n_features]

    @property
    def output_weight(self):
        """Active ``c x r`` part of the generated output factor."""
        return self.w3p[: self.n_classes]

    @property
    def output_bias(self):
        return self.b3[: self.n_classes]

    def dense_weights(self):
        """Composed full-rank matrices ``W1, W2, W3`` of the active network."""
        f64 = lambda a: a.astype(np.float64)  # noqa: E731
        return (
            f64(self.w1p) @ f64(self.input_factor),
            f64(self.w2p) @ f64(self.wf2),
            f64(self.output_weight) @ f64(self.wf3),
        )

    def predict_proba(self, X):
        return predict_proba(self, X)


def assemble_child(phi, model, n_features, n_classes):
    """Unpack ``phi`` (layout fixed by :class:`~mothernet.encoder.ChildConfig`) into a sliced child."""
    cfg = model.config.child
    phi = np.asarray(phi, dtype=np.float32)
    if phi.ndim != 1 or phi.shape[0] != cfg.phi_len:
        raise PhiLayoutError(f"phi has shape {phi.shape}, expected ({cfg.phi_len},)")
    if not 1 <= n_features <= cfg.d_max:
        raise ShapeError(f"feature count {n_features} outside [1, {cfg.d_max}]")
    if not 2 <= n_classes <= cfg.n_out:
        raise ShapeError(f"class count {n_classes} outside [2, {cfg.n_out}]")
    parts = {name: phi[sl].reshape(shape) for name, (sl, shape) in cfg.phi_slices().items()}
    fixed = {name: getattr(model, name).detach().cpu().numpy().astype(np.float32) for name in FIXED}
    return ChildNetwork(**parts, **fixed, n_features=n_features, n_classes=n_classes)


def pack_phi(net):
    """Inverse of the phi unpacking in :func:`assemble_child`."""
    return np.concatenate([getattr(net, name).ravel() for name in GENERATED]).astype(np.float32)


def child_logits(net, X):
    """Active logits ``(n, c)`` for inputs of width ``n_features``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_features:
        raise ShapeError(f"expected inputs with {net.n_features} columns, got shape {X.shape}")
    f64 = lambda a: a.astype(np.float64)  # noqa: E731
    h1 = np.maximum(seq_matmul(seq_matmul(X, f64(net.input_factor)), f64(net.w1p)) + f64(net.b1), 0.0)
    h2 = np.maximum(seq_matmul(seq_matmul(h1, f64(net.wf2)), f64(net.w2p)) + f64(net.b2), 0.0)
    return seq_matmul(seq_matmul(h2, f64(net.wf3)), f64(net.output_weight)) + f64(net.output_bias)


def child_forward(net, x):
    """Class probabilities for one input vector of length ``n_features``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("child_forward takes a single vector")
    return softmax(child_logits(net, x[None, :]))[0]


def predict_proba(net, X):
    """Row-wise probabilities after the network's input affine map."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_features:
        raise ShapeError(f"expected inputs with {net.n_features} columns, got shape {X.shape}")
    off = net.input_offset.astype(np.float64)
    scale = net.input_scale.astype(np.float64)
    out = np.empty((X.shape[0], net.n_classes))
    for start in range(0, X.shape[0], PREDICT_CHUNK):
        chunk = (X[start : start + PREDICT_CHUNK] - off) * scale
        out[start : start + PREDICT_CHUNK] = softmax(child_logits(net, chunk))
    return out


# --------------------------------------------------------------------------
# Dense MLP sharing the prediction interface (distillation student, baselines)


@dataclass(frozen=True, eq=False)
class DenseMLP:
    """Plain ReLU MLP: ``weights[i]`` is ``(out, in)``, the last layer gives logits."""

    weights: tuple
    biases: tuple
    n_features: int
    n_classes: int
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float32) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float32) for b in self.biases))
        f = self.n_features
        off = np.zeros(f) if self.input_offset is None else self.input_offset
        sc = np.ones(f) if self.input_scale is None else self.input_scale
        object.__setattr__(self, "input_offset", np.asarray(off, dtype=np.float32))
        object.__setattr__(self, "input_scale", np.asarray(sc, dtype=np.float32))
        if self.weights[0].shape[1] != f or self.weights[-1].shape[0] != self.n_classes:
            raise ShapeError("dense MLP shapes do not match feature/class counts")

    def logits(self, X):
        a = np.asarray(X, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = seq_matmul(a, w.astype(np.float64)) + b.astype(np.float64)
            if i < len(self.weights) - 1:
                a = np.maximum(a, 0.0)
        return a

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected inputs with {self.n_features} columns, got shape {X.shape}")
        Z = (X - self.input_offset.astype(np.float64)) * self.input_scale.astype(np.float64)
        out = np.empty((X.shape[0], self.n_classes))
        for start in range(0, X.shape[0], PREDICT_CHUNK):
            out[start : start + PREDICT_CHUNK] = softmax(self.logits(Z[start : start + PREDICT_CHUNK]))
        return out


# --------------------------------------------------------------------------
# MNCH1 container and JSON debug export


def export_child(net):
    if isinstance(net, DenseMLP):
        meta = {"version": CHILD_VERSION, "kind": "dense", "f": net.n_features, "c": net.n_classes,
                "layers": len(net.weights)}
        tensors = {}
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            tensors[f"w{i}"] = w
            tensors[f"b{i}"] = b
    else:
        meta = {"version": CHILD_VERSION, "kind": "lowrank", "f": net.n_features, "c": net.n_classes,
                "h": net.hidden, "r": net.rank, "d_max": net.d_max, "n_out": net.n_out}
        tensors = {name: getattr(net, name) for name in GENERATED + FIXED}
    tensors["input_offset"] = net.input_offset
    tensors["input_scale"] = net.input_scale
    return write_container(CHILD_MAGIC, meta, tensors)


def import_child(data):
    meta, t = read_container(data, CHILD_MAGIC)
    kind = meta.get("kind")
    common = dict(n_features=int(meta["f"]), n_classes=int(meta["c"]),
                  input_offset=t.pop("input_offset"), input_scale=t.pop("input_scale"))
    try:
        if kind == "lowrank":
            return ChildNetwork(**{name: t[name] for name in GENERATED + FIXED}, **common)
        if kind == "dense":
            n = int(meta["layers"])
            return DenseMLP(weights=[t[f"w{i}"] for i in range(n)], biases=[t[f"b{i}"] for i in range(n)], **common)
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc}") from exc
    raise FormatError(f"unknown child kind {kind!r}", offset=9)


def save_child(path, net):
    with open(path, "wb") as fh:
        fh.write(export_child(net))


def load_child(path):
    with open(path, "rb") as fh:
        return import_child(fh.read())


def child_to_json(net):
    if isinstance(net, DenseMLP):
        body = {"kind": "dense", "weights": [w.tolist() for w in net.weights], "biases": [b.tolist() for b in net.biases]}
    else:
        body = {"kind": "lowrank", **{name: getattr(net, name).tolist() for name in GENERATED + FIXED}}
    body.update(f=net.n_features, c=net.n_classes, input_offset=net.input_offset.tolist(),
                input_scale=net.input_scale.tolist())
    return json.dumps(body, sort_keys=True)


# --------------------------------------------------------------------------
# Fine-tuning


@dataclass(frozen=True)
class FinetuneParams:
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout: bool = False
    epochs: int = 100
    dropout_rate: float = 0.1
    seed: int = 0


def _torch_logits(params, net, X, dropout_rate=0.0, generator=None):
    wf1 = torch.from_numpy(net.input_factor.astype(np.float64))
    wf2 = torch.from_numpy(net.wf2.astype(np.float64))
    wf3 = torch.from_numpy(net.wf3.astype(np.float64))
    c = net.n_classes

    def drop(a):
        if dropout_rate <= 0:
            return a
        keep = (torch.rand(a.shape, generator=generator, dtype=a.dtype) >= dropout_rate).to(a.dtype)
        return a * keep / (1.0 - dropout_rate)

    h1 = drop(F.relu((X @ wf1.T) @ params["w1p"].T + params["b1"]))
    h2 = drop(F.relu((h1 @ wf2.T) @ params["w2p"].T + params["b2"]))
    return (h2 @ wf3.T) @ params["w3p"][:c].T + params["b3"][:c]


def finetune_loss_and_grad(net, X, y):
    """Mean cross-entropy of ``net`` on ``(X, y)`` and its gradient w.r.t. the generated blocks."""
    params = {name: torch.tensor(getattr(net, name).astype(np.float64), requires_grad=True) for name in GENERATED}
    Z = torch.from_numpy((np.asarray(X, dtype=np.float64) - net.input_offset) * net.input_scale)
    loss = F.cross_entropy(_torch_logits(params, net, Z), torch.as_tensor(y, dtype=torch.long))
    loss.backward()
    return loss.item(), {name: p.grad.numpy() for name, p in params.items()}


def finetune_child(net, train, hp=FinetuneParams(), return_losses=False):
    """Full-batch gradient descent on the generated blocks; fixed factors stay frozen.

    ``train`` is a :class:`~mothernet.data.TabularDataset` in the same raw
    feature space that :func:`predict_proba` accepts.
    """
    if hp.epochs == 0:
        return (net, []) if return_losses else net
    params = {name: torch.tensor(getattr(net, name).astype(np.float64), requires_grad=True) for name in GENERATED}
    Z = torch.from_numpy((train.X - net.input_offset) * net.input_scale)
    y = torch.as_tensor(train.y, dtype=torch.long)
    gen = torch.Generator().manual_seed(hp.seed)
    rate = hp.dropout_rate if hp.dropout else 0.0
    losses = []
    for epoch in range(hp.epochs):
        loss = F.cross_entropy(_torch_logits(params, net, Z, rate, gen), y)
        if not torch.isfinite(loss):
            raise DivergenceError(f"fine-tuning loss became {loss.item()} at epoch {epoch}", epoch=epoch)
        losses.append(loss.item())
        grads = torch.autograd.grad(loss, list(params.values()))
        with torch.no_grad():
            for p, g in zip(params.values(), grads):
                p -= hp.lr * (g + hp.weight_decay * p)
    out = replace(net, **{name: p.detach().numpy() for name, p in params.items()})
    return (out, losses) if return_losses else out
