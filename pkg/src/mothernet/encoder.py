"""The hypernetwork: row tokens -> transformer -> per-class mean pooling -> phi.

Tensors are batched over tasks: training rows arrive as ``(B, n, 100)`` with
labels ``(B, n)`` and an optional boolean ``row_mask`` marking real (non
padding) rows.  There is no positional encoding, so the produced ``phi`` is a
function of the *set* of training rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_container, write_container
from .data import MAX_CLASSES, MAX_FEATURES
from .errors import NumericInputError

CHECKPOINT_MAGIC = b"MNCK1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ChildConfig:
    """Shape of the generated child MLP.

    The generated part of a child (``phi``) packs, in order,
    ``W^p1 (h x r) | b1 (h) | W^p2 (h x r) | b2 (h) | W^p3 (N x r) | b3 (N)``.
    With the large settings (h=512, r=32, N=10) that is 34,122 numbers, or
    33,088 without biases; the published figure of 25,738 matches neither.
    """

    h: int = 64
    r: int = 8
    d_max: int = MAX_FEATURES
    n_out: int = MAX_CLASSES

    def __post_init__(self):
        if self.r > self.h or self.r > self.d_max:
            raise ValueError("rank must not exceed hidden width or input width")

    @property
    def phi_len(self):
        return 2 * self.h * self.r + self.n_out * self.r + 2 * self.h + self.n_out

    def phi_slices(self):
        """Name -> (slice, shape) for every block of the phi layout."""
        h, r, N = self.h, self.r, self.n_out
        blocks = [("w1p", (h, r)), ("b1", (h,)), ("w2p", (h, r)), ("b2", (h,)), ("w3p", (N, r)), ("b3", (N,))]
        out, pos = {}, 0
        for name, shape in blocks:
            size = math.prod(shape)
            out[name] = (slice(pos, pos + size), shape)
            pos += size
        return out


@dataclass(frozen=True)
class EncoderConfig:
    m: int = 64
    n_layers: int = 3
    heads: int = 4
    ff_hidden: int = 128
    decoder_hidden: int = 256
    n_class_slots: int = MAX_CLASSES

    def __post_init__(self):
        if self.m % self.heads:
            raise ValueError("embedding width must be divisible by the head count")
        if min(self.m, self.heads, self.ff_hidden, self.decoder_hidden) <= 0 or self.n_layers < 0:
            raise ValueError("all sizes must be positive")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    child: ChildConfig = ChildConfig()

    def to_dict(self):
        return {"encoder": asdict(self.encoder), "child": asdict(self.child)}

    @classmethod
    def from_dict(cls, d):
        return cls(encoder=EncoderConfig(**d["encoder"]), child=ChildConfig(**d["child"]))


PRESETS = {
    "desk": ModelConfig(EncoderConfig(m=64, n_layers=3, heads=4, ff_hidden=128, decoder_hidden=256), ChildConfig(h=64, r=8)),
    "tiny": ModelConfig(EncoderConfig(m=8, n_layers=1, heads=2, ff_hidden=16, decoder_hidden=16), ChildConfig(h=8, r=2)),
    "paper": ModelConfig(
        EncoderConfig(m=512, n_layers=12, heads=4, ff_hidden=1024, decoder_hidden=4096), ChildConfig(h=512, r=32)
    ),
}


class SelfAttention(nn.Module):
    def __init__(self, m, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(m, 3 * m)
        self.out = nn.Linear(m, m)

    def forward(self, x, key_mask=None):
        B, n, m = x.shape
        dh = m // self.heads
        q, k, v = self.qkv(x).view(B, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(B, n, m))


class Block(nn.Module):
    """Pre-norm transformer layer with a GELU feed-forward."""

    def __init__(self, m, heads, ff_hidden):
        super().__init__()
        self.ln1 = nn.LayerNorm(m)
        self.attn = SelfAttention(m, heads)
        self.ln2 = nn.LayerNorm(m)
        self.ff = nn.Sequential(nn.Linear(m, ff_hidden), nn.GELU(), nn.Linear(ff_hidden, m))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.ff(self.ln2(x))


class MotherNet(nn.Module):
    """All meta-learned parameters: encoder, decoder and the fixed child factors."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or PRESETS["desk"]
        enc, ch = self.config.encoder, self.config.child
        self.input_proj = nn.Linear(ch.d_max, enc.m)
        self.label_proj = nn.Linear(enc.n_class_slots, enc.m)
        self.blocks = nn.ModuleList([Block(enc.m, enc.heads, enc.ff_hidden) for _ in range(enc.n_layers)])
        self.decoder_hidden = nn.Linear(enc.m * enc.n_class_slots, enc.decoder_hidden)
        self.decoder_out = nn.Linear(enc.decoder_hidden, ch.phi_len)
        self.wf1 = nn.Parameter(torch.randn(ch.r, ch.d_max) / ch.d_max)
        self.wf2 = nn.Parameter(torch.randn(ch.r, ch.h) / math.sqrt(ch.h))
        self.wf3 = nn.Parameter(torch.randn(ch.r, ch.h) / math.sqrt(ch.h))
        self.encoder_calls = 0

    # the four stages, exposed separately for testing

    def embed_tokens(self, X, y):
        return embed_tokens(self, X, y)

    def transformer_forward(self, tokens, row_mask=None):
        return transformer_forward(self, tokens, row_mask)

    def decode_phi(self, E):
        return decode_phi(self, E)

    def forward(self, X, y, row_mask=None):
        """``phi`` of shape ``(B, phi_len)`` from padded training rows."""
        self.encoder_calls += 1
        H = transformer_forward(self, embed_tokens(self, X, y), row_mask)
        return decode_phi(self, class_average_pool(H, y, row_mask, self.config.encoder.n_class_slots))

    def phi_for(self, X, y):
        """``phi`` for a single unbatched, already padded training set (numpy in, numpy out)."""
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            phi = self(torch.as_tensor(X, dtype=dtype)[None], torch.as_tensor(y, dtype=torch.long)[None])
        return phi[0].numpy()

    def child_logits(self, phi, X, n_classes=None):
        return child_logits_torch(self, phi, X, n_classes)


def embed_tokens(model, X, y):
    """``InputProj(x_i) + LabelProj(onehot(y_i))`` for every row."""
    if not torch.isfinite(X).all():
        raise NumericInputError("non-finite training inputs")
    onehot = F.one_hot(y.long(), model.config.encoder.n_class_slots).to(X.dtype)
    return model.input_proj(X) + model.label_proj(onehot)


def transformer_forward(model, tokens, row_mask=None):
    x = tokens
    for block in model.blocks:
        x = block(x, row_mask)
    return x


def class_average_pool(H, y, row_mask=None, n_slots=MAX_CLASSES):
    """Concatenated per-class mean rows; absent classes give exact zeros."""
    onehot = F.one_hot(y.long(), n_slots).to(H.dtype)
    if row_mask is not None:
        onehot = onehot * row_mask[..., None].to(H.dtype)
    counts = onehot.sum(dim=-2)
    sums = onehot.transpose(-1, -2) @ H
    means = sums / counts.clamp(min=1.0)[..., None]
    return means.flatten(start_dim=-2)


def decode_phi(model, E):
    return model.decoder_out(F.relu(model.decoder_hidden(E)))


def unpack_phi_torch(config, phi):
    """Split a batched ``(B, phi_len)`` tensor into the child's named blocks."""
    return {name: phi[..., sl].reshape(*phi.shape[:-1], *shape) for name, (sl, shape) in config.phi_slices().items()}


def child_logits_torch(model, phi, X, n_classes=None):
    """Differentiable child forward for ``(B, n, d_max)`` padded inputs.

    ``n_classes`` (a ``(B,)`` tensor or int) masks inactive outputs to -inf.
    """
    p = unpack_phi_torch(model.config.child, phi)
    h1 = F.relu(torch.einsum("bnr,bhr->bnh", X @ model.wf1.T, p["w1p"]) + p["b1"][:, None, :])
    h2 = F.relu(torch.einsum("bnr,bhr->bnh", h1 @ model.wf2.T, p["w2p"]) + p["b2"][:, None, :])
    logits = torch.einsum("bnr,bcr->bnc", h2 @ model.wf3.T, p["w3p"]) + p["b3"][:, None, :]
    if n_classes is not None:
        n_out = logits.shape[-1]
        nc = torch.as_tensor(n_classes, device=logits.device).reshape(-1, 1, 1)
        active = torch.arange(n_out, device=logits.device)[None, None, :] < nc
        logits = logits.masked_fill(~active, float("-inf"))
    return logits


# --------------------------------------------------------------------------
# MNCK1 checkpoints


def save_checkpoint(path, model, extra=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def checkpoint_bytes(model, extra=None):
    meta = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "extra": extra or {}}
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    return write_container(CHECKPOINT_MAGIC, meta, tensors)


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(model, extra)``."""
    with open(path, "rb") as fh:
        meta, tensors = read_container(fh.read(), CHECKPOINT_MAGIC)
    model = MotherNet(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
    model.to(dtype)
    model.eval()
    return model, meta.get("extra", {})
