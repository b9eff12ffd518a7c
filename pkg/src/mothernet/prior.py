"""Synthetic task generators.

``sample_task`` draws meta-training tasks from a random-teacher-MLP prior.
``gen_step_dataset`` and ``gen_boolean_dataset`` produce the two failure-case
families (discontinuous 1-d labels, disjunctions of conjunctions over 10
bits), and ``gen_blobs`` the Gaussian-blob toy tasks used for evaluation.
All generators take an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import MAX_CLASSES, MAX_FEATURES, TabularDataset
from .errors import DegenerateTaskError

MIN_ROWS = 32
MAX_LABEL_ATTEMPTS = 100


@dataclass(frozen=True)
class PriorConfig:
    max_rows: int = 128
    max_features: int = 10
    max_classes: int = 5
    teacher_hidden: int = 16
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.max_classes <= MAX_CLASSES:
            raise ValueError(f"max_classes must be in [2, {MAX_CLASSES}]")
        if not 1 <= self.max_features <= MAX_FEATURES:
            raise ValueError(f"max_features must be in [1, {MAX_FEATURES}]")
        if self.max_rows < MIN_ROWS:
            raise ValueError(f"max_rows must be at least {MIN_ROWS}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")


@dataclass(frozen=True)
class SyntheticTask:
    train: TabularDataset
    test: TabularDataset

    @property
    def n_classes(self):
        return self.train.n_classes

    @property
    def n_features(self):
        return self.train.n_features


@dataclass(frozen=True)
class Teacher:
    """One-hidden-layer tanh MLP mapping ``d`` inputs to ``c`` logits."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def random(cls, d, c, hidden, rng):
        return cls(
            w1=rng.standard_normal((d, hidden)) / np.sqrt(d),
            b1=rng.standard_normal(hidden),
            w2=rng.standard_normal((hidden, c)) / np.sqrt(hidden),
            b2=rng.standard_normal(c),
        )

    @property
    def n_classes(self):
        return self.w2.shape[1]

    def logits(self, X):
        out = np.tanh(X @ self.w1 + self.b1) @ self.w2 + self.b2
        # per-class standardization keeps every class competitive
        mu = out.mean(axis=0)
        sd = out.std(axis=0)
        return np.where(sd > 1e-12, (out - mu) / np.where(sd > 1e-12, sd, 1.0), out)


def sample_task(cfg, rng, teacher=None, n_features=None, n_classes=None, n_rows=None):
    """Draw one task; raises :class:`DegenerateTaskError` if no attempt covers all classes.

    ``teacher`` and the size overrides exist for tests and for callers that
    want to pin the task shape.
    """
    d = int(n_features) if n_features is not None else int(rng.integers(1, cfg.max_features + 1))
    c = int(n_classes) if n_classes is not None else int(rng.integers(2, cfg.max_classes + 1))
    n = int(n_rows) if n_rows is not None else int(rng.integers(MIN_ROWS, cfg.max_rows + 1))
    if teacher is None:
        teacher = Teacher.random(d, c, cfg.teacher_hidden, rng)
    d, c = teacher.w1.shape[0], teacher.n_classes
    n_train = n // 2
    for _ in range(MAX_LABEL_ATTEMPTS):
        X = rng.standard_normal((n, d))
        logits = teacher.logits(X)
        if cfg.noise_scale > 0:
            logits = logits + cfg.noise_scale * rng.standard_normal(logits.shape)
        y = np.argmax(logits, axis=1)
        perm = rng.permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        if len(np.unique(y[tr])) == c:
            return SyntheticTask(
                train=TabularDataset(X=X[tr], y=y[tr], n_classes=c),
                test=TabularDataset(X=X[te], y=y[te], n_classes=c),
            )
    raise DegenerateTaskError(f"no draw covered all {c} classes in {MAX_LABEL_ATTEMPTS} attempts")


def sample_valid_task(cfg, rng, max_redraws=1000, **kwargs):
    """``sample_task`` with the caller-side redraw loop for degenerate tasks."""
    for _ in range(max_redraws):
        try:
            return sample_task(cfg, rng, **kwargs)
        except DegenerateTaskError:
            continue
    raise DegenerateTaskError(f"{max_redraws} consecutive degenerate tasks")


def gen_step_dataset(n_steps, n, rng, cutoffs=None):
    """One U[0,1] feature; the label flips at each of ``n_steps - 1`` cutoffs.

    Cutoffs are redrawn until every segment between them holds at least one
    sample, so the sorted labels change exactly ``n_steps - 1`` times.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n < max(2, n_steps):
        raise ValueError("need n >= max(2, n_steps)")
    x = rng.uniform(0.0, 1.0, size=n)
    if cutoffs is None:
        while True:
            cuts = np.sort(rng.uniform(0.0, 1.0, size=n_steps - 1))
            seg = np.searchsorted(cuts, x, side="right")
            if len(np.unique(seg)) == n_steps:
                break
    else:
        cuts = np.sort(np.asarray(cutoffs, dtype=np.float64))
        if len(cuts) != n_steps - 1:
            raise ValueError("need exactly n_steps - 1 cutoffs")
    y = np.searchsorted(cuts, x, side="right") % 2
    return TabularDataset(X=x[:, None], y=y, n_classes=2, feature_names=("x",))


BOOLEAN_BITS = 10


def all_bit_rows(n_bits=BOOLEAN_BITS):
    return np.array(list(itertools.product([0, 1], repeat=n_bits)), dtype=np.float64)


def _term_mask(X, term):
    mask = np.ones(len(X), dtype=bool)
    for bit, negated in term:
        mask &= (X[:, bit] == 0) if negated else (X[:, bit] == 1)
    return mask


def gen_boolean_dataset(rank, rng, terms=None):
    """Disjunction of random rank-``rank`` conjunctions over all 1024 bit strings.

    Each term picks ``rank`` distinct bits uniformly without replacement and
    negates each with probability 1/2.  Terms are added until at least a third
    of the rows are positive.  Pass ``terms`` (a list of ``[(bit, negated),
    ...]``) to build a fixed formula instead; the generated terms are returned
    via the dataset's ``vocab["terms"]``.
    """
    if not 1 <= rank <= BOOLEAN_BITS:
        raise ValueError(f"rank must be in [1, {BOOLEAN_BITS}]")
    X = all_bit_rows()
    label = np.zeros(len(X), dtype=bool)
    used = []
    if terms is not None:
        for term in terms:
            label |= _term_mask(X, term)
            used.append(list(term))
    else:
        while label.mean() < 1.0 / 3.0:
            bits = rng.choice(BOOLEAN_BITS, size=rank, replace=False)
            negs = rng.integers(0, 2, size=rank).astype(bool)
            term = [(int(b), bool(s)) for b, s in zip(bits, negs)]
            label |= _term_mask(X, term)
            used.append(term)
    return TabularDataset(X=X, y=label.astype(np.int64), n_classes=2, vocab={"terms": used})


def gen_blobs(n, rng, n_features=2, n_classes=2, separation=3.0):
    """Isotropic unit-variance Gaussian blobs with centers on a random simplex.

    Class means are ``separation`` apart along random directions; classes
    are balanced up to rounding and rows are shuffled.
    """
    directions = rng.standard_normal((n_classes, n_features))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if n_classes == 2:
        centers = np.stack([directions[0], -directions[0]]) * (separation / 2.0)
    else:
        centers = directions * (separation / np.sqrt(2.0))
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    X = centers[y] + rng.standard_normal((n, n_features))
    return TabularDataset(X=X, y=y, n_classes=n_classes)
