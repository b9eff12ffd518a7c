"""Child-network prediction against re-running the encoder for every prediction batch."""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .childnet import predict_proba
from .inference import icl_fit

DEFAULT_BATCH_ROWS = 100


@dataclass
class BenchReport:
    child_rows_per_s: float
    encoder_rows_per_s: float
    ratio: float
    n_rows: int
    repeats: int
    batch_rows: int
    config_fingerprint: str
    encoder_calls_during_child_predict: int

    def to_dict(self):
        return asdict(self)


def config_fingerprint(model):
    return hashlib.sha256(repr(model.config.to_dict()).encode()).hexdigest()[:16]


def _child_path(model, train, X):
    predict_proba(icl_fit(model, train), X)


def _encoder_path(model, train, X, batch_rows):
    for start in range(0, X.shape[0], batch_rows):
        net = icl_fit(model, train)
        predict_proba(net, X[start : start + batch_rows])


def bench(model, train, n_rows=10000, repeats=9, batch_rows=DEFAULT_BATCH_ROWS, seed=0):
    """Median-of-``repeats`` throughput of both paths after one warm-up run each.

    Path (a): one ``icl_fit`` then batched child prediction of ``n_rows``
    rows.  Path (b): the full encoder + child for every ``batch_rows`` rows.
    """
    rng = np.random.default_rng(seed)
    X = train.X[rng.integers(0, train.n_rows, size=n_rows)] + 0.01 * rng.standard_normal((n_rows, train.n_features))

    _child_path(model, train, X)
    _encoder_path(model, train, X[: 2 * batch_rows], batch_rows)
    child_t, enc_t = [], []
    leaked = 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        net = icl_fit(model, train)
        calls = model.encoder_calls
        predict_proba(net, X)
        leaked += model.encoder_calls - calls
        child_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        _encoder_path(model, train, X, batch_rows)
        enc_t.append(time.perf_counter() - t0)
    child = statistics.median(child_t)
    enc = statistics.median(enc_t)
    return BenchReport(
        child_rows_per_s=n_rows / child,
        encoder_rows_per_s=n_rows / enc,
        ratio=enc / child,
        n_rows=n_rows,
        repeats=repeats,
        batch_rows=batch_rows,
        config_fingerprint=config_fingerprint(model),
        encoder_calls_during_child_predict=leaked,
    )


def child_throughput(net, X, repeats=5):
    """Median rows/s of :func:`predict_proba` alone (after one warm-up)."""
    predict_proba(net, X)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict_proba(net, X)
        times.append(time.perf_counter() - t0)
    return X.shape[0] / statistics.median(times)
