"""Metrics, the paired 5x 50/50 split protocol, bundled baselines and the benchmark runner."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedShuffleSplit
from sklearn.neighbors import KNeighborsClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .distill import DistillConfig, distill, train_mlp
from .errors import StratificationError, UndefinedMetricError

# --------------------------------------------------------------------------
# Metrics


def binary_auc(scores, positive):
    """Mann-Whitney AUC; tied (positive, negative) pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_auc_ovr(probs, y):
    """Macro one-vs-rest ROC AUC over the classes present in ``y``.

    A 1-d ``probs`` is read as positive-class scores of a binary problem.
    """
    y = np.asarray(y)
    probs = np.asarray(probs, dtype=np.float64)
    present = np.unique(y)
    if len(present) < 2:
        raise UndefinedMetricError("ROC AUC is undefined when y holds a single class")
    if probs.ndim == 1:
        if not set(present.tolist()) <= {0, 1}:
            raise ValueError("1-d scores require binary 0/1 labels")
        return binary_auc(probs, y == 1)
    if present.max() >= probs.shape[1]:
        raise ValueError("labels exceed the number of probability columns")
    return float(np.mean([binary_auc(probs[:, k], y == k) for k in present]))


def normalize_scores(scores):
    """Min-max rescale one dataset's scores across algorithms; all-equal -> 0.5.

    Accepts a mapping ``algorithm -> score`` or an array (last axis =
    algorithms) and returns the same kind.
    """
    if isinstance(scores, dict):
        keys = list(scores)
        vals = normalize_scores(np.array([scores[k] for k in keys], dtype=np.float64))
        return dict(zip(keys, vals.tolist()))
    s = np.asarray(scores, dtype=np.float64)
    lo = s.min(axis=-1, keepdims=True)
    hi = s.max(axis=-1, keepdims=True)
    span = hi - lo
    return np.where(span > 0, (s - lo) / np.where(span > 0, span, 1.0), 0.5)


def split_5x(ds, seed=0, n_splits=5):
    """Five class-stratified 50/50 ``(train, test)`` splits with derived seeds."""
    counts = np.bincount(ds.y, minlength=ds.n_classes)
    present = counts[counts > 0]
    if present.min() < 2:
        raise StratificationError("every class needs at least two rows for a stratified halving")
    seeds = np.random.SeedSequence(seed).generate_state(n_splits)
    out = []
    for s in seeds:
        sss = StratifiedShuffleSplit(n_splits=1, test_size=0.5, random_state=int(s))
        tr, te = next(sss.split(ds.X, ds.y))
        out.append((ds.subset(np.sort(tr)), ds.subset(np.sort(te))))
    return out


# --------------------------------------------------------------------------
# Hyperparameter spaces for the bundled baselines


@dataclass(frozen=True)
class Choice:
    options: tuple

    def sample(self, rng):
        return self.options[int(rng.integers(len(self.options)))]


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


@dataclass(frozen=True)
class RandInt:
    low: int
    high: int

    def sample(self, rng):
        return int(rng.integers(self.low, self.high))


SEARCH_SPACES = {
    "mlp": {
        "hidden_size": Choice((16, 32, 64, 128, 256, 512)),
        "learning_rate": LogUniform(1e-5, 1e-2),
        "n_epochs": Choice((10, 100, 1000)),
        "dropout_rate": Choice((0.0, 0.1, 0.3)),
        "n_layers": Choice((1, 2, 3)),
        "weight_decay": LogUniform(1e-5, 1e-2),
    },
    "knn": {"n_neighbors": RandInt(1, 16)},
    "logreg": {
        "penalty": Choice(("l1", "l2", "none")),
        "max_iter": RandInt(50, 500),
        "fit_intercept": Choice((True, False)),
        "C": LogUniform(math.exp(-5), math.log(5)),
    },
}

DEFAULT_PARAMS = {
    "mlp": {"hidden_size": 128, "learning_rate": 1e-3, "n_epochs": 100, "dropout_rate": 0.0, "n_layers": 2,
            "weight_decay": 1e-5},
    "knn": {"n_neighbors": 5},
    "logreg": {"penalty": "l2", "max_iter": 500, "fit_intercept": True, "C": 1.0},
}


def sample_params(space, rng):
    return {name: dist.sample(rng) for name, dist in space.items()}


# --------------------------------------------------------------------------
# Baselines: fit(TabularDataset) / predict_proba(X)


class SklearnBaseline:
    def __init__(self, estimator):
        self.estimator = estimator

    def fit(self, train):
        self.pipe_ = make_pipeline(StandardScaler(), self.estimator).fit(train.X, train.y)
        self.n_classes_ = train.n_classes
        return self

    def predict_proba(self, X):
        raw = self.pipe_.predict_proba(X)
        out = np.zeros((raw.shape[0], self.n_classes_))
        out[:, self.pipe_.classes_] = raw
        return out


def make_logreg(params=None):
    p = {**DEFAULT_PARAMS["logreg"], **(params or {})}
    penalty = None if p["penalty"] == "none" else p["penalty"]
    solver = "saga" if penalty == "l1" else "lbfgs"
    return SklearnBaseline(LogisticRegression(penalty=penalty, C=p["C"], max_iter=p["max_iter"],
                                              fit_intercept=p["fit_intercept"], solver=solver))


def make_knn(params=None):
    p = {**DEFAULT_PARAMS["knn"], **(params or {})}
    return KNNBaseline(p["n_neighbors"])


class KNNBaseline(SklearnBaseline):
    def __init__(self, n_neighbors):
        super().__init__(None)
        self.n_neighbors = n_neighbors

    def fit(self, train):
        self.estimator = KNeighborsClassifier(n_neighbors=min(self.n_neighbors, train.n_rows))
        return super().fit(train)


class MLPBaseline:
    """Dense MLP trained by gradient descent on the labels."""

    def __init__(self, params=None, seed=0):
        p = {**DEFAULT_PARAMS["mlp"], **(params or {})}
        self.cfg = DistillConfig(hidden=p["hidden_size"], layers=p["n_layers"], epochs=p["n_epochs"],
                                 lr=p["learning_rate"], dropout=p["dropout_rate"],
                                 weight_decay=p["weight_decay"], seed=seed)

    def fit(self, train):
        self.net_ = train_mlp(train, self.cfg)
        return self

    def predict_proba(self, X):
        return self.net_.predict_proba(X)


class DistilledStudent:
    """Teacher classifier's training-set predictions distilled into a dense MLP."""

    def __init__(self, teacher, cfg=DistillConfig()):
        self.teacher = teacher
        self.cfg = cfg

    def fit(self, train):
        probs = self.teacher.fit(train).predict_proba(train.X)
        self.net_ = distill(probs, train, self.cfg)
        return self

    def predict_proba(self, X):
        return self.net_.predict_proba(X)


BASELINE_FACTORIES = {
    "logreg": lambda params=None, seed=0: make_logreg(params),
    "knn": lambda params=None, seed=0: make_knn(params),
    "mlp": lambda params=None, seed=0: MLPBaseline(params, seed),
}


class RandomSearch:
    """Random search over a space, scored on a stratified inner holdout of the training set."""

    def __init__(self, kind, n_iter, seed=0):
        self.kind = kind
        self.n_iter = n_iter
        self.seed = seed

    def fit(self, train):
        rng = np.random.default_rng(self.seed)
        factory = BASELINE_FACTORIES[self.kind]
        candidates = [DEFAULT_PARAMS[self.kind]] + [sample_params(SEARCH_SPACES[self.kind], rng)
                                                    for _ in range(self.n_iter)]
        best, best_auc = candidates[0], -np.inf
        if self.n_iter > 0:
            inner_tr, inner_va = split_5x(train, self.seed, n_splits=1)[0]
            for params in candidates:
                try:
                    model = factory(params, self.seed).fit(inner_tr)
                    auc = roc_auc_ovr(model.predict_proba(inner_va.X), inner_va.y)
                except Exception:  # candidate failed; keep searching
                    continue
                if auc > best_auc:
                    best, best_auc = params, auc
        self.best_params_ = best
        self.model_ = factory(best, self.seed).fit(train)
        return self

    def predict_proba(self, X):
        return self.model_.predict_proba(X)


# --------------------------------------------------------------------------
# Benchmark runner


@dataclass
class EvalResult:
    records: pd.DataFrame
    per_dataset: pd.DataFrame
    summary: pd.DataFrame

    def to_text(self):
        return self.summary.to_string(float_format=lambda v: f"{v:.4f}")


def benchmark(algorithms, datasets, seed=0, n_splits=5):
    """Run every algorithm on the same splits of every dataset.

    ``algorithms`` maps name -> factory ``f(seed) -> estimator``; ``datasets``
    maps name -> :class:`TabularDataset`.  Fit and predict are timed
    separately.  Estimators with a ``set_context(dataset, split)`` method
    are told which split they are about to see.  A failure leaves a NaN AUC and removes the dataset from the
    normalized / rank aggregates of every algorithm.
    """
    rows = []
    for ds_name, ds in datasets.items():
        for split_idx, (train, test) in enumerate(split_5x(ds, seed, n_splits)):
            for algo_name, factory in algorithms.items():
                auc = fit_s = predict_s = np.nan
                error = ""
                try:
                    est = factory(seed + split_idx)
                    if hasattr(est, "set_context"):
                        est.set_context(ds_name, split_idx)
                    t0 = time.perf_counter()
                    est.fit(train)
                    t1 = time.perf_counter()
                    probs = est.predict_proba(test.X)
                    t2 = time.perf_counter()
                    fit_s, predict_s = t1 - t0, t2 - t1
                    auc = roc_auc_ovr(probs, test.y)
                except Exception as exc:  # recorded as missing
                    error = f"{type(exc).__name__}: {exc}"
                rows.append({"dataset": ds_name, "split": split_idx, "algorithm": algo_name, "auc": auc,
                             "fit_s": fit_s, "predict_s": predict_s, "error": error})
    records = pd.DataFrame(rows)
    return EvalResult(records=records, **aggregate(records))


def aggregate(records):
    """Per-dataset mean AUC, normalized AUC and rank, plus the per-algorithm summary.

    Datasets where any algorithm failed on any split are left out of the
    normalized AUC and rank columns for every algorithm.
    """
    algos = list(dict.fromkeys(records["algorithm"]))
    mean_auc = records.groupby(["dataset", "algorithm"], sort=False)["auc"].apply(
        lambda s: s.mean() if s.notna().all() else np.nan).unstack("algorithm").reindex(columns=algos)
    complete = mean_auc.dropna(how="any")
    norm = pd.DataFrame(normalize_scores(complete.to_numpy()), index=complete.index, columns=algos)
    ranks = pd.DataFrame([rankdata(-row, method="average") for row in norm.to_numpy()], index=norm.index,
                         columns=algos, dtype=np.float64)

    def long(frame, name):
        return frame.reset_index().melt(id_vars="dataset", var_name="algorithm", value_name=name)

    per_dataset = long(mean_auc, "auc").merge(long(norm, "normalized_auc"), how="left", on=["dataset", "algorithm"])
    per_dataset = per_dataset.merge(long(ranks, "rank"), how="left", on=["dataset", "algorithm"])

    done = records[records["dataset"].isin(complete.index)]
    split_means = done.groupby(["algorithm", "split"])["auc"].mean().unstack("split")
    summary = pd.DataFrame({
        "rank": ranks.mean().reindex(algos),
        "normalized_auc": norm.mean().reindex(algos),
        "normalized_auc_std": norm.std(ddof=0).reindex(algos),
        "auc": split_means.mean(axis=1).reindex(algos),
        "auc_std": split_means.std(axis=1, ddof=0).reindex(algos),
        "fit_s": records.groupby("algorithm")["fit_s"].mean().reindex(algos),
        "predict_s": records.groupby("algorithm")["predict_s"].mean().reindex(algos),
    })
    summary["fit_plus_predict_s"] = summary["fit_s"] + summary["predict_s"]
    summary.index.name = "algorithm"
    return {"per_dataset": per_dataset, "summary": summary.sort_values("rank", kind="stable")}


# --------------------------------------------------------------------------
# Small task suites for checking that meta-training learned something


def heldout_prior_tasks(prior, n_tasks=200, seed=12345):
    """Prior tasks from a generator stream disjoint from any training seed in use."""
    from .prior import sample_valid_task

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    return [sample_valid_task(prior, rng) for _ in range(n_tasks)]


def blob_tasks(n_tasks=50, seed=0, n_rows=100, n_features=2, n_classes=2):
    """Gaussian-blob train/test tasks (first half of each draw trains)."""
    from .prior import SyntheticTask, gen_blobs

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_tasks):
        ds = gen_blobs(n_rows, rng, n_features=n_features, n_classes=n_classes)
        half = n_rows // 2
        out.append(SyntheticTask(train=ds.subset(np.arange(half)), test=ds.subset(np.arange(half, n_rows))))
    return out


def toy_suite(n_datasets=20, seed=0):
    """Name -> dataset: small Gaussian-blob problems of varying size, width and class count."""
    from .prior import gen_blobs

    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n_datasets):
        n = int(rng.integers(40, 201))
        d = int(rng.integers(2, 9))
        c = int(rng.integers(2, 4))
        sep = float(rng.uniform(1.5, 3.0))
        out[f"blobs_{i:02d}_n{n}_d{d}_c{c}"] = gen_blobs(n, rng, n_features=d, n_classes=c, separation=sep)
    return out


def task_aucs(fit_predict, tasks):
    """ROC AUC of ``fit_predict(train, X_test)`` per task; NaN where the test half has one class."""
    out = []
    for task in tasks:
        if len(np.unique(task.test.y)) < 2:
            out.append(np.nan)
            continue
        out.append(roc_auc_ovr(fit_predict(task.train, task.test.X), task.test.y))
    return np.array(out)


def icl_task_aucs(model, tasks):
    """Per-task AUC of the single (non-ensembled) child network."""
    from .childnet import predict_proba
    from .inference import icl_fit

    return task_aucs(lambda train, X: predict_proba(icl_fit(model, train), X), tasks)
