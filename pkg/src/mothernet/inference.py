"""In-context learning: one encoder pass turns a training set into a child network.

Ensembling follows the bagging-free recipe: each member sees the data under
a circular shift of the features and of the class labels, optionally with
one-hot encoded categorical columns and/or quantile encoded continuous
columns.  Member outputs are mapped back to the original class order and
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .childnet import assemble_child, finetune_child, predict_proba
from .data import (
    MAX_CLASSES,
    MAX_FEATURES,
    EnsembleMemberConfig,
    OneHotEncoder,
    Standardizer,
    check_finite,
    pad_and_scale,
    quantile_encode,
)
from .errors import ShapeError, TooManyFeaturesError, UnsupportedClassCountError

DEFAULT_MEMBERS = 8


def icl_fit(model, train):
    """Child network for ``train`` from a single forward pass; ``model`` is not modified.

    Features are standardized with training statistics and scaled by
    ``100 / d``; that map is stored on the child, so its ``predict_proba``
    takes features in the same space as ``train.X``.
    """
    d, c = train.n_features, train.n_classes
    if d > MAX_FEATURES:
        raise TooManyFeaturesError(f"{d} features after encoding; at most {MAX_FEATURES} supported")
    if not 2 <= c <= MAX_CLASSES:
        raise UnsupportedClassCountError(f"need 2..{MAX_CLASSES} classes, got {c}")
    check_finite(train.X)
    st = Standardizer.fit(train.X)
    phi = model.phi_for(pad_and_scale(st.transform(train.X)), train.y)
    net = assemble_child(phi, model, d, c)
    object.__setattr__(net, "input_offset", st.mean.astype(np.float32))
    object.__setattr__(net, "input_scale", (st.scale * (MAX_FEATURES / d)).astype(np.float32))
    return net


class MemberPipeline:
    """Feature/label transforms of one ensemble member, fitted on training data."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.one_hot = None
        self.quantile_ref = None
        self.categorical_mask = None
        self.n_classes = None
        self.n_features = None
        self.net = None

    def _encode(self, X):
        if self.one_hot is not None:
            X = self.one_hot.transform(X)
        if self.quantile_ref is not None:
            X = quantile_encode(self.quantile_ref, X, self.categorical_mask)
        return np.roll(X, self.cfg.feature_rotation % X.shape[1], axis=1) if self.cfg.feature_rotation else X

    def fit_transform(self, train):
        X = train.X
        cat = train.categorical_mask
        if self.cfg.use_one_hot and cat.any():
            enc = OneHotEncoder(cat).fit(X)
            # would overflow the input width: fall back to raw categorical codes
            if enc.n_output_features <= MAX_FEATURES:
                self.one_hot = enc
                X = enc.transform(X)
                cat = enc.output_categorical_mask()
        self.categorical_mask = cat
        if self.cfg.use_quantile and (~cat).any():
            self.quantile_ref = X.copy()
            X = quantile_encode(self.quantile_ref, X, cat)
        if self.cfg.feature_rotation:
            X = np.roll(X, self.cfg.feature_rotation % X.shape[1], axis=1)
        self.n_features = X.shape[1]
        self.n_classes = train.n_classes
        y = (train.y + self.cfg.class_rotation) % self.n_classes
        return X, y

    def fit(self, model, train):
        X, y = self.fit_transform(train)
        rotated = replace(train, X=X, y=y, categorical_mask=np.zeros(X.shape[1], dtype=bool), missing_mask=None,
                          feature_names=None)
        self.net = icl_fit(model, rotated)
        return self

    def predict_proba(self, X):
        probs = predict_proba(self.net, self._encode(np.asarray(X, dtype=np.float64)))
        k = self.cfg.class_rotation % self.n_classes
        # column j of the rotated problem is original class (j - k) mod c
        return probs[:, (np.arange(self.n_classes) + k) % self.n_classes]


def encoded_width(train, use_one_hot):
    if use_one_hot and train.categorical_mask.any():
        width = OneHotEncoder(train.categorical_mask).fit(train.X).n_output_features
        if width <= MAX_FEATURES:
            return width
    return train.n_features


def sample_member_configs(train, k=DEFAULT_MEMBERS, seed=0):
    """``k`` members: fair-coin encoding flags, uniform feature and class rotations."""
    rng = np.random.default_rng(seed)
    configs = []
    for _ in range(k):
        use_one_hot = bool(rng.integers(0, 2))
        use_quantile = bool(rng.integers(0, 2))
        d = encoded_width(train, use_one_hot)
        configs.append(
            EnsembleMemberConfig(
                feature_rotation=int(rng.integers(0, d)),
                class_rotation=int(rng.integers(0, train.n_classes)),
                use_one_hot=use_one_hot,
                use_quantile=use_quantile,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return configs


@dataclass
class EnsemblePrediction:
    member_configs: list
    member_probs: list
    mean_probs: np.ndarray


class MotherNetClassifier:
    """Fit = one encoder pass per member; predict = child networks only.

    ``n_members=None`` skips ensembling and uses the identity member alone.
    """

    def __init__(self, model, n_members=DEFAULT_MEMBERS, seed=0, configs=None):
        self.model = model
        self.n_members = n_members
        self.seed = seed
        self.configs = configs
        self.members_ = None

    def fit(self, train):
        if self.configs is not None:
            configs = list(self.configs)
        elif self.n_members is None:
            configs = [EnsembleMemberConfig()]
        else:
            configs = sample_member_configs(train, self.n_members, self.seed)
        self.members_ = [MemberPipeline(cfg).fit(self.model, train) for cfg in configs]
        self.n_classes_ = train.n_classes
        self.n_features_ = train.n_features
        return self

    def member_predictions(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_:
            raise ShapeError(f"expected {self.n_features_} feature columns, got shape {X.shape}")
        return [m.predict_proba(X) for m in self.members_]

    def predict_proba(self, X):
        probs = self.member_predictions(X)
        total = probs[0].copy()
        for p in probs[1:]:
            total += p
        return total / len(probs)


def ensemble_predict(model, train, X_test, k=DEFAULT_MEMBERS, seed=0, configs=None):
    clf = MotherNetClassifier(model, n_members=k, seed=seed, configs=configs).fit(train)
    members = clf.member_predictions(X_test)
    total = members[0].copy()
    for p in members[1:]:
        total += p
    return EnsemblePrediction(
        member_configs=[m.cfg for m in clf.members_], member_probs=members, mean_probs=total / len(members)
    )


class FineTunedMotherNet:
    """Single identity member whose child is then refined by gradient descent."""

    def __init__(self, model, hp):
        self.model = model
        self.hp = hp

    def fit(self, train):
        net = icl_fit(self.model, train)
        self.net_ = finetune_child(net, train, self.hp)
        return self

    def predict_proba(self, X):
        return predict_proba(self.net_, X)
