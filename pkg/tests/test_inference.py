import numpy as np
import pytest

from mothernet.childnet import FinetuneParams, predict_proba
from mothernet.data import EnsembleMemberConfig, TabularDataset, rotate
from mothernet.errors import NumericInputError, ShapeError, TooManyFeaturesError, UnsupportedClassCountError
from mothernet.inference import (
    FineTunedMotherNet,
    MemberPipeline,
    MotherNetClassifier,
    encoded_width,
    ensemble_predict,
    icl_fit,
    sample_member_configs,
)
from mothernet.prior import gen_blobs


def mixed_dataset(rng, n=60):
    """Two continuous columns and one categorical column with 4 levels."""
    X = np.column_stack([rng.standard_normal(n), rng.standard_normal(n), rng.integers(0, 4, n)])
    y = (X[:, 0] + (X[:, 2] == 1) > 0).astype(int) + (X[:, 1] > 1)
    return TabularDataset(X=X, y=y, n_classes=3, categorical_mask=np.array([False, False, True]))


class TestIclFit:
    def test_single_encoder_call_and_pure(self, desk_model, blobs):
        before = {k: v.clone() for k, v in desk_model.state_dict().items()}
        calls = desk_model.encoder_calls
        net = icl_fit(desk_model, blobs)
        assert desk_model.encoder_calls == calls + 1
        for k, v in desk_model.state_dict().items():
            assert (v == before[k]).all()
        predict_proba(net, blobs.X)
        assert desk_model.encoder_calls == calls + 1

    def test_shape(self, desk_model, blobs):
        net = icl_fit(desk_model, blobs)
        assert (net.n_features, net.n_classes) == (2, 2)
        assert predict_proba(net, blobs.X).shape == (blobs.n_rows, 2)

    def test_errors(self, desk_model, rng):
        with pytest.raises(TooManyFeaturesError):
            icl_fit(desk_model, TabularDataset(X=rng.standard_normal((5, 101)), y=np.array([0, 1, 0, 1, 0]), n_classes=2))
        with pytest.raises(UnsupportedClassCountError):
            icl_fit(desk_model, TabularDataset(X=rng.standard_normal((3, 2)), y=np.zeros(3, int), n_classes=1))
        bad = rng.standard_normal((4, 2))
        bad[0, 0] = np.nan
        with pytest.raises(NumericInputError):
            icl_fit(desk_model, TabularDataset(X=bad, y=np.array([0, 1, 0, 1]), n_classes=2))


class TestMembers:
    def test_identity_member_equals_icl(self, desk_model, blobs):
        clf = MotherNetClassifier(desk_model, configs=[EnsembleMemberConfig()]).fit(blobs)
        X = blobs.X + 0.1
        assert np.array_equal(clf.predict_proba(X), predict_proba(icl_fit(desk_model, blobs), X))

    def test_rotation_undone(self, desk_model, rng):
        ds = gen_blobs(60, rng, n_features=4, n_classes=3)
        cfg = EnsembleMemberConfig(feature_rotation=1, class_rotation=2)
        probs = MemberPipeline(cfg).fit(desk_model, ds).predict_proba(ds.X)
        rot = rotate(ds, cfg)
        ref = predict_proba(icl_fit(desk_model, rot), rotate(ds, cfg).X)
        # rotated class j is original class (j - 2) mod 3
        np.testing.assert_array_equal(probs[:, 0], ref[:, 2])
        np.testing.assert_array_equal(probs[:, 1], ref[:, 0])

    def test_one_hot_and_quantile_member(self, desk_model, rng):
        ds = mixed_dataset(rng)
        pipe = MemberPipeline(EnsembleMemberConfig(use_one_hot=True, use_quantile=True)).fit(desk_model, ds)
        assert pipe.n_features == 2 + 4
        p = pipe.predict_proba(ds.X)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_one_hot_overflow_keeps_member(self, desk_model, rng):
        X = np.column_stack([np.arange(150) % 120, rng.standard_normal(150)])
        ds = TabularDataset(X=X, y=np.arange(150) % 2, n_classes=2, categorical_mask=np.array([True, False]))
        assert encoded_width(ds, True) == 2
        pipe = MemberPipeline(EnsembleMemberConfig(use_one_hot=True)).fit(desk_model, ds)
        assert pipe.one_hot is None and pipe.n_features == 2

    def test_sampled_configs_in_range(self, rng):
        ds = mixed_dataset(rng)
        cfgs = sample_member_configs(ds, 200, seed=4)
        assert len(cfgs) == 200
        assert any(c.use_one_hot for c in cfgs) and any(not c.use_one_hot for c in cfgs)
        for c in cfgs:
            assert 0 <= c.class_rotation < 3
            assert 0 <= c.feature_rotation < encoded_width(ds, c.use_one_hot)


class TestEnsemble:
    def test_rows_sum_to_one_and_reproducible(self, desk_model, rng):
        ds = mixed_dataset(rng)
        a = ensemble_predict(desk_model, ds, ds.X, k=8, seed=3)
        b = ensemble_predict(desk_model, ds, ds.X, k=8, seed=3)
        np.testing.assert_allclose(a.mean_probs.sum(axis=1), 1.0, atol=1e-6)
        assert a.mean_probs.tobytes() == b.mean_probs.tobytes()
        assert len(a.member_probs) == 8
        np.testing.assert_array_equal(a.mean_probs, MotherNetClassifier(desk_model, 8, 3).fit(ds).predict_proba(ds.X))

    def test_other_seed_differs(self, desk_model, rng):
        ds = mixed_dataset(rng)
        a = ensemble_predict(desk_model, ds, ds.X, k=4, seed=0).member_configs
        b = ensemble_predict(desk_model, ds, ds.X, k=4, seed=1).member_configs
        assert a != b

    def test_feature_mismatch(self, desk_model, blobs):
        clf = MotherNetClassifier(desk_model, n_members=2).fit(blobs)
        with pytest.raises(ShapeError):
            clf.predict_proba(np.zeros((3, 5)))


class TestFineTuned:
    def test_zero_epochs_equals_icl(self, desk_model, blobs):
        ft = FineTunedMotherNet(desk_model, FinetuneParams(epochs=0)).fit(blobs)
        assert np.array_equal(ft.predict_proba(blobs.X), predict_proba(icl_fit(desk_model, blobs), blobs.X))
