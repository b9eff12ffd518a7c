import numpy as np
import pandas as pd
import pytest

from mothernet.errors import ShapeError
from mothernet.plotting import boundary_grid, plot_auc_vs_time, plot_boundary, plot_training_curve
from mothernet.prior import gen_blobs


class Constant:
    def predict_proba(self, X):
        return np.full((len(X), 2), 0.5)


class Halfplane:
    def predict_proba(self, X):
        p = (X[:, 0] < 0).astype(float)
        return np.column_stack([p, 1 - p])


class TestBoundary:
    def test_grid_extent(self, blobs):
        xx, yy, p0 = boundary_grid(Constant(), blobs.X)
        assert xx.shape == yy.shape == p0.shape == (200, 200)
        assert xx.min() == pytest.approx(blobs.X[:, 0].min() - 0.5)
        assert yy.max() == pytest.approx(blobs.X[:, 1].max() + 0.5)

    def test_svg_written(self, blobs, tmp_path):
        path = tmp_path / "b.svg"
        _, _, p0 = plot_boundary(Halfplane(), blobs, path, resolution=50)
        text = path.read_text()
        assert text.lstrip().startswith("<?xml") and "<svg" in text
        assert set(np.unique(p0)) <= {0.0, 1.0}

    def test_deterministic_svg(self, blobs, tmp_path):
        plot_boundary(Constant(), blobs, tmp_path / "a.svg", resolution=20)
        plot_boundary(Constant(), blobs, tmp_path / "b.svg", resolution=20)
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_needs_two_features(self, rng):
        ds = gen_blobs(20, rng, n_features=3)
        with pytest.raises(ShapeError):
            boundary_grid(Constant(), ds.X)


def test_report_figures(tmp_path):
    summary = pd.DataFrame({"normalized_auc": [0.2, 0.9], "fit_plus_predict_s": [0.01, 1.0]}, index=["a", "b"])
    plot_auc_vs_time(summary, tmp_path / "t.svg")
    plot_training_curve([{"loss": 1.0 / (i + 1)} for i in range(300)], tmp_path / "l.svg")
    assert (tmp_path / "t.svg").stat().st_size > 0 and (tmp_path / "l.svg").stat().st_size > 0
