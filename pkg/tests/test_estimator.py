"""The sklearn-facing estimator surface."""

import numpy as np
import pytest
from sklearn.base import clone

from serforge.errors import ConfigError, DataError
from serforge.estimator import FbankExtractor, SERClassifier


def separable_features(n_per_class=6, dim=8, seed=0, classes=4):
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=2.0, size=(classes, dim))
    X, y = [], []
    for c in range(classes):
        for _ in range(n_per_class):
            t = int(rng.integers(4, 10))
            X.append((means[c] + 0.3 * rng.normal(size=(t, dim))).astype(np.float32))
            y.append(c)
    return X, np.array(y)


class TestSERClassifier:
    def test_fit_predict_recovers_labels(self, tmp_path):
        X, y = separable_features()
        clf = SERClassifier(epochs=20, lr=5e-3, seed=1, checkpoint_dir=str(tmp_path))
        clf.fit(X, y)
        assert (clf.predict(X) == y).mean() >= 0.9

    def test_score_is_fraction_correct(self, tmp_path):
        X, y = separable_features(seed=1)
        clf = SERClassifier(epochs=15, lr=5e-3, seed=2, checkpoint_dir=str(tmp_path))
        clf.fit(X, y)
        preds = clf.predict(X)
        assert clf.score(X, y) == pytest.approx((preds == y).mean())

    def test_predict_proba_rows_sum_to_one(self, tmp_path):
        X, y = separable_features(seed=2)
        clf = SERClassifier(epochs=5, seed=3, checkpoint_dir=str(tmp_path))
        clf.fit(X, y)
        proba = clf.predict_proba(X[:7])
        assert proba.shape == (7, 4)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)

    def test_string_labels(self, tmp_path):
        X, y = separable_features(n_per_class=4, seed=3)
        names = np.array(["angry", "happy", "neutral", "sad"])
        clf = SERClassifier(epochs=10, lr=5e-3, seed=4, checkpoint_dir=str(tmp_path))
        clf.fit(X, names[y])
        preds = clf.predict(X)
        assert set(preds) <= set(names)

    def test_get_params_set_params_clone(self):
        clf = SERClassifier(epochs=7, lr=0.01, aggregators=("ecapa",))
        params = clf.get_params()
        assert params["epochs"] == 7
        twin = clone(clf)
        assert twin.get_params() == params
        clf.set_params(epochs=3)
        assert clf.epochs == 3

    def test_unfitted_predict_raises(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            SERClassifier().predict([np.zeros((3, 4), dtype=np.float32)])

    def test_predict_dim_mismatch(self, tmp_path):
        X, y = separable_features(n_per_class=3, seed=4)
        clf = SERClassifier(epochs=2, seed=5, checkpoint_dir=str(tmp_path))
        clf.fit(X, y)
        with pytest.raises(ConfigError, match="dims"):
            clf.predict([np.zeros((4, 3), dtype=np.float32)])

    def test_explicit_validation_set(self, tmp_path):
        X, y = separable_features(seed=5)
        Xv, yv = separable_features(n_per_class=2, seed=6)
        clf = SERClassifier(epochs=6, seed=6, avg_upstream=False, avg_downstream=True,
                            k_best=3, checkpoint_dir=str(tmp_path))
        clf.fit(X, y, X_val=Xv, y_val=yv)
        assert len(clf.history_) == 6

    def test_single_class_rejected(self, tmp_path):
        X, _ = separable_features(n_per_class=3)
        with pytest.raises(DataError, match="2 classes"):
            SERClassifier(checkpoint_dir=str(tmp_path)).fit(X, np.zeros(len(X)))

    def test_multibranch_requires_tuples(self):
        clf = SERClassifier(branches=({"source": "fbank"}, {"source": "file:x"}),
                            fusion="late", aggregators=("mean", "mean"))
        with pytest.raises(DataError, match="branch"):
            clf.fit([np.zeros((3, 4), dtype=np.float32)], [0])

    def test_trainable_toy_history_and_averaging(self, tmp_path):
        X, y = separable_features(seed=7)
        clf = SERClassifier(branches=({"source": "toy", "trainable": True},),
                            epochs=6, k_best=5, avg_upstream=True, avg_downstream=True,
                            seed=8, lr=5e-3, checkpoint_dir=str(tmp_path))
        clf.fit(X, y)
        assert len(clf.history_) == 6
        assert (tmp_path / "final.serc").exists()


class TestFbankExtractor:
    def test_transform_shapes(self):
        rng = np.random.default_rng(0)
        waves = [rng.uniform(-0.5, 0.5, 16000).astype(np.float32),
                 rng.uniform(-0.5, 0.5, 8000).astype(np.float32)]
        feats = FbankExtractor().fit().transform(waves)
        assert feats[0].shape == (98, 40)
        assert feats[1].shape == (48, 40)

    def test_param_round_trip(self):
        ext = FbankExtractor(n_mels=24)
        twin = clone(ext)
        assert twin.get_params()["n_mels"] == 24

    def test_invalid_settings_rejected_at_fit(self):
        with pytest.raises(DataError):
            FbankExtractor(window_ms=5, hop_ms=10).fit()
