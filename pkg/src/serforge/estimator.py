"""Scikit-learn style estimators wrapping the pipeline.

``SERClassifier`` is the trainable graph (upstream branches, aggregation,
linear classifier) behind a fit/predict interface, so it composes with
sklearn tooling (clone, grid search, pipelines). ``FbankExtractor`` is the
stateless transformer from waveforms to log-mel features.

X is a list of per-utterance feature matrices (or per-utterance tuples of
matrices for fused models) because utterances have variable length.
"""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .audio import FbankConfig, Waveform, log_mel_fbank
from .downstream import EcapaConfig
from .errors import ConfigError, DataError
from .model import BranchSpec, ModelGraph
from .nn.functional import softmax
from .training import (
    Example,
    TrainConfig,
    collate,
    finetune_and_average,
    make_batches,
)
from .validation import check_labels, normalize_feature_lists

DEFAULT_BRANCHES = ({"source": "fbank"},)


class SERClassifier(BaseEstimator, ClassifierMixin):
    """Emotion classifier over frame-level feature sequences.

    Parameters mirror the experiment configuration: the branch list describes
    where each feature stream comes from and whether a trainable toy encoder
    sits on top of it, ``fusion``/``aggregators`` fix the graph layout, and
    the averaging flags control whether the upstream and downstream halves of
    the final model are checkpoint averages or the single best checkpoint.
    """

    def __init__(self, branches=DEFAULT_BRANCHES, fusion="none",
                 aggregators=("mean",), ecapa=None, epochs=20, batch_size=8,
                 lr=1e-3, seed=0, checkpoint_every=1, k_best=5,
                 avg_upstream=False, avg_downstream=False, train_upstream=True,
                 val_fraction=0.2, checkpoint_dir=None, classes=None):
        self.branches = branches
        self.fusion = fusion
        self.aggregators = aggregators
        self.ecapa = ecapa
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.checkpoint_every = checkpoint_every
        self.k_best = k_best
        self.avg_upstream = avg_upstream
        self.avg_downstream = avg_downstream
        self.train_upstream = train_upstream
        self.val_fraction = val_fraction
        self.checkpoint_dir = checkpoint_dir
        self.classes = classes

    # -- internals -----------------------------------------------------------

    def _branch_specs(self) -> list[BranchSpec]:
        specs = []
        for b in self.branches:
            if isinstance(b, BranchSpec):
                spec = b
            else:
                spec = BranchSpec(source=b["source"], name=b.get("name", ""),
                                  trainable=bool(b.get("trainable", False)))
            if not self.train_upstream and spec.trainable:
                spec = BranchSpec(source=spec.source, name=spec.name, trainable=False)
            specs.append(spec)
        return specs

    def _ecapa_config(self) -> EcapaConfig:
        if self.ecapa is None:
            return EcapaConfig()
        if isinstance(self.ecapa, EcapaConfig):
            return self.ecapa
        overrides = dict(self.ecapa)
        for key in ("kernel_sizes", "dilations"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return EcapaConfig(**overrides)

    def _make_examples(self, X, y_idx=None, ids=None):
        n = len(X)
        labels = y_idx if y_idx is not None else np.zeros(n, dtype=np.int64)
        ids = ids if ids is not None else [f"utt{i}" for i in range(n)]
        return [Example(utt_id=ids[i], inputs=X[i], label=int(labels[i]))
                for i in range(n)]

    def _encode_targets(self, y):
        if self.classes is not None:
            classes = np.asarray(self.classes)
        else:
            classes = np.unique(np.asarray(y))
        lookup = {c: i for i, c in enumerate(classes.tolist())}
        try:
            idx = np.array([lookup[v] for v in np.asarray(y).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]!r} not in classes {classes.tolist()}") from exc
        return classes, idx

    # -- sklearn surface ------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        specs = self._branch_specs()
        X_norm, dims = normalize_feature_lists(X, len(specs))
        y = check_labels(y, len(X_norm))
        classes, y_idx = self._encode_targets(y)
        if len(classes) < 2:
            raise DataError(f"need at least 2 classes to fit, got {classes.tolist()}")

        train_examples = self._make_examples(X_norm, y_idx)
        if X_val is not None:
            Xv_norm, dims_v = normalize_feature_lists(X_val, len(specs))
            if dims_v != dims:
                raise ConfigError(f"validation feature dims {dims_v} != training dims {dims}")
            yv = check_labels(y_val, len(Xv_norm))
            _, yv_idx = self._encode_targets(yv)
            val_examples = self._make_examples(Xv_norm, yv_idx,
                                               ids=[f"val{i}" for i in range(len(Xv_norm))])
        else:
            rng = np.random.default_rng([self.seed, 23])
            order = rng.permutation(len(train_examples))
            n_train = max(1, int(np.floor((1.0 - self.val_fraction) * len(order) + 0.5)))
            if n_train >= len(order):
                n_train = len(order) - 1
            if n_train < 1:
                raise DataError("too few examples to split off a validation set; "
                                "pass X_val/y_val explicitly")
            val_examples = [train_examples[i] for i in order[n_train:]]
            train_examples = [train_examples[i] for i in order[:n_train]]

        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          seed=self.seed, checkpoint_every=self.checkpoint_every,
                          k_best=self.k_best, train_upstream=self.train_upstream)
        graph = ModelGraph(specs, self.fusion, list(self.aggregators), dims,
                           n_classes=len(classes), ecapa=self._ecapa_config(),
                           seed=self.seed)
        out_dir = self.checkpoint_dir or tempfile.mkdtemp(prefix="serforge-ckpt-")
        history = finetune_and_average(graph, train_examples, val_examples, cfg,
                                       self.avg_upstream, self.avg_downstream, out_dir)

        self.classes_ = classes
        self.graph_ = graph
        self.history_ = history
        self.feature_dims_ = dims
        self.checkpoint_dir_ = str(out_dir)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        X_norm, dims = normalize_feature_lists(X, len(self.graph_.branches))
        if dims != self.feature_dims_:
            raise ConfigError(
                f"feature dims {dims} do not match the fitted model's {self.feature_dims_}")
        examples = self._make_examples(X_norm)
        logits = np.zeros((len(examples), len(self.classes_)), dtype=np.float32)
        for batch in make_batches(examples, max(self.batch_size, 16)):
            inputs, _ = collate(examples, batch, len(self.graph_.branches))
            logits[np.asarray(batch)] = self.graph_.forward(inputs, training=False)
        return logits

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=-1)


class FbankExtractor(BaseEstimator, TransformerMixin):
    """Waveforms in, log-mel feature matrices out. Stateless."""

    def __init__(self, window_ms=25.0, hop_ms=10.0, n_mels=40, pre_emphasis=0.97,
                 fft_size=512, log_floor=1e-10):
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.n_mels = n_mels
        self.pre_emphasis = pre_emphasis
        self.fft_size = fft_size
        self.log_floor = log_floor

    def _config(self) -> FbankConfig:
        return FbankConfig(window_ms=self.window_ms, hop_ms=self.hop_ms,
                           n_mels=self.n_mels, pre_emphasis=self.pre_emphasis,
                           fft_size=self.fft_size, log_floor=self.log_floor)

    def fit(self, X=None, y=None):
        self._config()  # validates the settings
        return self

    def transform(self, X) -> list:
        cfg = self._config()
        out = []
        for item in X:
            wave_in = item if isinstance(item, Waveform) else Waveform(samples=item)
            out.append(log_mel_fbank(wave_in, cfg))
        return out
