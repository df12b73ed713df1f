"""The composed classification graph: upstream branches, fusion, aggregation.

A graph is built from one or two branch specs. A branch either passes its
input features straight through (``fbank`` and ``file:*`` sources) or runs
them through a trainable toy encoder (``toy``). Early fusion concatenates
branch outputs frame-wise before a single aggregator; late fusion gives each
branch its own aggregator and concatenates the utterance embeddings. A
linear classifier maps the final embedding to emotion logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .downstream import (
    EcapaAggregator,
    EcapaConfig,
    MeanPoolAggregator,
)
from .errors import ConfigError, FrameAlignmentError
from .features import EARLY_FUSE_TOLERANCE
from .nn.layers import Linear, lengths_to_mask
from .nn.params import ParameterSet
from .upstream import ToyEncoder

VALID_SHAPES = ("fusion=none: 1 branch, 1 aggregator; "
                "fusion=early: 2 branches, 1 aggregator; "
                "fusion=late: 2 branches, 2 aggregators")

FUSIONS = ("none", "early", "late")
AGGREGATORS = ("mean", "ecapa")
SOURCES = ("fbank", "toy")


@dataclass(frozen=True)
class BranchSpec:
    """One upstream input: where features come from and whether they train."""

    source: str
    name: str = ""
    trainable: bool = False

    @property
    def display_name(self) -> str:
        return self.name or self.source

    @property
    def is_file(self) -> bool:
        return self.source.startswith("file:")

    @property
    def file_source(self) -> str:
        return self.source.split(":", 1)[1]


def validate_structure(branches, fusion: str, aggregators) -> None:
    """Reject graph layouts outside the supported configuration space."""
    if fusion not in FUSIONS:
        raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
    expected = {"none": (1, 1), "early": (2, 1), "late": (2, 2)}[fusion]
    if (len(branches), len(aggregators)) != expected:
        raise ConfigError(
            f"fusion={fusion!r} needs {expected[0]} branch(es) and {expected[1]} "
            f"aggregator(s), got {len(branches)} and {len(aggregators)}. "
            f"Valid shapes: {VALID_SHAPES}")
    for i, b in enumerate(branches):
        if b.source not in SOURCES and not b.is_file:
            raise ConfigError(
                f"branches[{i}].source must be 'fbank', 'toy' or 'file:<name>', "
                f"got {b.source!r}")
        if b.is_file and not b.file_source:
            raise ConfigError(f"branches[{i}].source 'file:' needs a source name")
        if b.trainable and b.source != "toy":
            raise ConfigError(
                f"branches[{i}]: only 'toy' branches are trainable in-engine, "
                f"got trainable source {b.source!r}")
    for j, a in enumerate(aggregators):
        if a not in AGGREGATORS:
            raise ConfigError(
                f"aggregators[{j}] must be one of {AGGREGATORS}, got {a!r}")


class ModelGraph:
    """Composed upstream(s) + aggregator(s) + linear classifier."""

    def __init__(self, branches, fusion: str, aggregators, feature_dims,
                 n_classes: int = 4, ecapa: EcapaConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        branches = [b if isinstance(b, BranchSpec) else BranchSpec(**b) for b in branches]
        validate_structure(branches, fusion, aggregators)
        if len(feature_dims) != len(branches):
            raise ConfigError(
                f"got {len(feature_dims)} feature dims for {len(branches)} branches")
        self.branches = branches
        self.fusion = fusion
        self.aggregator_kinds = list(aggregators)
        self.feature_dims = list(feature_dims)
        self.n_classes = n_classes
        self.seed = seed
        self.dtype = dtype
        self.ecapa_cfg = ecapa or EcapaConfig()

        self.encoders = []
        branch_dims = []
        for i, b in enumerate(branches):
            if b.source == "toy":
                enc = ToyEncoder(n_mels=feature_dims[i], seed=[seed, 1, i], dtype=dtype)
                self.encoders.append(enc)
                branch_dims.append(enc.out_dim)
            else:
                self.encoders.append(None)
                branch_dims.append(feature_dims[i])
        self.branch_dims = branch_dims

        if fusion == "early":
            agg_in_dims = [sum(branch_dims)]
        elif fusion == "late":
            agg_in_dims = branch_dims
        else:
            agg_in_dims = [branch_dims[0]]
        self.aggregators = []
        for j, kind in enumerate(self.aggregator_kinds):
            rng = np.random.default_rng([seed, 2, j])
            if kind == "mean":
                self.aggregators.append(MeanPoolAggregator(agg_in_dims[j]))
            else:
                self.aggregators.append(
                    EcapaAggregator(agg_in_dims[j], self.ecapa_cfg, rng=rng, dtype=dtype))

        self.embedding_dim = sum(a.embedding_dim for a in self.aggregators)
        self.classifier = Linear(self.embedding_dim, n_classes,
                                 rng=np.random.default_rng([seed, 3]), dtype=dtype)
        self._params = self._build_parameter_set()
        self._cache = None

    # -- parameters ---------------------------------------------------------

    def _build_parameter_set(self) -> ParameterSet:
        ps = ParameterSet()
        for i, enc in enumerate(self.encoders):
            if enc is None:
                continue
            trainable = self.branches[i].trainable
            for local, p in enc.named_parameters():
                p.name = f"upstream.{i}.{local}"
                if not trainable:
                    p.trainable = False
                ps.add(p)
        for j, agg in enumerate(self.aggregators):
            for local, p in agg.named_parameters():
                p.name = f"downstream.agg{j}.{local}"
                ps.add(p)
        for local, p in self.classifier.named_parameters():
            p.name = f"downstream.classifier.{local}"
            ps.add(p)
        return ps

    def parameter_set(self) -> ParameterSet:
        return self._params

    def load_state(self, loaded: ParameterSet) -> None:
        """Copy values from a loaded checkpoint into this graph, strictly."""
        own = {name: p for name, p in self._params.items()}
        extra = [n for n in loaded.names() if n not in own]
        if extra:
            raise ConfigError(f"checkpoint has unknown tensors: {sorted(extra)[:5]}")
        for name, p in own.items():
            if name not in loaded:
                raise ConfigError(f"checkpoint is missing tensor {name!r}")
            src = loaded[name].value
            if src.shape != p.value.shape:
                raise ConfigError(
                    f"tensor {name!r}: model expects shape {tuple(p.value.shape)}, "
                    f"checkpoint has {tuple(src.shape)}")
            p.value[...] = src.astype(p.value.dtype)

    # -- forward / backward -------------------------------------------------

    def _encode_branches(self, inputs, training: bool):
        outs = []
        for i, (enc, spec) in enumerate(zip(self.encoders, self.branches)):
            x, lengths = inputs[i]
            if x.ndim != 3 or x.shape[2] != self.feature_dims[i]:
                raise ConfigError(
                    f"branch {i} ({spec.display_name}): expected features of dim "
                    f"{self.feature_dims[i]}, got input shape {x.shape}")
            if enc is not None:
                # frozen encoders run in eval mode: their batchnorm statistics
                # and weights must not drift while the downstream trains
                h = enc.forward(x, lengths, training and spec.trainable)
            else:
                h = x
            outs.append((h, np.asarray(lengths, dtype=np.int64)))
        return outs

    def _early_fuse_batch(self, h0, l0, h1, l1):
        gap = np.abs(l0 - l1)
        if np.any(gap > EARLY_FUSE_TOLERANCE):
            bad = int(np.argmax(gap))
            raise FrameAlignmentError(
                f"early fusion: branch frame counts {int(l0[bad])} and {int(l1[bad])} "
                f"differ by {int(gap[bad])} (> {EARLY_FUSE_TOLERANCE}) in batch row {bad}")
        common = np.minimum(l0, l1)
        t = int(common.max())
        mask = lengths_to_mask(common, t)[..., None].astype(h0.dtype)
        fused = np.concatenate([h0[:, :t], h1[:, :t]], axis=2) * mask
        return fused, common, mask

    def forward(self, inputs, training: bool = False) -> np.ndarray:
        """inputs: per branch, a (features (B, T, D), lengths (B,)) pair."""
        enc_out = self._encode_branches(inputs, training)
        cache = {"enc_shapes": [h.shape for h, _ in enc_out]}

        if self.fusion == "early":
            (h0, l0), (h1, l1) = enc_out
            fused, common, fmask = self._early_fuse_batch(h0, l0, h1, l1)
            emb = self.aggregators[0].forward(fused, common, training)
            cache["early"] = (h0.shape, h1.shape, fmask)
            embs = [emb]
        elif self.fusion == "late":
            embs = [agg.forward(h, lens, training)
                    for agg, (h, lens) in zip(self.aggregators, enc_out)]
        else:
            h, lens = enc_out[0]
            embs = [self.aggregators[0].forward(h, lens, training)]

        joint = np.concatenate(embs, axis=1) if len(embs) > 1 else embs[0]
        logits = self.classifier.forward(joint, training)
        if training:
            cache["emb_dims"] = [e.shape[1] for e in embs]
            self._cache = cache
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        cache = self._cache
        djoint = self.classifier.backward(dlogits)

        if self.fusion == "late":
            dims = cache["emb_dims"]
            offsets = np.cumsum([0] + dims)
            dembs = [djoint[:, offsets[j]:offsets[j + 1]] for j in range(len(dims))]
        else:
            dembs = [djoint]

        if self.fusion == "early":
            dfused = self.aggregators[0].backward(dembs[0])
            shape0, shape1, fmask = cache["early"]
            dfused = dfused * fmask
            c0 = self.branch_dims[0]
            t = dfused.shape[1]
            dh0 = np.zeros(shape0, dtype=dfused.dtype)
            dh1 = np.zeros(shape1, dtype=dfused.dtype)
            dh0[:, :t] = dfused[:, :, :c0]
            dh1[:, :t] = dfused[:, :, c0:]
            dhs = [dh0, dh1]
        elif self.fusion == "late":
            dhs = [agg.backward(demb) for agg, demb in zip(self.aggregators, dembs)]
        else:
            dhs = [self.aggregators[0].backward(dembs[0])]

        for i, (enc, spec) in enumerate(zip(self.encoders, self.branches)):
            if enc is not None and spec.trainable:
                enc.backward(dhs[i])
