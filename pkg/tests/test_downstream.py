"""Aggregators, fusion, the classifier, and graph validation."""

import numpy as np
import pytest

from serforge.downstream import (
    SMALL_ECAPA,
    AttentiveStatsPooling,
    EcapaAggregator,
    EcapaConfig,
    MeanPoolAggregator,
    UtteranceEmbedding,
    classify,
    late_fuse,
)
from serforge.errors import ConfigError, DataError, DimensionError
from serforge.model import BranchSpec, ModelGraph, validate_structure
from serforge.nn import softmax


class TestMeanPool:
    def test_hand_example(self):
        pool = MeanPoolAggregator(2)
        frames = np.array([[[1.0, 3.0], [3.0, 5.0]]], dtype=np.float32)
        np.testing.assert_allclose(pool.forward(frames), [[2.0, 4.0]])

    def test_single_frame_identity(self):
        pool = MeanPoolAggregator(3)
        frame = np.random.default_rng(0).normal(size=(1, 1, 3)).astype(np.float32)
        np.testing.assert_allclose(pool.forward(frame), frame[:, 0])

    def test_batch_matches_loop(self):
        rng = np.random.default_rng(1)
        pool = MeanPoolAggregator(4)
        lengths = np.array([7, 3, 5])
        batch = np.zeros((3, 7, 4), dtype=np.float32)
        singles = []
        for i, n in enumerate(lengths):
            x = rng.normal(size=(n, 4)).astype(np.float32)
            batch[i, :n] = x
            singles.append(pool.forward(x[None])[0])
        batched = pool.forward(batch, lengths)
        np.testing.assert_allclose(batched, np.stack(singles), atol=1e-6)

    def test_all_masked_rejected(self):
        pool = MeanPoolAggregator(2)
        with pytest.raises(DataError, match="at least one valid frame"):
            pool.forward(np.zeros((1, 4, 2), dtype=np.float32), np.array([0]))


@pytest.fixture(scope="module")
def small_ecapa():
    rng = np.random.default_rng(7)
    return EcapaAggregator(12, SMALL_ECAPA, rng=rng)


class TestEcapa:
    def test_default_embedding_dim_192(self):
        agg = EcapaAggregator(40, EcapaConfig(), rng=np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(1, 24, 40)).astype(np.float32)
        emb = agg.forward(x)
        assert emb.shape == (1, 192)
        assert np.all(np.isfinite(emb))

    def test_time_constant_input_zero_sigma(self):
        rng = np.random.default_rng(2)
        asp = AttentiveStatsPooling(5, 4, rng=rng)
        frame = rng.normal(size=(1, 1, 5)).astype(np.float32)
        x = np.repeat(frame, 12, axis=1)
        pooled = asp.forward(x)
        sigma = pooled[0, 5:]
        np.testing.assert_allclose(sigma, 0.0, atol=1e-5)

    def test_attention_sums_to_one_over_valid_frames(self, small_ecapa):
        rng = np.random.default_rng(3)
        lengths = np.array([10, 6])
        x = np.zeros((2, 10, 12), dtype=np.float32)
        for i, n in enumerate(lengths):
            x[i, :n] = rng.normal(size=(n, 12))
        small_ecapa.forward(x, lengths)
        attn = small_ecapa.asp.last_attention
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(attn[1, 6:] == 0.0)

    def test_eval_mode_deterministic(self, small_ecapa):
        x = np.random.default_rng(4).normal(size=(1, 9, 12)).astype(np.float32)
        a = small_ecapa.forward(x)
        b = small_ecapa.forward(x)
        assert a.tobytes() == b.tobytes()

    def test_padding_invariance_eval(self, small_ecapa):
        rng = np.random.default_rng(5)
        lengths = np.array([11, 4, 8])
        batch = np.zeros((3, 11, 12), dtype=np.float32)
        singles = []
        for i, n in enumerate(lengths):
            x = rng.normal(size=(n, 12)).astype(np.float32)
            batch[i, :n] = x
            singles.append(small_ecapa.forward(x[None])[0])
        batched = small_ecapa.forward(batch, lengths)
        np.testing.assert_allclose(batched, np.stack(singles), atol=1e-5)

    def test_wrong_input_dim(self, small_ecapa):
        with pytest.raises(DimensionError):
            small_ecapa.forward(np.zeros((1, 5, 9), dtype=np.float32))

    def test_channels_must_divide_scale(self):
        with pytest.raises(DataError, match="res2_scale"):
            EcapaConfig(channels=30, res2_scale=8)


class TestLateFuse:
    def test_dims_add(self):
        rng = np.random.default_rng(0)
        e1 = UtteranceEmbedding("u", rng.normal(size=192).astype(np.float32))
        e2 = UtteranceEmbedding("u", rng.normal(size=192).astype(np.float32))
        assert late_fuse(e1, e2).dim == 384

    def test_zero_vector_preserves_first_block(self):
        vec = np.arange(5, dtype=np.float32)
        fused = late_fuse(UtteranceEmbedding("u", vec),
                          UtteranceEmbedding("u", np.zeros(3, dtype=np.float32)))
        np.testing.assert_array_equal(fused.vector[:5], vec)

    def test_utt_mismatch(self):
        with pytest.raises(DataError):
            late_fuse(UtteranceEmbedding("a", np.ones(2, dtype=np.float32)),
                      UtteranceEmbedding("b", np.ones(2, dtype=np.float32)))

    def test_classifier_partitions_over_fusion(self):
        # W @ concat(e1, e2) + b == (W1 @ e1 + b) + (W2 @ e2) with W = [W1 | W2]
        rng = np.random.default_rng(1)
        e1 = rng.normal(size=6).astype(np.float32)
        e2 = rng.normal(size=4).astype(np.float32)
        weight = rng.normal(size=(4, 10)).astype(np.float32)
        bias = rng.normal(size=4).astype(np.float32)
        fused = classify(np.concatenate([e1, e2]), weight, bias)
        split = classify(e1, weight[:, :6], bias) + classify(e2, weight[:, 6:], np.zeros(4))
        np.testing.assert_allclose(fused, split, atol=1e-5)


class TestClassify:
    def test_bias_only_prediction(self):
        logits = classify(np.zeros(8), np.zeros((4, 8)), np.array([1.0, 0, 0, 0]))
        assert int(np.argmax(logits)) == 0

    def test_weight_scaling_keeps_argmax(self):
        rng = np.random.default_rng(2)
        emb = rng.normal(size=16)
        weight = rng.normal(size=(4, 16))
        bias = np.zeros(4)
        a = classify(emb, weight, bias)
        b = classify(emb, 2.0 * weight, bias)
        assert int(np.argmax(a)) == int(np.argmax(b))

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(3)
        logits = classify(rng.normal(size=12), rng.normal(size=(4, 12)), rng.normal(size=4))
        assert softmax(logits).sum() == pytest.approx(1.0, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            classify(np.zeros(5), np.zeros((4, 8)), np.zeros(4))


class TestGraphValidation:
    def test_late_fusion_needs_two_branches(self):
        with pytest.raises(ConfigError, match="Valid shapes"):
            validate_structure([BranchSpec(source="fbank")], "late", ["ecapa", "ecapa"])

    def test_early_fusion_single_aggregator(self):
        with pytest.raises(ConfigError, match="Valid shapes"):
            validate_structure([BranchSpec(source="fbank"), BranchSpec(source="toy")],
                               "early", ["mean", "mean"])

    def test_unknown_fusion(self):
        with pytest.raises(ConfigError, match="fusion"):
            validate_structure([BranchSpec(source="fbank")], "middle", ["mean"])

    def test_trainable_file_branch_rejected(self):
        with pytest.raises(ConfigError, match="trainable"):
            validate_structure([BranchSpec(source="file:bert", trainable=True)],
                               "none", ["mean"])

    def test_unknown_aggregator(self):
        with pytest.raises(ConfigError, match="aggregators"):
            validate_structure([BranchSpec(source="fbank")], "none", ["max"])

    def test_unknown_source(self):
        with pytest.raises(ConfigError, match="source"):
            validate_structure([BranchSpec(source="mfcc")], "none", ["mean"])


class TestGraphForward:
    def test_early_fusion_alignment_error(self):
        graph = ModelGraph([BranchSpec(source="fbank"), BranchSpec(source="file:x")],
                           "early", ["mean"], [3, 3], seed=0)
        rng = np.random.default_rng(0)
        a = (rng.normal(size=(1, 10, 3)).astype(np.float32), np.array([10]))
        b = (rng.normal(size=(1, 20, 3)).astype(np.float32), np.array([20]))
        from serforge.errors import FrameAlignmentError

        with pytest.raises(FrameAlignmentError, match="differ by 10"):
            graph.forward([a, b])

    def test_checkpoint_dim_mismatch_names_shapes(self, tmp_path):
        from serforge.nn.serc import load_parameters, save_parameters

        g1 = ModelGraph([BranchSpec(source="fbank")], "none", ["mean"], [8], seed=0)
        save_parameters(tmp_path / "m.serc", g1.parameter_set())
        g2 = ModelGraph([BranchSpec(source="fbank")], "none", ["mean"], [12], seed=0)
        with pytest.raises(ConfigError, match=r"\(4, 12\).*\(4, 8\)"):
            g2.load_state(load_parameters(tmp_path / "m.serc"))

    def test_parameter_names_partition(self):
        graph = ModelGraph([BranchSpec(source="toy", trainable=True)], "none",
                           ["mean"], [10], seed=0)
        names = graph.parameter_set().names()
        assert all(n.startswith(("upstream.", "downstream.")) for n in names)
        assert any(n.startswith("upstream.0.") for n in names)
        assert "downstream.classifier.weight" in names
