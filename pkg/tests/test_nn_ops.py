"""Forward-pass contracts of the layer library and the SERC format."""

import numpy as np
import pytest

from serforge.errors import DataError, DimensionError, FormatError, TrainingError
from serforge.nn import (
    Adam,
    BatchNorm1d,
    Parameter,
    ParameterSet,
    batchnorm1d,
    conv1d_forward,
    cross_entropy,
    linear_forward,
    load_parameters,
    relu,
    save_parameters,
    softmax,
)


class TestConv1d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(9, 1))
        w = np.array([[[0.0, 1.0, 0.0]]])
        out = conv1d_forward(x, w, np.zeros(1))
        np.testing.assert_allclose(out, x)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 2, 5))
        b = rng.normal(size=4)
        out = conv1d_forward(np.zeros((7, 2)), w, b)
        np.testing.assert_allclose(out, np.tile(b, (7, 1)))

    def test_output_length_preserved(self):
        rng = np.random.default_rng(2)
        for t in (1, 2, 13):
            for dilation in (1, 2, 3):
                out = conv1d_forward(rng.normal(size=(t, 3)),
                                     rng.normal(size=(5, 3, 3)), np.zeros(5),
                                     dilation=dilation)
                assert out.shape == (t, 5)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError, match="odd"):
            conv1d_forward(np.zeros((4, 1)), np.zeros((1, 1, 2)), np.zeros(1))

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="Cin=3.*Cin=2"):
            conv1d_forward(np.zeros((4, 3)), np.zeros((1, 2, 3)), np.zeros(1))


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(3).normal(size=(5, 4))
        np.testing.assert_allclose(linear_forward(x, np.eye(4), np.zeros(4)), x)

    def test_hand_product(self):
        out = linear_forward(np.array([1.0, 2.0]),
                             np.array([[1.0, 1.0], [0.0, 1.0]]),
                             np.array([0.0, 1.0]))
        np.testing.assert_allclose(out, [3.0, 3.0])

    def test_trailing_axis_mismatch(self):
        with pytest.raises(DimensionError, match="Din=3.*Din=2"):
            linear_forward(np.zeros((4, 3)), np.zeros((5, 2)), np.zeros(5))


class TestBatchNorm:
    def test_constant_input_train_gives_beta(self):
        rng = np.random.default_rng(4)
        beta = rng.normal(size=3)
        stats = {"mean": np.zeros(3), "var": np.ones(3)}
        x = np.tile(rng.normal(size=3), (6, 1))
        out = batchnorm1d(x, np.ones(3), beta, stats, mode="train")
        np.testing.assert_allclose(out, np.tile(beta, (6, 1)), atol=1e-12)

    def test_eval_identity_stats(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=(10, 4))
        stats = {"mean": np.zeros(4), "var": np.ones(4)}
        out = batchnorm1d(x, np.ones(4), np.zeros(4), stats, mode="eval")
        np.testing.assert_allclose(out, x, atol=1e-5)

    def test_train_updates_running_stats(self):
        rng = np.random.default_rng(6)
        x = rng.normal(loc=2.0, size=(50, 2))
        stats = {"mean": np.zeros(2), "var": np.ones(2)}
        batchnorm1d(x, np.ones(2), np.zeros(2), stats, mode="train")
        np.testing.assert_allclose(stats["mean"], 0.1 * x.mean(axis=0))

    def test_channel_mismatch(self):
        stats = {"mean": np.zeros(3), "var": np.ones(3)}
        with pytest.raises(DimensionError, match="gamma"):
            batchnorm1d(np.zeros((4, 3)), np.ones(2), np.zeros(3), stats)

    def test_batched_layer_rejects_wrong_channels(self):
        bn = BatchNorm1d(4)
        with pytest.raises(DimensionError):
            bn.forward(np.zeros((1, 5, 3), dtype=np.float32))


class TestActivations:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 5))
        for c in (-3.0, 0.5, 100.0):
            np.testing.assert_allclose(softmax(x), softmax(x + c), atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(8).normal(scale=10, size=(20, 7))
        np.testing.assert_allclose(softmax(x, axis=1).sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_named_axis(self):
        x = np.random.default_rng(9).normal(size=(3, 4, 5))
        np.testing.assert_allclose(softmax(x, axis=1).sum(axis=1), 1.0, atol=1e-6)

    def test_relu_gradient_signs(self):
        # subgradient: slope 1 on the positive side, 0 on the negative
        assert relu(np.array([2.0]))[0] == 2.0
        eps = 1e-6
        for x0, expected in ((2.0, 1.0), (-2.0, 0.0)):
            slope = (relu(np.array([x0 + eps])) - relu(np.array([x0 - eps]))) / (2 * eps)
            assert slope[0] == pytest.approx(expected)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((3, 4)), [0, 1, 3])
        assert loss == pytest.approx(np.log(4), abs=1e-6)

    def test_margin_drives_loss_to_zero(self):
        losses = []
        for margin in (1.0, 5.0, 20.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = margin
            losses.append(cross_entropy(logits, [2])[0])
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-8

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            logits = rng.normal(scale=5, size=(4, 4))
            labels = rng.integers(0, 4, size=4)
            assert cross_entropy(logits, labels)[0] >= 0.0

    def test_out_of_range_label(self):
        with pytest.raises(DataError, match="record 1.*7"):
            cross_entropy(np.zeros((3, 4)), [0, 7, 1])


class TestAdam:
    def _scalar_set(self, value=0.0):
        return ParameterSet([Parameter(np.array([value], dtype=np.float32), name="w")])

    def test_zero_gradient_no_move(self):
        params = self._scalar_set(1.5)
        opt = Adam(params)
        for _ in range(3):
            opt.zero_grad()
            opt.step()
        assert params["w"].value[0] == pytest.approx(1.5)

    def test_first_step_moves_by_lr(self):
        params = self._scalar_set(0.0)
        opt = Adam(params, lr=0.1)
        params["w"].grad[...] = 1.0
        opt.step()
        # bias correction makes the first update m_hat/sqrt(v_hat) = 1
        assert params["w"].value[0] == pytest.approx(-0.1, abs=1e-6)

    def test_converges_on_quadratic(self):
        params = self._scalar_set(0.0)
        opt = Adam(params, lr=0.3)
        for _ in range(100):
            w = params["w"].value[0]
            opt.zero_grad()
            params["w"].grad[...] = 2.0 * (w - 3.0)
            opt.step()
        assert abs(params["w"].value[0] - 3.0) < 1e-2

    def test_nonfinite_gradient_names_parameter(self):
        params = self._scalar_set()
        opt = Adam(params)
        params["w"].grad[...] = np.nan
        with pytest.raises(TrainingError, match="'w'"):
            opt.step()

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            params = self._scalar_set(0.3)
            opt = Adam(params, lr=0.05)
            for step in range(5):
                opt.zero_grad()
                params["w"].grad[...] = np.float32(step - 2)
                opt.step()
            runs.append(params["w"].value.copy())
        assert runs[0].tobytes() == runs[1].tobytes()


class TestParameterSet:
    def test_duplicate_name_rejected(self):
        ps = ParameterSet([Parameter(np.zeros(2), name="a")])
        with pytest.raises(ValueError, match="duplicate"):
            ps.add(Parameter(np.zeros(3), name="a"))

    def test_iteration_order_is_insertion_order(self):
        names = [f"p{i}" for i in range(6)]
        ps = ParameterSet([Parameter(np.zeros(1), name=n) for n in names])
        assert ps.names() == names


class TestSercFormat:
    def _random_set(self, seed=0):
        rng = np.random.default_rng(seed)
        return ParameterSet([
            Parameter(rng.normal(size=(3, 4)).astype(np.float32), name="a.weight"),
            Parameter(rng.normal(size=7).astype(np.float32), name="a.bias"),
            Parameter(rng.normal(size=(2, 2, 5)).astype(np.float32),
                      name="bn.running_mean", trainable=False),
        ])

    def test_round_trip_bit_exact(self, tmp_path):
        ps = self._random_set()
        save_parameters(tmp_path / "m.serc", ps)
        loaded = load_parameters(tmp_path / "m.serc")
        assert loaded.names() == ps.names()
        for name, p in ps.items():
            assert loaded[name].value.tobytes() == p.value.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.serc"
        path.write_bytes(b"XERC" + b"\x00" * 16)
        with pytest.raises(FormatError, match="offset 0"):
            load_parameters(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.serc"
        path.write_bytes(b"SERC" + (9).to_bytes(4, "little") + (0).to_bytes(4, "little"))
        with pytest.raises(FormatError, match="version 9"):
            load_parameters(path)

    def test_truncated_payload(self, tmp_path):
        ps = self._random_set()
        path = tmp_path / "t.serc"
        save_parameters(path, ps)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="expected .* bytes"):
            load_parameters(path)
