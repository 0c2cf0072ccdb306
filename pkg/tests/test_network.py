import numpy as np
import pytest

from avaffect import network, ops
from avaffect.network import (
    Affine,
    Conv,
    Dropout,
    Lrn,
    MaxPool,
    NetworkModel,
    Relu,
    TrainConfig,
    TrainingDiverged,
)
from avaffect.ops import ConvSpec, LrnSpec

from conftest import fd_grad, max_rel_err


def miniature_layers(dropout_rate=0.0):
    layers = [
        Conv(ConvSpec(1, 2, kernel=(3, 3), stride=(1, 1), padding=(0, 0))),
        Relu(),
        MaxPool(window=(2, 2), stride=(2, 2)),
        Lrn(LrnSpec(size=3, k=2.0, alpha=0.1, beta=0.75)),
        Affine(4),
    ]
    if dropout_rate > 0:
        layers.append(Dropout(dropout_rate))
    layers.append(Affine(1))
    return layers


def miniature_model(dtype=np.float32, dropout_rate=0.0, seed=0):
    return NetworkModel(
        miniature_layers(dropout_rate),
        input_shape=(1, 8, 8),
        feature_layer_index=4,
        init_seed=seed,
        dtype=dtype,
    )


class TestForward:
    def test_zero_model_predicts_zero(self, rng):
        model = miniature_model()
        for i, (w, b) in model.params.items():
            model.params[i] = (np.zeros_like(w), np.zeros_like(b))
        pred, _ = network.predict(model, rng.normal(size=(3, 1, 8, 8)))
        assert not pred.any()

    def test_infer_deterministic(self, rng):
        model = miniature_model(dropout_rate=0.5)
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        p1, _ = network.predict(model, x)
        p2, _ = network.predict(model, x)
        np.testing.assert_array_equal(p1, p2)

    def test_single_affine_reduces_to_op(self, rng):
        model = NetworkModel([Affine(1)], input_shape=(6,), init_seed=3)
        x = rng.normal(size=(4, 6)).astype(np.float32)
        pred, _ = network.predict(model, x)
        w, b = model.params[0]
        np.testing.assert_allclose(pred, ops.affine_forward(x, w, b)[:, 0], rtol=1e-6)

    def test_batch_shape_mismatch_rejected(self, rng):
        model = miniature_model()
        with pytest.raises(ValueError, match="input"):
            network.forward(model, rng.normal(size=(2, 1, 9, 9)))

    def test_layer_mismatch_reports_index(self, rng):
        model = miniature_model()
        w, b = model.params[0]
        model.params[0] = (w[:, :, :2, :2], b)
        with pytest.raises(ValueError, match="layer 0"):
            network.forward(model, rng.normal(size=(1, 1, 8, 8)))


class TestTrainStep:
    def test_momentum_zero_is_vanilla_sgd(self, rng):
        model = miniature_model()
        x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
        y = rng.normal(size=4).astype(np.float32)
        before = {i: (w.copy(), b.copy()) for i, (w, b) in model.params.items()}
        _, grads = network.gradients(model, x, y)
        cfg = TrainConfig(learning_rate=0.01, momentum=0.0, epochs=1, dropout_rate=0.0)
        network.train_step(model, x, y, cfg, np.random.default_rng(0))
        for i, (gw, gb) in grads.items():
            np.testing.assert_allclose(
                model.params[i][0], before[i][0] - np.float32(0.01) * gw, rtol=1e-5, atol=1e-7
            )
            np.testing.assert_allclose(
                model.params[i][1], before[i][1] - np.float32(0.01) * gb, rtol=1e-5, atol=1e-7
            )

    def test_zero_gradient_is_fixed_point(self):
        model = NetworkModel([Affine(1, bias=False)], input_shape=(1,), init_seed=0)
        model.params[0] = (np.array([[2.0]], dtype=np.float32), np.zeros(1, np.float32))
        x = np.array([[1.0]], dtype=np.float32)
        y = np.array([2.0], dtype=np.float32)
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0, dropout_rate=0.0)
        network.train_step(model, x, y, cfg, np.random.default_rng(0))
        assert model.params[0][0][0, 0] == np.float32(2.0)

    def test_learning_rate_zero_leaves_params_bit_identical(self, rng):
        model = miniature_model()
        before = {i: (w.copy(), b.copy()) for i, (w, b) in model.params.items()}
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        y = rng.normal(size=2).astype(np.float32)
        cfg = TrainConfig(learning_rate=1.0, momentum=0.9, dropout_rate=0.0)
        network.train_step(model, x, y, cfg, np.random.default_rng(0), learning_rate=0.0)
        for i, (w, b) in model.params.items():
            np.testing.assert_array_equal(w, before[i][0])
            np.testing.assert_array_equal(b, before[i][1])

    def test_one_parameter_model_converges_to_least_squares(self):
        # pairs (x=1, y=2): closed-form least squares gives w = 2
        x = np.array([[1.0]], dtype=np.float32)
        y = np.array([2.0], dtype=np.float32)
        w_star = float(np.linalg.lstsq(x.astype(np.float64), y.astype(np.float64), rcond=None)[0][0])
        model = NetworkModel([Affine(1, bias=False)], input_shape=(1,), init_seed=0)
        model.params[0] = (np.zeros((1, 1), np.float32), np.zeros(1, np.float32))
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0, dropout_rate=0.0)
        rng = np.random.default_rng(0)
        for _ in range(500):
            network.train_step(model, x, y, cfg, rng)
            if abs(float(model.params[0][0][0, 0]) - w_star) < 1e-3:
                break
        assert abs(float(model.params[0][0][0, 0]) - w_star) < 1e-3

    def test_nonfinite_loss_aborts(self):
        model = NetworkModel([Affine(1)], input_shape=(2,), init_seed=0)
        model.params[0] = (np.full((2, 1), 1e30, np.float32), np.zeros(1, np.float32))
        cfg = TrainConfig(learning_rate=0.1, dropout_rate=0.0)
        with pytest.raises(TrainingDiverged):
            network.train_step(
                model,
                np.full((2, 2), 1e10, np.float32),
                np.zeros(2, np.float32),
                cfg,
                np.random.default_rng(0),
            )

    def test_loss_nonincreasing_on_repeated_batch(self, rng):
        model = miniature_model(seed=5)
        x = np.repeat(rng.normal(size=(1, 1, 8, 8)).astype(np.float32), 4, axis=0)
        y = np.full(4, 0.5, dtype=np.float32)
        cfg = TrainConfig(learning_rate=1e-3, momentum=0.0, dropout_rate=0.0)
        losses = [
            network.train_step(model, x, y, cfg, np.random.default_rng(0)) for _ in range(50)
        ]
        diffs = np.diff(losses)
        assert np.all(diffs <= 1e-9)


class TestFit:
    def test_zero_epochs_noop(self, rng):
        model = miniature_model()
        before = {i: (w.copy(), b.copy()) for i, (w, b) in model.params.items()}
        cfg = TrainConfig(epochs=0, dropout_rate=0.0)
        log = network.fit(model, rng.normal(size=(4, 1, 8, 8)).astype(np.float32),
                          rng.normal(size=4).astype(np.float32), cfg)
        assert log == []
        for i, (w, b) in model.params.items():
            np.testing.assert_array_equal(w, before[i][0])

    def test_fixed_seed_reproducible_log(self, rng):
        x = rng.normal(size=(16, 1, 8, 8)).astype(np.float32)
        y = rng.normal(size=16).astype(np.float32)
        cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=4, seed=9, dropout_rate=0.5)
        log1 = network.fit(miniature_model(dropout_rate=0.5, seed=2), x, y, cfg)
        log2 = network.fit(miniature_model(dropout_rate=0.5, seed=2), x, y, cfg)
        assert log1 == log2

    def test_loss_trend_on_linear_readout_task(self, rng):
        x = rng.normal(size=(32, 1, 8, 8)).astype(np.float32)
        y = (x.mean(axis=(1, 2, 3)) * 2.0).astype(np.float32)
        cfg = TrainConfig(learning_rate=1e-3, epochs=5, batch_size=8, seed=0, dropout_rate=0.0)
        log = network.fit(miniature_model(seed=1), x, y, cfg)
        assert log[-1] < log[0]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            network.fit(miniature_model(), np.zeros((0, 1, 8, 8)), np.zeros(0), TrainConfig())


class TestEndToEndGradients:
    def test_every_parameter_matches_finite_differences(self):
        model = miniature_model(dtype=np.float64, seed=7)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 1, 8, 8))
        y = rng.normal(size=3)
        _, grads = network.gradients(model, x, y)
        for i, (gw, gb) in grads.items():
            def loss_w(v, i=i):
                keep = model.params[i]
                model.params[i] = (v, keep[1])
                pred, _ = network.predict(model, x)
                model.params[i] = keep
                return ops.mse_loss(pred, y)[0]

            def loss_b(v, i=i):
                keep = model.params[i]
                model.params[i] = (keep[0], v)
                pred, _ = network.predict(model, x)
                model.params[i] = keep
                return ops.mse_loss(pred, y)[0]

            assert max_rel_err(gw, fd_grad(loss_w, model.params[i][0])) < 1e-3
            assert max_rel_err(gb, fd_grad(loss_b, model.params[i][1])) < 1e-3


class TestExtractFeatures:
    def test_zero_model_yields_bias(self, rng):
        model = miniature_model()
        for i, (w, b) in model.params.items():
            model.params[i] = (np.zeros_like(w), b)
        model.params[4] = (model.params[4][0], np.arange(4, dtype=np.float32))
        feats = network.extract_features(model, rng.normal(size=(2, 1, 8, 8)).astype(np.float32))
        np.testing.assert_allclose(feats, np.tile(np.arange(4, dtype=np.float32), (2, 1)))

    def test_deterministic_and_dropout_free(self, rng):
        x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
        lo = miniature_model(dropout_rate=0.0, seed=4)
        hi = miniature_model(dropout_rate=0.9, seed=4)
        f_lo = network.extract_features(lo, x)
        f_hi = network.extract_features(hi, x)
        np.testing.assert_array_equal(f_lo, f_hi)
        np.testing.assert_array_equal(f_hi, network.extract_features(hi, x))

    def test_feature_width(self):
        model = miniature_model()
        assert model.feature_width == 4
        feats = network.extract_features(model, np.zeros((1, 1, 8, 8), np.float32))
        assert feats.shape == (1, 4)


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        model = miniature_model(dropout_rate=0.5, seed=8)
        path = tmp_path / "model.avnm"
        network.save_model(model, path)
        loaded = network.load_model(path)
        assert loaded.layers == model.layers
        assert loaded.input_shape == model.input_shape
        assert loaded.feature_layer_index == model.feature_layer_index
        for i in model.params:
            np.testing.assert_array_equal(loaded.params[i][0], model.params[i][0])
            np.testing.assert_array_equal(loaded.params[i][1], model.params[i][1])
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(
            network.predict(model, x)[0], network.predict(loaded, x)[0]
        )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.avnm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            network.load_model(path)

    def test_truncated_rejected(self, tmp_path):
        model = miniature_model()
        path = tmp_path / "model.avnm"
        network.save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            network.load_model(path)
