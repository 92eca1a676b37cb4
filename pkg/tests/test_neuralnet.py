import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import gradient_check
from risadapt.exceptions import FormatError, InvalidArgumentError, TrainingError
from risadapt.neuralnet import (Mlp, MlpRegressor, TrainConfig, dumps_mlp, evaluate_loss,
                                feature_stats, forward, init_mlp, load_mlp, loads_mlp,
                                loss_and_gradient, save_mlp, train, with_stats)


def identity_net(n):
    return Mlp([np.eye(n)], [np.zeros(n)], np.zeros(n), np.ones(n), np.zeros(n), np.ones(n))


def random_stats(net, rng):
    n_in, n_out = net.n_inputs, net.n_outputs
    return with_stats(net, in_mean=rng.normal(size=n_in), in_std=rng.uniform(0.5, 2, n_in),
                      out_mean=rng.normal(size=n_out), out_std=rng.uniform(0.5, 2, n_out))


def random_problem(sizes, rng, loss="mse", batch=8):
    net = init_mlp(sizes, int(rng.integers(2 ** 31)))
    for b in net.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    net = random_stats(net, rng)
    X = rng.normal(size=(batch, sizes[0]))
    if loss == "arc":
        t = rng.uniform(0, 2 * np.pi, batch)
        Y = np.c_[np.cos(t), np.sin(t)]
    else:
        Y = rng.normal(size=(batch, sizes[-1]))
    return net, X, Y


class TestForward:
    def test_zero_map(self):
        net = init_mlp((3, 4, 2))
        for p in net.params():
            p[...] = 0
        np.testing.assert_array_equal(forward(net, [1.0, -2.0, 3.0]), [0.0, 0.0])

    def test_identity(self):
        x = np.array([0.5, -1.5, 2.0])
        np.testing.assert_array_equal(forward(identity_net(3), x), x)

    def test_relu_kill(self):
        net = init_mlp((2, 5, 3), seed=4)
        net.weights[0][...] = 0
        net.biases[0][...] = -1.0
        net.biases[1][...] = [1.0, 2.0, 3.0]
        net = with_stats(net, out_mean=[10.0, 0, 0], out_std=[2.0, 1, 1])
        np.testing.assert_allclose(forward(net, [3.0, 4.0]), [12.0, 2.0, 3.0])

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            forward(init_mlp((3, 2)), [1.0, 2.0])

    def test_batch_matches_rows(self, rng):
        net = random_stats(init_mlp((4, 8, 3), 1), rng)
        X = rng.normal(size=(5, 4))
        Y = forward(net, X)
        for x, y in zip(X, Y):
            np.testing.assert_allclose(forward(net, x), y, rtol=1e-14)

    def test_pure(self, rng):
        net = random_stats(init_mlp((4, 8, 3), 1), rng)
        before = dumps_mlp(net)
        x = rng.normal(size=4)
        assert np.array_equal(forward(net, x), forward(net, x))
        assert dumps_mlp(net) == before


class TestGradient:
    def test_zero_at_minimum(self, rng):
        net = random_stats(init_mlp((3, 6, 2), 2), rng)
        X = rng.normal(size=(7, 3))
        value, grads = loss_and_gradient(net, X, forward(net, X))
        assert value == pytest.approx(0.0, abs=1e-28)
        assert all(np.max(np.abs(g)) < 1e-13 for g in grads)

    @pytest.mark.parametrize("loss", ["mse", "arc"])
    def test_duplicate_rows(self, rng, loss):
        net, X, Y = random_problem((3, 5, 2), rng, loss)
        v1, g1 = loss_and_gradient(net, X, Y, loss)
        v2, g2 = loss_and_gradient(net, np.repeat(X, 2, 0), np.repeat(Y, 2, 0), loss)
        assert v1 == pytest.approx(v2, rel=1e-13)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_small_nets(self, seed):
        rng = np.random.default_rng(seed)
        n_layers = 1 + seed % 4
        sizes = tuple(int(s) for s in rng.integers(2, 9, n_layers + 1))
        loss = "arc" if seed % 3 == 2 else "mse"
        if loss == "arc":
            sizes = sizes[:-1] + (2,)
        net, X, Y = random_problem(sizes, rng, loss)
        assert gradient_check(net, X, Y, loss) < 1e-5

    @pytest.mark.parametrize("sizes,loss", [((27, 64, 64, 50), "mse"),
                                            ((500, 256, 128, 26, 2), "mse"),
                                            ((500, 256, 128, 26, 2), "arc")])
    def test_paper_shapes(self, sizes, loss):
        net, X, Y = random_problem(sizes, np.random.default_rng(len(sizes)), loss)
        assert gradient_check(net, X, Y, loss, max_entries=200) < 1e-5

    def test_arc_loss_value(self):
        net = identity_net(2)
        t = np.array([0.1, 3.0])
        X = np.c_[np.cos(t), np.sin(t)]
        Y = np.c_[np.cos(t + 0.3), np.sin(t + 0.3)]
        value, _ = loss_and_gradient(net, X, Y, "arc")
        assert value == pytest.approx(0.09, rel=1e-12)

    def test_arc_wraps(self):
        net = identity_net(2)
        X = np.array([[np.cos(0.1), np.sin(0.1)]])
        Y = np.array([[np.cos(-0.1), np.sin(-0.1)]])
        assert loss_and_gradient(net, X, Y, "arc")[0] == pytest.approx(0.04)

    def test_bad_inputs(self, rng):
        net = init_mlp((3, 2))
        with pytest.raises(InvalidArgumentError):
            loss_and_gradient(net, np.zeros((0, 3)), np.zeros((0, 2)))
        with pytest.raises(InvalidArgumentError):
            loss_and_gradient(net, np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(InvalidArgumentError):
            loss_and_gradient(net, np.zeros((2, 3)), np.zeros((2, 2)), "huber")


class TestNormalization:
    @given(arrays(np.float64, (20, 3), elements=st.floats(-1e3, 1e3)))
    def test_round_trip(self, X):
        mean, std = feature_stats(X)
        assert np.all(std > 0)
        net = with_stats(init_mlp((3, 1)), in_mean=mean, in_std=std)
        back = net.denormalize_inputs(net.normalize_inputs(X))
        np.testing.assert_allclose(back, X, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(X).max()))

    def test_constant_feature(self):
        X = np.c_[np.full(5, 3.0), np.arange(5.0)]
        mean, std = feature_stats(X)
        assert std[0] == 1.0 and mean[0] == 3.0


class TestTrain:
    def test_linear_regression(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (1000, 1))
        y = 2 * x + 1
        net, report = train(init_mlp((1, 16, 1), 0), x, y, TrainConfig(max_epochs=200, seed=1))
        assert report.best_val_mse < 1e-3
        assert report.epochs_run <= 200

    def test_stagnation(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(100, 2)), rng.normal(size=(100, 1))
        cfg = TrainConfig(learning_rate=0.0, patience=5, max_epochs=100)
        _, report = train(init_mlp((2, 4, 1)), X, Y, cfg)
        assert report.epochs_run == 1 + 5
        assert report.best_epoch == 1

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(200, 3)), rng.normal(size=(200, 2))
        cfg = TrainConfig(max_epochs=15, seed=9)
        a, _ = train(init_mlp((3, 8, 2), 3), X, Y, cfg)
        b, _ = train(init_mlp((3, 8, 2), 3), X, Y, cfg)
        assert dumps_mlp(a) == dumps_mlp(b)

    def test_returns_best_epoch(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(120, 4))
        Y = np.sin(X.sum(1, keepdims=True)) + rng.normal(0, 0.3, (120, 1))
        cfg = TrainConfig(max_epochs=60, patience=60, learning_rate=0.02, seed=4, batch_size=8)
        net, report = train(init_mlp((4, 32, 32, 1), 0), X, Y, cfg)
        assert report.best_val_mse == min(report.val_history)
        assert report.val_history.index(report.best_val_mse) + 1 == report.best_epoch
        from risadapt.neuralnet import split_indices
        _, va = split_indices(len(X), cfg.val_fraction, np.random.default_rng(cfg.seed))
        assert evaluate_loss(net, X[va], Y[va]) == pytest.approx(report.best_val_mse, rel=1e-12)

    def test_input_not_modified(self):
        net = init_mlp((2, 3, 1), 0)
        before = dumps_mlp(net)
        X = np.random.default_rng(0).normal(size=(40, 2))
        train(net, X, X[:, :1], TrainConfig(max_epochs=3))
        assert dumps_mlp(net) == before

    def test_too_small(self):
        with pytest.raises(TrainingError):
            train(init_mlp((1, 1)), np.zeros((2, 1)), np.zeros((2, 1)), TrainConfig(val_fraction=0.1))

    def test_non_finite(self):
        X = np.ones((20, 1))
        Y = np.full((20, 1), np.nan)
        with pytest.raises(TrainingError):
            train(init_mlp((1, 1)), X, Y, TrainConfig(max_epochs=2))

    @pytest.mark.parametrize("kw", [{"val_fraction": 0.0}, {"val_fraction": 1.0},
                                    {"patience": 0}, {"batch_size": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)

    def test_config_dict(self):
        cfg = TrainConfig(batch_size=32, seed=5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(InvalidArgumentError):
            TrainConfig.from_dict({"lr": 1})


class TestModelFile:
    def test_round_trip(self, tmp_path, rng):
        net = random_stats(init_mlp((4, 6, 5, 3), 2), rng)
        save_mlp(net, tmp_path / "m.rsnn")
        back = load_mlp(tmp_path / "m.rsnn")
        assert dumps_mlp(back) == dumps_mlp(net)
        for a, b in zip(back.params(), net.params()):
            assert np.array_equal(a, b)

    def test_layout(self):
        net = init_mlp((3, 2), 0)
        data = dumps_mlp(net)
        assert data[:4] == b"RSNN"
        assert struct.unpack_from("<III", data, 4) == (1, 1, 2)
        assert struct.unpack_from("<I", data, 16)[0] == 3
        assert len(data) == 4 + 8 + 8 + 8 * (6 + 2) + 8 * (3 + 3 + 2 + 2)

    def test_bad_magic(self):
        data = b"XXXX" + dumps_mlp(init_mlp((2, 1)))[4:]
        with pytest.raises(FormatError, match="magic"):
            loads_mlp(data)

    def test_bad_version(self):
        data = bytearray(dumps_mlp(init_mlp((2, 1))))
        data[4:8] = struct.pack("<I", 7)
        with pytest.raises(FormatError, match="version"):
            loads_mlp(bytes(data))

    def test_truncated(self):
        data = dumps_mlp(init_mlp((2, 3, 1)))
        for cut in (2, 10, len(data) // 2, len(data) - 1):
            with pytest.raises(FormatError, match="offset"):
                loads_mlp(data[:cut])

    def test_trailing(self):
        with pytest.raises(FormatError):
            loads_mlp(dumps_mlp(init_mlp((2, 1))) + b"\0")


class TestEstimator:
    def test_sklearn_protocol(self):
        est = MlpRegressor(hidden_layer_sizes=(8,), max_epochs=3, random_state=4)
        assert clone(est).get_params() == est.get_params()
        with pytest.raises(NotFittedError):
            est.predict(np.zeros((1, 2)))

    def test_fit_predict(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, (400, 2))
        y = X[:, 0] - 0.5 * X[:, 1]
        est = MlpRegressor(hidden_layer_sizes=(16,), max_epochs=150, random_state=1).fit(X, y)
        assert est.predict(X).shape == (400,)
        assert est.score(X, y) > 0.95

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(100, 3)), rng.normal(size=(100, 2))
        a = MlpRegressor(hidden_layer_sizes=(4,), max_epochs=5, random_state=2).fit(X, y)
        b = clone(a).fit(X, y)
        assert dumps_mlp(a.net_) == dumps_mlp(b.net_)
