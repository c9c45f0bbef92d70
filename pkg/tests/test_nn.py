import numpy as np
import pytest

from debnn import nn
from debnn.data import Dataset
from debnn.util import inverse_softplus


def fd_gradient(spec, theta, x, y, wd, step=1e-6):
    g = np.zeros_like(theta.values)
    for i in range(len(theta.values)):
        tp, tm = theta.copy(), theta.copy()
        tp.values[i] += step
        tm.values[i] -= step
        g[i] = (nn.nll_and_grad(spec, tp, x, y, wd).nll
                - nn.nll_and_grad(spec, tm, x, y, wd).nll) / (2 * step)
    return g


def dataset_from_arrays(x, y, task, n_classes=None, seed=0):
    n = len(x)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    splits = {"train": perm[:int(0.7 * n)],
              "val": perm[int(0.7 * n):int(0.8 * n)],
              "test": perm[int(0.8 * n):]}
    return Dataset(inputs=np.asarray(x, dtype=np.float64), targets=np.asarray(y),
                   task=task, n_classes=n_classes, splits=splits, generator={"name": "test"})


def separable_blobs(n=120, seed=0):
    """Two classes separated by a wide margin, linearly separable by construction."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(0, 0.3, (n // 2, 2)) + np.array([-2.0, 0.0])
    x1 = rng.normal(0, 0.3, (n - n // 2, 2)) + np.array([2.0, 0.0])
    x = np.concatenate([x0, x1])
    y = np.concatenate([np.zeros(n // 2, dtype=np.int64), np.ones(n - n // 2, dtype=np.int64)])
    return dataset_from_arrays(x, y, "classification", 2, seed=seed)


class TestSpecAndParams:
    def test_param_count_and_partition(self):
        spec = nn.NetworkSpec((2, 16, 3))
        assert nn.param_count(spec) == 2 * 16 + 16 + 16 * 3 + 3
        start, stop = nn.last_layer_partition(spec)
        assert stop - start == 16 * 3 + 3 and stop == nn.param_count(spec)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            nn.NetworkSpec((2,))
        with pytest.raises(ValueError):
            nn.NetworkSpec((2, 0, 3))
        with pytest.raises(ValueError):
            nn.NetworkSpec((2, 4, 3), head="heteroscedastic")
        with pytest.raises(ValueError):
            nn.NetworkSpec((2, 4, 1), head="classifier")
        with pytest.raises(ValueError):
            nn.NetworkSpec((2, 4, 2), activation="gelu")

    def test_param_vector_validation(self):
        with pytest.raises(ValueError):
            nn.ParamVector(np.zeros(10), (10, 10))
        with pytest.raises(ValueError):
            nn.ParamVector(np.zeros(10), (4, 12))
        spec = nn.NetworkSpec((2, 3, 2))
        with pytest.raises(ValueError):
            nn.ParamVector.for_spec(np.zeros(5), spec)


class TestForward:
    def test_zero_weights_zero_logits(self):
        spec = nn.NetworkSpec((2, 8, 3))
        theta = nn.ParamVector.for_spec(np.zeros(nn.param_count(spec)), spec)
        out = nn.forward(spec, theta, np.array([[0.3, -1.2], [5.0, 2.0]]))
        assert np.all(out == 0.0)

    def test_identity_single_layer(self):
        spec = nn.NetworkSpec((2, 2), head="classifier")
        values = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
        theta = nn.ParamVector.for_spec(values, spec)
        out = nn.forward(spec, theta, np.array([[1.0, 2.0]]))
        assert np.allclose(out, [[1.0, 2.0]], atol=0)

    def test_matches_hand_rolled_matmul(self):
        spec = nn.NetworkSpec((2, 16, 3), activation="tanh")
        theta = nn.init_params(spec, 7)
        x = np.random.default_rng(5).standard_normal((9, 2))
        # independent oracle: explicit per-element matrix arithmetic
        w1 = theta.values[:32].reshape(16, 2)
        b1 = theta.values[32:48]
        w2 = theta.values[48:48 + 48].reshape(3, 16)
        b2 = theta.values[96:99]
        expected = np.empty((9, 3))
        for n in range(9):
            h = np.empty(16)
            for j in range(16):
                h[j] = np.tanh(w1[j, 0] * x[n, 0] + w1[j, 1] * x[n, 1] + b1[j])
            for c in range(3):
                expected[n, c] = sum(w2[c, j] * h[j] for j in range(16)) + b2[c]
        assert np.allclose(nn.forward(spec, theta, x), expected, atol=1e-12)

    def test_forward_many_matches_stacked_forward(self):
        spec = nn.NetworkSpec((2, 8, 3))
        thetas = np.stack([nn.init_params(spec, s).values for s in range(4)])
        x = np.random.default_rng(0).standard_normal((6, 2))
        part = nn.last_layer_partition(spec)
        stacked = np.stack([nn.forward(spec, nn.ParamVector(t, part), x) for t in thetas])
        assert np.allclose(nn.forward_many(spec, thetas, x), stacked, atol=1e-14)

    def test_shape_mismatch(self):
        spec = nn.NetworkSpec((2, 4, 2))
        theta = nn.init_params(spec, 0)
        with pytest.raises(ValueError):
            nn.forward(spec, theta, np.zeros((3, 5)))


class TestNllAndGrad:
    def test_uniform_softmax_nll(self):
        spec = nn.NetworkSpec((2, 4), head="classifier")
        theta = nn.ParamVector.for_spec(np.zeros(nn.param_count(spec)), spec)
        lv = nn.nll_and_grad(spec, theta, np.array([[1.0, -2.0]]), np.array([2]), 0.0)
        assert lv.nll == pytest.approx(np.log(4.0), abs=1e-12)

    def test_gaussian_at_mode(self):
        # mean == target and variance == 1 exactly: nll = 0.5 log(2 pi)
        spec = nn.NetworkSpec((1, 2), head="heteroscedastic")
        raw = inverse_softplus(1.0 - nn.VAR_FLOOR)
        values = np.array([0.0, 0.0, 1.7, raw])      # W = 0, b = (mean, raw_var)
        theta = nn.ParamVector.for_spec(values, spec)
        lv = nn.nll_and_grad(spec, theta, np.array([[0.4]]), np.array([1.7]), 0.0)
        assert lv.nll == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_classifier_gradient_fd(self, seed):
        spec = nn.NetworkSpec((2, 6, 3), activation="tanh")
        rng = np.random.default_rng(seed)
        theta = nn.init_params(spec, seed)
        x = rng.standard_normal((8, 2))
        y = rng.integers(0, 3, 8)
        lv = nn.nll_and_grad(spec, theta, x, y, 0.1)
        g_fd = fd_gradient(spec, theta, x, y, 0.1)
        rel = np.abs(lv.grad - g_fd) / (np.abs(lv.grad) + np.abs(g_fd) + 1e-12)
        assert rel.max() < 1e-5

    @pytest.mark.parametrize("seed", [3, 4])
    def test_hetero_gradient_fd(self, seed):
        spec = nn.NetworkSpec((1, 6, 2), head="heteroscedastic")
        rng = np.random.default_rng(seed)
        theta = nn.init_params(spec, seed)
        x = rng.uniform(-1, 1, (10, 1))
        y = rng.standard_normal(10)
        lv = nn.nll_and_grad(spec, theta, x, y, 0.05)
        g_fd = fd_gradient(spec, theta, x, y, 0.05)
        rel = np.abs(lv.grad - g_fd) / (np.abs(lv.grad) + np.abs(g_fd) + 1e-12)
        assert rel.max() < 1e-5

    def test_relu_gradient_fd(self):
        spec = nn.NetworkSpec((2, 8, 2), activation="relu")
        rng = np.random.default_rng(11)
        theta = nn.init_params(spec, 11)
        x = rng.standard_normal((8, 2))
        y = rng.integers(0, 2, 8)
        lv = nn.nll_and_grad(spec, theta, x, y, 0.0)
        g_fd = fd_gradient(spec, theta, x, y, 0.0)
        rel = np.abs(lv.grad - g_fd) / (np.abs(lv.grad) + np.abs(g_fd) + 1e-12)
        assert rel.max() < 1e-4

    def test_label_out_of_range(self):
        spec = nn.NetworkSpec((2, 4, 3))
        theta = nn.init_params(spec, 0)
        with pytest.raises(ValueError):
            nn.nll_and_grad(spec, theta, np.zeros((1, 2)), np.array([3]), 0.0)

    def test_empty_batch(self):
        spec = nn.NetworkSpec((2, 4, 3))
        theta = nn.init_params(spec, 0)
        with pytest.raises(ValueError):
            nn.nll_and_grad(spec, theta, np.zeros((0, 2)), np.array([], dtype=int), 0.0)

    def test_variance_floor_barely_moves_variance(self):
        # for any target variance above 1e-3 the floor changes it by at most the floor
        for s2 in (1e-3, 0.05, 1.0, 10.0):
            raw = inverse_softplus(s2)
            achieved = nn.hetero_moments(np.array([[0.0, raw]]))[1][0]
            assert abs(achieved - s2) <= nn.VAR_FLOOR + 1e-15


class TestTrainMap:
    def test_zero_epochs_returns_seeded_init(self):
        spec = nn.NetworkSpec((2, 8, 2))
        ds = separable_blobs()
        cfg = nn.TrainConfig(epochs=0, batch_size=16, lr=0.1, seed=3)
        ckpt = nn.train_map(spec, ds, cfg)
        assert np.array_equal(ckpt.params.values, nn.init_params(spec, 3).values)
        assert ckpt.trace == []

    def test_separable_blobs_perfect_train_accuracy(self):
        spec = nn.NetworkSpec((2, 16, 2))
        ds = separable_blobs()
        cfg = nn.TrainConfig(epochs=200, batch_size=32, lr=0.1, weight_decay=1e-4, seed=0)
        ckpt = nn.train_map(spec, ds, cfg)
        x, y = ds.split("train")
        logits = nn.forward(spec, ckpt.params, x)
        assert np.mean(np.argmax(logits, axis=1) == y) == 1.0

    def test_same_seed_bit_identical(self):
        spec = nn.NetworkSpec((2, 8, 2))
        ds = separable_blobs()
        cfg = nn.TrainConfig(epochs=30, batch_size=16, lr=0.05, seed=11)
        a = nn.train_map(spec, ds, cfg)
        b = nn.train_map(spec, ds, cfg)
        assert np.array_equal(a.params.values, b.params.values)

    def test_early_stop_snapshot_at_least_as_good_as_final(self):
        spec = nn.NetworkSpec((2, 8, 2))
        ds = separable_blobs(seed=5)
        cfg = nn.TrainConfig(epochs=60, batch_size=16, lr=0.2, seed=2,
                             early_stop_patience=10)
        ckpt = nn.train_map(spec, ds, cfg)
        x_val, y_val = ds.split("val")
        returned = nn.point_elpd(spec, ckpt.params, x_val, y_val)
        assert returned >= ckpt.trace[-1]["val_elpd"] - 1e-12

    def test_trace_fields(self):
        spec = nn.NetworkSpec((2, 4, 2))
        ds = separable_blobs()
        cfg = nn.TrainConfig(epochs=3, batch_size=32, lr=0.05, seed=0)
        ckpt = nn.train_map(spec, ds, cfg)
        assert len(ckpt.trace) == 3
        assert {"epoch", "train_nll", "val_elpd", "lr"} <= set(ckpt.trace[0])


class TestConstantSgd:
    def test_lr_zero_iterates_fixed(self):
        spec = nn.NetworkSpec((2, 4, 2))
        ds = separable_blobs()
        theta = nn.init_params(spec, 0)
        its = nn.constant_sgd_iterates(spec, ds, theta, 0.0, 5, batch_size=16, seed=1)
        assert its.shape == (5, len(theta.values))
        assert np.all(its == theta.values)

    def test_single_epoch(self):
        spec = nn.NetworkSpec((2, 4, 2))
        ds = separable_blobs()
        theta = nn.init_params(spec, 0)
        its = nn.constant_sgd_iterates(spec, ds, theta, 0.01, 1, batch_size=16, seed=1)
        assert its.shape[0] == 1
        assert not np.array_equal(its[0], theta.values)

    def test_scalar_quadratic_matches_closed_form(self):
        # loss a/2 (theta - c)^2: full-batch SGD obeys
        # theta_t = c + (1 - lr a)^t (theta_0 - c)
        a, c, lr, t0 = 3.0, 1.5, 0.2, -2.0

        def grad_fn(theta, _):
            return a * (theta - c)

        iterates = nn.sgd_iterates(grad_fn, np.array([t0]), lr, 12, lambda e: [None])
        expected = c + (1 - lr * a) ** np.arange(1, 13) * (t0 - c)
        assert np.allclose(iterates[:, 0], expected, atol=1e-12)

    def test_deterministic_under_seed(self):
        spec = nn.NetworkSpec((2, 4, 2))
        ds = separable_blobs()
        theta = nn.init_params(spec, 0)
        a = nn.constant_sgd_iterates(spec, ds, theta, 0.02, 4, batch_size=16, seed=9)
        b = nn.constant_sgd_iterates(spec, ds, theta, 0.02, 4, batch_size=16, seed=9)
        assert np.array_equal(a, b)

    def test_divergence_names_learning_rate(self):
        spec = nn.NetworkSpec((2, 4, 2), activation="relu")
        ds = separable_blobs()
        theta = nn.init_params(spec, 0)
        with np.errstate(all="ignore"):
            with pytest.raises(nn.TrainingDivergedError, match="1e\\+06"):
                nn.constant_sgd_iterates(spec, ds, theta, 1e6, 30, batch_size=16, seed=0)
