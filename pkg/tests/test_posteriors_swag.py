import numpy as np
import pytest

from debnn import nn, posteriors
from debnn.posteriors import swag_from_iterates

from test_nn import separable_blobs


def small_checkpoint(seed=0):
    spec = nn.NetworkSpec((2, 8, 2))
    ds = separable_blobs(seed=seed)
    cfg = nn.TrainConfig(epochs=40, batch_size=16, lr=0.1, weight_decay=1e-3, seed=seed)
    return nn.train_map(spec, ds, cfg), ds


class TestFitIdentities:
    def test_hand_arithmetic_on_two_iterates(self):
        # iterates {1, 3}: mean 2, diag = mean of squares minus squared mean = 1,
        # low-rank = ((-1)^2 + 1^2) / (R - 1) = 2
        post = swag_from_iterates(np.array([[1.0], [3.0]]), rank=2, partition=(0, 1))
        assert post.theta_swa.values[0] == 2.0
        assert post.sigma_diag[0] == 1.0
        low = post.deviations @ post.deviations.T / (post.rank - 1)
        assert low[0, 0] == 2.0

    def test_zero_lr_collapses_to_map(self):
        # averaging six identical iterates can wobble by an ulp or two
        ckpt, ds = small_checkpoint()
        post = posteriors.fit_swag(ckpt, ds, lr=0.0, n_epochs=6, rank=3, seed=1)
        assert np.allclose(post.theta_swa.values, ckpt.params.values, rtol=1e-14, atol=0)
        assert np.all(post.sigma_diag <= 1e-12)
        assert np.all(np.abs(post.deviations) <= 1e-12)

    def test_constant_iterates_sample_as_point_mass(self):
        c = np.full(4, 2.5)
        post = swag_from_iterates(np.tile(c, (5, 1)), rank=3, partition=(0, 4))
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert np.array_equal(post.sample(rng), c)

    def test_negative_diag_clamped(self):
        # mean-of-squares formula can go microscopically negative in floating point
        iterates = np.full((3, 2), 1.0 / 3.0)
        post = swag_from_iterates(iterates, rank=2, partition=(0, 2))
        assert np.all(post.sigma_diag >= 0.0)

    def test_rank_preconditions(self):
        with pytest.raises(ValueError):
            swag_from_iterates(np.zeros((3, 2)), rank=4, partition=(0, 2))
        with pytest.raises(ValueError):
            swag_from_iterates(np.zeros((3, 2)), rank=1, partition=(0, 2))


class TestSampler:
    def test_lambda_to_zero_gives_mean(self):
        post = swag_from_iterates(np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 2.0]]),
                                  rank=2, partition=(0, 2))
        tiny = posteriors.scale_covariance(post, 1e-30)
        s = tiny.sample(np.random.default_rng(0))
        assert np.allclose(s, post.theta_swa.values, atol=1e-10)

    def test_1d_variance_matches_closed_form(self):
        # zero deviations, sigma_diag = 4: covariance = 1/2 * 4 = 2
        post = posteriors.SwagPosterior(
            theta_swa=nn.ParamVector(np.array([1.0]), (0, 1)),
            sigma_diag=np.array([4.0]), deviations=np.zeros((1, 3)))
        rng = np.random.default_rng(42)
        samples = np.array([post.sample(rng)[0] for _ in range(100_000)])
        assert abs(samples.var() - 2.0) / 2.0 < 0.05
        assert abs(samples.mean() - 1.0) < 0.05

    def test_3d_covariance_within_3_sigma(self):
        rng = np.random.default_rng(7)
        dev = rng.standard_normal((3, 4))
        post = posteriors.SwagPosterior(
            theta_swa=nn.ParamVector(np.zeros(3), (0, 3)),
            sigma_diag=np.array([0.5, 1.0, 2.0]), deviations=dev)
        target = post.covariance()
        n = 100_000
        srng = np.random.default_rng(3)
        samples = np.stack([post.sample(srng) for _ in range(n)])
        emp = np.cov(samples.T, ddof=1)
        se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target ** 2) / n)
        assert np.all(np.abs(emp - target) < 3.0 * se)

    def test_swa_point_wraps_mean(self):
        post = swag_from_iterates(np.array([[1.0], [3.0]]), rank=2, partition=(0, 1))
        point = posteriors.swa_point(post)
        assert point.center.values[0] == 2.0
        assert point.sample(np.random.default_rng(0))[0] == 2.0


class TestScaleCovariance:
    def test_lambda_one_same_samples(self):
        post = swag_from_iterates(np.array([[0.0, 1.0], [2.0, 3.0]]), rank=2,
                                  partition=(0, 2))
        scaled = posteriors.scale_covariance(post, 1.0)
        a = post.sample(np.random.default_rng(5))
        b = scaled.sample(np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_quarter_scale_quarter_variance(self):
        post = posteriors.SwagPosterior(
            theta_swa=nn.ParamVector(np.array([0.0]), (0, 1)),
            sigma_diag=np.array([4.0]), deviations=np.zeros((1, 2)))
        scaled = posteriors.scale_covariance(post, 0.25)
        rng = np.random.default_rng(1)
        base = np.array([post.sample(np.random.default_rng(s))[0] for s in range(100_000)])
        quar = np.array([scaled.sample(np.random.default_rng(s))[0] for s in range(100_000)])
        assert abs(quar.var() - 0.25 * base.var()) / (0.25 * base.var()) < 0.05

    def test_matched_seeds_rescale_about_mean(self):
        # scaling then sampling equals sampling then shrinking the perturbation
        # by sqrt(lambda), when the underlying normals match
        post = swag_from_iterates(np.array([[0.0, 1.0, -1.0], [2.0, 3.0, 0.5],
                                            [1.0, -2.0, 0.25]]), rank=3, partition=(0, 3))
        lam = 0.37
        scaled = posteriors.scale_covariance(post, lam)
        a = post.sample(np.random.default_rng(9))
        b = scaled.sample(np.random.default_rng(9))
        mean = post.theta_swa.values
        assert np.allclose(b - mean, np.sqrt(lam) * (a - mean), atol=1e-12)

    def test_point_mass_unchanged(self):
        point = posteriors.PointMassPosterior(center=nn.ParamVector(np.array([1.0]), (0, 1)))
        assert posteriors.scale_covariance(point, 0.01) is point

    def test_rejects_nonpositive(self):
        post = swag_from_iterates(np.array([[1.0], [3.0]]), rank=2, partition=(0, 1))
        with pytest.raises(ValueError):
            posteriors.scale_covariance(post, 0.0)
        with pytest.raises(ValueError):
            posteriors.scale_covariance(post, -1.0)

    def test_scaling_composes_multiplicatively(self):
        post = swag_from_iterates(np.array([[1.0], [3.0]]), rank=2, partition=(0, 1))
        twice = posteriors.scale_covariance(posteriors.scale_covariance(post, 0.5), 0.5)
        once = posteriors.scale_covariance(post, 0.25)
        assert twice.scale_lambda == pytest.approx(once.scale_lambda)


class TestTuneSwagLr:
    def test_single_candidate_selected(self):
        ckpt, ds = small_checkpoint()
        tuning = posteriors.tune_swag_lr(ckpt, ds, grid=(0.01,), n_epochs=4, rank=3,
                                         n_samples=20, seed=0)
        assert tuning.lr_swag == 0.01 and tuning.lr_swa == 0.01
        assert len(tuning.table) == 1

    def test_default_grid_is_21_log_spaced(self):
        grid = np.asarray(posteriors.DEFAULT_SWAG_LR_GRID)
        assert len(grid) == 21
        assert grid[0] == pytest.approx(1e-4) and grid[-1] == pytest.approx(1e-1)
        ratios = grid[1:] / grid[:-1]
        assert np.allclose(ratios, ratios[0])

    def test_diverging_rates_marked_failed(self):
        # with weight decay, an absurd rate multiplies the weights geometrically
        spec = nn.NetworkSpec((2, 8, 2))
        ds = separable_blobs(seed=3)
        cfg = nn.TrainConfig(epochs=20, batch_size=16, lr=0.05, weight_decay=1e-3, seed=3)
        ckpt = nn.train_map(spec, ds, cfg)
        with np.errstate(all="ignore"):
            tuning = posteriors.tune_swag_lr(ckpt, ds, grid=(1e-3, 1e12), n_epochs=8,
                                             rank=3, n_samples=10, seed=0)
        statuses = {row["lr"]: row["status"] for row in tuning.table}
        assert statuses[1e12] == "failed"
        assert tuning.lr_swag == 1e-3

    def test_reproducible_under_seed(self):
        ckpt, ds = small_checkpoint(seed=2)
        a = posteriors.tune_swag_lr(ckpt, ds, grid=(0.003, 0.03), n_epochs=4, rank=3,
                                    n_samples=20, seed=5)
        b = posteriors.tune_swag_lr(ckpt, ds, grid=(0.003, 0.03), n_epochs=4, rank=3,
                                    n_samples=20, seed=5)
        assert a.lr_swag == b.lr_swag and a.lr_swa == b.lr_swa
        assert a.table == b.table
