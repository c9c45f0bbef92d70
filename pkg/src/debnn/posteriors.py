"""Post-hoc approximate posteriors around a MAP estimate.

Four variants: point mass (plain ensembles / SWA), SWAG (diag + low-rank
Gaussian over SGD iterates), last-layer Laplace (Gaussian over final-layer
parameters, Dirac elsewhere), and the Laplace base refined by a chain of
radial flows trained on a reverse-KL ELBO. Every variant samples full
parameter vectors and carries a covariance scale.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import flows as fl
from . import metrics
from .data import Dataset
from .nn import (VAR_FLOOR, Checkpoint, NetworkSpec, ParamVector, TrainingDivergedError,
                 constant_sgd_iterates, last_layer_features, forward, hetero_moments,
                 point_elpd)
from .util import gaussian_log_pdf, sigmoid, softmax, softplus, substream

DEFAULT_TAU_GRID = tuple(np.logspace(-4.0, 4.0, 21))
DEFAULT_SWAG_LR_GRID = tuple(np.logspace(-4.0, -1.0, 21))
# linear-space grid used when tuning the prior precision under flow refinement
FLOW_PRIOR_GRID = (1, 5, 10, 20, 30, 40, 50, 70, 90, 100, 125, 150, 175, 200, 500)


@dataclass(frozen=True)
class PointMassPosterior:
    center: ParamVector

    def sample(self, rng) -> np.ndarray:
        return self.center.values.copy()

    @property
    def center_values(self) -> np.ndarray:
        return self.center.values

    @property
    def scale_lambda(self) -> float:
        return 1.0


@dataclass(frozen=True)
class SwagPosterior:
    """Gaussian N(theta_swa, lambda/2 * (Sigma_diag + Sigma_lowrank))."""
    theta_swa: ParamVector
    sigma_diag: np.ndarray
    deviations: np.ndarray          # (P, R) columns theta_m - mean of last R iterates
    scale_lambda: float = 1.0

    def __post_init__(self):
        if np.any(self.sigma_diag < 0):
            raise ValueError("sigma_diag must be elementwise nonnegative")
        if self.deviations.shape[0] != len(self.theta_swa.values):
            raise ValueError("deviation rows must match parameter count")
        if self.rank < 2:
            raise ValueError("need rank >= 2")
        if self.scale_lambda <= 0:
            raise ValueError("scale_lambda must be positive")

    @property
    def rank(self) -> int:
        return self.deviations.shape[1]

    def sample(self, rng) -> np.ndarray:
        z1 = rng.standard_normal(len(self.theta_swa.values))
        z2 = rng.standard_normal(self.rank)
        perturb = np.sqrt(0.5) * np.sqrt(self.sigma_diag) * z1 \
            + np.sqrt(0.5 / (self.rank - 1)) * (self.deviations @ z2)
        return self.theta_swa.values + np.sqrt(self.scale_lambda) * perturb

    def covariance(self) -> np.ndarray:
        """Dense lambda/2 (Sigma_diag + Sigma_lowrank), for small nets and tests."""
        low = self.deviations @ self.deviations.T / (self.rank - 1)
        return self.scale_lambda * 0.5 * (np.diag(self.sigma_diag) + low)

    @property
    def center_values(self) -> np.ndarray:
        return self.theta_swa.values


@dataclass(frozen=True)
class LllaPosterior:
    """Gaussian over last-layer parameters, all other parameters fixed at MAP.

    `ggn` holds the curvature sum only; the posterior precision is
    ggn + prior_precision * I, and the sampling covariance is
    scale_lambda times its inverse.
    """
    theta_map: ParamVector
    ggn: np.ndarray                 # (d, d) for full mode, (d,) for diagonal
    prior_precision: float
    mode: str = "full"
    scale_lambda: float = 1.0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.prior_precision <= 0:
            raise ValueError("prior precision must be positive")
        if self.scale_lambda <= 0:
            raise ValueError("scale_lambda must be positive")
        d = self.last_layer_dim
        if self.mode == "full":
            if self.ggn.shape != (d, d):
                raise ValueError("full-mode curvature must be (d, d)")
            prec = self.ggn + self.prior_precision * np.eye(d)
            try:
                chol = np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as e:
                raise np.linalg.LinAlgError(
                    f"last-layer precision not positive definite at prior precision "
                    f"{self.prior_precision:g} (curvature degenerate)") from e
        elif self.mode == "diagonal":
            if self.ggn.shape != (d,):
                raise ValueError("diagonal-mode curvature must be (d,)")
            prec = self.ggn + self.prior_precision
            if np.any(prec <= 0):
                raise np.linalg.LinAlgError(
                    f"diagonal precision nonpositive at prior precision {self.prior_precision:g}")
            chol = np.sqrt(prec)
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "_chol", chol)

    @property
    def last_layer_dim(self) -> int:
        start, stop = self.theta_map.partition
        return stop - start

    @property
    def last_layer_mean(self) -> np.ndarray:
        return self.theta_map.last_layer

    def sample_last_layer(self, rng, n: int | None = None) -> np.ndarray:
        size = 1 if n is None else n
        z = rng.standard_normal((size, self.last_layer_dim))
        if self.mode == "full":
            perturb = solve_triangular(self._chol, z.T, lower=True, trans=1).T
        else:
            perturb = z / self._chol
        out = self.last_layer_mean + np.sqrt(self.scale_lambda) * perturb
        return out[0] if n is None else out

    def sample(self, rng) -> np.ndarray:
        values = self.theta_map.values.copy()
        start, stop = self.theta_map.partition
        values[start:stop] = self.sample_last_layer(rng)
        return values

    def cov_log_det(self) -> float:
        d = self.last_layer_dim
        if self.mode == "full":
            prec_logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        else:
            prec_logdet = 2.0 * float(np.sum(np.log(self._chol)))
        return d * np.log(self.scale_lambda) - prec_logdet

    def entropy(self) -> float:
        d = self.last_layer_dim
        return 0.5 * d * (1.0 + np.log(2.0 * np.pi)) + 0.5 * self.cov_log_det()

    def covariance(self) -> np.ndarray:
        if self.mode == "full":
            inv = cho_solve((self._chol, True), np.eye(self.last_layer_dim))
        else:
            inv = np.diag(1.0 / self._chol ** 2)
        return self.scale_lambda * inv

    def log_pdf_last_layer(self, theta_l: np.ndarray) -> np.ndarray:
        """Gaussian log density of last-layer vectors (rows)."""
        theta_l = np.atleast_2d(theta_l)
        diff = theta_l - self.last_layer_mean
        if self.mode == "full":
            w = solve_triangular(self._chol, diff.T, lower=True).T
            quad = np.sum(w ** 2, axis=1) / self.scale_lambda
        else:
            quad = np.sum((diff * self._chol) ** 2, axis=1) / self.scale_lambda
        d = self.last_layer_dim
        return -0.5 * (d * np.log(2.0 * np.pi) + self.cov_log_det() + quad)

    @property
    def center_values(self) -> np.ndarray:
        return self.theta_map.values


@dataclass(frozen=True)
class FlowPosterior:
    """Last-layer Laplace base pushed through a chain of radial flows."""
    base: LllaPosterior
    flows: tuple = ()

    def sample(self, rng) -> np.ndarray:
        values = self.base.theta_map.values.copy()
        start, stop = self.base.theta_map.partition
        theta_l = self.base.sample_last_layer(rng)
        theta_l, _ = fl.flow_forward(self.flows, theta_l)
        values[start:stop] = theta_l
        return values

    @property
    def scale_lambda(self) -> float:
        return self.base.scale_lambda

    @property
    def center_values(self) -> np.ndarray:
        values = self.base.theta_map.values.copy()
        start, stop = self.base.theta_map.partition
        theta_l, _ = fl.flow_forward(self.flows, self.base.last_layer_mean)
        values[start:stop] = theta_l
        return values


def scale_covariance(post, lam: float):
    """Copy of a posterior whose sampling covariance is lam times the original.

    Point masses pass through unchanged; for flow posteriors only the Laplace
    base is rescaled.
    """
    if lam <= 0:
        raise ValueError("covariance scale must be positive")
    if isinstance(post, PointMassPosterior):
        return post
    if isinstance(post, SwagPosterior):
        return dataclasses.replace(post, scale_lambda=post.scale_lambda * lam)
    if isinstance(post, LllaPosterior):
        return dataclasses.replace(post, scale_lambda=post.scale_lambda * lam)
    if isinstance(post, FlowPosterior):
        return dataclasses.replace(post, base=scale_covariance(post.base, lam))
    raise TypeError(f"cannot scale {type(post).__name__}")


# ---------------------------------------------------------------------------
# SWAG


def fit_swag(ckpt: Checkpoint, dataset: Dataset, lr: float, n_epochs: int = 20,
             rank: int = 20, seed: int = 0) -> SwagPosterior:
    """Run constant-lr SGD from the MAP estimate and form the iterate mean,
    the clamped diagonal second-moment covariance, and rank-R deviations
    about the mean of the final R iterates."""
    if not (n_epochs >= rank >= 2):
        raise ValueError("need n_epochs >= rank >= 2")
    iterates = constant_sgd_iterates(
        ckpt.spec, dataset, ckpt.params, lr, n_epochs,
        weight_decay=ckpt.config.weight_decay, batch_size=ckpt.config.batch_size,
        seed=seed)
    return swag_from_iterates(iterates, rank, ckpt.params.partition)


def swag_from_iterates(iterates: np.ndarray, rank: int,
                       partition: tuple[int, int]) -> SwagPosterior:
    """The moment formulas on their own, for oracle tests on hand-fed iterates."""
    m = iterates.shape[0]
    if not (m >= rank >= 2):
        raise ValueError("need len(iterates) >= rank >= 2")
    theta_swa = iterates.mean(axis=0)
    sigma_diag = np.maximum((iterates ** 2).mean(axis=0) - theta_swa ** 2, 0.0)
    tail = iterates[-rank:]
    deviations = (tail - tail.mean(axis=0)).T
    return SwagPosterior(theta_swa=ParamVector(theta_swa, partition),
                         sigma_diag=sigma_diag, deviations=deviations)


def swa_point(post: SwagPosterior) -> PointMassPosterior:
    return PointMassPosterior(center=post.theta_swa.copy())


# ---------------------------------------------------------------------------
# Last-layer Laplace


def _output_hessians(spec: NetworkSpec, raw_out: np.ndarray, y) -> np.ndarray:
    """Per-point Hessians of the NLL w.r.t. the raw network outputs, (N, C, C)."""
    if spec.head == "classifier":
        p = softmax(raw_out)
        return np.einsum("ni,ij->nij", p, np.eye(raw_out.shape[1])) \
            - np.einsum("ni,nj->nij", p, p)
    y = np.asarray(y, dtype=np.float64)
    mean, var = hetero_moments(raw_out)
    err = y - mean
    v = raw_out[:, 1]
    sp = sigmoid(v)
    spp = sp * (1.0 - sp)
    lam = np.empty((raw_out.shape[0], 2, 2))
    lam[:, 0, 0] = 1.0 / var
    lam[:, 0, 1] = lam[:, 1, 0] = err * sp / var ** 2
    lam[:, 1, 1] = (-0.5 / var ** 2 + err ** 2 / var ** 3) * sp ** 2 \
        + (0.5 / var - err ** 2 / (2.0 * var ** 2)) * spp
    return lam


def _kron_permutation(n_out: int, n_feat: int) -> np.ndarray:
    """Map our last-layer layout [vec W row-major, b] onto the (out, feat+bias)
    Kronecker ordering."""
    perm = np.empty(n_out * (n_feat + 1), dtype=np.int64)
    for a in range(n_out):
        for i in range(n_feat):
            perm[a * n_feat + i] = a * (n_feat + 1) + i
        perm[n_out * n_feat + a] = a * (n_feat + 1) + n_feat
    return perm


def ggn_last_layer(spec: NetworkSpec, theta: ParamVector, x, y) -> np.ndarray:
    """Sum over datapoints of the exact output Hessian pulled back through the
    final affine layer. Exact for the last layer since outputs are affine in
    its parameters."""
    phi = last_layer_features(spec, theta, x)
    phi_t = np.column_stack([phi, np.ones(len(phi))])
    raw_out = phi_t[:, :-1] @ _last_layer_weight(spec, theta).T + _last_layer_bias(spec, theta)
    lam = _output_hessians(spec, raw_out, y)
    h_kron = np.einsum("nab,ni,nj->aibj", lam, phi_t, phi_t, optimize=True)
    c, f1 = raw_out.shape[1], phi_t.shape[1]
    h_kron = h_kron.reshape(c * f1, c * f1)
    perm = _kron_permutation(c, f1 - 1)
    return h_kron[np.ix_(perm, perm)]


def _last_layer_weight(spec: NetworkSpec, theta: ParamVector) -> np.ndarray:
    start, stop = theta.partition
    c = spec.n_outputs
    f = (stop - start - c) // c
    return theta.values[start:start + c * f].reshape(c, f)


def _last_layer_bias(spec: NetworkSpec, theta: ParamVector) -> np.ndarray:
    start, stop = theta.partition
    c = spec.n_outputs
    return theta.values[stop - c:stop]


def fit_llla(ckpt: Checkpoint, dataset: Dataset, prior_precision: float,
             mode: str = "full", ggn: np.ndarray | None = None) -> LllaPosterior:
    """Laplace posterior over last-layer parameters from the training split.

    Pass a precomputed `ggn` to amortize the curvature across a prior grid.
    """
    if prior_precision <= 0:
        raise ValueError("prior precision must be positive")
    if ggn is None:
        x, y = dataset.split("train")
        ggn = ggn_last_layer(ckpt.spec, ckpt.params, x, y)
    if mode == "diagonal" and ggn.ndim == 2:
        ggn = np.diag(ggn).copy()
    return LllaPosterior(theta_map=ckpt.params.copy(), ggn=ggn,
                         prior_precision=float(prior_precision), mode=mode)


def mc_elpd(spec: NetworkSpec, post, x, y, n_samples: int, rng) -> float:
    """Validation-style ELPD of a single posterior's MC predictive."""
    thetas = np.stack([post.sample(rng) for _ in range(n_samples)])
    pred = metrics.predictive(spec, thetas, x, y)
    return metrics.elpd(pred)


def tune_prior_precision(ckpt: Checkpoint, dataset: Dataset, grid=None,
                         n_samples: int = 100, seed: int = 0, mode: str = "full"):
    """Grid search the Laplace prior precision by validation ELPD.

    Returns (tau_star, posterior, table). Candidates share the curvature sum
    and a common random-number stream so the comparison is coupled; ties break
    toward the larger precision.
    """
    grid = DEFAULT_TAU_GRID if grid is None else tuple(grid)
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    x_tr, y_tr = dataset.split("train")
    x_val, y_val = dataset.split("val")
    ggn = ggn_last_layer(ckpt.spec, ckpt.params, x_tr, y_tr)
    table = []
    best = None
    for tau in grid:
        try:
            post = fit_llla(ckpt, dataset, tau, mode=mode, ggn=ggn)
        except np.linalg.LinAlgError:
            table.append({"tau": float(tau), "val_elpd": None, "status": "failed"})
            continue
        val = mc_elpd(ckpt.spec, post, x_val, y_val, n_samples,
                      substream(seed, "llla-tune"))
        table.append({"tau": float(tau), "val_elpd": val, "status": "ok"})
        if best is None or val > best[1] or (val == best[1] and tau > best[0]):
            best = (float(tau), val, post)
    if best is None:
        raise np.linalg.LinAlgError("no prior precision in the grid gave a positive-definite Hessian")
    return best[0], best[2], table


@dataclass
class SwagTuning:
    lr_swag: float
    lr_swa: float
    table: list
    posterior: SwagPosterior        # fitted at lr_swag
    swa: PointMassPosterior         # SWA point from the fit at lr_swa


def tune_swag_lr(ckpt: Checkpoint, dataset: Dataset, grid=None, n_epochs: int = 20,
                 rank: int = 20, n_samples: int = 100, seed: int = 0) -> SwagTuning:
    """Grid search the constant learning rate by validation ELPD.

    The argmax rate for the SWAG predictive and for the SWA point estimate
    may differ; both are kept, along with the posteriors fitted at them.
    Diverging rates are recorded as failed and excluded; ties break toward
    the smaller rate.
    """
    grid = DEFAULT_SWAG_LR_GRID if grid is None else tuple(grid)
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    x_val, y_val = dataset.split("val")
    table = []
    best_swag = best_swa = None
    for i, lr in enumerate(grid):
        try:
            post = fit_swag(ckpt, dataset, lr, n_epochs=n_epochs, rank=rank,
                            seed=int(substream(seed, "swag-sgd", i).integers(2 ** 31)))
        except TrainingDivergedError:
            table.append({"lr": float(lr), "val_elpd_swag": None, "val_elpd_swa": None,
                          "status": "failed"})
            continue
        val_swag = mc_elpd(ckpt.spec, post, x_val, y_val, n_samples,
                           substream(seed, "swag-tune"))
        val_swa = point_elpd(ckpt.spec, post.theta_swa, x_val, y_val)
        table.append({"lr": float(lr), "val_elpd_swag": val_swag,
                      "val_elpd_swa": val_swa, "status": "ok"})
        if best_swag is None or val_swag > best_swag[1]:
            best_swag = (float(lr), val_swag, post)
        if best_swa is None or val_swa > best_swa[1]:
            best_swa = (float(lr), val_swa, post)
    if best_swag is None:
        raise TrainingDivergedError("every learning rate in the grid diverged")
    return SwagTuning(lr_swag=best_swag[0], lr_swa=best_swa[0], table=table,
                      posterior=best_swag[2], swa=swa_point(best_swa[2]))


def probit_predictive(ckpt_spec: NetworkSpec, post: LllaPosterior, x) -> np.ndarray:
    """Deterministic class probabilities via the mean-field probit-softmax
    push-forward of the last-layer Gaussian: softmax(mean / sqrt(1 + pi/8 var))."""
    if ckpt_spec.head != "classifier":
        raise ValueError("probit predictive requires a classifier head")
    theta = post.theta_map
    f_mean = forward(ckpt_spec, theta, x)
    phi = last_layer_features(ckpt_spec, theta, x)
    phi_t = np.column_stack([phi, np.ones(len(phi))])
    c = ckpt_spec.n_classes
    f = phi.shape[1]
    var = np.empty_like(f_mean)
    if post.mode == "full":
        cov = post.covariance()
        for cls in range(c):
            idx = np.concatenate([np.arange(cls * f, (cls + 1) * f), [c * f + cls]])
            block = cov[np.ix_(idx, idx)]
            var[:, cls] = np.einsum("ni,ij,nj->n", phi_t, block, phi_t)
    else:
        cov_diag = post.scale_lambda / (post.ggn + post.prior_precision)
        for cls in range(c):
            idx = np.concatenate([np.arange(cls * f, (cls + 1) * f), [c * f + cls]])
            var[:, cls] = phi_t ** 2 @ cov_diag[idx]
    return softmax(f_mean / np.sqrt(1.0 + (np.pi / 8.0) * var))


# ---------------------------------------------------------------------------
# Flow refinement


def _last_layer_log_joint(spec: NetworkSpec, phi: np.ndarray, y, prior_precision: float,
                          scale: float):
    """Log joint restricted to last-layer parameters, as a batch callable.

    Returns fn(theta_l (S, d)) -> (values (S,), grads (S, d)) computing
    scale * sum_batch log p(y|x, theta) - tau/2 ||theta_l||^2 and its gradient.
    """
    phi_t = np.column_stack([phi, np.ones(len(phi))])
    n_feat = phi.shape[1]

    if spec.head == "classifier":
        y_idx = np.asarray(y)
        c = spec.n_classes

        def fn(theta_l):
            s = theta_l.shape[0]
            w = theta_l[:, :c * n_feat].reshape(s, c, n_feat)
            b = theta_l[:, c * n_feat:]
            logits = np.einsum("bf,scf->sbc", phi, w) + b[:, None, :]
            zmax = logits.max(axis=2, keepdims=True)
            lse = zmax[:, :, 0] + np.log(np.sum(np.exp(logits - zmax), axis=2))
            picked = logits[:, np.arange(len(y_idx)), y_idx]
            loglik = np.sum(picked - lse, axis=1)
            p = np.exp(logits - lse[:, :, None])
            dlogits = -p
            dlogits[:, np.arange(len(y_idx)), y_idx] += 1.0
            gw = np.einsum("sbc,bf->scf", dlogits, phi)
            gb = dlogits.sum(axis=1)
            grad = np.concatenate([gw.reshape(s, -1), gb], axis=1)
            vals = scale * loglik - 0.5 * prior_precision * np.sum(theta_l ** 2, axis=1)
            grads = scale * grad - prior_precision * theta_l
            return vals, grads
    else:
        y_arr = np.asarray(y, dtype=np.float64)

        def fn(theta_l):
            s = theta_l.shape[0]
            w = theta_l[:, :2 * n_feat].reshape(s, 2, n_feat)
            b = theta_l[:, 2 * n_feat:]
            out = np.einsum("bf,scf->sbc", phi, w) + b[:, None, :]
            mean = out[:, :, 0]
            v = out[:, :, 1]
            var = softplus(v) + VAR_FLOOR
            err = y_arr[None, :] - mean
            loglik = np.sum(gaussian_log_pdf(y_arr[None, :], mean, var), axis=1)
            dmean = err / var
            dv = (err ** 2 / (2.0 * var ** 2) - 0.5 / var) * sigmoid(v)
            dout = np.stack([dmean, dv], axis=2)
            gw = np.einsum("sbc,bf->scf", dout, phi)
            gb = dout.sum(axis=1)
            grad = np.concatenate([gw.reshape(s, -1), gb], axis=1)
            vals = scale * loglik - 0.5 * prior_precision * np.sum(theta_l ** 2, axis=1)
            grads = scale * grad - prior_precision * theta_l
            return vals, grads
    return fn


def flow_elbo(base: LllaPosterior, flow_chain, log_joint, n_samples: int, rng) -> float:
    """Monte Carlo ELBO estimate: E[log joint + log|det J|] + base entropy."""
    z = rng.standard_normal((n_samples, base.last_layer_dim))
    theta0 = base.last_layer_mean + np.sqrt(base.scale_lambda) * (
        solve_triangular(base._chol, z.T, lower=True, trans=1).T
        if base.mode == "full" else z / base._chol)
    theta_t, ld = fl.flow_forward(flow_chain, theta0)
    vals, _ = log_joint(theta_t)
    return float(np.mean(vals + ld) + base.entropy())


def _flow_val_elpd(spec: NetworkSpec, base: LllaPosterior, flow_chain, phi_val, y_val,
                   n_samples: int, rng) -> float:
    theta_l = base.sample_last_layer(rng, n_samples)
    theta_l, _ = fl.flow_forward(flow_chain, theta_l)
    return _last_layer_elpd(spec, theta_l, phi_val, y_val)


def _last_layer_elpd(spec: NetworkSpec, theta_l: np.ndarray, phi, y) -> float:
    s = theta_l.shape[0]
    n_feat = phi.shape[1]
    c = spec.n_outputs
    w = theta_l[:, :c * n_feat].reshape(s, c, n_feat)
    b = theta_l[:, c * n_feat:]
    out = np.einsum("bf,scf->sbc", phi, w) + b[:, None, :]
    if spec.head == "classifier":
        zmax = out.max(axis=2, keepdims=True)
        lse = zmax[:, :, 0] + np.log(np.sum(np.exp(out - zmax), axis=2))
        picked = out[:, np.arange(len(y)), np.asarray(y)]
        logp = picked - lse                       # (S, N)
    else:
        mean = out[:, :, 0]
        var = softplus(out[:, :, 1]) + VAR_FLOOR
        logp = gaussian_log_pdf(np.asarray(y, dtype=np.float64)[None, :], mean, var)
    m = logp.max(axis=0)
    dens = np.log(np.mean(np.exp(logp - m), axis=0)) + m
    return float(np.mean(np.maximum(dens, np.log(1e-300))))


def fit_flow(base: LllaPosterior, dataset: Dataset | None, spec: NetworkSpec,
             n_flows: int, epochs: int = 20, lr: float = 1e-3, n_mc: int = 8,
             batch_size: int = 64, seed: int = 0, val_samples: int = 100,
             init_flows=None, log_joint=None):
    """Refine a Laplace base by maximizing the reverse-KL ELBO over radial
    flow parameters (Adam, cosine-annealed lr, n_mc base samples per step).

    Tracks a per-epoch ELBO trace with its running best, evaluates validation
    ELPD each epoch, and returns (FlowPosterior at the best validation state,
    trace). `log_joint` overrides the data-driven target with a callable
    theta_l -> (values, grads), in which case each epoch is one full step.
    """
    if n_flows < 1:
        raise ValueError("need at least one flow")
    dim = base.last_layer_dim
    if init_flows is None:
        marg_std = 1.0 / np.sqrt(np.diag(base.ggn) + base.prior_precision) \
            if base.mode == "full" else 1.0 / np.sqrt(base.ggn + base.prior_precision)
        jitter = 0.1 * float(np.mean(marg_std)) * np.sqrt(base.scale_lambda)
        flow_chain = fl.identity_flows(dim, n_flows, center=base.last_layer_mean,
                                       rng=substream(seed, "flow-init"), jitter=jitter)
    else:
        flow_chain = tuple(init_flows)

    have_data = dataset is not None and log_joint is None
    if have_data:
        x_tr, y_tr = dataset.split("train")
        x_val, y_val = dataset.split("val")
        theta_map = base.theta_map
        phi_tr = last_layer_features(spec, theta_map, x_tr)
        phi_val = last_layer_features(spec, theta_map, x_val)
        n_total = len(x_tr)
    elif log_joint is None:
        raise ValueError("need a dataset or an explicit log_joint")

    params = fl.pack_params(flow_chain)
    adam = fl.Adam(len(params), lr=lr)
    rng_batch = substream(seed, "flow-batches")
    rng_mc = substream(seed, "flow-mc")
    trace = []
    best_elbo = -np.inf
    best_val = -np.inf
    best_params = params.copy()
    steps_per_epoch = int(np.ceil(n_total / batch_size)) if have_data else 1
    total_steps = max(1, epochs * steps_per_epoch)
    step = 0

    for epoch in range(epochs):
        if have_data:
            perm = rng_batch.permutation(n_total)
            batches = [perm[i:i + batch_size] for i in range(0, n_total, batch_size)]
        else:
            batches = [None]
        epoch_elbos = []
        for idx in batches:
            if have_data:
                joint_fn = _last_layer_log_joint(spec, phi_tr[idx], y_tr[idx],
                                                 base.prior_precision,
                                                 scale=n_total / len(idx))
            else:
                joint_fn = log_joint
            lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            z = rng_mc.standard_normal((n_mc, dim))
            theta0 = base.last_layer_mean + np.sqrt(base.scale_lambda) * (
                solve_triangular(base._chol, z.T, lower=True, trans=1).T
                if base.mode == "full" else z / base._chol)
            theta_t, ld, tape = fl.forward_with_tape(flow_chain, theta0)
            vals, grads = joint_fn(theta_t)
            elbo_est = float(np.mean(vals + ld) + base.entropy())
            if not np.isfinite(elbo_est):
                raise TrainingDivergedError(f"non-finite ELBO at flow-training step {step}")
            _, param_grads = fl.backward(flow_chain, tape, grads)
            g = fl.pack_grads(param_grads) / n_mc
            params = adam.step(params, g, lr=lr_t)
            flow_chain = fl.unpack_params(params, dim, n_flows)
            epoch_elbos.append(elbo_est)
        epoch_elbo = float(np.mean(epoch_elbos))
        best_elbo = max(best_elbo, epoch_elbo)
        row = {"epoch": epoch, "elbo": epoch_elbo, "best_elbo": best_elbo}
        if have_data:
            val = _flow_val_elpd(spec, base, flow_chain, phi_val, y_val, val_samples,
                                 substream(seed, "flow-val"))
            row["val_elpd"] = val
            if val > best_val:
                best_val = val
                best_params = params.copy()
        else:
            best_params = params.copy()
        trace.append(row)

    final_chain = fl.unpack_params(best_params, dim, n_flows) if epochs > 0 else flow_chain
    return FlowPosterior(base=base, flows=final_chain), trace


def tune_flow_prior(ckpt: Checkpoint, dataset: Dataset, n_flows: int, grid=None,
                    epochs: int = 20, lr: float = 1e-3, n_mc: int = 8,
                    n_samples: int = 100, seed: int = 0, mode: str = "full"):
    """Tune the flow base's prior precision over a linear grid by validation
    ELPD of the refined posterior. Returns (tau_star, FlowPosterior, table)."""
    grid = FLOW_PRIOR_GRID if grid is None else tuple(grid)
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    x_tr, y_tr = dataset.split("train")
    x_val, y_val = dataset.split("val")
    ggn = ggn_last_layer(ckpt.spec, ckpt.params, x_tr, y_tr)
    table = []
    best = None
    for tau in grid:
        try:
            base = fit_llla(ckpt, dataset, tau, mode=mode, ggn=ggn)
        except np.linalg.LinAlgError:
            table.append({"tau": float(tau), "val_elpd": None, "status": "failed"})
            continue
        post, _ = fit_flow(base, dataset, ckpt.spec, n_flows, epochs=epochs, lr=lr,
                           n_mc=n_mc, batch_size=ckpt.config.batch_size, seed=seed)
        val = mc_elpd(ckpt.spec, post, x_val, y_val, n_samples,
                      substream(seed, "flow-tune"))
        table.append({"tau": float(tau), "val_elpd": val, "status": "ok"})
        if best is None or val > best[1] or (val == best[1] and tau > best[0]):
            best = (float(tau), val, post)
    if best is None:
        raise np.linalg.LinAlgError("no prior precision in the flow grid was usable")
    return best[0], best[2], table
