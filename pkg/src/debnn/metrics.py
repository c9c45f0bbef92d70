"""Predictive distributions from parameter samples, and evaluation metrics:
ELPD, accuracy / negative MAE, binned calibration error, OOD scores, AUROC."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .nn import VAR_FLOOR, NetworkSpec, forward_many
from .util import LOG_DENSITY_FLOOR, gaussian_log_pdf, softmax, softplus

DEFAULT_ECE_BINS = 15


@dataclass
class PredictiveResult:
    """Per-point predictive distribution.

    Classification: averaged class probabilities (N, C). Regression: a
    Gaussian mixture per point with component (means, variances) of shape
    (N, S) and shared weights (S,). log_density holds log p(y_true) per point
    when targets were supplied, floored to stay finite.
    """
    task: str
    probs: np.ndarray | None = None
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None
    log_density: np.ndarray | None = None

    def __post_init__(self):
        if self.task == "classification":
            sums = self.probs.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-9) or np.any(self.probs < 0):
                raise ValueError("class probabilities must be nonnegative and sum to 1")
        elif self.task == "regression":
            if abs(float(self.weights.sum()) - 1.0) > 1e-9:
                raise ValueError("mixture weights must sum to 1")
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if self.log_density is not None and not np.all(np.isfinite(self.log_density)):
            raise ValueError("log densities must be finite")

    @property
    def n_points(self) -> int:
        return len(self.probs) if self.task == "classification" else len(self.means)

    def mixture_mean(self) -> np.ndarray:
        return self.means @ self.weights

    def mixture_variance(self) -> np.ndarray:
        """Law of total variance: mean component variance plus mean scatter."""
        mix_mean = self.mixture_mean()
        return self.variances @ self.weights + (self.means ** 2) @ self.weights - mix_mean ** 2


def _floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, 1e-300))


def predictive(spec: NetworkSpec, thetas: np.ndarray, x, y=None,
               weights: np.ndarray | None = None) -> PredictiveResult:
    """Monte Carlo predictive from parameter samples (rows of `thetas`).

    Classification averages the per-sample softmax probabilities; regression
    keeps the per-sample Gaussians as a mixture. With targets, also computes
    the per-point log predictive density.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    s = thetas.shape[0]
    if s == 0:
        raise ValueError("need at least one parameter sample")
    w = np.full(s, 1.0 / s) if weights is None else np.asarray(weights, dtype=np.float64)
    outs = forward_many(spec, thetas, x)
    if spec.head == "classifier":
        probs = np.einsum("s,snc->nc", w, softmax(outs))
        logdens = None
        if y is not None:
            logdens = _floored_log(probs[np.arange(probs.shape[0]), np.asarray(y)])
        return PredictiveResult(task="classification", probs=probs, log_density=logdens)
    means = outs[:, :, 0].T
    variances = (softplus(outs[:, :, 1]) + VAR_FLOOR).T
    logdens = None
    if y is not None:
        comp = gaussian_log_pdf(np.asarray(y, dtype=np.float64)[:, None], means, variances)
        m = comp.max(axis=1)
        dens = np.exp(m) * (np.exp(comp - m[:, None]) @ w)
        logdens = np.maximum(_floored_log(dens), LOG_DENSITY_FLOOR)
    return PredictiveResult(task="regression", means=means, variances=variances,
                            weights=w, log_density=logdens)


def predictive_members(spec: NetworkSpec, member_thetas: np.ndarray, pi: np.ndarray,
                       x, y=None) -> PredictiveResult:
    """Exact mixture predictive over point-mass members with weights pi
    (the zero-variance limit of the MC path)."""
    return predictive(spec, member_thetas, x, y, weights=np.asarray(pi, dtype=np.float64))


def elpd(pred: PredictiveResult) -> float:
    """Mean per-point log predictive density of the true targets."""
    if pred.log_density is None:
        raise ValueError("predictive was built without targets")
    return float(pred.log_density.mean())


def accuracy(pred: PredictiveResult, targets) -> float:
    if pred.task != "classification":
        raise ValueError("accuracy needs a classification predictive")
    picked = np.argmax(pred.probs, axis=1)      # ties resolve to the lowest index
    return float(np.mean(picked == np.asarray(targets)))


def n_mae(pred: PredictiveResult, targets) -> float:
    """Negative mean absolute error of the mixture mean (variance-free)."""
    if pred.task != "regression":
        raise ValueError("n_mae needs a regression predictive")
    return float(-np.mean(np.abs(pred.mixture_mean() - np.asarray(targets, dtype=np.float64))))


def ece(pred: PredictiveResult, targets, n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error with equal-width, left-open/right-closed
    confidence bins on (0, 1]; empty bins contribute nothing."""
    if pred.task != "classification":
        raise ValueError("calibration error needs a classification predictive")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    conf = pred.probs.max(axis=1)
    correct = (np.argmax(pred.probs, axis=1) == np.asarray(targets)).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    total = 0.0
    n = len(conf)
    for b in range(n_bins):
        mask = (conf > edges[b]) & (conf <= edges[b + 1])
        if mask.any():
            total += (mask.sum() / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def ood_score(pred: PredictiveResult) -> np.ndarray:
    """Per-point OOD score, higher = more out-of-distribution.

    Classification: predictive entropy of the averaged class distribution.
    Regression: log of the mixture's total variance.
    """
    if pred.task == "classification":
        p = pred.probs
        plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
        return -plogp.sum(axis=1)
    return np.log(pred.mixture_variance())


def auroc(id_scores, ood_scores) -> float:
    """Probability a random OOD score exceeds a random ID score, ties counted
    one half (exact rank-statistic computation)."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if len(id_scores) == 0 or len(ood_scores) == 0:
        raise ValueError("need nonempty score lists")
    n, m = len(id_scores), len(ood_scores)
    ranks = rankdata(np.concatenate([id_scores, ood_scores]))
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


@dataclass
class MetricsReport:
    """Flat evaluation record: ELPD plus task metrics and run metadata."""
    elpd: float
    accuracy: float | None = None
    n_mae: float | None = None
    ece: float | None = None
    auroc: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, lo, hi in (("accuracy", 0, 1), ("ece", 0, 1), ("auroc", 0, 1)):
            v = getattr(self, name)
            if v is not None and not (lo <= v <= hi):
                raise ValueError(f"{name} must lie in [{lo}, {hi}], got {v}")

    def to_record(self) -> dict:
        rec = {"elpd": self.elpd, "accuracy": self.accuracy, "n_mae": self.n_mae,
               "ece": self.ece, "auroc": self.auroc}
        rec.update(self.metadata)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MetricsReport":
        base = {k: rec.get(k) for k in ("elpd", "accuracy", "n_mae", "ece", "auroc")}
        meta = {k: v for k, v in rec.items() if k not in base}
        return cls(metadata=meta, **base)


def evaluate_predictive(pred: PredictiveResult, targets, ece_bins: int = DEFAULT_ECE_BINS,
                        metadata: dict | None = None) -> MetricsReport:
    """Bundle the standard metrics for one predictive over a labeled set."""
    meta = dict(metadata or {})
    meta.setdefault("ece_bins", ece_bins)
    meta.setdefault("ood_score", "entropy" if pred.task == "classification" else "log_total_variance")
    if pred.task == "classification":
        return MetricsReport(elpd=elpd(pred), accuracy=accuracy(pred, targets),
                             ece=ece(pred, targets, ece_bins), metadata=meta)
    return MetricsReport(elpd=elpd(pred), n_mae=n_mae(pred, targets), metadata=meta)
