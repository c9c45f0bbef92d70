"""Mixtures of posteriors: construction, stratified and iid predictive
sampling, random ensemble membership draws, and stacking weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import metrics
from .nn import NetworkSpec
from .posteriors import PointMassPosterior
from .util import as_seed_sequence, stream_key, substream


@dataclass(frozen=True)
class PosteriorHandle:
    """A fitted posterior plus its provenance and tuning record."""
    method: str
    member_id: str
    spec: NetworkSpec
    posterior: object
    tuning: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MixturePosterior:
    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if len(self.components) < 1:
            raise ValueError("need at least one component")
        if len(self.weights) != len(self.components):
            raise ValueError("one weight per component")
        if np.any(self.weights < 0) or np.any(self.weights > 1) \
                or abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")
        spec0 = self.components[0].spec
        if any(h.spec != spec0 for h in self.components):
            raise ValueError("all components must share one network spec")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def spec(self) -> NetworkSpec:
        return self.components[0].spec

    def is_point_mass(self) -> bool:
        return all(isinstance(h.posterior, PointMassPosterior) for h in self.components)


@dataclass(frozen=True)
class EnsembleDraw:
    member_ids: tuple
    seed: int
    k: int

    def __post_init__(self):
        if len(set(self.member_ids)) != len(self.member_ids):
            raise ValueError("member ids must be distinct within a draw")


@dataclass
class SampleBatch:
    thetas: np.ndarray          # (S, P)
    component: np.ndarray       # (S,) index into the mixture

    def __post_init__(self):
        if len(self.thetas) != len(self.component):
            raise ValueError("one component index per sample")


def build_mixture(handles, weights=None) -> MixturePosterior:
    """Mixture over posterior handles; uniform weights unless given."""
    handles = tuple(handles)
    if len(handles) == 0:
        raise ValueError("need at least one component")
    if weights is None:
        weights = np.full(len(handles), 1.0 / len(handles))
    return MixturePosterior(components=handles, weights=weights)


def stratified_allocation(weights: np.ndarray, n_samples: int) -> np.ndarray:
    """Per-component sample counts: floor(S * pi_k) plus the remainder spread
    by largest fractional part, ties to the lower component index."""
    exact = n_samples * np.asarray(weights, dtype=np.float64)
    counts = np.floor(exact).astype(np.int64)
    remainder = n_samples - int(counts.sum())
    if remainder > 0:
        frac = exact - counts
        order = np.lexsort((np.arange(len(frac)), -frac))
        counts[order[:remainder]] += 1
    return counts


def _component_rng(master, k: int, j: int) -> np.random.Generator:
    """Stream for sample j of component k, independent of everything else."""
    ss = as_seed_sequence(master)
    child = np.random.SeedSequence(entropy=ss.entropy,
                                   spawn_key=tuple(ss.spawn_key) + stream_key("comp", k, j))
    return np.random.default_rng(child)


def stratified_sample(mix: MixturePosterior, n_samples: int, rng) -> SampleBatch:
    """Allocate samples across components in proportion to the weights, then
    sample each component from its own named substream. Point-mass components
    contribute repeated centers."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    counts = stratified_allocation(mix.weights, n_samples)
    thetas, comp = [], []
    for k, n_k in enumerate(counts):
        post = mix.components[k].posterior
        for j in range(n_k):
            thetas.append(post.sample(_component_rng(rng, k, j)))
            comp.append(k)
    return SampleBatch(thetas=np.stack(thetas), component=np.asarray(comp, dtype=np.int64))


def iid_sample(mix: MixturePosterior, n_samples: int, rng) -> SampleBatch:
    """Component index drawn Categorical(pi) per sample; sample values come
    from the same per-(component, draw) substreams as stratified sampling, so
    the two samplers differ only in allocation."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    choice_rng = substream(rng, "comp-choice")
    ks = choice_rng.choice(mix.k, size=n_samples, p=mix.weights)
    counters = np.zeros(mix.k, dtype=np.int64)
    thetas, comp = [], []
    for k in ks:
        j = counters[k]
        counters[k] += 1
        thetas.append(mix.components[k].posterior.sample(_component_rng(rng, int(k), int(j))))
        comp.append(int(k))
    return SampleBatch(thetas=np.stack(thetas), component=np.asarray(comp, dtype=np.int64))


def draw_ensembles(pool_size: int, k: int, n_draws: int, seed: int) -> list:
    """n_draws uniform K-subsets of the pool, each drawn without replacement."""
    if k > pool_size:
        raise ValueError(f"cannot draw {k} members from a pool of {pool_size}")
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n_draws):
        ids = rng.choice(pool_size, size=k, replace=False)
        draws.append(EnsembleDraw(member_ids=tuple(int(i) for i in ids), seed=seed, k=k))
    return draws


def mixture_predictive(mix: MixturePosterior, x, y=None, n_samples: int = 200,
                       rng=0, stratified: bool = True,
                       force_mc: bool = False) -> metrics.PredictiveResult:
    """Predictive distribution of a mixture posterior.

    Pure point-mass mixtures use the exact weighted member average (the
    zero-variance limit of the MC estimate); anything else is estimated with
    n_samples parameter draws.
    """
    if mix.is_point_mass() and not force_mc:
        members = np.stack([h.posterior.center_values for h in mix.components])
        return metrics.predictive_members(mix.spec, members, mix.weights, x, y)
    sampler = stratified_sample if stratified else iid_sample
    batch = sampler(mix, n_samples, rng)
    return metrics.predictive(mix.spec, batch.thetas, x, y)


def stack_weights(member_log_densities: np.ndarray, max_iters: int = 10_000,
                  tol: float = 1e-9):
    """Simplex weights maximizing the mean validation log score
    (1/N) sum_n log sum_k pi_k exp(l_nk).

    Multiplicative updates pi <- pi * grad (self-normalizing, monotone
    ascent) from a uniform start; stops when the objective gain drops below
    tol. Returns (pi, objective trace).
    """
    ell = np.asarray(member_log_densities, dtype=np.float64)
    if not np.all(np.isfinite(ell)):
        raise ValueError("member log densities must be finite")
    n, k = ell.shape
    if k < 2:
        raise ValueError("need at least two members to stack")
    pi = np.full(k, 1.0 / k)
    trace = []
    prev = -np.inf
    for _ in range(max_iters):
        log_mix = logsumexp(ell + np.log(np.maximum(pi, 1e-300)), axis=1)
        obj = float(log_mix.mean())
        trace.append(obj)
        resp = np.exp(ell - log_mix[:, None])       # d obj / d pi_k, up to 1/N
        grad = resp.mean(axis=0)
        pi = pi * grad
        pi = pi / pi.sum()                          # guard tiny drift
        if obj - prev < tol and np.isfinite(prev):
            break
        prev = obj
    return pi, trace


def normalized_entropy(pi) -> float:
    """H(pi) / log K in [0, 1], with 0 log 0 = 0. Undefined for K = 1."""
    pi = np.asarray(pi, dtype=np.float64)
    if len(pi) < 2:
        raise ValueError("normalized entropy needs at least two weights")
    plogp = np.where(pi > 0, pi * np.log(np.maximum(pi, 1e-300)), 0.0)
    return float(-plogp.sum() / np.log(len(pi)))
