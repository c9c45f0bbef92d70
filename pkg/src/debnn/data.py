"""Synthetic desk-scale datasets with matched OOD partners and deterministic splits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .util import substream

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)  # train / val / test


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray          # (N, d) float64
    targets: np.ndarray         # (N,) int labels or float values
    task: str                   # "classification" | "regression"
    n_classes: int | None
    splits: dict = field(default_factory=dict)  # name -> index array
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        n = len(self.inputs)
        idx = np.concatenate([self.splits[k] for k in ("train", "val", "test")])
        if len(idx) != n or len(np.unique(idx)) != n:
            raise ValueError("splits must be disjoint and cover all indices")
        if self.task == "classification":
            if self.targets.min() < 0 or self.targets.max() >= self.n_classes:
                raise ValueError("class labels out of range")

    def split(self, name: str):
        idx = self.splits[name]
        return self.inputs[idx], self.targets[idx]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class OodPair:
    id_name: str
    kind: str
    inputs: np.ndarray
    generator: dict = field(default_factory=dict)


def _split_indices(n: int, rng: np.random.Generator) -> dict:
    perm = rng.permutation(n)
    n_train = int(SPLIT_FRACTIONS[0] * n)
    n_val = int(SPLIT_FRACTIONS[1] * n)
    return {
        "train": perm[:n_train],
        "val": perm[n_train:n_train + n_val],
        "test": perm[n_train + n_val:],
    }


def _two_moons(n, noise, rng):
    n0 = n - n // 2
    n1 = n // 2
    t0 = rng.uniform(0.0, np.pi, size=n0)
    t1 = rng.uniform(0.0, np.pi, size=n1)
    x0 = np.column_stack([np.cos(t0), np.sin(t0)])
    x1 = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.concatenate([x0, x1])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    x += noise * rng.standard_normal(x.shape)
    return x, y, 2


def _spirals(n, noise, n_classes, rng):
    xs, ys = [], []
    counts = [n // n_classes + (1 if c < n % n_classes else 0) for c in range(n_classes)]
    for c, n_c in enumerate(counts):
        t = rng.uniform(0.0, 1.0, size=n_c)
        r = 0.2 + 1.8 * t
        angle = 2.5 * np.pi * t + 2.0 * np.pi * c / n_classes
        xs.append(np.column_stack([r * np.cos(angle), r * np.sin(angle)]))
        ys.append(np.full(n_c, c, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    x += noise * rng.standard_normal(x.shape)
    return x, y, n_classes


def make_classification(name: str, n: int, noise: float, seed: int, n_classes: int = 3) -> Dataset:
    """Two-moons (C=2) or C-arm spirals with Gaussian noise and a 70/10/20 split."""
    if n < 30:
        raise ValueError("need n >= 30")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    gen_rng = substream(seed, "gen", name)
    if name == "two_moons":
        x, y, c = _two_moons(n, noise, gen_rng)
    elif name == "spirals":
        x, y, c = _spirals(n, noise, n_classes, gen_rng)
    else:
        raise ValueError(f"unknown classification generator {name!r}")
    splits = _split_indices(n, substream(seed, "split", name))
    return Dataset(
        inputs=x.astype(np.float64), targets=y, task="classification", n_classes=c,
        splits=splits, generator={"name": name, "n": n, "noise": noise, "seed": seed},
    )


def default_noise_sd(x):
    """Heteroscedastic noise level for the 1-D regression task."""
    return 0.05 + 0.2 * np.abs(x)


def make_regression(n: int, noise_sd=None, seed: int = 0) -> Dataset:
    """1-D heteroscedastic regression: y = sin(3x) + 0.5x + sd(x) * eps, x ~ U[-2, 2].

    noise_sd overrides the noise-level function (pass lambda x: 0*x to land
    exactly on the noiseless curve).
    """
    if n < 30:
        raise ValueError("need n >= 30")
    sd_fn = default_noise_sd if noise_sd is None else noise_sd
    gen_rng = substream(seed, "gen", "regression")
    x = gen_rng.uniform(-2.0, 2.0, size=n)
    eps = gen_rng.standard_normal(n)
    y = np.sin(3.0 * x) + 0.5 * x + sd_fn(x) * eps
    splits = _split_indices(n, substream(seed, "split", "regression"))
    return Dataset(
        inputs=x[:, None].astype(np.float64), targets=y.astype(np.float64),
        task="regression", n_classes=None, splits=splits,
        generator={"name": "regression", "n": n, "seed": seed},
    )


def make_dataset(cfg: dict) -> Dataset:
    """Build a dataset from a config record ({'kind', 'n', 'noise', 'seed', ...})."""
    kind = cfg["kind"]
    if kind == "regression":
        return make_regression(cfg["n"], seed=cfg.get("seed", 0))
    return make_classification(kind, cfg["n"], cfg.get("noise", 0.1), cfg.get("seed", 0),
                               n_classes=cfg.get("n_classes", 3))


def make_ood(id_dataset: Dataset, kind: str, seed: int) -> OodPair:
    """OOD inputs matched to an ID dataset (size = ID test split).

    Classification: 'shifted_blobs' (clusters placed far outside the ID support)
    or 'scaled' (ID test inputs times 3). Regression: 'out_of_range'
    (x uniform on [-4,-2) union (2,4]).
    """
    rng = substream(seed, "ood", kind)
    m = len(id_dataset.splits["test"])
    if id_dataset.task == "classification":
        if kind == "shifted_blobs":
            center = id_dataset.inputs.mean(axis=0)
            radius = np.max(np.linalg.norm(id_dataset.inputs - center, axis=1))
            blob_sigma = 0.25
            n_blobs = 3
            pts = []
            counts = [m // n_blobs + (1 if b < m % n_blobs else 0) for b in range(n_blobs)]
            for b, n_b in enumerate(counts):
                angle = 2.0 * np.pi * b / n_blobs
                # clip noise to a 3-sigma ball so every point stays > 2 units
                # beyond the farthest ID point in that direction
                offset = radius + 2.0 + 3.0 * blob_sigma + 0.5
                blob_center = center + offset * np.array([np.cos(angle), np.sin(angle)])
                noise = blob_sigma * rng.standard_normal((n_b, 2))
                norms = np.linalg.norm(noise, axis=1, keepdims=True)
                cap = 3.0 * blob_sigma
                noise = np.where(norms > cap, noise * (cap / np.maximum(norms, 1e-12)), noise)
                pts.append(blob_center + noise)
            x = np.concatenate(pts)
        elif kind == "scaled":
            x = 3.0 * id_dataset.split("test")[0]
        else:
            raise ValueError(f"OOD kind {kind!r} incompatible with classification")
    else:
        if kind != "out_of_range":
            raise ValueError(f"OOD kind {kind!r} incompatible with regression")
        u = 4.0 - rng.uniform(0.0, 2.0, size=m)   # (2, 4]
        sign = np.where(rng.uniform(size=m) < 0.5, -1.0, 1.0)
        x = (sign * u)[:, None]
    return OodPair(
        id_name=id_dataset.generator.get("name", "?"), kind=kind,
        inputs=x.astype(np.float64), generator={"kind": kind, "seed": seed},
    )
