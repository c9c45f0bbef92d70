"""Shared numeric helpers and deterministic RNG stream derivation."""
from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np

LOG_DENSITY_FLOOR = np.log(1e-300)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out = np.where(pos, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return out


def inverse_softplus(y):
    """x such that softplus(x) = y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def gaussian_log_pdf(y, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)


def stream_key(*path) -> tuple[int, ...]:
    """Map a mixed int/str path to a spawn-key tuple (strings via crc32)."""
    key = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            if part < 0:
                raise ValueError(f"stream path ints must be nonnegative, got {part}")
            key.append(int(part))
        elif isinstance(part, str):
            key.append(zlib.crc32(part.encode()))
        else:
            raise TypeError(f"stream path parts must be int or str, got {type(part)}")
    return tuple(key)


def as_seed_sequence(rng) -> np.random.SeedSequence:
    """Normalize an int / SeedSequence / Generator into a SeedSequence."""
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, (int, np.integer)):
        return np.random.SeedSequence(int(rng))
    if isinstance(rng, np.random.Generator):
        return rng.bit_generator.seed_seq
    raise TypeError(f"expected int, SeedSequence or Generator, got {type(rng)}")


def substream(rng, *path) -> np.random.Generator:
    """Named independent RNG stream derived from a master seed.

    The same (master, path) always yields the same stream, regardless of
    what other streams were derived before, so parallel callers can own
    disjoint streams without coordination.
    """
    ss = as_seed_sequence(rng)
    child = np.random.SeedSequence(entropy=ss.entropy, spawn_key=tuple(ss.spawn_key) + stream_key(*path))
    return np.random.default_rng(child)


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, repr floats, compact)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(*parts) -> str:
    """sha256 hex digest over byte/str parts, for cache keys."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, str):
            p = p.encode()
        h.update(p)
        h.update(b"\x00")
    return h.hexdigest()
