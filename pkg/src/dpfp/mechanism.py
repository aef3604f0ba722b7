"""L2 clipping plus spherical Gaussian noise, the privatization primitive."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# a clipped vector's recomputed norm may exceed the threshold by a few ulps;
# treating that sliver as inside the ball makes clipping exactly idempotent
CLIP_SLACK = 1.0 + 4 * np.finfo(np.float64).eps


def derive_seed(base: int, *keys: int) -> int:
    """Derive an independent 64-bit seed for the stream addressed by ``keys``."""
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    # Philox is counter-based: streams for distinct keys never overlap
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


class DrawCounter:
    """Counts Gaussian coordinates drawn, for noise-dimension bookkeeping."""

    def __init__(self):
        self.count = 0
        self.calls = 0

    def add(self, n: int):
        self.count += n
        self.calls += 1


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    dimension: int
    seed: int

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.dimension < 1:
            raise ValueError(f"dimension must be positive, got {self.dimension}")


def clip_l2(v, clip: float) -> np.ndarray:
    """Scale ``v`` by ``min(1, clip / ||v||)``.

    Vectors already inside the ball (including the zero vector) come back
    unchanged, bit for bit.
    """
    if not clip > 0:
        raise ValueError(f"clip must be positive, got {clip}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm <= clip * CLIP_SLACK:
        return v.copy()
    return v * (clip / norm)


def sample_gaussian(spec: NoiseSpec, counter: DrawCounter | None = None) -> np.ndarray:
    if spec.sigma == 0:
        return np.zeros(spec.dimension)
    if counter is not None:
        counter.add(spec.dimension)
    rng = make_rng(spec.seed)
    return spec.sigma * rng.standard_normal(spec.dimension)


def privatize(v, clip: float, spec: NoiseSpec, counter: DrawCounter | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.dimension,):
        raise ValueError(f"vector of shape {v.shape} does not match noise dimension {spec.dimension}")
    clipped = clip_l2(v, clip)
    if spec.sigma == 0:
        return clipped
    return clipped + sample_gaussian(spec, counter)
