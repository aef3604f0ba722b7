"""Poisson subsampling of micro-batches.

Every record enters every micro-batch independently with probability ``p``;
a record may therefore show up in several micro-batches of one step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mechanism import make_rng

# keeps sampler streams disjoint from noise streams derived from the same seed
_SAMPLER_DOMAIN = 0x5A4D


@dataclass(frozen=True)
class SamplerConfig:
    dataset_size: int
    micro_batches: int
    sample_rate: float
    seed: int = 0

    def __post_init__(self):
        if self.dataset_size < 1 or self.micro_batches < 1:
            raise ValueError("dataset_size and micro_batches must be positive")
        if not 0 <= self.sample_rate <= 1:
            raise ValueError(f"sample_rate must lie in [0, 1], got {self.sample_rate}")

    @property
    def expected_step_size(self) -> float:
        return self.sample_rate * self.micro_batches * self.dataset_size


def rate_from_batch(batch_size: float, micro_batches: int, dataset_size: int) -> float:
    """Per-record inclusion probability giving an expected step size of ``batch_size``."""
    if batch_size <= 0 or micro_batches < 1 or dataset_size < 1:
        raise ValueError("batch_size, micro_batches and dataset_size must be positive")
    if batch_size > micro_batches * dataset_size:
        raise ValueError(
            f"batch_size={batch_size} exceeds micro_batches*dataset_size="
            f"{micro_batches * dataset_size}: the sampling rate would exceed 1"
        )
    return batch_size / (micro_batches * dataset_size)


def draw_microbatch(config: SamplerConfig, step: int, micro_index: int) -> np.ndarray:
    """Sorted record indices of micro-batch ``micro_index`` at ``step``; may be empty."""
    if not 0 <= micro_index < config.micro_batches:
        raise IndexError(f"micro_index {micro_index} outside [0, {config.micro_batches})")
    if config.sample_rate == 0:
        return np.empty(0, dtype=np.int64)
    rng = make_rng(config.seed, _SAMPLER_DOMAIN, step, micro_index)
    mask = rng.random(config.dataset_size) < config.sample_rate
    return np.flatnonzero(mask)


def draw_step(config: SamplerConfig, step: int) -> list[np.ndarray]:
    return [draw_microbatch(config, step, m) for m in range(config.micro_batches)]
