"""Desk-scale encoder + linear classifier with hand-written backprop.

The encoder ``h(x) = tanh(W2 tanh(W1 x + b1) + b2)`` produces a ``rep_dim``
representation; the head is a softmax linear layer.  All parameters live in
one flat vector so optimizers and per-example gradients share a layout:
``[W1, b1, W2, b2, W3, b3]`` with ``W`` stored row-major as (out, in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mechanism import CLIP_SLACK, DrawCounter, NoiseSpec, clip_l2, derive_seed, make_rng, privatize, sample_gaussian


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden_dim: int
    rep_dim: int
    num_classes: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "rep_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        n, h, k, c = self.input_dim, self.hidden_dim, self.rep_dim, self.num_classes
        return [(h, n), (h,), (k, h), (k,), (c, k), (c,)]

    @property
    def total_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes)


class ModelParams:
    """Flat parameter vector with named, reshaped views into it."""

    def __init__(self, dims: ModelDims, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (dims.total_params,):
            raise ValueError(f"expected {dims.total_params} parameters, got {theta.shape}")
        self.dims = dims
        self.theta = theta
        views, offset = [], 0
        for shape in dims.shapes:
            size = math.prod(shape)
            views.append(theta[offset : offset + size].reshape(shape))
            offset += size
        self.W1, self.b1, self.W2, self.b2, self.W3, self.b3 = views

    def copy(self) -> ModelParams:
        return ModelParams(self.dims, self.theta.copy())

    def __repr__(self):
        return f"ModelParams({self.dims}, |theta|={self.theta.size})"


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = make_rng(seed, 0x1A17)
    parts = []
    for shape in dims.shapes:
        if len(shape) == 2:
            fan_out, fan_in = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return ModelParams(dims, np.concatenate(parts))


def _as_batch(params: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.dims.input_dim:
        raise ValueError(f"inputs of shape {X.shape} do not match input_dim={params.dims.input_dim}")
    return X


def encode(params: ModelParams, x) -> np.ndarray:
    """Representation of one input (1-D) or a batch of inputs (2-D)."""
    X = _as_batch(params, x)
    h = np.tanh(np.tanh(X @ params.W1.T + params.b1) @ params.W2.T + params.b2)
    return h[0] if np.ndim(x) == 1 else h


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _xent(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(len(labels)), labels]


def classify_loss(params: ModelParams, rep, label: int) -> tuple[float, np.ndarray]:
    rep = np.asarray(rep, dtype=np.float64)
    logits = params.W3 @ rep + params.b3
    return float(_xent(logits[None, :], np.array([label]))[0]), _softmax(logits)


def predict_proba(params: ModelParams, X) -> np.ndarray:
    """Inference path: no clipping, no noise."""
    return _softmax(encode(params, _as_batch(params, X)) @ params.W3.T + params.b3)


def _check_batch(params, X, y):
    X = _as_batch(params, X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(X) == 0:
        raise ValueError("empty micro-batch")
    if len(y) != len(X):
        raise ValueError("inputs and labels differ in length")
    if y.min() < 0 or y.max() >= params.dims.num_classes:
        raise ValueError("label out of range")
    return X, y


def _forward(params, X, y, clip, sigma, noise_seeds, counter):
    a1 = np.tanh(X @ params.W1.T + params.b1)
    h = np.tanh(a1 @ params.W2.T + params.b2)
    norms = np.sqrt(np.einsum("ij,ij->i", h, h))
    if noise_seeds is None:
        z = h
    else:
        if len(noise_seeds) != len(X):
            raise ValueError("need exactly one noise seed per example")
        k = params.dims.rep_dim
        z = np.stack(
            [privatize(h[i], clip, NoiseSpec(sigma, k, s), counter) for i, s in enumerate(noise_seeds)]
        )
    logits = z @ params.W3.T + params.b3
    return a1, h, norms, z, logits


def _backward(params, X, y, a1, h, norms, z, logits, clip, per_example):
    """Gradient of the mean loss, or (per_example=True) of each record's loss."""
    B = len(X)
    dlogits = _softmax(logits)
    dlogits[np.arange(B), y] -= 1.0
    if not per_example:
        dlogits /= B
    dz = dlogits @ params.W3
    dh = dz
    if clip is not None and np.isfinite(clip):
        active = norms > clip * CLIP_SLACK
        if active.any():
            # Jacobian of h*C/||h||: (C/||h||) (I - h h^T / ||h||^2)
            ha, na = h[active], norms[active]
            proj = np.einsum("ij,ij->i", ha, dz[active]) / na**2
            dh = dz.copy()
            dh[active] = (clip / na)[:, None] * (dz[active] - ha * proj[:, None])
    dpre2 = dh * (1.0 - h * h)
    da1 = dpre2 @ params.W2
    dpre1 = da1 * (1.0 - a1 * a1)
    if per_example:
        outer = lambda a, b: np.einsum("bi,bj->bij", a, b).reshape(B, -1)
        parts = [outer(dpre1, X), dpre1, outer(dpre2, a1), dpre2, outer(dlogits, z), dlogits]
        return np.concatenate(parts, axis=1)
    parts = [dpre1.T @ X, dpre1.sum(0), dpre2.T @ a1, dpre2.sum(0), dlogits.T @ z, dlogits.sum(0)]
    return np.concatenate([p.ravel() for p in parts])


def batch_gradient(params: ModelParams, X, y) -> tuple[float, np.ndarray]:
    """Non-private mean loss and gradient."""
    X, y = _check_batch(params, X, y)
    a1, h, norms, z, logits = _forward(params, X, y, None, 0.0, None, None)
    loss = float(_xent(logits, y).mean())
    return loss, _backward(params, X, y, a1, h, norms, z, logits, None, False)


def dpfp_loss(params: ModelParams, X, y, clip: float, sigma: float, noise_seeds: Sequence[int]) -> float:
    """Mean loss on privatized representations; the noise is a function of the seeds only."""
    X, y = _check_batch(params, X, y)
    *_, logits = _forward(params, X, y, clip, sigma, noise_seeds, None)
    return float(_xent(logits, y).mean())


def dpfp_backward(
    params: ModelParams,
    X,
    y,
    clip: float,
    sigma: float,
    noise_seeds: Sequence[int],
    counter: DrawCounter | None = None,
) -> tuple[float, np.ndarray]:
    """Mean loss and its exact gradient when each representation is clipped and noised.

    The noise is held fixed and the clip is differentiated exactly, so the
    result is the true gradient of the sampled loss.
    """
    X, y = _check_batch(params, X, y)
    a1, h, norms, z, logits = _forward(params, X, y, clip, sigma, noise_seeds, counter)
    loss = float(_xent(logits, y).mean())
    return loss, _backward(params, X, y, a1, h, norms, z, logits, clip, False)


def per_example_grads(params: ModelParams, X, y) -> np.ndarray:
    """Non-private gradient of each record's loss, shape ``(B, total_params)``."""
    X, y = _check_batch(params, X, y)
    a1, h, norms, z, logits = _forward(params, X, y, None, 0.0, None, None)
    return _backward(params, X, y, a1, h, norms, z, logits, None, True)


def per_example_losses(params: ModelParams, X, y) -> np.ndarray:
    X, y = _check_batch(params, X, y)
    *_, logits = _forward(params, X, y, None, 0.0, None, None)
    return _xent(logits, y)


def dpsgd_noise_specs(sigma: float, dim: int, seed: int, batch_size: int) -> list[NoiseSpec]:
    return [NoiseSpec(sigma, dim, derive_seed(seed, i)) for i in range(batch_size)]


def dpsgd_gradient(
    params: ModelParams,
    X,
    y,
    clip: float,
    sigma: float,
    seed: int,
    counter: DrawCounter | None = None,
) -> np.ndarray:
    """Mean over the batch of clipped per-example gradients, each with its own d-dim noise."""
    grads = per_example_grads(params, X, y)
    specs = dpsgd_noise_specs(sigma, params.dims.total_params, seed, len(grads))
    total = np.zeros(params.dims.total_params)
    for g, spec in zip(grads, specs):
        total += clip_l2(g, clip)
        if spec.sigma > 0:
            total += sample_gaussian(spec, counter)
    return total / len(grads)
