"""Training loops: DP-FP, the DP-SGD baseline and a non-private baseline.

All three share the Poisson sampler and optimizer, so with privacy switched
off (sigma=0, clip=inf, one micro-batch) they follow the same trajectory.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .accountant import (
    BudgetExhausted,
    BudgetLedger,
    CompositionSchedule,
    PrivacyBudget,
    calibrate_sigma_dpfp,
    calibrate_sigma_dpsgd,
    compose_mu_dpfp,
    epsilon_from_mu,
)
from .data import Dataset
from .mechanism import DrawCounter, derive_seed
from .model import ModelDims, ModelParams, batch_gradient, dpfp_backward, dpsgd_gradient, init_params, predict_proba
from .sampler import SamplerConfig, draw_microbatch, rate_from_batch

log = logging.getLogger(__name__)

MODES = ("dpfp", "dpsgd", "nonprivate")
OPTIMIZERS = ("sgd", "adam")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class NonFiniteError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "dpfp"
    epsilon: float = 3.0
    delta: float | None = None  # None means 1/(2D)
    epochs: float = 3.0
    batch_size: float = 32.0
    micro_batches: int = 32
    clip: float = 1.0
    learning_rate: float = 5e-6
    optimizer: str = "adam"
    hidden_dim: int = 64
    rep_dim: int = 16
    init_seed: int = 0
    sampler_seed: int = 1
    noise_seed: int = 2
    sigma: float | None = None  # fixes the noise scale instead of calibrating it
    extra_steps: int = 0  # steps attempted past the schedule; always hits the ledger

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size <= 0 or self.micro_batches < 1:
            raise ValueError("batch_size and micro_batches must be positive")
        if not self.clip > 0 or not self.learning_rate > 0:
            raise ValueError("clip and learning_rate must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.extra_steps < 0:
            raise ValueError("extra_steps must be nonnegative")

    def resolved_delta(self, dataset_size: int) -> float:
        return 1.0 / (2 * dataset_size) if self.delta is None else self.delta

    def num_steps(self, dataset_size: int) -> int:
        return math.ceil(self.epochs * dataset_size / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    micro_index: int
    loss: float
    batch_size: int
    cum_mu: float


@dataclass
class TrainRunMetrics:
    mode: str
    steps: int
    sample_rate: float
    sigma: float
    mu_total: float
    epsilon: float
    delta: float
    records: list[StepRecord] = field(default_factory=list)
    epoch_accuracy: list[tuple[int, float]] = field(default_factory=list)
    final_accuracy: float = float("nan")
    best_accuracy: float = float("nan")
    steps_taken: int = 0
    noise_draws: int = 0
    params: ModelParams | None = None

    @property
    def reported_accuracy(self) -> float:
        # DP runs report the model once the budget is spent; baselines their best epoch
        return self.best_accuracy if self.mode == "nonprivate" else self.final_accuracy

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "steps": self.steps,
            "steps_taken": self.steps_taken,
            "sample_rate": self.sample_rate,
            "sigma": self.sigma,
            "mu_total": self.mu_total,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "final_accuracy": self.final_accuracy,
            "best_accuracy": self.best_accuracy,
            "reported_accuracy": self.reported_accuracy,
            "noise_draws": self.noise_draws,
            "epoch_accuracy": " ".join(f"{e}:{a:.6f}" for e, a in self.epoch_accuracy),
        }


@dataclass
class OptimizerState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(
    theta: np.ndarray, grad: np.ndarray, state: OptimizerState, name: str, lr: float
) -> tuple[np.ndarray, OptimizerState]:
    """One sgd or adam update; returns new arrays and leaves the inputs untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {theta.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteError(f"non-finite gradient at {len(bad)} coordinates (first index {bad[0]})")
    if name == "sgd":
        new, new_state = theta - lr * grad, OptimizerState(state.t + 1)
    elif name == "adam":
        t = state.t + 1
        m = ADAM_BETA1 * (state.m if state.m is not None else 0.0) + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * (state.v if state.v is not None else 0.0) + (1 - ADAM_BETA2) * grad * grad
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new, new_state = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), OptimizerState(t, m, v)
    else:
        raise ValueError(f"unknown optimizer {name!r}")
    if not np.all(np.isfinite(new)):
        raise NonFiniteError("parameters overflowed during the update")
    return new, new_state


def evaluate(params: ModelParams, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(predict_proba(params, dataset.X), axis=1)
    return float(np.mean(pred == dataset.y))


UpdateHook = Callable[[int, int, ModelParams], None]


class _Run:
    """Shared state of one training run: params, optimizer, ledger, metrics."""

    def __init__(self, config: TrainConfig, train: Dataset, dev: Dataset | None, micro_batches: int):
        self.config = config
        self.train = train
        self.dev = dev
        D = len(train)
        if D == 0:
            raise ValueError("training set is empty")
        self.D = D
        self.M = micro_batches
        self.T = config.num_steps(D)
        self.p = rate_from_batch(config.batch_size, micro_batches, D)
        self.delta = config.resolved_delta(D)
        self.budget = PrivacyBudget(config.epsilon, self.delta)
        dims = ModelDims(train.input_dim, config.hidden_dim, config.rep_dim, train.num_classes)
        self.params = init_params(dims, config.init_seed)
        self.opt_state = OptimizerState()
        self.sampler = SamplerConfig(D, micro_batches, self.p, config.sampler_seed)
        self.ledger: BudgetLedger | None = None
        self.counter = DrawCounter()

    def calibrate(self, dpsgd: bool) -> tuple[float, float]:
        cfg = self.config
        schedule = CompositionSchedule(max(self.T, 1), self.M, self.p, cfg.clip)
        if cfg.sigma is not None:
            sigma = cfg.sigma
            # unbounded sensitivity or zero noise: no finite guarantee
            try:
                mu_total = math.inf if sigma == 0 else compose_mu_dpfp(cfg.clip / sigma, schedule)
            except OverflowError:
                mu_total = math.inf
        elif dpsgd:
            res = calibrate_sigma_dpsgd(self.budget, schedule.steps, self.p, cfg.clip)
            sigma, mu_total = res.sigma, res.mu_total
        else:
            res = calibrate_sigma_dpfp(self.budget, schedule)
            sigma, mu_total = res.sigma, res.mu_total
        self.ledger = BudgetLedger(schedule, self.budget, sigma=sigma)
        return sigma, mu_total

    def metrics(self, mode: str, sigma: float, mu_total: float) -> TrainRunMetrics:
        if math.isfinite(mu_total):
            eps = epsilon_from_mu(mu_total, self.delta)
        else:
            eps = math.inf
        return TrainRunMetrics(mode, self.T, self.p, sigma, mu_total, eps, self.delta)

    def cum_mu(self, rounds: int) -> float:
        if self.ledger is None:
            return math.inf
        if self.ledger.sigma == 0:
            return math.inf
        try:
            return self.ledger.mu_spent(rounds)
        except OverflowError:
            return math.inf

    def update(self, grad: np.ndarray) -> None:
        theta, self.opt_state = optimizer_step(
            self.params.theta, grad, self.opt_state, self.config.optimizer, self.config.learning_rate
        )
        self.params = ModelParams(self.params.dims, theta)

    def maybe_eval(self, metrics: TrainRunMetrics, step: int) -> None:
        # step is 0-based and complete; evaluate whenever a nominal epoch boundary is crossed
        B = self.config.batch_size
        before = math.floor(step * B / self.D)
        after = math.floor((step + 1) * B / self.D)
        if self.dev is not None and (after > before or step + 1 == self.T):
            metrics.epoch_accuracy.append((step + 1, evaluate(self.params, self.dev)))

    def finish(self, metrics: TrainRunMetrics) -> TrainRunMetrics:
        metrics.params = self.params
        metrics.noise_draws = self.counter.count
        if self.dev is not None and len(self.dev):
            metrics.final_accuracy = evaluate(self.params, self.dev)
            accs = [a for _, a in metrics.epoch_accuracy] or [metrics.final_accuracy]
            metrics.best_accuracy = max(accs)
        return metrics


def _loop(run: _Run, metrics: TrainRunMetrics, micro_step, spend: bool) -> TrainRunMetrics:
    total = run.T + (run.config.extra_steps if run.T > 0 else 0)
    try:
        for t in range(total):
            if spend:
                run.ledger.spend()
            elif t >= run.T:
                raise BudgetExhausted(f"budget exhausted: schedule has {run.T} steps")
            for m in range(run.M):
                idx = draw_microbatch(run.sampler, t, m)
                cum = run.cum_mu(t * run.M + m + 1) if spend else math.inf
                if len(idx) == 0:
                    metrics.records.append(StepRecord(t, m, math.nan, 0, cum))
                    continue
                loss = micro_step(t, m, idx)
                metrics.records.append(StepRecord(t, m, loss, len(idx), cum))
            metrics.steps_taken = t + 1
            run.maybe_eval(metrics, t)
    except BudgetExhausted as err:
        err.metrics = run.finish(metrics)
        raise
    return run.finish(metrics)


def train_dpfp(
    config: TrainConfig, train: Dataset, dev: Dataset | None = None, on_update: UpdateHook | None = None
) -> TrainRunMetrics:
    """Clip and noise each record's representation; plain optimizer afterwards.

    Micro-batches run sequentially in ascending index with one optimizer
    update each; empty micro-batches still count toward the composition.
    """
    run = _Run(config, train, dev, config.micro_batches)
    if run.T == 0:
        return run.finish(run.metrics("dpfp", math.nan, 0.0))
    sigma, mu_total = run.calibrate(dpsgd=False)
    log.info("dpfp: T=%d M=%d p=%.6g sigma=%.6g mu_total=%.6g", run.T, run.M, run.p, sigma, mu_total)
    metrics = run.metrics("dpfp", sigma, mu_total)

    def micro_step(t, m, idx):
        seeds = [derive_seed(config.noise_seed, t, m, j) for j in range(len(idx))]
        loss, grad = dpfp_backward(
            run.params, train.X[idx], train.y[idx], config.clip, sigma, seeds, run.counter
        )
        run.update(grad)
        if on_update:
            on_update(t, m, run.params)
        return loss

    return _loop(run, metrics, micro_step, spend=True)


def train_dpsgd(
    config: TrainConfig, train: Dataset, dev: Dataset | None = None, on_update: UpdateHook | None = None
) -> TrainRunMetrics:
    """One Poisson batch per step at rate B/D, clipped per-example gradients plus d-dim noise."""
    run = _Run(config, train, dev, 1)
    if run.T == 0:
        return run.finish(run.metrics("dpsgd", math.nan, 0.0))
    sigma, mu_total = run.calibrate(dpsgd=True)
    log.info("dpsgd: T=%d p=%.6g sigma=%.6g mu_total=%.6g", run.T, run.p, sigma, mu_total)
    metrics = run.metrics("dpsgd", sigma, mu_total)

    def micro_step(t, m, idx):
        X, y = train.X[idx], train.y[idx]
        loss = batch_gradient(run.params, X, y)[0]
        grad = dpsgd_gradient(
            run.params, X, y, config.clip, sigma, derive_seed(config.noise_seed, 0xD5, t), run.counter
        )
        run.update(grad)
        if on_update:
            on_update(t, m, run.params)
        return loss

    return _loop(run, metrics, micro_step, spend=True)


def train_nonprivate(
    config: TrainConfig, train: Dataset, dev: Dataset | None = None, on_update: UpdateHook | None = None
) -> TrainRunMetrics:
    run = _Run(config, train, dev, 1)
    metrics = TrainRunMetrics("nonprivate", run.T, run.p, 0.0, math.inf, math.inf, run.delta)
    if run.T == 0:
        return run.finish(metrics)

    def micro_step(t, m, idx):
        loss, grad = batch_gradient(run.params, train.X[idx], train.y[idx])
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {t}")
        run.update(grad)
        if on_update:
            on_update(t, m, run.params)
        return loss

    return _loop(run, metrics, micro_step, spend=False)


TRAINERS = {"dpfp": train_dpfp, "dpsgd": train_dpsgd, "nonprivate": train_nonprivate}


def train(
    config: TrainConfig, train_set: Dataset, dev: Dataset | None = None, on_update: UpdateHook | None = None
) -> TrainRunMetrics:
    return TRAINERS[config.mode](config, train_set, dev, on_update)
