"""Gaussian-DP accounting for subsampled micro-batch training.

Privacy is tracked through a single GDP parameter ``mu``.  A training run of
``steps * micro_batches`` Poisson-subsampled Gaussian mechanisms composes (by
the CLT) to ``mu_total = p * sqrt(T * M * (exp(mu_step**2) - 1))`` and is
converted to an (epsilon, delta) profile with the exact GDP duality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

MU_BRACKET = (1e-10, 100.0)
MU_TOL = 1e-12
# largest mu_step for which exp(mu_step**2) stays finite in double precision
MU_STEP_MAX = math.sqrt(math.log(1.7976931348623157e308))


class AccountingError(ValueError):
    """Base class for accounting failures."""


class BudgetUnachievable(AccountingError):
    pass


class BudgetTooSmall(AccountingError):
    pass


class BudgetExhausted(RuntimeError):
    """Raised when a run tries to spend past its scheduled number of steps."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class CompositionSchedule:
    """Steps ``T``, micro-batches per step ``M``, sampling rate ``p``, clip ``C``.

    A DP-SGD schedule is the special case ``micro_batches=1``.
    """

    steps: int
    micro_batches: int
    sample_rate: float
    clip: float = 1.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if int(self.micro_batches) != self.micro_batches or self.micro_batches < 1:
            raise ValueError(f"micro_batches must be a positive integer, got {self.micro_batches}")
        if not 0 < self.sample_rate <= 1:
            raise ValueError(f"sample_rate must lie in (0, 1], got {self.sample_rate}")
        if not self.clip > 0:
            raise ValueError(f"clip must be positive, got {self.clip}")

    @property
    def rounds(self) -> int:
        return self.steps * self.micro_batches


@dataclass(frozen=True)
class CalibrationResult:
    sigma: float
    mu_total: float
    achieved_budget: PrivacyBudget

    @property
    def mu_step(self) -> float:
        return float("nan") if self.sigma == 0 else 1.0 / self.sigma


def standard_normal_cdf(t: float) -> float:
    if not math.isfinite(t):
        raise ValueError(f"standard_normal_cdf needs a finite argument, got {t}")
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


def delta_from_mu(epsilon: float, mu: float) -> float:
    """Exact delta(epsilon) of a mu-GDP mechanism.

    ``mu == 0`` is the perfect-privacy limit and returns 0 exactly.
    """
    if epsilon < 0 or mu < 0:
        raise ValueError("epsilon and mu must be nonnegative")
    if mu == 0:
        return 0.0
    a = -epsilon / mu + mu / 2
    b = -epsilon / mu - mu / 2
    first = standard_normal_cdf(a)
    tail = standard_normal_cdf(b)
    if tail == 0.0:
        second = 0.0
    elif epsilon > 700:
        second = math.exp(epsilon + math.log(tail))
    else:
        second = math.exp(epsilon) * tail
    return max(first - second, 0.0)


def _bisect_increasing(f, target, lo, hi):
    # f increasing on [lo, hi]; bisect to machine precision, which is tighter
    # than MU_TOL and keeps the delta round trip accurate for tiny mu
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mu_from_budget(budget: PrivacyBudget) -> float:
    """Invert the GDP profile: the unique mu with ``delta_from_mu(eps, mu) == delta``."""
    lo, hi = MU_BRACKET
    eps, delta = budget.epsilon, budget.delta
    if delta >= delta_from_mu(eps, hi):
        raise BudgetUnachievable(
            f"budget unachievable: delta={delta} needs mu beyond {hi} at epsilon={eps}"
        )
    return _bisect_increasing(lambda m: delta_from_mu(eps, m), delta, lo, hi)


def epsilon_from_mu(mu: float, delta: float) -> float:
    """Smallest epsilon >= 0 with ``delta_from_mu(epsilon, mu) <= delta``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if mu == 0 or delta_from_mu(0.0, mu) <= delta:
        return 0.0
    hi = 1.0
    while delta_from_mu(hi, mu) > delta:
        hi *= 2.0
        if hi > 1e6:
            raise BudgetUnachievable(f"no finite epsilon reaches delta={delta} at mu={mu}")
    lo = 0.0
    # delta decreases in epsilon
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if delta_from_mu(mid, mu) > delta:
            lo = mid
        else:
            hi = mid
    return hi


def _compose(mu_step: float, rounds: int, sample_rate: float) -> float:
    if mu_step < 0:
        raise ValueError(f"mu_step must be nonnegative, got {mu_step}")
    if sample_rate == 0 or mu_step == 0:
        return 0.0
    if mu_step > MU_STEP_MAX:
        raise OverflowError(f"exp(mu_step**2) overflows for mu_step={mu_step}")
    return sample_rate * math.sqrt(rounds * math.expm1(mu_step * mu_step))


def compose_mu_dpfp(mu_step: float, schedule: CompositionSchedule) -> float:
    """CLT composition of ``T*M`` subsampled mechanisms, each ``mu_step``-GDP."""
    return _compose(mu_step, schedule.rounds, schedule.sample_rate)


def compose_mu_dpsgd(mu_step: float, steps: int, sample_rate: float) -> float:
    return _compose(mu_step, steps, sample_rate)


def _invert_compose(mu_total: float, rounds: int, sample_rate: float, clip: float) -> float:
    if mu_total <= 0:
        raise BudgetTooSmall("budget too small: mu_total must be positive")
    ratio = mu_total / (sample_rate * math.sqrt(rounds))
    return clip / math.sqrt(math.log1p(ratio * ratio))


def _result(sigma: float, schedule: CompositionSchedule, delta: float) -> CalibrationResult:
    mu_total = compose_mu_dpfp(schedule.clip / sigma, schedule)
    return CalibrationResult(sigma, mu_total, PrivacyBudget(epsilon_from_mu(mu_total, delta), delta))


def calibrate_sigma_dpfp(budget: PrivacyBudget, schedule: CompositionSchedule) -> CalibrationResult:
    """Per-coordinate noise std for a DP-FP schedule that exactly spends ``budget``."""
    mu_total = mu_from_budget(budget)
    sigma = _invert_compose(mu_total, schedule.rounds, schedule.sample_rate, schedule.clip)
    return _result(sigma, schedule, budget.delta)


def calibrate_sigma_dpsgd(
    budget: PrivacyBudget, steps: int, sample_rate: float, clip: float
) -> CalibrationResult:
    schedule = CompositionSchedule(steps, 1, sample_rate, clip)
    return calibrate_sigma_dpfp(budget, schedule)


def account(sigma: float, schedule: CompositionSchedule, delta: float) -> PrivacyBudget:
    """Forward query: the (epsilon, delta) a given noise level spends over ``schedule``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu_total = compose_mu_dpfp(schedule.clip / sigma, schedule)
    return PrivacyBudget(epsilon_from_mu(mu_total, delta), delta)


@dataclass
class BudgetLedger:
    schedule: CompositionSchedule
    budget: PrivacyBudget
    steps_taken: int = 0
    sigma: float | None = field(default=None, compare=False)

    @property
    def remaining(self) -> int:
        return self.schedule.steps - self.steps_taken

    def spend(self) -> int:
        """Record one full step (all ``M`` micro-batches); return the steps remaining."""
        if self.steps_taken >= self.schedule.steps:
            raise BudgetExhausted(
                f"budget exhausted: all {self.schedule.steps} scheduled steps already taken"
            )
        self.steps_taken += 1
        return self.remaining

    def mu_spent(self, micro_done: int | None = None) -> float:
        """Cumulative mu after ``steps_taken`` full steps (or an explicit round count)."""
        if self.sigma is None:
            return float("nan")
        rounds = self.steps_taken * self.schedule.micro_batches if micro_done is None else micro_done
        if rounds == 0:
            return 0.0
        return _compose(self.schedule.clip / self.sigma, rounds, self.schedule.sample_rate)


def ledger_spend(ledger: BudgetLedger) -> BudgetLedger:
    ledger.spend()
    return ledger
