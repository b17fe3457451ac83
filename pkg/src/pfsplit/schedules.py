"""Variance-preserving noise schedules and the exact linear-flow factor.

The forward process scales data by alpha(t) and adds Gaussian noise with
standard deviation sigma(t), keeping alpha^2 + sigma^2 = 1 on t in [0, 1].
The backward samplers split off the linear drift f(t) x and advance it with
the exact multiplier exp(int_s^t f), which for a VP schedule is just
alpha(t) / alpha(s). Everything here is closed form: no quadrature, so
repeated evaluation is cheap and bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "ScheduleDomainError",
    "ScheduleEval",
    "NoiseSchedule",
    "LinearBetaSchedule",
    "eval_schedule",
    "integrating_factor",
]


class ScheduleDomainError(ValueError):
    """Schedule evaluated outside its time domain [0, 1]."""


@dataclass(frozen=True)
class ScheduleEval:
    """Schedule quantities at one time.

    alpha, sigma are the forward-process coefficients; f is the linear
    drift rate d(log alpha)/dt; g2 is the squared diffusion rate.
    """

    t: float
    alpha: float
    sigma: float
    f: float
    g2: float


class NoiseSchedule:
    """Interface for VP schedules; see LinearBetaSchedule for the default.

    Implementations must keep alpha(0) = 1, sigma(0) = 0, alpha strictly
    decreasing, and alpha^2 + sigma^2 = 1.
    """

    t_min: float = 0.0

    def eval(self, t: float) -> ScheduleEval:
        raise NotImplementedError

    def integrating_factor(self, t: float, s: float) -> float:
        """exp(int_s^t f(tau) dtau), the exact linear sub-flow multiplier."""
        raise NotImplementedError


def _check_domain(t: float) -> float:
    t = float(t)
    if math.isnan(t) or t < 0.0 or t > 1.0:
        raise ScheduleDomainError(f"time {t!r} outside the schedule domain [0, 1]")
    return t


@dataclass(frozen=True)
class LinearBetaSchedule(NoiseSchedule):
    """Linear rate schedule beta(t) = beta0 + (beta1 - beta0) t.

    alpha(t) = exp(-1/2 int_0^t beta), sigma(t) = sqrt(1 - alpha^2),
    f(t) = -beta(t)/2 and g2(t) = beta(t) (the VP identity collapses
    d(sigma^2)/dt - 2 f sigma^2 to beta).

    t_min is where backward integration stops; the Gaussian targets used
    here have a smooth score at t = 0, so the default is 0.
    """

    beta0: float = 0.1
    beta1: float = 20.0
    t_min: float = 0.0

    def __post_init__(self) -> None:
        if not self.beta0 > 0.0:
            raise ValueError(f"beta0 must be > 0, got {self.beta0}")
        if self.beta1 < self.beta0:
            raise ValueError(f"beta1 must be >= beta0, got {self.beta1} < {self.beta0}")
        if not 0.0 <= self.t_min < 1.0:
            raise ValueError(f"t_min must lie in [0, 1), got {self.t_min}")

    def beta(self, t: float) -> float:
        return self.beta0 + (self.beta1 - self.beta0) * t

    def log_alpha(self, t: float) -> float:
        # -1/2 int_0^t beta(s) ds with beta linear
        return -0.5 * self.beta0 * t - 0.25 * (self.beta1 - self.beta0) * t * t

    def eval(self, t: float) -> ScheduleEval:
        t = _check_domain(t)
        la = self.log_alpha(t)
        alpha = math.exp(la)
        sigma = math.sqrt(-math.expm1(2.0 * la))
        b = self.beta(t)
        return ScheduleEval(t=t, alpha=alpha, sigma=sigma, f=-0.5 * b, g2=b)

    def integrating_factor(self, t: float, s: float) -> float:
        t = _check_domain(t)
        s = _check_domain(s)
        return math.exp(self.log_alpha(t) - self.log_alpha(s))


def eval_schedule(sched: NoiseSchedule, t: float) -> ScheduleEval:
    """Evaluate alpha, sigma, f, g2 at time t in [0, 1]."""
    return sched.eval(t)


def integrating_factor(sched: NoiseSchedule, t: float, s: float) -> float:
    """exp(int_s^t f), strictly positive; equals alpha(t)/alpha(s)."""
    return sched.integrating_factor(t, s)
