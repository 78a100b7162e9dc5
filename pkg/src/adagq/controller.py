"""Server-side control of the mean number of quantization levels.

The controller never sees the loss-rate objective directly; it only compares
the loss decrease rate achieved at the current mean levels with the rate a
one-bit-coarser setting would have achieved, and moves one bit against the
slope. The move is then nudged by the change in aggregated-gradient norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

S_MIN = 1
S_MAX = 2**15 - 1


@dataclass
class ControllerState:
    s_k: float
    prev_norm: float | None = None
    lambda_g: float = 1.0
    s_min: int = S_MIN
    s_max: int = S_MAX

    def __post_init__(self) -> None:
        if not 1 <= self.s_min <= self.s_max:
            raise ValueError(f"bad bounds [{self.s_min}, {self.s_max}]")
        if not self.s_min <= self.s_k <= self.s_max:
            raise ValueError(f"s_k={self.s_k} outside [{self.s_min}, {self.s_max}]")

    @property
    def s_prime_k(self) -> int:
        return auxiliary_levels(self.s_k)


@dataclass(frozen=True)
class RateEstimates:
    r: float
    r_prime: float


def loss_decrease_rates(
    loss_prev: float, loss_bar: float, loss_bar_prime: float, t: float, t_prime: float
) -> RateEstimates:
    if t <= 0 or t_prime <= 0:
        raise ValueError(f"round times must be positive, got T={t}, T'={t_prime}")
    return RateEstimates((loss_prev - loss_bar) / t, (loss_prev - loss_bar_prime) / t_prime)


def derivative_sign(rates: RateEstimates, s_k: float, s_prime_k: float) -> int:
    if s_k <= s_prime_k:
        raise ValueError(f"need s_k > s'_k, got {s_k} <= {s_prime_k}")
    if rates.r_prime == rates.r:
        return 0
    return 1 if (rates.r_prime - rates.r) / (s_k - s_prime_k) > 0 else -1


def update_mean_levels(state: ControllerState, sign: int) -> float:
    """Halve on a positive slope, double on a negative one, hold on a tie."""
    if sign > 0:
        return state.s_k - state.s_k / 2
    if sign < 0:
        return state.s_k + state.s_k
    return state.s_k


def clamp(s: float, s_min: float = S_MIN, s_max: float = S_MAX) -> float:
    return min(max(s, s_min), s_max)


def calibrate_with_norm(
    s_hat: float,
    norm_k: float | None,
    norm_prev: float | None,
    lambda_g: float = 1.0,
    s_min: int = S_MIN,
    s_max: int = S_MAX,
) -> tuple[float, bool]:
    """Returns (s_next, calibrated). Missing or zero norms skip the nudge."""
    if not norm_k or not norm_prev or norm_k <= 0 or norm_prev <= 0:
        return clamp(s_hat, s_min, s_max), False
    s_next = s_hat + lambda_g * (math.log2(norm_k) - math.log2(norm_prev))
    return clamp(s_next, s_min, s_max), True


def auxiliary_levels(s_next: float) -> int:
    return max(1, math.floor(s_next / 2))


def norm_only_update(s_prev: float, norm_k: float, norm_prev: float) -> float:
    """Norm-tracking rule: add log2 of the norm ratio to the resolution."""
    if norm_k <= 0 or norm_prev <= 0:
        raise ValueError("norms must be positive")
    return s_prev + math.log2(norm_k / norm_prev)


@dataclass(frozen=True)
class ControllerStep:
    sign: int
    s_hat: float
    s_next: float
    calibrated: bool
    rates: RateEstimates | None


def controller_step(
    state: ControllerState,
    loss_prev: float,
    loss_bar: float,
    loss_bar_prime: float,
    t: float,
    t_prime: float,
    norm_k: float | None,
) -> ControllerStep:
    """One server update. Mutates ``state`` (s_k, prev_norm) in place."""
    s_prime = state.s_prime_k
    rates = None
    if state.s_k > s_prime:
        rates = loss_decrease_rates(loss_prev, loss_bar, loss_bar_prime, t, t_prime)
        sign = derivative_sign(rates, state.s_k, s_prime)
    else:
        # at s_k < 2 there is no coarser setting to probe against
        sign = 0
    s_hat = update_mean_levels(state, sign)
    s_next, calibrated = calibrate_with_norm(
        s_hat, norm_k, state.prev_norm, state.lambda_g, state.s_min, state.s_max
    )
    state.s_k = s_next
    state.prev_norm = norm_k
    return ControllerStep(sign, s_hat, s_next, calibrated, rates)
