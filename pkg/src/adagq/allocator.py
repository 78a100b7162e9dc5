"""Per-client quantization bits that equalize expected local round times.

Each client's expected local time is modelled as
``mean_compute_s + bits * trans_coeff_s_per_bit``. Fixing one anchor
client's bits determines everyone else's; the anchor and its bits are chosen
by exhaustive search so that the mean number of levels lands closest to the
controller's target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_BITS = 1
MAX_BITS = 16


@dataclass(frozen=True)
class ClientTimeStats:
    client_id: int
    mean_compute_s: float
    trans_coeff_s_per_bit: float
    last_bits: int


@dataclass(frozen=True)
class AllocationPlan:
    bits: tuple[int, ...]
    levels: tuple[int, ...]
    target: float

    @property
    def mean_levels(self) -> float:
        return sum(self.levels) / len(self.levels)


def levels_for_bits(b: int) -> int:
    return 2**b - 1


def uniform_bits_for(s: float) -> int:
    """Bits whose level count 2^b - 1 is closest to ``s`` (fewer bits on ties)."""
    return min(range(MIN_BITS, MAX_BITS + 1), key=lambda b: (abs(levels_for_bits(b) - s), b))


def uniform_plan(s: float, n: int) -> AllocationPlan:
    b = uniform_bits_for(s)
    return AllocationPlan((b,) * n, (levels_for_bits(b),) * n, s)


def estimate_time_stats(
    t_cp_history: Sequence[float], last_t_cm: float, last_bits: int, client_id: int = 0
) -> ClientTimeStats:
    """Mean of all recorded compute times; transmission coefficient from the last round."""
    if not t_cp_history:
        raise ValueError(f"client {client_id} has no completed rounds")
    if last_bits < 1:
        raise ValueError("last_bits must be >= 1")
    return ClientTimeStats(
        client_id, sum(t_cp_history) / len(t_cp_history), last_t_cm / last_bits, last_bits
    )


def relative_bits(anchor: ClientTimeStats, anchor_bits: int, other: ClientTimeStats) -> float:
    """Real-valued bits that give ``other`` the anchor's expected local time (floored at 1)."""
    if anchor.trans_coeff_s_per_bit <= 0 or other.trans_coeff_s_per_bit <= 0:
        raise ValueError("transmission coefficients must be positive")
    b = (
        anchor.mean_compute_s
        - other.mean_compute_s
        + anchor_bits * anchor.trans_coeff_s_per_bit
    ) / other.trans_coeff_s_per_bit
    if b <= 0:
        log.debug("client %d: relative bits %.3f clamped to 1", other.client_id, b)
        return 1.0
    return b


def expected_local_time(stats: ClientTimeStats, bits: int) -> float:
    return stats.mean_compute_s + bits * stats.trans_coeff_s_per_bit


def time_ratio(stats: Sequence[ClientTimeStats], bits: Sequence[int]) -> float:
    times = [expected_local_time(st, b) for st, b in zip(stats, bits)]
    return max(times) / min(times)


def _candidates(stats: Sequence[ClientTimeStats]) -> np.ndarray:
    """All anchor settings as an (n * 16, n) integer bit matrix, anchor-major."""
    cp = np.array([st.mean_compute_s for st in stats])
    coeff = np.array([st.trans_coeff_s_per_bit for st in stats])
    anchor_bits = np.arange(MIN_BITS, MAX_BITS + 1, dtype=np.float64)
    # raw[a, k, j]: bits for client j when client a is anchored at anchor_bits[k]
    raw = (cp[:, None, None] - cp[None, None, :] + anchor_bits[None, :, None] * coeff[:, None, None])
    raw = raw / coeff[None, None, :]
    raw = np.where(raw <= 0, 1.0, raw)
    bits = np.clip(np.floor(raw + 0.5), MIN_BITS, MAX_BITS).astype(np.int64)
    n = len(stats)
    idx = np.arange(n)
    bits[idx, :, idx] = anchor_bits.astype(np.int64)[None, :]
    return bits.reshape(n * (MAX_BITS - MIN_BITS + 1), n)


def allocate(s_next: float, stats: Sequence[ClientTimeStats]) -> AllocationPlan:
    """Bits per client for mean levels ``s_next``.

    Candidates are every anchor setting. Those whose predicted max/min
    local-time ratio is worse than the uniform plan's are dropped (rounding
    can cause this when bit counts are tiny); among the rest the mean level
    closest to ``s_next`` wins, then fewer total bits, then search order.
    With no surviving candidate, or degenerate stats, the uniform plan is used.
    """
    n = len(stats)
    if n == 0:
        raise ValueError("no clients to allocate")
    fallback = uniform_plan(s_next, n)
    if any(st.trans_coeff_s_per_bit <= 0 or st.mean_compute_s < 0 for st in stats):
        return fallback

    cand = _candidates(stats)
    cp = np.array([st.mean_compute_s for st in stats])
    coeff = np.array([st.trans_coeff_s_per_bit for st in stats])
    times = cp[None, :] + cand * coeff[None, :]
    ratio = times.max(axis=1) / times.min(axis=1)
    ok = ratio <= time_ratio(stats, fallback.bits)
    if not ok.any():
        return fallback
    cand = cand[ok]
    dist = np.abs((2.0 ** cand - 1).mean(axis=1) - s_next)
    order = np.lexsort((np.arange(len(cand)), cand.sum(axis=1), dist))
    best = tuple(int(b) for b in cand[order[0]])
    return AllocationPlan(best, tuple(levels_for_bits(b) for b in best), s_next)
