"""Logical clock for the simulator: link rates, compute times, round times."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream

MAX_RATE_MBPS = 20.0


@dataclass(frozen=True)
class LinkProfile:
    client_id: int
    base_rate_mbps: float
    jitter: float = 0.0  # half-width of the multiplicative uniform noise
    seed: int = 0

    def rate_mbps(self, k: int) -> float:
        if self.jitter == 0.0:
            return self.base_rate_mbps
        u = stream(self.seed, "jitter", self.client_id, k).uniform(-self.jitter, self.jitter)
        return self.base_rate_mbps * (1.0 + u)


@dataclass(frozen=True)
class ComputeProfile:
    client_id: int
    base_s_per_epoch: float
    noise_sigma: float = 0.05


@dataclass(frozen=True)
class RoundTiming:
    t_cp: tuple[float, ...]
    t_cm: tuple[float, ...]
    t_down: tuple[float, ...]
    t_server: float
    total: float
    cumulative: float


def sample_rates(
    n: int,
    sigma_r: float,
    rng: np.random.Generator,
    max_rate: float = MAX_RATE_MBPS,
    jitter: float = 0.0,
    seed: int = 0,
) -> list[LinkProfile]:
    """Fastest client at ``max_rate``, slowest at ``max_rate / sigma_r``, rest uniform between."""
    if n < 2:
        raise ValueError("need at least two clients")
    if sigma_r < 1:
        raise ValueError(f"sigma_r must be >= 1, got {sigma_r}")
    lo = max_rate / sigma_r
    rates = np.empty(n)
    rates[0], rates[1] = max_rate, lo
    rates[2:] = rng.uniform(lo, max_rate, size=n - 2)
    rates = rates[rng.permutation(n)]
    return [LinkProfile(i, float(r), jitter, seed) for i, r in enumerate(rates)]


def uniform_rates(
    n: int,
    rate_range: tuple[float, float],
    rng: np.random.Generator,
    jitter: float = 0.0,
    seed: int = 0,
) -> list[LinkProfile]:
    lo, hi = rate_range
    if not 0 < lo <= hi:
        raise ValueError(f"bad rate range {rate_range}")
    rates = rng.uniform(lo, hi, size=n)
    return [LinkProfile(i, float(r), jitter, seed) for i, r in enumerate(rates)]


def sample_compute(
    n: int, compute_range: tuple[float, float], rng: np.random.Generator, noise_sigma: float = 0.05
) -> list[ComputeProfile]:
    lo, hi = compute_range
    if not 0 < lo <= hi:
        raise ValueError(f"bad compute range {compute_range}")
    base = rng.uniform(lo, hi, size=n)
    return [ComputeProfile(i, float(b), noise_sigma) for i, b in enumerate(base)]


def transmission_time(bits: int, rate_mbps: float) -> float:
    if rate_mbps <= 0:
        raise ValueError("rate must be positive")
    return bits / (rate_mbps * 1e6)


def compute_time(profile: ComputeProfile, epochs: float, rng: np.random.Generator | None) -> float:
    """Seconds for ``epochs`` of local work; lognormal noise with unit mean."""
    t = profile.base_s_per_epoch * epochs
    if profile.noise_sigma > 0 and rng is not None:
        sig = profile.noise_sigma
        t *= float(rng.lognormal(-0.5 * sig * sig, sig))
    return t


def round_time(
    t_cp: Sequence[float],
    t_cm: Sequence[float],
    t_down: Sequence[float],
    t_server: float,
    prev_cumulative: float = 0.0,
) -> RoundTiming:
    t_cp, t_cm, t_down = (tuple(float(x) for x in t) for t in (t_cp, t_cm, t_down))
    if not (len(t_cp) == len(t_cm) == len(t_down)) or not t_cp:
        raise ValueError("need one (t_cp, t_cm, t_down) triple per client")
    total = max(a + b + c for a, b, c in zip(t_cp, t_cm, t_down)) + t_server
    return RoundTiming(t_cp, t_cm, t_down, t_server, total, prev_cumulative + total)


def hypothetical_round_time(
    timing: RoundTiming, bits: Sequence[int], bits_prime: Sequence[int]
) -> float:
    """Round time had each client sent ``bits_prime`` instead of ``bits``."""
    if any(b < 1 for b in bits) or any(b < 1 for b in bits_prime):
        raise ValueError("bit counts must be >= 1")
    return (
        max(
            cp + (bp / b) * cm + down
            for cp, cm, down, b, bp in zip(timing.t_cp, timing.t_cm, timing.t_down, bits, bits_prime)
        )
        + timing.t_server
    )


def dump_profiles(
    path: str | Path, links: Sequence[LinkProfile], compute: Sequence[ComputeProfile]
) -> None:
    doc = {
        "version": 1,
        "links": [asdict(p) for p in links],
        "compute": [asdict(p) for p in compute],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_profiles(path: str | Path) -> tuple[list[LinkProfile], list[ComputeProfile]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported profile trace version {doc.get('version')!r}")
    links = [LinkProfile(**p) for p in doc["links"]]
    compute = [ComputeProfile(**p) for p in doc["compute"]]
    if [p.client_id for p in links] != list(range(len(links))) or len(compute) != len(links):
        raise ValueError(f"{path}: profiles must list clients 0..n-1 once each")
    if any(p.base_rate_mbps <= 0 or not math.isfinite(p.base_rate_mbps) for p in links):
        raise ValueError(f"{path}: rates must be positive")
    return links, compute
