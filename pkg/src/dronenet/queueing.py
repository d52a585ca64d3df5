"""M/M/d steady-state quantities and the utilization thresholds used by the
base congestion constraint.

Two threshold rules are supported:

``printed``
    The service-level inequality in its closed form,
    ``sum_{s<d} (d-s) d!/s! rho^-(d-s) >= 1/(1-psi)``, solved for equality.
    The congestion row then bounds the daily arrival rate at a base by
    ``mu * rho[d]``.

``erlang``
    The utilization at which the exact M/M/d probability of finding an idle
    server equals ``psi``.  The arrival-rate bound is ``mu * d * rho[d]``.

The two rules agree for a single server and diverge for ``d >= 2`` (see
``steady_state_availability``).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

ThresholdRule = Literal["printed", "erlang"]

BISECT_EPS = 1e-12
BISECT_TOL = 1e-10


@dataclass(frozen=True)
class QueueParams:
    service_rate_mu: float = 48.0
    service_level_psi: float = 0.99
    max_drones_per_base: int = 3
    threshold_rule: ThresholdRule = "printed"

    def __post_init__(self):
        if not 0.0 < self.service_level_psi < 1.0:
            raise ValueError(f"service level must lie in (0, 1), got {self.service_level_psi}")
        if not self.service_rate_mu > 0:
            raise ValueError(f"service rate must be positive, got {self.service_rate_mu}")
        if int(self.max_drones_per_base) != self.max_drones_per_base or self.max_drones_per_base < 1:
            raise ValueError(f"max drones per base must be a positive integer, got {self.max_drones_per_base}")
        if self.threshold_rule not in ("printed", "erlang"):
            raise ValueError(f"unknown threshold rule {self.threshold_rule!r}")


@dataclass(frozen=True)
class RhoTable:
    """Utilization thresholds for ``d = 1..d_max`` servers at service level ``psi``.

    ``rho[d - 1]`` holds the threshold for ``d`` drones.  ``load_bound(d)`` is the
    largest offered load (arrivals per unit of ``mu``) a base with ``d`` drones
    may carry; the congestion row uses its increments.
    """

    psi: float
    rho: tuple[float, ...]
    rule: ThresholdRule = "printed"

    @property
    def d_max(self) -> int:
        return len(self.rho)

    def load_bound(self, d: int) -> float:
        if d <= 0:
            return 0.0
        if self.rule == "erlang":
            return d * self.rho[d - 1]
        return self.rho[d - 1]

    def load_increments(self) -> list[float]:
        """Coefficient of ``y_{i,d}`` in the congestion row (before scaling by ``mu``)."""
        bounds = [self.load_bound(d) for d in range(0, self.d_max + 1)]
        return [bounds[d] - bounds[d - 1] for d in range(1, self.d_max + 1)]


def _check_domain(d: int, rho: float) -> None:
    if d < 1 or int(d) != d:
        raise ValueError(f"server count must be a positive integer, got {d}")
    if not 0.0 < rho < 1.0:
        raise ValueError(f"utilization must lie in (0, 1), got {rho}")


def _log_lhs(d: int, rho: float) -> float:
    # terms (d-s) * d!/s! * rho^-(d-s); d!/s! accumulated as a log ratio
    log_rho = math.log(rho)
    logs = []
    log_ratio = 0.0  # log(d!/s!) for s = d, stepping down
    for s in range(d - 1, -1, -1):
        log_ratio += math.log(s + 1)
        logs.append(math.log(d - s) + log_ratio - (d - s) * log_rho)
    top = max(logs)
    return top + math.log(sum(math.exp(v - top) for v in logs))


def service_level_lhs(d: int, rho: float) -> float:
    """Left-hand side of the closed-form service-level inequality."""
    _check_domain(d, rho)
    try:
        return math.exp(_log_lhs(d, rho))
    except OverflowError:
        return math.inf


def _bisect_decreasing(fn, target: float, lo: float, hi: float) -> float:
    # fn strictly decreasing on [lo, hi], fn(lo) >= target >= fn(hi).  Runs past
    # BISECT_TOL down to adjacent floats so fn(root) also matches target tightly.
    while True:
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        if fn(mid) >= target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def rho_for_service_level(d: int, psi: float) -> float:
    """Utilization at which the closed-form inequality holds with equality."""
    if d < 1 or int(d) != d:
        raise ValueError(f"server count must be a positive integer, got {d}")
    if not 0.0 < psi < 1.0:
        raise ValueError(f"service level must lie in (0, 1), got {psi}")
    if d == 1:
        return 1.0 - psi
    log_target = -math.log1p(-psi)
    # LHS tends to sum_s (d-s) d!/s! as rho -> 1; no root below that
    lhs_at_one = sum((d - s) * math.exp(math.lgamma(d + 1) - math.lgamma(s + 1)) for s in range(d))
    if math.log(lhs_at_one) >= log_target:
        raise ValueError(
            f"no utilization in (0, 1) attains equality for d={d}, psi={psi}: "
            f"the inequality holds for every rho < 1 (limit {lhs_at_one:.6g} >= {1 / (1 - psi):.6g})"
        )
    return _bisect_decreasing(lambda r: _log_lhs(d, r), log_target, BISECT_EPS, 1.0 - BISECT_EPS)


def _log_pi0(d: int, rho: float) -> float:
    a = d * rho
    log_a = math.log(a)
    logs = [s * log_a - math.lgamma(s + 1) for s in range(d)]
    logs.append(d * log_a - math.lgamma(d + 1) - math.log1p(-rho))
    top = max(logs)
    return -(top + math.log(sum(math.exp(v - top) for v in logs)))


def steady_state_availability(d: int, rho: float) -> float:
    """Probability that an arriving call finds at least one idle drone.

    ``pi_0 + sum_{s=1}^{d-1} pi_s`` for an M/M/d queue with utilization
    ``rho = lambda / (d mu)``.
    """
    _check_domain(d, rho)
    log_a = math.log(d * rho)
    log_pi0 = _log_pi0(d, rho)
    return sum(math.exp(log_pi0 + s * log_a - math.lgamma(s + 1)) for s in range(d))


def rho_for_availability(d: int, psi: float) -> float:
    """Utilization at which the exact M/M/d availability equals ``psi``."""
    if d < 1 or int(d) != d:
        raise ValueError(f"server count must be a positive integer, got {d}")
    if not 0.0 < psi < 1.0:
        raise ValueError(f"service level must lie in (0, 1), got {psi}")
    if d == 1:
        return 1.0 - psi
    return _bisect_decreasing(
        lambda r: steady_state_availability(d, r), psi, BISECT_EPS, 1.0 - BISECT_EPS
    )


def build_rho_table(params: QueueParams) -> RhoTable:
    solve = rho_for_service_level if params.threshold_rule == "printed" else rho_for_availability
    psi = params.service_level_psi
    rho = tuple(solve(d, psi) for d in range(1, params.max_drones_per_base + 1))
    return RhoTable(psi=psi, rho=rho, rule=params.threshold_rule)


def simulate_mmd(
    d: int,
    arrival_rate: float,
    service_rate: float,
    n_events: int = 1_000_000,
    seed: int | None = 0,
    warmup: int = 0,
) -> float:
    """Event-driven M/M/d simulation.

    Returns the fraction of arrivals (after ``warmup``) that find an idle server.
    FIFO waiting line, one heap of busy-server completion times.
    """
    if d < 1:
        raise ValueError("need at least one server")
    if arrival_rate <= 0 or service_rate <= 0:
        raise ValueError("rates must be positive")
    if arrival_rate >= d * service_rate:
        raise ValueError(
            f"unstable queue: arrival rate {arrival_rate} >= capacity {d * service_rate}"
        )
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / arrival_rate, size=n_events).tolist()
    services = rng.exponential(1.0 / service_rate, size=n_events).tolist()

    busy: list[float] = []  # completion times of jobs in service
    waiting: list[int] = []  # FIFO of job indices, consumed from `head`
    head = 0
    now = 0.0
    found_idle = 0
    counted = 0
    for k in range(n_events):
        now += gaps[k]
        # release servers that finished before this arrival
        while busy and busy[0] <= now:
            t_done = heapq.heappop(busy)
            if head < len(waiting):
                job = waiting[head]
                head += 1
                heapq.heappush(busy, t_done + services[job])
        if k >= warmup:
            counted += 1
            if len(busy) < d:
                found_idle += 1
        if len(busy) < d:
            heapq.heappush(busy, now + services[k])
        else:
            waiting.append(k)
        if head > 4096 and head * 2 > len(waiting):
            del waiting[:head]
            head = 0
    return found_idle / counted if counted else float("nan")
