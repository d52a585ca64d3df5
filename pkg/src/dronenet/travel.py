"""Drone flight times and the response-time instance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .queueing import QueueParams


@dataclass(frozen=True)
class DroneSpec:
    max_speed: float = 27.8  # m/s
    horiz_accel: float = 19.6  # m/s^2
    takeoff_landing_overhead: float = 10.0  # s
    cruise_altitude: float = 60.0  # m, informational only

    def __post_init__(self):
        for name in ("max_speed", "horiz_accel", "takeoff_landing_overhead", "cruise_altitude"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")

    @property
    def switch_distance(self) -> float:
        """Distance at which the drone first reaches top speed before braking."""
        return self.max_speed**2 / self.horiz_accel


@dataclass(frozen=True)
class PlanarPoint:
    x: float  # UTM easting, m
    y: float  # UTM northing, m

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates ({self.x}, {self.y})")


@dataclass(frozen=True)
class DemandPoint:
    location: PlanarPoint
    baseline_seconds: float

    def __post_init__(self):
        b = self.baseline_seconds
        if not (math.isfinite(b) and b >= 0):
            raise ValueError(f"baseline response time must be finite and >= 0, got {b}")


def flight_seconds(distance, spec: DroneSpec):
    """Vectorised travel time for straight-line distances (meters)."""
    dist = np.asarray(distance, dtype=float)
    v, a = spec.max_speed, spec.horiz_accel
    triangular = 2.0 * np.sqrt(np.maximum(dist, 0.0) / a)
    trapezoidal = 2.0 * v / a + (dist - v * v / a) / v
    horizontal = np.where(dist >= spec.switch_distance, trapezoidal, triangular)
    return spec.takeoff_landing_overhead + horizontal


def drone_travel_time(start: PlanarPoint, end: PlanarPoint, spec: DroneSpec) -> float:
    distance = math.hypot(end.x - start.x, end.y - start.y)
    return float(flight_seconds(distance, spec))


def coords(points: Sequence[PlanarPoint]) -> np.ndarray:
    return np.array([(p.x, p.y) for p in points], dtype=float).reshape(-1, 2)


def response_matrix(bases: Sequence[PlanarPoint], targets: Sequence[PlanarPoint], spec: DroneSpec) -> np.ndarray:
    """Flight times, shape ``(len(bases), len(targets))``."""
    b, t = coords(bases), coords(targets)
    dist = np.hypot(b[:, None, 0] - t[None, :, 0], b[:, None, 1] - t[None, :, 1])
    return flight_seconds(dist, spec)


@dataclass(frozen=True)
class Instance:
    bases: tuple[PlanarPoint, ...]
    demands: tuple[DemandPoint, ...]
    response_seconds: np.ndarray = field(repr=False)
    arrival_scale_f: np.ndarray = field(repr=False)
    queue: QueueParams
    base_ids: tuple[str, ...] = ()

    def __post_init__(self):
        m, n = len(self.bases), len(self.demands)
        object.__setattr__(self, "response_seconds", np.asarray(self.response_seconds, dtype=float))
        object.__setattr__(self, "arrival_scale_f", np.asarray(self.arrival_scale_f, dtype=float))
        if self.response_seconds.shape != (m, n):
            raise ValueError(f"response matrix has shape {self.response_seconds.shape}, expected {(m, n)}")
        if self.arrival_scale_f.shape != (n,) or np.any(self.arrival_scale_f <= 0):
            raise ValueError("arrival scale factors must be positive, one per demand point")
        for name in ("response_seconds", "arrival_scale_f"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.base_ids:
            object.__setattr__(self, "base_ids", tuple(str(i) for i in range(m)))
        elif len(self.base_ids) != m:
            raise ValueError("one base id per base required")

    @property
    def baseline(self) -> np.ndarray:
        return np.array([d.baseline_seconds for d in self.demands], dtype=float)

    @property
    def n_bases(self) -> int:
        return len(self.bases)

    @property
    def n_demands(self) -> int:
        return len(self.demands)


def build_instance(
    bases: Sequence[PlanarPoint],
    demands: Sequence[DemandPoint],
    spec: DroneSpec,
    arrival_scale_f,
    queue: QueueParams,
    base_ids: Sequence[str] | None = None,
) -> Instance:
    """Populate drone response times for every base/demand pair.

    ``arrival_scale_f`` is a scalar or one factor per demand (calls per day
    contributed by one demand point).
    """
    if not bases:
        raise ValueError("at least one candidate base is required")
    if not demands:
        raise ValueError("at least one demand point is required")
    seen: dict[tuple[float, float], int] = {}
    for i, p in enumerate(bases):
        key = (p.x, p.y)
        if key in seen:
            raise ValueError(f"bases {seen[key]} and {i} share coordinates {key}")
        seen[key] = i
    r = response_matrix(bases, [d.location for d in demands], spec)
    f = np.broadcast_to(np.asarray(arrival_scale_f, dtype=float), (len(demands),)).copy()
    return Instance(
        bases=tuple(bases),
        demands=tuple(demands),
        response_seconds=r,
        arrival_scale_f=f,
        queue=queue,
        base_ids=tuple(base_ids) if base_ids is not None else (),
    )
