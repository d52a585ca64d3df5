import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dronenet.queueing import QueueParams
from dronenet.travel import (
    DemandPoint,
    DroneSpec,
    PlanarPoint,
    build_instance,
    drone_travel_time,
    flight_seconds,
)

SPEC = DroneSpec()
ORIGIN = PlanarPoint(0.0, 0.0)


def test_zero_distance_is_overhead():
    assert drone_travel_time(ORIGIN, ORIGIN, SPEC) == 10.0


def test_triangular_profile():
    t = drone_travel_time(ORIGIN, PlanarPoint(10.0, 0.0), SPEC)
    assert t == pytest.approx(10 + 2 * math.sqrt(10 / 19.6), abs=1e-12)
    assert t == pytest.approx(11.43, abs=0.01)


def test_trapezoidal_profile():
    t = drone_travel_time(ORIGIN, PlanarPoint(600.0, 800.0), SPEC)
    expected = 10 + 2 * (27.8 / 19.6) + (1000 - 27.8**2 / 19.6) / 27.8
    assert t == pytest.approx(expected, abs=1e-12)
    assert t == pytest.approx(47.39, abs=0.01)


def test_profiles_meet_at_switch_distance():
    d = SPEC.switch_distance
    tri = 2 * math.sqrt(d / SPEC.horiz_accel)
    trap = 2 * SPEC.max_speed / SPEC.horiz_accel
    assert tri == pytest.approx(trap, rel=1e-14)
    eps = 1e-9
    assert float(flight_seconds(d - eps, SPEC)) == pytest.approx(float(flight_seconds(d + eps, SPEC)), abs=1e-8)


@given(st.floats(0, 5e4), st.floats(0, 1e3))
def test_nondecreasing_in_distance(d, delta):
    assert float(flight_seconds(d + delta, SPEC)) >= float(flight_seconds(d, SPEC)) - 1e-12


def test_asymptotic_slope():
    d, delta = 1e5, 1e3
    slope = (float(flight_seconds(d + delta, SPEC)) - float(flight_seconds(d, SPEC))) / delta
    assert slope == pytest.approx(1 / SPEC.max_speed, rel=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        DroneSpec(max_speed=0)
    with pytest.raises(ValueError):
        PlanarPoint(math.inf, 0)
    with pytest.raises(ValueError):
        DemandPoint(ORIGIN, -1.0)


def test_colocated_base_gives_overhead():
    inst = build_instance([PlanarPoint(5.0, 5.0)], [DemandPoint(PlanarPoint(5.0, 5.0), 300.0)], SPEC, 0.1, QueueParams())
    assert inst.response_seconds[0, 0] == 10.0


def test_matrix_shape_and_floor():
    rng = np.random.default_rng(0)
    bases = [PlanarPoint(*p) for p in rng.uniform(0, 5000, (2, 2))]
    demands = [DemandPoint(PlanarPoint(*p), 400.0) for p in rng.uniform(0, 5000, (3, 2))]
    inst = build_instance(bases, demands, SPEC, 5 / 365, QueueParams())
    assert inst.response_seconds.shape == (2, 3)
    assert (inst.response_seconds >= SPEC.takeoff_landing_overhead).all()
    assert np.allclose(inst.arrival_scale_f, 5 / 365)
    assert inst.base_ids == ("0", "1")
    with pytest.raises(ValueError):
        inst.response_seconds[0, 0] = 1.0


def test_colocated_bases_rejected():
    with pytest.raises(ValueError, match="share coordinates"):
        build_instance([ORIGIN, PlanarPoint(0.0, 0.0)], [DemandPoint(ORIGIN, 1.0)], SPEC, 1.0, QueueParams())


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        build_instance([], [DemandPoint(ORIGIN, 1.0)], SPEC, 1.0, QueueParams())
    with pytest.raises(ValueError):
        build_instance([ORIGIN], [], SPEC, 1.0, QueueParams())
    with pytest.raises(ValueError):
        build_instance([ORIGIN], [DemandPoint(ORIGIN, 1.0)], SPEC, 0.0, QueueParams())
