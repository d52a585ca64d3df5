import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dronenet.queueing import (
    QueueParams,
    RhoTable,
    build_rho_table,
    rho_for_availability,
    rho_for_service_level,
    service_level_lhs,
    simulate_mmd,
    steady_state_availability,
)


def lhs_limit_at_one(d):
    return sum((d - s) * math.factorial(d) / math.factorial(s) for s in range(d))


def polynomial_root(d, psi):
    """Root in (0, 1) of rho^d / (1 - psi) - sum_s (d - s) d!/s! rho^s, via numpy.roots."""
    coeffs = np.zeros(d + 1)  # highest power first
    coeffs[0] = 1.0 / (1.0 - psi)
    for s in range(d):
        coeffs[d - s] -= (d - s) * math.factorial(d) / math.factorial(s)
    roots = np.roots(coeffs)
    real = [r.real for r in roots if abs(r.imag) < 1e-12 and 0 < r.real < 1]
    assert len(real) == 1
    return real[0]


def ctmc_availability(d, rho, n_states=400):
    """Stationary P(fewer than d busy) of a truncated birth-death chain, mu = 1."""
    lam = d * rho
    q = np.zeros((n_states, n_states))
    for k in range(n_states - 1):
        q[k, k + 1] = lam
        q[k + 1, k] = min(k + 1, d)
    q -= np.diag(q.sum(axis=1))
    a = np.vstack([q.T, np.ones(n_states)])
    rhs = np.zeros(n_states + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(a, rhs, rcond=None)[0]
    return float(pi[:d].sum())


# -- closed-form inequality -------------------------------------------------


def test_lhs_single_server():
    assert service_level_lhs(1, 0.01) == pytest.approx(100.0, rel=1e-12)


def test_lhs_two_servers_direct_substitution():
    assert service_level_lhs(2, 0.5) == pytest.approx(20.0, rel=1e-12)


def test_lhs_at_two_server_root():
    assert service_level_lhs(2, 0.210250) == pytest.approx(100.0, abs=1e-3)


@pytest.mark.parametrize("d, rho", [(0, 0.5), (2, 0.0), (2, 1.0), (2, -0.1), (1.5, 0.2)])
def test_lhs_domain(d, rho):
    with pytest.raises(ValueError):
        service_level_lhs(d, rho)


def test_lhs_large_d_no_overflow():
    assert math.isfinite(service_level_lhs(30, 0.9))
    assert service_level_lhs(200, 1e-3) == math.inf


@given(st.integers(1, 12), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_lhs_strictly_decreasing(d, rho, step):
    assert service_level_lhs(d, rho) > service_level_lhs(d, rho + step)


@pytest.mark.parametrize("psi", [0.5, 0.9, 0.99, 0.999])
def test_single_server_threshold_exact(psi):
    assert rho_for_service_level(1, psi) == 1.0 - psi


def test_two_server_threshold():
    assert rho_for_service_level(2, 0.99) == pytest.approx((2 + math.sqrt(4 + 1600)) / 200, abs=1e-10)
    assert rho_for_service_level(2, 0.99) == pytest.approx(0.210250, abs=1e-5)


def test_three_server_threshold():
    assert rho_for_service_level(3, 0.99) == pytest.approx(polynomial_root(3, 0.99), abs=1e-10)
    assert rho_for_service_level(3, 0.99) == pytest.approx(0.6464, abs=1e-3)


@given(st.integers(2, 8), st.floats(0.5, 0.9999))
def test_threshold_matches_polynomial_root(d, psi):
    if 1.0 / (1.0 - psi) <= lhs_limit_at_one(d) * (1 + 1e-9):
        with pytest.raises(ValueError):
            rho_for_service_level(d, psi)
        return
    rho = rho_for_service_level(d, psi)
    assert 0 < rho < 1
    assert rho == pytest.approx(polynomial_root(d, psi), abs=1e-9)
    assert service_level_lhs(d, rho) == pytest.approx(1.0 / (1.0 - psi), rel=1e-8)


def test_no_root_beyond_three_servers_at_99():
    with pytest.raises(ValueError, match="no utilization"):
        rho_for_service_level(4, 0.99)


@pytest.mark.parametrize("d, psi", [(0, 0.9), (2, 0.0), (2, 1.0)])
def test_threshold_domain(d, psi):
    with pytest.raises(ValueError):
        rho_for_service_level(d, psi)


# -- tables -----------------------------------------------------------------


def test_table_examples():
    assert build_rho_table(QueueParams(service_level_psi=0.99, max_drones_per_base=1)).rho == (1 - 0.99,)
    t2 = build_rho_table(QueueParams(service_level_psi=0.99, max_drones_per_base=2))
    assert t2.rho[0] == pytest.approx(0.01, abs=1e-15)
    assert t2.rho[1] == pytest.approx(0.21025, abs=1e-5)
    assert build_rho_table(QueueParams(service_level_psi=0.5, max_drones_per_base=1)).rho == (0.5,)


@given(st.floats(0.97, 0.999), st.integers(1, 3), st.sampled_from(["printed", "erlang"]))
def test_table_invariants(psi, d_max, rule):
    t = build_rho_table(QueueParams(service_level_psi=psi, max_drones_per_base=d_max, threshold_rule=rule))
    assert t.rho[0] == 1.0 - psi
    assert all(0 < r < 1 for r in t.rho)
    assert all(a < b for a, b in zip(t.rho, t.rho[1:]))
    cap = [(d + 1) * r for d, r in enumerate(t.rho)]
    assert all(a < b for a, b in zip(cap, cap[1:]))
    assert all(inc > 0 for inc in t.load_increments())


def test_load_bounds_by_rule():
    printed = RhoTable(0.99, (0.01, 0.2, 0.6), "printed")
    erlang = RhoTable(0.99, (0.01, 0.2, 0.6), "erlang")
    assert printed.load_bound(2) == 0.2
    assert erlang.load_bound(2) == pytest.approx(0.4)
    assert sum(printed.load_increments()) == pytest.approx(0.6)
    assert sum(erlang.load_increments()) == pytest.approx(1.8)
    assert printed.load_bound(0) == 0.0


def test_queue_params_validation():
    for kw in ({"service_level_psi": 1.0}, {"service_rate_mu": 0.0}, {"max_drones_per_base": 0},
               {"threshold_rule": "other"}):
        with pytest.raises(ValueError):
            QueueParams(**kw)


# -- availability -----------------------------------------------------------


@pytest.mark.parametrize("rho", [0.01, 0.5])
def test_single_server_availability(rho):
    assert steady_state_availability(1, rho) == pytest.approx(1.0 - rho, abs=1e-12)


@given(st.integers(1, 6), st.floats(0.01, 0.95))
@settings(max_examples=40, deadline=None)
def test_availability_matches_ctmc(d, rho):
    assert steady_state_availability(d, rho) == pytest.approx(ctmc_availability(d, rho), abs=1e-8)


@given(st.integers(1, 6), st.floats(0.2, 0.97), st.floats(0.001, 0.02))
def test_availability_strictly_decreasing(d, rho, step):
    assert steady_state_availability(d, rho) > steady_state_availability(d, rho + step)


@given(st.integers(1, 8), st.floats(0.5, 0.999))
def test_exact_threshold_gives_psi(d, psi):
    rho = rho_for_availability(d, psi)
    assert steady_state_availability(d, rho) == pytest.approx(psi, abs=1e-8)


def test_printed_threshold_availability_agrees_with_ctmc():
    # the closed-form threshold is not the availability threshold for d >= 2
    for d in (2, 3):
        rho = rho_for_service_level(d, 0.99)
        assert steady_state_availability(d, rho) == pytest.approx(ctmc_availability(d, rho), abs=1e-9)
    assert steady_state_availability(2, 0.210250) == pytest.approx(0.9271, abs=1e-3)


def test_availability_domain():
    with pytest.raises(ValueError):
        steady_state_availability(2, 1.0)


# -- simulation -------------------------------------------------------------


def test_simulation_single_server():
    assert simulate_mmd(1, 0.01, 1.0, n_events=10**6, seed=1) == pytest.approx(0.99, abs=0.005)


def test_simulation_exact_threshold_two_servers():
    rho = rho_for_availability(2, 0.99)
    assert simulate_mmd(2, 2 * rho, 1.0, n_events=10**6, seed=2) == pytest.approx(0.99, abs=0.005)


def test_simulation_reproduces_ctmc_at_printed_threshold():
    rho = rho_for_service_level(2, 0.99)
    sim = simulate_mmd(2, 2 * rho, 1.0, n_events=10**6, seed=3)
    assert sim == pytest.approx(ctmc_availability(2, rho), abs=0.005)


def test_simulation_empty_system():
    assert simulate_mmd(1, 1e-6, 1.0, n_events=10**4, seed=0) == pytest.approx(1.0, abs=1e-3)


def test_simulation_deterministic():
    assert simulate_mmd(2, 1.0, 1.0, 10**4, seed=7) == simulate_mmd(2, 1.0, 1.0, 10**4, seed=7)


def test_simulation_unstable():
    with pytest.raises(ValueError, match="unstable"):
        simulate_mmd(2, 2.0, 1.0, 100)
