"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed live and again in the terminal
summary) before asserting, so a failing criterion still reports its numbers.
"""

import statistics
import time
import warnings

import numpy as np
import pytest
from acceptance_log import record
from factory import QUEUE, city_config, random_instance, worked_instance

from dronenet.io import dump_json
from dronenet.model import (
    build_irt,
    build_it_cvar,
    build_med_rt,
    build_rt_cvar,
    preprocess_sparsity,
)
from dronenet.pipeline import run_pipeline, solve_model, two_stage
from dronenet.queueing import (
    QueueParams,
    build_rho_table,
    rho_for_availability,
    rho_for_service_level,
    service_level_lhs,
    simulate_mmd,
)
from dronenet.simgen import KnnModel, kde_cv_bandwidth, knn_score, transform_times
from dronenet.solve.cvar import empirical_cvar
from dronenet.solve.oracle import CvarTarget, MeanTarget, enumerate_oracle
from dronenet.solve.runner import SolverConfig

pytestmark = pytest.mark.slow

RHO = build_rho_table(QUEUE)
N_ORACLE = 50


@pytest.fixture(scope="module")
def solver(tmp_path_factory):
    return SolverConfig(time_limit_s=300, work_dir=str(tmp_path_factory.mktemp("acceptance-runs")))


def oracle_instances():
    """Random instances with at most 5 bases and 30 demands, plus a mean target for each."""
    out = []
    for seed in range(N_ORACLE):
        si = preprocess_sparsity(random_instance(1000 + seed))
        share = np.random.default_rng(seed).uniform(0.05, 0.8)
        out.append((seed, si, share * float(si.best_improvement().mean())))
    return out


def bisect_root(d, psi):
    """Plain bisection on the service-level left-hand side, the independent reference."""
    lo, hi = 1e-12, 1.0 - 1e-12
    target = 1.0 / (1.0 - psi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if service_level_lhs(d, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# 1 -------------------------------------------------------------------------


def test_criterion_01_queueing_closed_form():
    t0 = time.perf_counter()
    errs = []
    for psi in (0.5, 0.9, 0.99, 0.999):
        errs.append(abs(rho_for_service_level(1, psi) - (1 - psi)))
    exact_d1 = all(e <= 1e-15 for e in errs)
    r2, r3 = rho_for_service_level(2, 0.99), rho_for_service_level(3, 0.99)
    ok2 = abs(r2 - 0.210250) <= 1e-5 and abs(r2 - bisect_root(2, 0.99)) <= 1e-10
    ok3 = abs(r3 - 0.6464) <= 1e-3 and abs(r3 - bisect_root(3, 0.99)) <= 1e-10
    elapsed = time.perf_counter() - t0
    ok = exact_d1 and ok2 and ok3 and elapsed < 1.0
    record(1, ok, f"d=1 max err {max(errs):.1e}; rho2={r2:.8f}; rho3={r3:.6f}; {elapsed:.3f}s")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_02_simulated_availability():
    t0 = time.perf_counter()
    mu = 1.0
    table = build_rho_table(QueueParams(service_rate_mu=mu, service_level_psi=0.99, max_drones_per_base=3))
    measured = {}
    for d in (1, 2, 3):
        rho = table.rho[d - 1]
        measured[d] = simulate_mmd(d, d * rho * mu, mu, n_events=1_000_000, seed=d, warmup=10_000)
    elapsed = time.perf_counter() - t0
    ok = all(abs(a - 0.99) <= 0.005 for a in measured.values()) and elapsed < 30.0
    shown = ", ".join(f"d={d}: {a:.4f}" for d, a in measured.items())
    exact = ", ".join(f"{rho_for_availability(d, 0.99):.5f}" for d in (1, 2, 3))
    record(2, ok, f"availability at threshold load {shown}; {elapsed:.1f}s "
                  f"(thresholds giving 0.99 exactly: {exact})")
    assert ok


# 3 -------------------------------------------------------------------------


def test_criterion_03_oracle_equivalence(solver):
    t0 = time.perf_counter()
    mismatches = []
    checked = 0
    drones = []
    for seed, si, gamma in oracle_instances():
        ref = enumerate_oracle(si, MeanTarget(gamma), RHO)
        out = two_stage(si, RHO, solver, mode="mean", gamma=gamma)
        checked += 1
        if not ref.feasible:
            if out.status != "infeasible":
                mismatches.append((seed, "mean", "feasibility"))
            continue
        drones.append(ref.drone_count)
        if out.p_star != ref.drone_count or abs(out.stage2_value - ref.stage2_value) > 1e-6:
            mismatches.append((seed, "mean", out.p_star, ref.drone_count, out.stage2_value, ref.stage2_value))
    for seed, si, _ in oracle_instances()[:20]:
        reduction = np.random.default_rng(seed + 7).uniform(0.05, 0.4)
        gamma90 = (1 - reduction) * si.baseline_p90_cvar
        ref = enumerate_oracle(si, CvarTarget(gamma90, 0.9), RHO)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = two_stage(si, RHO, solver, mode="cvar", reduction=reduction, beta=0.9)
        checked += 1
        if not ref.feasible:
            if out.status != "infeasible":
                mismatches.append((seed, "cvar", "feasibility"))
            continue
        if out.p_star != ref.drone_count or abs(out.stage2_value - ref.stage2_value) > 1e-6:
            mismatches.append((seed, "cvar", out.p_star, ref.drone_count, out.stage2_value, ref.stage2_value))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 600
    record(3, ok, f"{checked} instance/target pairs (mean-target P* from {min(drones)} to {max(drones)}), "
                  f"{len(mismatches)} mismatches; {elapsed:.1f}s")
    assert ok, mismatches


# 4 -------------------------------------------------------------------------


def test_criterion_04_response_and_improvement_models_agree(solver):
    diffs = []
    statuses = []
    for seed, si, gamma in oracle_instances():
        a, _ = solve_model(build_med_rt(si, gamma, RHO), solver)
        b, _ = solve_model(build_irt(si, gamma, RHO), solver)
        statuses.append((a.status, b.status))
        if a.status != b.status:
            diffs.append((seed, a.status, b.status))
        elif a.status == "optimal" and abs(a.objective - b.objective) > 1e-9:
            diffs.append((seed, a.objective, b.objective))
    n_opt = sum(1 for s in statuses if s == ("optimal", "optimal"))
    ok = not diffs and len(statuses) >= 50
    record(4, ok, f"{len(statuses)} instances ({n_opt} optimal), {len(diffs)} disagreements")
    assert ok, diffs


# 5 -------------------------------------------------------------------------


def timed_solve(inst, gamma, dense, solver, rho):
    t0 = time.perf_counter()
    si = preprocess_sparsity(inst, dense=dense)
    res, _ = solve_model(build_med_rt(si, gamma, rho), solver)
    return res, time.perf_counter() - t0


def test_criterion_05_sparsity_invariance(solver):
    big = QueueParams(service_rate_mu=40.0, service_level_psi=0.99, max_drones_per_base=3)
    rho = build_rho_table(big)
    diffs, t_sparse, t_dense, sizes = [], [], [], []
    for seed in range(20):
        inst = random_instance(5000 + seed, n_bases=10, n_demands=120, queue=big)
        sparse = preprocess_sparsity(inst)
        gamma = 0.5 * float(sparse.best_improvement().mean())
        res_d, td = timed_solve(inst, gamma, True, solver, rho)
        res_s, ts = timed_solve(inst, gamma, False, solver, rho)
        sizes.append((sparse.n_pairs, inst.n_bases * inst.n_demands))
        t_sparse.append(ts)
        t_dense.append(td)
        if res_s.status != res_d.status or (res_s.status == "optimal" and abs(res_s.objective - res_d.objective) > 1e-9):
            diffs.append((seed, res_s.status, res_d.status, res_s.objective, res_d.objective))
    ms, md = statistics.median(t_sparse), statistics.median(t_dense)
    kept = sum(s for s, _ in sizes) / sum(a for _, a in sizes)
    ok = not diffs and ms <= md
    record(5, ok, f"20 instances, {len(diffs)} optimum mismatches; kept {kept:.0%} of pairs; "
                  f"median build+solve sparse {ms:.3f}s vs dense {md:.3f}s ({(1 - ms / md):+.1%} saved)")
    assert ok, diffs


# 6 -------------------------------------------------------------------------


def test_criterion_06_improvement_tail_bounds_response_tail(solver):
    violations, compared, infeasible_pairs = [], 0, 0
    for beta in (0.1, 0.25, 0.5):
        for seed in range(20):
            si = preprocess_sparsity(random_instance(7000 + seed), beta=beta)
            gamma = np.random.default_rng(seed).uniform(0.1, 0.6) * float(si.best_improvement().mean())
            gamma90 = empirical_cvar(si.baseline, beta) - gamma
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                it, _ = solve_model(build_it_cvar(si, gamma, beta, RHO), solver)
                rt, _ = solve_model(build_rt_cvar(si, gamma90, beta, RHO), solver)
            if it.status == "infeasible":
                infeasible_pairs += 1
                continue
            compared += 1
            if rt.status != "optimal" or it.objective < rt.objective - 1e-9:
                violations.append((beta, seed, it.objective, rt.status, rt.objective))
    ok = not violations and compared >= 20
    record(6, ok, f"{compared} feasible pairs over beta in (0.1, 0.25, 0.5) "
                  f"({infeasible_pairs} improvement-tail infeasible), {len(violations)} violations")
    assert ok, violations


# 7 -------------------------------------------------------------------------


def sort_tail_mean(s, beta):
    desc = np.sort(s)[::-1]
    mass = (1 - beta) * len(s)
    w = np.clip(mass - np.arange(len(s)), 0.0, 1.0)
    return float((w * desc).sum() / mass)


def grid_minimum(s, beta):
    c = 1.0 / ((1 - beta) * len(s))
    return min(a + c * np.maximum(s - a, 0.0).sum() for a in np.unique(s))


def test_criterion_07_cvar_oracles():
    rng = np.random.default_rng(77)
    worst_sort = worst_grid = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        s = rng.lognormal(6, 0.5, n)
        beta = float(rng.choice([0.0, 0.1, 0.5, 0.9, rng.uniform(0, 0.99)]))
        v = empirical_cvar(s, beta)
        worst_sort = max(worst_sort, abs(v - sort_tail_mean(s, beta)))
        worst_grid = max(worst_grid, abs(v - grid_minimum(s, beta)))
    ok = worst_sort <= 1e-9 and worst_grid <= 1e-6
    record(7, ok, f"1000 samples: max |closed form - sorted tail| {worst_sort:.1e}, "
                  f"max |closed form - alpha grid| {worst_grid:.1e}")
    assert ok


# 8 -------------------------------------------------------------------------


def test_criterion_08_pipeline_guarantees(solver, tmp_path):
    runs, failures = 0, []
    for seed, si, gamma in oracle_instances():
        for mode, kw in (("mean", {"gamma": gamma}), ("cvar", {"reduction": 0.3 * (seed % 3) / 2})):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = two_stage(si, RHO, solver, mode=mode, **kw)
            if not out.solved:
                continue
            runs += 1
            realized = out.design.realized_response(si)
            if mode == "mean":
                met = out.stage2_value >= gamma - 1e-6 and out.design.mean_improvement(si) >= gamma - 1e-6
            else:
                g90 = out.target["gamma90_s"]
                met = out.stage2_value <= g90 + 1e-6 and empirical_cvar(realized, 0.9) <= g90 + 1e-6
            if not met or (realized > si.baseline + 1e-6).any():
                failures.append((seed, mode))
    for mode, kw in (("mean", {"gamma": 90.0}), ("cvar", {"reduction": 0.25})):
        res = run_pipeline(city_config(tmp_path / mode, **{"mode": mode, **kw}))
        runs += 1
        ev = res.train_evaluation
        if not res.report["stage2"]["target_met"] or (ev.optimized_seconds > ev.baseline_seconds).any():
            failures.append(("city", mode))
        for m in res.report["evaluation"]["test_sets"]:
            if m["optimized_mean_s"] > m["baseline_mean_s"] or m["optimized_p90_s"] > m["baseline_p90_s"]:
                failures.append(("city-test", mode))
    ok = not failures and runs > 0
    record(8, ok, f"{runs} solved runs, {len(failures)} with a missed target or a slower demand")
    assert ok, failures


# 9 -------------------------------------------------------------------------


def test_criterion_09_worked_instance(solver):
    inst = worked_instance()
    out = two_stage(preprocess_sparsity(inst), build_rho_table(inst.queue), solver, mode="mean", gamma=200.0)
    ids = {inst.base_ids[i]: d for i, d in out.design.drones_per_base.items() if d}
    ok = out.p_star == 2 and ids == {"A": 2} and abs(out.stage2_value - 1000 / 3) <= 0.01
    record(9, ok, f"P*={out.p_star}, design {ids}, stage-two mean improvement {out.stage2_value:.6f}s")
    assert ok


# 10 ------------------------------------------------------------------------


def test_criterion_10_simgen():
    n, sigma = 300, 1000.0
    matched = sigma * n ** (-1 / 6)
    grid = [matched / 30, matched, matched * 30]
    wins = sum(
        kde_cv_bandwidth(np.random.default_rng(s).normal(0, sigma, (n, 2)), grid, seed=s) == matched
        for s in range(20)
    )
    rng = np.random.default_rng(3)
    hist = rng.uniform(200, 900, 50)
    model = KnnModel(rng.uniform(0, 1e4, (50, 2)), hist, k=5, shift_a=0.0, dispersion_b=1.0)
    identity = bool(np.allclose(transform_times(hist, model), hist, rtol=0, atol=1e-12))
    cases = [np.arange(1.0, 11.0), rng.uniform(0, 500, 40), np.full(7, 300.0)]
    zero_when_equal = all(knn_score(c, c) == 0.0 for c in cases)
    positive_otherwise = all(knn_score(c + 1e-3, c) > 0 for c in cases)
    for c in cases:
        bumped = c.copy()
        bumped[0] += 10.0
        positive_otherwise = positive_otherwise and knn_score(bumped, c) > 0
    ok = wins >= 15 and identity and zero_when_equal and positive_otherwise
    record(10, ok, f"KDE matched bandwidth chosen {wins}/20; transform identity {identity}; "
                   f"score zero iff equal {zero_when_equal and positive_otherwise}")
    assert ok


# 11 ------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    cfg = city_config(tmp_path / "a", mode="cvar", reduction=0.2)
    a = dump_json(run_pipeline(cfg).report)
    other = city_config(tmp_path / "b", mode="cvar", reduction=0.2)
    b = dump_json(run_pipeline(other).report)
    ok = a == b
    record(11, ok, f"two runs, report JSON {len(a)} bytes, byte-identical {ok}")
    assert ok
