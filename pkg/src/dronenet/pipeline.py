"""The two-stage design pipeline, out-of-sample evaluation and parameter sweeps.

Stage one finds the fewest drones meeting a response-time target; stage two
fixes that drone total and optimises response time.  When several stage-two
designs tie, a third solve keeps the stage-two value and opens as few bases
as possible.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .io import Incidents, Stations, read_incidents, read_incident_table, read_stations
from .model import (
    MilpModel,
    NetworkDesign,
    SparseInstance,
    build_irt,
    build_it_cvar,
    build_rt_cvar,
    build_stage2_cvar,
    build_stage2_mean,
    extract_design,
    fewest_bases,
    fix_drones,
    max_mean_improvement,
    preprocess_sparsity,
)
from .queueing import QueueParams, RhoTable, build_rho_table
from .simgen import DAYS_PER_YEAR, SimModels, fit_sim_models, nearest_rank, param_grid
from .solve.cvar import empirical_cvar
from .solve.lpfile import max_violation, write_lp
from .solve.runner import SolveResult, SolverConfig, invoke_solver, run_key
from .travel import DemandPoint, DroneSpec, PlanarPoint, build_instance, response_matrix

log = logging.getLogger(__name__)

SOLUTION_TOL = 1e-5
REFINE_RTOL = 1e-6
FALLBACK_STEPS = 6
SEED_STREAM_TRAIN = 1
SEED_STREAM_TEST = 2
SEED_STREAM_FIT = 3


class InputError(ValueError):
    """Bad input data or settings (maps to exit code 4)."""


# -- solving ----------------------------------------------------------------


@dataclass(frozen=True)
class SolverRun:
    model: str
    status: str
    run: str  # content hash naming the run directory
    wall_time: float = field(default=0.0, compare=False)


def solve_model(model: MilpModel, solver: SolverConfig) -> tuple[SolveResult, SolverRun]:
    """Serialise, solve and sanity-check one model.

    A returned point violating the model by more than ``SOLUTION_TOL`` is
    reported as ``status="error"`` rather than trusted.
    """
    lp = write_lp(model)
    res = invoke_solver(lp, solver)
    if res.variable_values:
        viol = max_violation(model, dict(res.variable_values))
        if viol > SOLUTION_TOL:
            res = dataclasses.replace(
                res, status="error", message=f"solver point violates the model by {viol:.3g}"
            )
    return res, SolverRun(model.name, res.status, run_key(lp, solver), res.wall_time)


@dataclass
class StageOutcome:
    status: str  # optimal | infeasible | time_limit | error
    target: dict
    stage1_model: str
    p_star: int | None = None
    design: NetworkDesign | None = None
    stage1_objective: float | None = None
    stage2_value: float | None = None
    runs: list[SolverRun] = field(default_factory=list)
    message: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def solved(self) -> bool:
        return self.design is not None


def stage1_model(si: SparseInstance, rho_table: RhoTable, mode: str, gamma: float, reduction: float,
                 beta: float, zeta: float, cvar_stage1: str = "response") -> tuple[MilpModel, dict]:
    """The stage-one model and a description of its target."""
    if mode == "mean":
        return build_irt(si, gamma, rho_table, zeta), {"kind": "mean_improvement", "gamma_s": gamma}
    base = empirical_cvar(si.baseline, beta)
    gamma90 = (1.0 - reduction) * base
    target = {"kind": "cvar_response", "beta": beta, "reduction": reduction,
              "baseline_cvar_s": base, "gamma90_s": gamma90}
    if cvar_stage1 == "improvement":
        target["improvement_gamma_s"] = base - gamma90
        return build_it_cvar(si, base - gamma90, beta, rho_table, zeta), target
    return build_rt_cvar(si, gamma90, beta, rho_table, zeta), target


def two_stage(
    si: SparseInstance,
    rho_table: RhoTable,
    solver: SolverConfig,
    mode: str = "mean",
    gamma: float = 0.0,
    reduction: float = 0.0,
    beta: float = 0.9,
    zeta: float = 1.0,
    cvar_stage1: str = "response",
    refine_bases: bool = True,
) -> StageOutcome:
    m1, target = stage1_model(si, rho_table, mode, gamma, reduction, beta, zeta, cvar_stage1)
    out = StageOutcome("error", target, m1.name)
    if mode == "mean" and gamma > max_mean_improvement(si) + 1e-9:
        out.notes.append("target exceeds the best achievable mean improvement")

    res1, run1 = solve_model(m1, solver)
    out.runs.append(run1)
    if res1.status != "optimal" and not (res1.status == "time_limit" and res1.variable_values):
        out.status, out.message = res1.status, res1.message
        return out
    d1 = extract_design(m1, dict(res1.variable_values), res1.objective)
    out.p_star = d1.drone_count
    out.stage1_objective = res1.objective
    if res1.status == "time_limit":
        out.notes.append("stage one stopped at the time limit; drone count is an upper bound")

    m2 = build_stage2_mean(si, out.p_star, rho_table) if mode == "mean" else build_stage2_cvar(si, out.p_star, beta, rho_table)
    res2, run2 = solve_model(m2, solver)
    out.runs.append(run2)
    if not res2.variable_values:
        out.status, out.message = res2.status if res2.status != "optimal" else "error", res2.message
        return out
    value = float(res2.objective)
    design = extract_design(m2, dict(res2.variable_values), value)
    if refine_bases and out.p_star > 0:
        m3 = fewest_bases(m2, value, REFINE_RTOL * max(1.0, abs(value)))
        res3, run3 = solve_model(m3, solver)
        out.runs.append(run3)
        if res3.status == "optimal":
            design = extract_design(m3, dict(res3.variable_values), value)
        else:
            out.notes.append(f"base refinement returned {res3.status}; kept the stage-two design")
    design.objective_value = out.stage1_objective
    design.stage2_value = value
    out.design = design
    out.stage2_value = value
    worst = "optimal"
    for r in (res1, res2):
        if r.status == "time_limit":
            worst = "time_limit"
    out.status = worst
    full = [i for i, d in design.drones_per_base.items() if d >= rho_table.d_max]
    if full:
        out.notes.append(f"{len(full)} base(s) hold the maximum of {rho_table.d_max} drones; consider a larger D_max")
    return out


def stage1_feasible(si, rho_table, solver, **kw) -> bool | None:
    m1, _ = stage1_model(si, rho_table, **kw)
    res, _ = solve_model(m1, solver)
    if res.status == "optimal":
        return True
    if res.status == "infeasible":
        return False
    return None


def largest_feasible_reduction(si, rho_table, solver, reduction, beta, zeta, cvar_stage1, steps=FALLBACK_STEPS) -> float:
    """Bisection on ``[0, reduction]`` for the largest tail reduction stage one can meet."""
    lo, hi = 0.0, reduction
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        ok = stage1_feasible(si, rho_table, solver, mode="cvar", gamma=0.0, reduction=mid, beta=beta,
                             zeta=zeta, cvar_stage1=cvar_stage1)
        if ok is None:
            break
        if ok:
            lo = mid
        else:
            hi = mid
    return lo


# -- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class Evaluation:
    rule: str
    baseline_seconds: np.ndarray = field(repr=False)
    optimized_seconds: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.baseline_seconds.size)

    def metrics(self) -> dict:
        b, o = self.baseline_seconds, self.optimized_seconds
        if b.size == 0:
            return {"n": 0, "baseline_mean_s": None, "optimized_mean_s": None, "baseline_p90_s": None,
                    "optimized_p90_s": None, "mean_improvement_s": None, "p90_improvement_s": None}
        bm, om = float(b.mean()), float(o.mean())
        bp, op = nearest_rank(b, 0.9), nearest_rank(o, 0.9)
        return {"n": self.n, "baseline_mean_s": bm, "optimized_mean_s": om, "baseline_p90_s": bp,
                "optimized_p90_s": op, "mean_improvement_s": bm - om, "p90_improvement_s": bp - op}


def evaluate_network(
    drones_per_base: dict[int, int],
    bases: Sequence[PlanarPoint],
    demands: Sequence[DemandPoint],
    spec: DroneSpec,
    rule: str = "nearest",
    rho_table: RhoTable | None = None,
    arrival_scale_f: float | None = None,
    service_rate_mu: float | None = None,
    solver: SolverConfig | None = None,
) -> Evaluation:
    """Response time per demand under a fixed design.

    ``nearest``: the faster of the baseline and the nearest open base, with no
    capacity limit.  ``resolve``: the assignment LP with the design's queueing
    capacities, which needs the rho table, arrival scale, service rate and
    solver.
    """
    b = np.array([d.baseline_seconds for d in demands], dtype=float)
    if not demands:
        return Evaluation(rule, b, b.copy())
    open_idx = sorted(i for i, d in drones_per_base.items() if d > 0)
    if rule == "nearest":
        if not open_idx:
            return Evaluation(rule, b, b.copy())
        r = response_matrix([bases[i] for i in open_idx], [d.location for d in demands], spec)
        return Evaluation(rule, b, np.minimum(b, r.min(axis=0)))
    if rule != "resolve":
        raise ValueError(f"unknown evaluation rule {rule!r}")
    if rho_table is None or arrival_scale_f is None or service_rate_mu is None or solver is None:
        raise ValueError("resolve evaluation needs rho_table, arrival_scale_f, service_rate_mu and solver")
    queue = QueueParams(service_rate_mu=service_rate_mu, service_level_psi=rho_table.psi,
                        max_drones_per_base=rho_table.d_max, threshold_rule=rho_table.rule)
    inst = build_instance(list(bases), list(demands), spec, arrival_scale_f, queue)
    si = preprocess_sparsity(inst)
    total = int(sum(drones_per_base.values()))
    model = fix_drones(build_stage2_mean(si, total, rho_table), drones_per_base)
    res, _ = solve_model(model, solver)
    if res.status != "optimal":
        raise RuntimeError(f"re-solved evaluation returned {res.status}: {res.message}")
    design = extract_design(model, dict(res.variable_values))
    return Evaluation(rule, b, np.minimum(b, design.realized_response(si)))


def distribution(values: Sequence[float]) -> dict | None:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None
    return {"n": int(v.size), "mean": float(v.mean()), "min": float(v.min()),
            "p10": nearest_rank(v, 0.1), "median": nearest_rank(v, 0.5), "p90": nearest_rank(v, 0.9),
            "max": float(v.max())}


# -- full runs --------------------------------------------------------------


def seed_for(seed: int, stream: int, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stream, index])


@dataclass
class PipelineResult:
    report: dict
    stations: Stations
    train_demands: tuple[DemandPoint, ...]
    outcome: StageOutcome | None
    train_evaluation: Evaluation | None
    timings: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return self.report["status"]


def fit_generators(config: RunConfig, locs, times) -> SimModels:
    sim = config.simulation
    try:
        return fit_sim_models(
            locs, times, sim.bandwidth_grid, param_grid(sim.knn_k, sim.knn_a, sim.knn_b),
            sim.folds, seed_for(config.seed, SEED_STREAM_FIT), sim.ratio,
        )
    except ValueError as exc:
        raise InputError(f"cannot fit the incident generators: {exc}") from exc


def _load_inputs(config: RunConfig, need_models: bool):
    data = config.data
    if not data.stations:
        raise InputError("a stations file is required")
    stations = read_stations(data.stations)
    incidents: Incidents | None = None
    if data.incidents:
        incidents = read_incidents(data.incidents, data.missing_baseline, data.impute_k)
    models = None
    if data.historical:
        locs, times, _ = read_incident_table(data.historical)
        keep = ~np.isnan(times)
        locs, times = locs[keep], times[keep]
    elif incidents is not None:
        locs = np.array([[d.location.x, d.location.y] for d in incidents.demands])
        times = np.array([d.baseline_seconds for d in incidents.demands])
    else:
        raise InputError("need an incidents file or a historical file to simulate from")
    fit_rows = int(times.size)
    if need_models or incidents is None:
        models = fit_generators(config, locs, times)
    return stations, incidents, models, fit_rows


def run_pipeline(config: RunConfig, evaluate_tests: bool = True) -> PipelineResult:
    """Load data, solve both stages, evaluate on training and simulated test years."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    sim = config.simulation
    obj = config.objective
    n_tests = sim.test_sets if evaluate_tests else 0
    stations, incidents, models, fit_rows = _load_inputs(config, need_models=n_tests > 0)
    annual = sim.annual_confirmed if sim.annual_confirmed is not None else fit_rows
    horizon = DAYS_PER_YEAR / sim.multiplier
    f = 1.0 / horizon

    if incidents is not None:
        train = incidents.demands
        source = "incidents"
    else:
        train = models.year(annual, sim.multiplier, seed_for(config.seed, SEED_STREAM_TRAIN), sim.time_floor_s).incidents
        source = "simulated"
    if not train:
        raise InputError("no training demand points")

    try:
        rho_table = build_rho_table(config.queue)
        instance = build_instance(list(stations.points), list(train), config.drone, f, config.queue, stations.ids)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    si = preprocess_sparsity(instance, beta=obj.beta)
    timings["prepare_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    kwargs = dict(mode=obj.mode, gamma=obj.gamma, reduction=obj.reduction, beta=obj.beta, zeta=obj.zeta,
                  cvar_stage1=obj.cvar_stage1, refine_bases=obj.refine_bases)
    outcome = two_stage(si, rho_table, config.solver, **kwargs)
    fallback = None
    if outcome.status == "infeasible" and obj.mode == "cvar" and obj.infeasible_fallback:
        fallback = largest_feasible_reduction(si, rho_table, config.solver, obj.reduction, obj.beta, obj.zeta,
                                              obj.cvar_stage1)
        kwargs["reduction"] = fallback
        first_runs = outcome.runs
        outcome = two_stage(si, rho_table, config.solver, **kwargs)
        outcome.runs = first_runs + outcome.runs
        outcome.notes.append(f"requested reduction {obj.reduction:g} infeasible; fell back to {fallback:g}")
    timings["solve_s"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    evaluation = None
    train_eval = None
    if outcome.solved:
        ev_kw = dict(spec=config.drone, rule=config.evaluation_rule, rho_table=rho_table, arrival_scale_f=f,
                     service_rate_mu=config.queue.service_rate_mu, solver=config.solver)
        train_eval = evaluate_network(outcome.design.drones_per_base, stations.points, train, **ev_kw)

        def one_test(k: int) -> dict:
            year = models.year(annual, sim.multiplier, seed_for(config.seed, SEED_STREAM_TEST, k), sim.time_floor_s)
            return evaluate_network(outcome.design.drones_per_base, stations.points, year.incidents, **ev_kw).metrics()

        if n_tests:
            if config.workers > 1:
                with ThreadPoolExecutor(config.workers) as pool:
                    tests = list(pool.map(one_test, range(n_tests)))
            else:
                tests = [one_test(k) for k in range(n_tests)]
        else:
            tests = []
        evaluation = {
            "rule": config.evaluation_rule,
            "train": train_eval.metrics(),
            "test_sets": tests,
            "improvement_distribution": {
                "mean_improvement_s": distribution([t["mean_improvement_s"] for t in tests]),
                "p90_improvement_s": distribution([t["p90_improvement_s"] for t in tests]),
            },
        }
    timings["evaluate_s"] = time.perf_counter() - t2

    report = build_report(config, stations, si, rho_table, outcome, evaluation, models, source, incidents,
                          horizon, fallback)
    return PipelineResult(report, stations, tuple(train), outcome, train_eval, timings)


def build_report(config, stations, si, rho_table, outcome, evaluation, models, source, incidents, horizon,
                 fallback) -> dict:
    obj = config.objective
    stage1 = stage2 = None
    if outcome.solved:
        design = outcome.design
        per_base = {stations.ids[i]: int(d) for i, d in sorted(design.drones_per_base.items()) if d > 0}
        stage1 = {
            "drone_count": outcome.p_star,
            "objective": outcome.stage1_objective,
            "bases_opened": sorted(per_base),
            "drones_per_base": per_base,
        }
        realized = design.realized_response(si)
        stage2 = {
            "kind": "mean_improvement_s" if obj.mode == "mean" else "cvar_response_s",
            "value": outcome.stage2_value,
            "target_met": _target_met(outcome, obj.mode),
            "model_mean_response_s": float(realized.mean()),
            "model_cvar_response_s": empirical_cvar(realized, obj.beta),
            "base_loads_per_day": {stations.ids[i]: v for i, v in sorted(design.base_loads(si).items())},
        }
    report = {
        "status": outcome.status,
        "message": outcome.message,
        "notes": outcome.notes,
        "objective": {
            "mode": obj.mode,
            "gamma_s": obj.gamma if obj.mode == "mean" else None,
            "reduction": obj.reduction if obj.mode == "cvar" else None,
            "fallback_reduction": fallback,
            "beta": obj.beta,
            "zeta": obj.zeta,
            "stage1_model": outcome.stage1_model,
            "target": outcome.target,
        },
        "stage1": stage1,
        "stage2": stage2,
        "evaluation": evaluation,
        "instance": {
            "n_bases": si.n_bases,
            "n_demands": si.n_demands,
            "kept_pairs": si.n_pairs,
            "all_pairs": si.n_bases * si.n_demands,
            "arrival_scale_per_day": 1.0 / horizon,
            "horizon_days": horizon,
            "baseline_mean_s": si.baseline_mean,
            "baseline_p90_s": nearest_rank(si.baseline, 0.9),
            "baseline_cvar_s": si.baseline_p90_cvar,
            "queue": {
                "mu_per_day": config.queue.service_rate_mu,
                "psi": rho_table.psi,
                "d_max": rho_table.d_max,
                "threshold_rule": rho_table.rule,
                "rho": list(rho_table.rho),
                "load_bound_per_day": [config.queue.service_rate_mu * rho_table.load_bound(d)
                                       for d in range(1, rho_table.d_max + 1)],
            },
        },
        "data": {
            "training_source": source,
            "dropped_rows": list(incidents.dropped_rows) if incidents else [],
            "imputed_rows": list(incidents.imputed_rows) if incidents else [],
        },
        "simulation": None if models is None else {
            "bandwidth_m": models.kde.bandwidth_b,
            "knn": {"k": models.knn.k, "a": models.knn.shift_a, "b": models.knn.dispersion_b,
                    "ratio": models.knn.ratio},
            "fold_of": list(models.fold_of),
            "multiplier": config.simulation.multiplier,
        },
        "meta": {
            "version": __version__,
            "seed": config.seed,
            "config_hash": config.config_hash(),
            "solver_runs": [{"model": r.model, "status": r.status, "run": r.run} for r in outcome.runs],
        },
    }
    return _clean(report)


def _target_met(outcome: StageOutcome, mode: str, tol: float = 1e-6) -> bool:
    t = outcome.target
    if mode == "mean":
        return outcome.stage2_value >= t["gamma_s"] - tol
    return outcome.stage2_value <= t["gamma90_s"] + tol


def _clean(obj):
    """Plain JSON types; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- sweeps -----------------------------------------------------------------

SWEEP_AXES = ("gamma", "reduction", "multiplier", "zeta")


@dataclass(frozen=True)
class SweepCell:
    axis: str
    value: float
    status: str
    drones: int | None = None
    bases: int | None = None
    stage2_value: float | None = None
    error: str | None = None


def _apply_axis(config: RunConfig, axis: str, value: float) -> RunConfig:
    if axis in ("gamma", "reduction", "zeta"):
        return config.with_objective(**{axis: value})
    if axis == "multiplier":
        return config.with_simulation(multiplier=value)
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


def sweep(config: RunConfig, axis: str, values: Sequence[float], evaluate_tests: bool = False) -> list[SweepCell]:
    """One independent pipeline run per value; a failing cell is recorded and the sweep continues."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")

    def cell(value: float) -> SweepCell:
        try:
            res = run_pipeline(_apply_axis(config, axis, float(value)), evaluate_tests=evaluate_tests)
        except Exception as exc:  # recorded per cell
            log.warning("sweep cell %s=%s failed: %s", axis, value, exc)
            return SweepCell(axis, float(value), "error", error=f"{type(exc).__name__}: {exc}")
        s1 = res.report["stage1"]
        if s1 is None:
            return SweepCell(axis, float(value), res.status, error=res.report["message"] or None)
        return SweepCell(axis, float(value), res.status, s1["drone_count"], len(s1["bases_opened"]),
                         res.report["stage2"]["value"])

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            return list(pool.map(cell, values))
    return [cell(v) for v in values]
