"""Command-line entry point: ``dronenet {simulate,solve,evaluate,sweep,oracle}``.

Exit codes: 0 success, 2 infeasible target, 3 solver failure, 4 bad input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, TEMPLATE, load_config
from .io import SchemaError, dump_json, emit_outputs, read_incident_table, read_incidents, read_stations, write_year_csv
from .model import preprocess_sparsity
from .pipeline import (
    SEED_STREAM_TEST,
    SWEEP_AXES,
    InputError,
    evaluate_network,
    fit_generators,
    run_pipeline,
    seed_for,
    sweep,
)
from .queueing import QueueParams, build_rho_table
from .simgen import DAYS_PER_YEAR
from .solve.oracle import CvarTarget, MeanTarget, OracleSizeError, enumerate_oracle
from .solve.runner import SolverError
from .travel import DemandPoint, Instance, PlanarPoint, build_instance

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_INPUT = 4

log = logging.getLogger("dronenet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--stations", help="stations CSV (id,x_m,y_m,kind)")
    p.add_argument("--incidents", help="incidents CSV (x_m,y_m,baseline_s)")
    p.add_argument("--historical", help="historical incidents CSV used to fit the generators")
    p.add_argument("--mode", choices=("mean", "cvar"))
    p.add_argument("--gamma", type=float, help="target mean improvement, seconds")
    p.add_argument("--reduction", type=float, help="target reduction of the tail mean, fraction")
    p.add_argument("--beta", type=float, help="tail level (default 0.9)")
    p.add_argument("--zeta", type=float, help="drones-versus-bases weight (default 1.0)")
    p.add_argument("--multiplier", type=float, help="suspected-call-volume multiplier (default 5)")
    p.add_argument("--solver-cmd", help="solver argument template with {lp} and {sol}")
    p.add_argument("--dialect", choices=("cbc", "highs"), help="solution file dialect")
    p.add_argument("--time-limit", type=float, help="solver time limit, seconds")
    p.add_argument("--test-sets", type=int, help="number of simulated test years")
    p.add_argument("--eval-rule", choices=("nearest", "resolve"))
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dronenet", description="Drone network design for emergency response.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="fit the incident generators and write synthetic years")
    _common(p)
    p.add_argument("--years", type=int, default=1, help="number of synthetic years to write")
    p.add_argument("--annual", type=int, help="confirmed incidents per year (default: size of the fitting data)")

    p = sub.add_parser("solve", help="run the two-stage design pipeline")
    _common(p)
    p.add_argument("--crs", help="CRS name recorded in the GeoJSON, e.g. EPSG:32617")

    p = sub.add_parser("evaluate", help="score an existing design on an incident file")
    _common(p)
    p.add_argument("--design", required=True, help="report.json from `solve`, or a JSON object {station_id: drones}")

    p = sub.add_parser("sweep", help="repeat the pipeline across values of one parameter")
    _common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="space- or comma-separated values")
    p.add_argument("--with-tests", action="store_true", help="also evaluate simulated test years per cell")

    p = sub.add_parser("oracle", help="exhaustive optimum for a small instance")
    _common(p)
    p.add_argument("--worked-example", action="store_true", help="the two-base, three-demand example")

    sub.add_parser("template", help="print a configuration template")
    return parser


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config)
    data = cfg.data
    paths = {k: getattr(args, k) for k in ("stations", "incidents", "historical") if getattr(args, k)}
    if paths:
        data = dataclasses.replace(data, **paths)
    obj = {k: getattr(args, k) for k in ("mode", "gamma", "reduction", "beta", "zeta") if getattr(args, k) is not None}
    sim = {}
    if args.multiplier is not None:
        sim["multiplier"] = args.multiplier
    if args.test_sets is not None:
        sim["test_sets"] = args.test_sets
    solver = {}
    if args.solver_cmd:
        solver["solver_command"] = tuple(shlex.split(args.solver_cmd))
    if args.dialect:
        solver["dialect"] = args.dialect
    if args.time_limit is not None:
        solver["time_limit_s"] = args.time_limit
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out:
        top["out"] = args.out
    if args.eval_rule:
        top["evaluation_rule"] = args.eval_rule
    if args.workers is not None:
        top["workers"] = args.workers
    try:
        return dataclasses.replace(
            cfg,
            data=data,
            objective=dataclasses.replace(cfg.objective, **obj),
            simulation=dataclasses.replace(cfg.simulation, **sim),
            solver=dataclasses.replace(cfg.solver, **solver),
            **top,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _status_code(status: str) -> int:
    return {"optimal": EXIT_OK, "infeasible": EXIT_INFEASIBLE}.get(status, EXIT_SOLVER)


# -- subcommands ------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> int:
    source = cfg.data.historical or cfg.data.incidents
    if not source:
        raise InputError("simulate needs --historical or --incidents")
    locs, times, _ = read_incident_table(source)
    keep = ~np.isnan(times)
    sim = cfg.simulation
    models = fit_generators(cfg, locs[keep], times[keep])
    annual = args.annual if args.annual is not None else (sim.annual_confirmed or int(keep.sum()))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.years):
        year = models.year(annual, sim.multiplier, seed_for(cfg.seed, SEED_STREAM_TEST, k), sim.time_floor_s)
        write_year_csv(year, out / f"year_{k:03d}.csv")
    summary = {
        "bandwidth_m": models.kde.bandwidth_b,
        "knn": {"k": models.knn.k, "a": models.knn.shift_a, "b": models.knn.dispersion_b, "ratio": models.knn.ratio},
        "annual_confirmed": annual,
        "multiplier": sim.multiplier,
        "horizon_days": DAYS_PER_YEAR / sim.multiplier,
        "years": args.years,
        "seed": cfg.seed,
        "fold_of": list(models.fold_of),
    }
    (out / "generator.json").write_text(dump_json(summary), encoding="utf-8")
    print(f"wrote {args.years} synthetic year(s) to {out}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig, args) -> int:
    res = run_pipeline(cfg)
    optimized = res.train_evaluation.optimized_seconds if res.train_evaluation is not None else None
    paths = emit_outputs(res.report, res.stations, res.train_demands, optimized, cfg.out, args.crs)
    (Path(cfg.out) / "timings.json").write_text(dump_json(res.timings), encoding="utf-8")
    rep = res.report
    if rep["stage1"] is not None:
        s1 = rep["stage1"]
        print(f"status {rep['status']}: {s1['drone_count']} drones at {len(s1['bases_opened'])} bases; "
              f"stage-two {rep['stage2']['kind']} = {rep['stage2']['value']:.3f}")
    else:
        print(f"status {rep['status']}" + (f": {rep['message']}" if rep["message"] else ""))
    print(f"report: {paths['report']}")
    return _status_code(rep["status"])


def _read_design(path: str, station_ids) -> dict[int, int]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict) and "stage1" in raw:
        raw = (raw["stage1"] or {}).get("drones_per_base") or {}
    if not isinstance(raw, dict):
        raise InputError("design must be a JSON object mapping station ids to drone counts")
    index = {sid: i for i, sid in enumerate(station_ids)}
    out = {}
    for sid, n in raw.items():
        if sid not in index:
            raise InputError(f"design names unknown station {sid!r}")
        if int(n) != n or n < 0:
            raise InputError(f"drone count for {sid!r} must be a non-negative integer")
        out[index[sid]] = int(n)
    return out


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if not cfg.data.stations or not cfg.data.incidents:
        raise InputError("evaluate needs stations and incidents")
    stations = read_stations(cfg.data.stations)
    incidents = read_incidents(cfg.data.incidents, cfg.data.missing_baseline, cfg.data.impute_k)
    design = _read_design(args.design, stations.ids)
    rho = build_rho_table(cfg.queue)
    ev = evaluate_network(design, stations.points, incidents.demands, cfg.drone, cfg.evaluation_rule, rho,
                          cfg.simulation.multiplier / DAYS_PER_YEAR, cfg.queue.service_rate_mu, cfg.solver)
    result = {"rule": ev.rule, "metrics": ev.metrics(), "optimized_s": [float(v) for v in ev.optimized_seconds]}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(dump_json(result), encoding="utf-8")
    print(json.dumps(result["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    try:
        values = [float(v) for v in args.values.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values: {exc}") from exc
    cells = sweep(cfg, args.axis, values, evaluate_tests=args.with_tests)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = [f.name for f in dataclasses.fields(cells[0])]
    with open(out / f"sweep_{args.axis}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for c in cells:
            w.writerow(["" if getattr(c, k) is None else getattr(c, k) for k in fields])
    for c in cells:
        shown = f"{c.drones} drones, {c.bases} bases" if c.drones is not None else (c.error or "")
        print(f"{args.axis}={c.value:g}: {c.status} {shown}")
    return EXIT_OK if any(c.status == "optimal" for c in cells) else EXIT_SOLVER


def worked_example(queue: QueueParams | None = None) -> Instance:
    """Two bases, three demands; base A is fast to j1 and j2, base B to j3."""
    queue = queue or QueueParams(service_rate_mu=100.0, service_level_psi=0.99, max_drones_per_base=3)
    r = np.array([[100.0, 100.0, 700.0], [700.0, 700.0, 100.0]])
    demands = tuple(DemandPoint(PlanarPoint(1000.0 * j, 0.0), 600.0) for j in range(3))
    return Instance(
        bases=(PlanarPoint(0.0, 1000.0), PlanarPoint(2000.0, 1000.0)),
        demands=demands,
        response_seconds=r,
        arrival_scale_f=np.ones(3),
        queue=queue,
        base_ids=("A", "B"),
    )


def cmd_oracle(cfg: RunConfig, args) -> int:
    obj = cfg.objective
    if args.worked_example:
        inst = worked_example()
        gamma = 200.0 if args.gamma is None else obj.gamma
    else:
        if not cfg.data.stations or not cfg.data.incidents:
            raise InputError("oracle needs stations and incidents, or --worked-example")
        stations = read_stations(cfg.data.stations)
        incidents = read_incidents(cfg.data.incidents, cfg.data.missing_baseline, cfg.data.impute_k)
        inst = build_instance(list(stations.points), list(incidents.demands), cfg.drone,
                              cfg.simulation.multiplier / DAYS_PER_YEAR, cfg.queue, stations.ids)
        gamma = obj.gamma
    si = preprocess_sparsity(inst, beta=obj.beta)
    rho = build_rho_table(inst.queue)
    if obj.mode == "mean":
        target = MeanTarget(gamma)
    else:
        target = CvarTarget((1.0 - obj.reduction) * si.baseline_p90_cvar, obj.beta)
    res = enumerate_oracle(si, target, rho, zeta=obj.zeta)
    ids = inst.base_ids
    out = {
        "feasible": res.feasible,
        "drone_count": res.drone_count,
        "drones_per_base": None if res.drones_per_base is None else {ids[i]: d for i, d in enumerate(res.drones_per_base) if d},
        "stage2_value": res.stage2_value,
        "stage2_design": None if res.stage2_design is None else {ids[i]: d for i, d in enumerate(res.stage2_design) if d},
        "designs_evaluated": res.evaluated,
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    return EXIT_OK if res.feasible else EXIT_INFEASIBLE


COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "template":
        sys.stdout.write(TEMPLATE)
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, SchemaError, InputError, OracleSizeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
