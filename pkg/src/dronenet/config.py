"""Run configuration: an INI file with one section per concern.

Only paths may be overridden from the environment (``DRONENET_STATIONS``,
``DRONENET_INCIDENTS``, ``DRONENET_HISTORICAL``, ``DRONENET_OUT``); the solver
executable has its own override, ``DRONENET_SOLVER``, read at solve time.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from .queueing import QueueParams
from .solve.runner import CBC_TEMPLATE, SolverConfig
from .travel import DroneSpec

Mode = Literal["mean", "cvar"]

PATH_ENV = {
    "stations": "DRONENET_STATIONS",
    "incidents": "DRONENET_INCIDENTS",
    "historical": "DRONENET_HISTORICAL",
    "out": "DRONENET_OUT",
}

TEMPLATE = """\
[data]
# stations CSV: id,x_m,y_m,kind  (every row is a candidate drone base)
stations =
# incidents CSV: x_m,y_m,baseline_s; leave empty to simulate the training year
incidents =
# historical incidents used to fit the generators (same schema)
historical =
# rows with an empty baseline_s: drop | impute
missing_baseline = drop
impute_k = 5

[drone]
max_speed = 27.8
horiz_accel = 19.6
overhead_s = 10.0
altitude_m = 60.0

[queue]
mu = 48.0
psi = 0.99
d_max = 3
# printed | erlang
threshold_rule = printed

[objective]
# mean | cvar
mode = mean
gamma = 60.0
reduction = 0.3
beta = 0.9
zeta = 1.0
# stage one for cvar mode: response (tail of response times) | improvement
cvar_stage1 = response
refine_bases = true
infeasible_fallback = false

[simulation]
multiplier = 5
# empty: size of the fitting data
annual_confirmed =
test_sets = 100
folds = 10
bandwidth_grid = 250 500 1000 2000 4000
knn_k = 1 3 5 10 20
knn_a = -30 0 30
knn_b = 0.5 1.0 1.5
# printed | inverse
ratio = printed
time_floor_s = 60.0

[evaluation]
# nearest | resolve
rule = nearest

[solver]
# empty: bundled CBC; otherwise an argument template with {lp} {sol} {time_limit} {mip_gap} {threads}
command =
# cbc | highs
dialect = cbc
time_limit = 600
mip_gap = 0.0
threads = 1
work_dir =

[run]
seed = 0
out = out
workers = 1
"""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    stations: str | None = None
    incidents: str | None = None
    historical: str | None = None
    missing_baseline: Literal["drop", "impute"] = "drop"
    impute_k: int = 5


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: Mode = "mean"
    gamma: float = 60.0
    reduction: float = 0.3
    beta: float = 0.9
    zeta: float = 1.0
    cvar_stage1: Literal["response", "improvement"] = "response"
    refine_bases: bool = True
    infeasible_fallback: bool = False

    def __post_init__(self):
        if self.mode not in ("mean", "cvar"):
            raise ConfigError(f"unknown objective mode {self.mode!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0.0 <= self.reduction < 1.0:
            raise ConfigError("reduction must lie in [0, 1)")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError("zeta must lie in [0, 1]")
        if self.cvar_stage1 not in ("response", "improvement"):
            raise ConfigError(f"unknown cvar_stage1 {self.cvar_stage1!r}")


@dataclass(frozen=True)
class SimulationConfig:
    multiplier: float = 5.0
    annual_confirmed: int | None = None
    test_sets: int = 100
    folds: int = 10
    bandwidth_grid: tuple[float, ...] = (250.0, 500.0, 1000.0, 2000.0, 4000.0)
    knn_k: tuple[int, ...] = (1, 3, 5, 10, 20)
    knn_a: tuple[float, ...] = (-30.0, 0.0, 30.0)
    knn_b: tuple[float, ...] = (0.5, 1.0, 1.5)
    ratio: Literal["printed", "inverse"] = "printed"
    time_floor_s: float = 60.0

    def __post_init__(self):
        if self.multiplier < 1:
            raise ConfigError("multiplier must be at least 1")
        if self.test_sets < 0:
            raise ConfigError("test_sets must be non-negative")
        if self.folds < 2:
            raise ConfigError("need at least two folds")
        if not (self.bandwidth_grid and self.knn_k and self.knn_a and self.knn_b):
            raise ConfigError("hyper-parameter grids must be nonempty")
        if self.ratio not in ("printed", "inverse"):
            raise ConfigError(f"unknown ratio orientation {self.ratio!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    drone: DroneSpec = field(default_factory=DroneSpec)
    queue: QueueParams = field(default_factory=QueueParams)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    evaluation_rule: Literal["nearest", "resolve"] = "nearest"
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    out: str = "out"
    workers: int = 1

    def __post_init__(self):
        if self.evaluation_rule not in ("nearest", "resolve"):
            raise ConfigError(f"unknown evaluation rule {self.evaluation_rule!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_objective(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, objective=dataclasses.replace(self.objective, **kw))

    def with_simulation(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, simulation=dataclasses.replace(self.simulation, **kw))

    def settings(self) -> dict:
        """Every setting that can change results; paths and output locations excluded."""
        d = dataclasses.asdict(self)
        for key in ("stations", "incidents", "historical"):
            d["data"].pop(key)
        d.pop("out")
        d.pop("workers")
        d["solver"].pop("work_dir")
        d["solver"]["solver_command"] = list(d["solver"]["solver_command"])
        return d

    def config_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.settings(), sort_keys=True, default=list).encode())
        for key in ("stations", "incidents", "historical"):
            path = getattr(self.data, key)
            if path:
                h.update(key.encode())
                h.update(Path(path).read_bytes())
        return h.hexdigest()[:16]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _opt_path(raw: str, base: Path) -> str | None:
    raw = raw.strip()
    if not raw:
        return None
    p = Path(raw).expanduser()
    return str(p if p.is_absolute() else base / p)


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> RunConfig:
    """Read an INI file (relative paths resolve against its directory), then apply path overrides."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(TEMPLATE)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        base = path.resolve().parent
    try:
        data = cp["data"]
        paths = {k: _opt_path(data.get(k, ""), base) for k in ("stations", "incidents", "historical")}
        out = cp["run"].get("out", "out")
        out = _opt_path(out, base) or "out"
        for key, var in PATH_ENV.items():
            if env.get(var):
                if key == "out":
                    out = env[var]
                else:
                    paths[key] = env[var]
        data_cfg = DataConfig(
            missing_baseline=data.get("missing_baseline", "drop").strip(),
            impute_k=data.getint("impute_k"),
            **paths,
        )
        if data_cfg.missing_baseline not in ("drop", "impute"):
            raise ConfigError(f"missing_baseline must be drop or impute, got {data_cfg.missing_baseline!r}")
        dr = cp["drone"]
        drone = DroneSpec(
            max_speed=dr.getfloat("max_speed"),
            horiz_accel=dr.getfloat("horiz_accel"),
            takeoff_landing_overhead=dr.getfloat("overhead_s"),
            cruise_altitude=dr.getfloat("altitude_m"),
        )
        qu = cp["queue"]
        queue = QueueParams(
            service_rate_mu=qu.getfloat("mu"),
            service_level_psi=qu.getfloat("psi"),
            max_drones_per_base=qu.getint("d_max"),
            threshold_rule=qu.get("threshold_rule").strip(),
        )
        ob = cp["objective"]
        objective = ObjectiveConfig(
            mode=ob.get("mode").strip(),
            gamma=ob.getfloat("gamma"),
            reduction=ob.getfloat("reduction"),
            beta=ob.getfloat("beta"),
            zeta=ob.getfloat("zeta"),
            cvar_stage1=ob.get("cvar_stage1").strip(),
            refine_bases=ob.getboolean("refine_bases"),
            infeasible_fallback=ob.getboolean("infeasible_fallback"),
        )
        sm = cp["simulation"]
        annual = sm.get("annual_confirmed", "").strip()
        simulation = SimulationConfig(
            multiplier=sm.getfloat("multiplier"),
            annual_confirmed=int(annual) if annual else None,
            test_sets=sm.getint("test_sets"),
            folds=sm.getint("folds"),
            bandwidth_grid=_floats(sm.get("bandwidth_grid")),
            knn_k=_ints(sm.get("knn_k")),
            knn_a=_floats(sm.get("knn_a")),
            knn_b=_floats(sm.get("knn_b")),
            ratio=sm.get("ratio").strip(),
            time_floor_s=sm.getfloat("time_floor_s"),
        )
        so = cp["solver"]
        command = so.get("command", "").strip()
        work_dir = _opt_path(so.get("work_dir", ""), base)
        solver = SolverConfig(
            solver_command=tuple(shlex.split(command)) if command else CBC_TEMPLATE,
            dialect=so.get("dialect").strip(),
            time_limit_s=so.getfloat("time_limit"),
            mip_gap=so.getfloat("mip_gap"),
            threads=so.getint("threads"),
            work_dir=work_dir,
        )
        return RunConfig(
            data=data_cfg,
            drone=drone,
            queue=queue,
            objective=objective,
            simulation=simulation,
            evaluation_rule=cp["evaluation"].get("rule").strip(),
            solver=solver,
            seed=cp["run"].getint("seed"),
            out=out,
            workers=cp["run"].getint("workers"),
        )
    except ConfigError:
        raise
    except (ValueError, KeyError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
