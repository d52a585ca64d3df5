"""Run an external MILP solver on LP text and read back its solution file.

Two solution-file dialects are understood:

``cbc``
    First line ``<Status> - objective value <v>``, then one
    ``index name value reduced_cost`` line per nonzero column.
``highs``
    The plain-text ``writeSolution`` layout: a ``Model status`` block, then
    ``# Primal solution values`` with ``Objective <v>`` and ``name value``
    lines after ``# Columns <n>``.

The command is an argument template; ``{lp}``, ``{sol}``, ``{time_limit}``,
``{mip_gap}`` and ``{threads}`` are substituted per run.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import shlex
import shutil
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Literal, Mapping

log = logging.getLogger(__name__)

Status = Literal["optimal", "infeasible", "time_limit", "error"]
Dialect = Literal["cbc", "highs"]

SOLVER_ENV = "DRONENET_SOLVER"
# CBC 2.10's integer preprocessing can postsolve into an inconsistent primal
# point (objective right, columns wrong), so it is switched off.
CBC_TEMPLATE = (
    "{exe}", "{lp}", "sec", "{time_limit}", "ratio", "{mip_gap}", "threads", "{threads}",
    "preprocess", "off", "solve", "solu", "{sol}",
)
# grace period on top of the solver's own limit before the process is killed
KILL_GRACE_S = 30.0


class SolverError(RuntimeError):
    pass


def default_solver_executable() -> str:
    """``$DRONENET_SOLVER``, else ``cbc`` on PATH, else the CBC binary bundled with PuLP."""
    env = os.environ.get(SOLVER_ENV)
    if env:
        return env
    found = shutil.which("cbc")
    if found:
        return found
    try:
        from pulp.apis import coin_api
    except ImportError as exc:  # pragma: no cover - pulp is a declared dependency
        raise SolverError("no CBC executable found") from exc
    path = getattr(coin_api, "pulp_cbc_path", None)
    if not path or not os.path.exists(path):
        raise SolverError("no CBC executable found; set DRONENET_SOLVER")
    path = os.path.normpath(path)
    if not os.access(path, os.X_OK):
        try:
            os.chmod(path, os.stat(path).st_mode | 0o111)
        except OSError as exc:
            raise SolverError(f"bundled CBC at {path} is not executable") from exc
    return path


@dataclass(frozen=True)
class SolverConfig:
    solver_command: tuple[str, ...] = CBC_TEMPLATE
    dialect: Dialect = "cbc"
    time_limit_s: float = 600.0
    mip_gap: float = 0.0
    threads: int = 1
    work_dir: str | None = None

    def __post_init__(self):
        if not self.time_limit_s > 0:
            raise ValueError("time limit must be positive")
        if self.mip_gap < 0:
            raise ValueError("mip gap must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.dialect not in ("cbc", "highs"):
            raise ValueError(f"unknown solution dialect {self.dialect!r}")
        if isinstance(self.solver_command, str):
            object.__setattr__(self, "solver_command", tuple(shlex.split(self.solver_command)))
        if not self.solver_command:
            raise ValueError("empty solver command")

    def argv(self, lp: Path, sol: Path) -> list[str]:
        subs = {
            "lp": str(lp),
            "sol": str(sol),
            "time_limit": _fmt(self.time_limit_s),
            "mip_gap": _fmt(self.mip_gap),
            "threads": str(self.threads),
        }
        if "{exe}" in self.solver_command:
            subs["exe"] = default_solver_executable()
        return [arg.format(**subs) for arg in self.solver_command]

    def run_root(self) -> Path:
        return Path(self.work_dir) if self.work_dir else Path(tempfile.gettempdir()) / "dronenet-runs"


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True)
class SolveResult:
    status: Status
    variable_values: Mapping[str, float] = field(default_factory=lambda: MappingProxyType({}))
    objective: float = math.nan
    wall_time: float = 0.0
    solver_log_path: str | None = None
    message: str = ""

    @property
    def has_solution(self) -> bool:
        return bool(self.variable_values) or self.status == "optimal"


# -- solution parsing -------------------------------------------------------


def parse_cbc_solution(text: str) -> tuple[Status, float, dict[str, float]]:
    lines = text.splitlines()
    if not lines:
        raise SolverError("empty solution file")
    header = lines[0].strip()
    lowered = header.lower()
    objective = math.nan
    if "objective value" in lowered:
        try:
            objective = float(header.rsplit(None, 1)[-1])
        except ValueError as exc:
            raise SolverError(f"unparsable objective in {header!r}") from exc
    if lowered.startswith("optimal"):
        status: Status = "optimal"
    elif "infeasible" in lowered:
        status = "infeasible"
    elif lowered.startswith("stopped on time") or lowered.startswith("stopped on iterations"):
        status = "time_limit"
    elif lowered.startswith("unbounded"):
        raise SolverError("model is unbounded")
    else:
        raise SolverError(f"unrecognised solution status {header!r}")
    values: dict[str, float] = {}
    if status == "infeasible":
        return status, objective, values
    for line in lines[1:]:
        parts = line.replace("**", " ").split()
        if not parts:
            continue
        if len(parts) < 3:
            raise SolverError(f"unparsable solution line {line!r}")
        try:
            values[parts[1]] = float(parts[2])
        except ValueError as exc:
            raise SolverError(f"unparsable solution line {line!r}") from exc
    if status == "time_limit" and (not values or not objective < 1e49):
        values = {}
        objective = math.nan
    return status, objective, values


_HIGHS_STATUS = {
    "optimal": "optimal",
    "infeasible": "infeasible",
    "time limit reached": "time_limit",
    "iteration limit reached": "time_limit",
}


def parse_highs_solution(text: str) -> tuple[Status, float, dict[str, float]]:
    lines = [ln.strip() for ln in text.splitlines()]
    try:
        k = lines.index("Model status")
        raw = lines[k + 1]
    except (ValueError, IndexError) as exc:
        raise SolverError("no model status in solution file") from exc
    status = _HIGHS_STATUS.get(raw.lower())
    if status is None:
        if "unbounded" in raw.lower():
            raise SolverError("model is unbounded")
        raise SolverError(f"unrecognised solution status {raw!r}")
    objective = math.nan
    values: dict[str, float] = {}
    try:
        k = lines.index("# Primal solution values")
    except ValueError:
        return status, objective, values
    if k + 1 >= len(lines) or lines[k + 1] != "Feasible":
        return status, objective, values
    i = k + 2
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("Objective"):
            objective = float(ln.split()[1])
        elif ln.startswith("# Columns"):
            count = int(ln.split()[2])
            for entry in lines[i + 1 : i + 1 + count]:
                name, val = entry.split()[:2]
                values[name] = float(val)
            break
        i += 1
    if status != "infeasible" and not values and status == "optimal":
        raise SolverError("optimal status without column values")
    return status, objective, values


PARSERS = {"cbc": parse_cbc_solution, "highs": parse_highs_solution}


# -- invocation -------------------------------------------------------------

_dir_locks: dict[str, threading.Lock] = {}
_dir_locks_guard = threading.Lock()


def _lock_for(key: str) -> threading.Lock:
    with _dir_locks_guard:
        return _dir_locks.setdefault(key, threading.Lock())


def run_key(lp_text: str, config: SolverConfig) -> str:
    h = hashlib.sha256()
    h.update(lp_text.encode())
    h.update(repr((config.solver_command, config.dialect, config.time_limit_s, config.mip_gap, config.threads)).encode())
    return h.hexdigest()[:16]


def invoke_solver(lp_text: str, config: SolverConfig | None = None) -> SolveResult:
    """Write ``lp_text`` under a content-addressed run directory and solve it.

    The run directory keeps ``model.lp``, ``solution.txt`` and ``solver.log``.
    Spawn failures raise ``SolverError``; a nonzero exit, a crash or a missing
    solution file give ``status="error"`` with the log retained.
    """
    config = config or SolverConfig()
    key = run_key(lp_text, config)
    run_dir = config.run_root() / key
    with _lock_for(str(run_dir)):
        run_dir.mkdir(parents=True, exist_ok=True)
        lp_path = run_dir / "model.lp"
        sol_path = run_dir / "solution.txt"
        log_path = run_dir / "solver.log"
        lp_path.write_text(lp_text, encoding="utf-8", newline="\n")
        if sol_path.exists():
            sol_path.unlink()
        argv = config.argv(lp_path, sol_path)
        start = time.perf_counter()
        killed = False
        try:
            with open(log_path, "wb") as logf:
                proc = subprocess.run(
                    argv,
                    stdout=logf,
                    stderr=subprocess.STDOUT,
                    timeout=config.time_limit_s + KILL_GRACE_S,
                    check=False,
                )
            code = proc.returncode
        except FileNotFoundError as exc:
            raise SolverError(f"cannot start solver {argv[0]!r}: {exc}") from exc
        except PermissionError as exc:
            raise SolverError(f"cannot start solver {argv[0]!r}: {exc}") from exc
        except subprocess.TimeoutExpired:
            killed = True
            code = None
        wall = time.perf_counter() - start
        log_ref = str(log_path)
        if killed:
            log.warning("solver killed after %.1f s (run %s)", wall, key)
            return SolveResult("time_limit", wall_time=wall, solver_log_path=log_ref, message="killed")
        if code != 0:
            return SolveResult("error", wall_time=wall, solver_log_path=log_ref, message=f"solver exited with code {code}")
        if not sol_path.exists():
            return SolveResult("error", wall_time=wall, solver_log_path=log_ref, message="no solution file written")
        try:
            status, objective, values = PARSERS[config.dialect](sol_path.read_text(encoding="utf-8"))
        except SolverError as exc:
            return SolveResult("error", wall_time=wall, solver_log_path=log_ref, message=str(exc))
    return SolveResult(
        status,
        MappingProxyType(values),
        objective,
        wall,
        log_ref,
    )
