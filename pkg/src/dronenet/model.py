"""Solver-agnostic MILP construction for the drone location-queuing models.

Every model shares the same network block: binary ``y_i_d`` (base ``i`` holds at
least ``d`` drones), continuous ``x_i_j`` (share of demand ``j`` served from
``i``), full assignment of every demand, assignment only to open bases, the
drone-count ordering ``y_i_d <= y_i_(d-1)`` and one congestion row per base.
The existing responders form an always-open pseudo-base ``B`` with unlimited
capacity.

Stage-one models minimise drones (optionally trading drones against bases)
under a response-time target; stage-two models fix the drone total and
optimise response time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .queueing import RhoTable
from .solve.cvar import empirical_cvar
from .travel import Instance

BASELINE = -1
BASELINE_TAG = "B"

VarKind = Literal["binary", "continuous"]
Sense = Literal["<=", ">=", "="]


class InfeasibleTargetWarning(UserWarning):
    """The requested target cannot be met even with every base fully staffed."""


class DegenerateObjectiveWarning(UserWarning):
    pass


@dataclass
class Variable:
    name: str
    kind: VarKind = "continuous"
    lb: float = 0.0
    ub: float = math.inf


@dataclass
class Constraint:
    name: str
    coeffs: dict[str, float]
    sense: Sense
    rhs: float


@dataclass
class MilpModel:
    name: str
    sense: Literal["min", "max"] = "min"
    variables: dict[str, Variable] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_var(self, name: str, kind: VarKind = "continuous", lb: float = 0.0, ub: float = math.inf) -> str:
        if name in self.variables:
            raise ValueError(f"duplicate variable name {name!r}")
        if kind == "binary":
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        self.variables[name] = Variable(name, kind, lb, ub)
        return name

    def add_constraint(self, name: str, coeffs: dict[str, float], sense: Sense, rhs: float) -> None:
        if sense not in ("<=", ">=", "="):
            raise ValueError(f"bad constraint sense {sense!r}")
        self.constraints.append(Constraint(name, {k: v for k, v in coeffs.items() if v != 0.0}, sense, float(rhs)))

    def constraint(self, name: str) -> Constraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def validate(self) -> None:
        names = set()
        for c in self.constraints:
            if c.name in names:
                raise ValueError(f"duplicate constraint name {c.name!r}")
            names.add(c.name)
            unknown = [v for v in c.coeffs if v not in self.variables]
            if unknown:
                raise ValueError(f"constraint {c.name!r} references undeclared {unknown}")
            if not all(math.isfinite(v) for v in c.coeffs.values()) or not math.isfinite(c.rhs):
                raise ValueError(f"constraint {c.name!r} has non-finite data")
        for name, coef in self.objective.items():
            if name not in self.variables:
                raise ValueError(f"objective references undeclared {name!r}")
            if not math.isfinite(coef):
                raise ValueError(f"objective coefficient of {name!r} is not finite")

    def binaries(self) -> list[str]:
        return [v.name for v in self.variables.values() if v.kind == "binary"]

    def copy(self, name: str | None = None) -> "MilpModel":
        return MilpModel(
            name=name or self.name,
            sense=self.sense,
            variables={k: Variable(v.name, v.kind, v.lb, v.ub) for k, v in self.variables.items()},
            constraints=[Constraint(c.name, dict(c.coeffs), c.sense, c.rhs) for c in self.constraints],
            objective=dict(self.objective),
            meta=dict(self.meta),
        )


# -- naming -----------------------------------------------------------------


def y_name(i: int, d: int) -> str:
    return f"y_{BASELINE_TAG if i == BASELINE else i}_{d}"


def x_name(i: int, j: int) -> str:
    return f"x_{BASELINE_TAG if i == BASELINE else i}_{j}"


def z_name(j: int) -> str:
    return f"z_{j}"


ALPHA = "alpha"
BINARY_TOL = 1e-5
SHARE_TOL = 1e-9


# -- sparsity preprocessing -------------------------------------------------


@dataclass(frozen=True)
class SparseInstance:
    """Base/demand pairs that can improve on the baseline, with their improvements.

    ``pair_base[k], pair_demand[k]`` index the k-th kept real pair; every demand
    also keeps the pseudo-base ``B`` implicitly.  With ``dense=True`` every pair
    is kept (the unprocessed model, used for comparison).
    """

    n_bases: int
    baseline: np.ndarray = field(repr=False)
    arrival_scale_f: np.ndarray = field(repr=False)
    service_rate_mu: float
    pair_base: np.ndarray = field(repr=False)
    pair_demand: np.ndarray = field(repr=False)
    pair_r: np.ndarray = field(repr=False)
    pair_t: np.ndarray = field(repr=False)
    beta: float
    baseline_mean: float
    baseline_p90_cvar: float
    dense: bool = False
    base_ids: tuple[str, ...] = ()

    @property
    def n_demands(self) -> int:
        return int(self.baseline.shape[0])

    @property
    def n_pairs(self) -> int:
        return int(self.pair_base.shape[0])

    @property
    def kept_pairs(self) -> dict[int, list[int]]:
        """Bases kept for each demand; ``BASELINE`` is always last."""
        out: dict[int, list[int]] = {j: [] for j in range(self.n_demands)}
        for i, j in zip(self.pair_base.tolist(), self.pair_demand.tolist()):
            out[j].append(i)
        for j in out:
            out[j].append(BASELINE)
        return out

    @property
    def improvement_t(self) -> dict[tuple[int, int], float]:
        return {(i, j): t for i, j, _, t in self.pairs()}

    def pairs(self):
        """Yield ``(i, j, r_ij, t_ij)`` for every kept real pair."""
        for k in range(self.n_pairs):
            yield int(self.pair_base[k]), int(self.pair_demand[k]), float(self.pair_r[k]), float(self.pair_t[k])

    def best_improvement(self) -> np.ndarray:
        """Largest achievable improvement per demand, ignoring capacity."""
        best = np.zeros(self.n_demands)
        np.maximum.at(best, self.pair_demand, self.pair_t)
        return best

    def best_response(self) -> np.ndarray:
        best = self.baseline.copy()
        np.minimum.at(best, self.pair_demand, self.pair_r)
        return best


def preprocess_sparsity(instance: Instance, beta: float = 0.9, dense: bool = False) -> SparseInstance:
    """Drop every pair whose drone response is no faster than the baseline."""
    r = instance.response_seconds
    b = instance.baseline
    if dense:
        keep = np.ones_like(r, dtype=bool)
    else:
        keep = r < b[None, :]
    ii, jj = np.nonzero(keep)
    r_kept = r[ii, jj]
    t_kept = np.maximum(b[jj] - r_kept, 0.0)
    frozen = []
    for arr in (b.copy(), instance.arrival_scale_f.copy(), ii.astype(int), jj.astype(int), r_kept, t_kept):
        arr.setflags(write=False)
        frozen.append(arr)
    return SparseInstance(
        n_bases=instance.n_bases,
        baseline=frozen[0],
        arrival_scale_f=frozen[1],
        service_rate_mu=instance.queue.service_rate_mu,
        pair_base=frozen[2],
        pair_demand=frozen[3],
        pair_r=frozen[4],
        pair_t=frozen[5],
        beta=beta,
        baseline_mean=float(b.mean()),
        baseline_p90_cvar=empirical_cvar(b, beta),
        dense=dense,
        base_ids=instance.base_ids,
    )


# -- shared structure -------------------------------------------------------


def _network(si: SparseInstance, rho_table: RhoTable, name: str, sense: str = "min") -> MilpModel:
    model = MilpModel(name=name, sense=sense)
    d_max = rho_table.d_max
    y = {}
    for i in range(si.n_bases):
        for d in range(1, d_max + 1):
            y[i, d] = model.add_var(y_name(i, d), "binary")
    y[BASELINE, 1] = model.add_var(y_name(BASELINE, 1), "binary", lb=1.0, ub=1.0)
    x = {}
    for i, j, _, _ in si.pairs():
        x[i, j] = model.add_var(x_name(i, j), "continuous", 0.0, 1.0)
    for j in range(si.n_demands):
        x[BASELINE, j] = model.add_var(x_name(BASELINE, j), "continuous", 0.0, 1.0)

    by_demand: dict[int, list[str]] = {j: [] for j in range(si.n_demands)}
    by_base: dict[int, list[tuple[int, str]]] = {i: [] for i in range(si.n_bases)}
    for (i, j), name_ij in x.items():
        if i != BASELINE:
            by_demand[j].append(name_ij)
            by_base[i].append((j, name_ij))

    for j in range(si.n_demands):
        row = {v: 1.0 for v in by_demand[j]}
        row[x[BASELINE, j]] = 1.0
        model.add_constraint(f"assign_{j}", row, "=", 1.0)
    for i, j, _, _ in si.pairs():
        model.add_constraint(f"link_{i}_{j}", {x[i, j]: 1.0, y[i, 1]: -1.0}, "<=", 0.0)
    for i in range(si.n_bases):
        for d in range(2, d_max + 1):
            model.add_constraint(f"order_{i}_{d}", {y[i, d]: 1.0, y[i, d - 1]: -1.0}, "<=", 0.0)
    increments = rho_table.load_increments()
    mu = si.service_rate_mu
    f = si.arrival_scale_f
    for i in range(si.n_bases):
        if not by_base[i]:
            continue
        row = {name_ij: float(f[j]) for j, name_ij in by_base[i]}
        for d in range(1, d_max + 1):
            row[y[i, d]] = -mu * increments[d - 1]
        model.add_constraint(f"cap_{i}", row, "<=", 0.0)

    model.meta.update(
        y=y,
        x=x,
        n_bases=si.n_bases,
        n_demands=si.n_demands,
        d_max=d_max,
        base_ids=si.base_ids,
    )
    return model


def _drone_terms(model: MilpModel) -> dict[str, float]:
    return {v: 1.0 for (i, _), v in model.meta["y"].items() if i != BASELINE}


def _stage1_objective(model: MilpModel, zeta: float) -> None:
    if not 0.0 <= zeta <= 1.0:
        raise ValueError(f"zeta must lie in [0, 1], got {zeta}")
    if zeta == 0.0:
        warnings.warn(
            "zeta = 0 leaves the drone count unpenalised; expect oversized bases",
            DegenerateObjectiveWarning,
            stacklevel=3,
        )
    obj = {}
    for (i, d), v in model.meta["y"].items():
        if i == BASELINE:
            continue
        coef = 1.0 if d == 1 else zeta  # zeta * y_i1 + (1 - zeta) * y_i1
        if coef:
            obj[v] = coef
    model.objective = obj
    model.meta["zeta"] = zeta


def _response_terms(model: MilpModel, si: SparseInstance):
    x = model.meta["x"]
    rows: dict[int, dict[str, float]] = {j: {x[BASELINE, j]: float(si.baseline[j])} for j in range(si.n_demands)}
    for i, j, r, _ in si.pairs():
        rows[j][x[i, j]] = r
    return rows


def _improvement_terms(model: MilpModel, si: SparseInstance):
    x = model.meta["x"]
    rows: dict[int, dict[str, float]] = {j: {} for j in range(si.n_demands)}
    for i, j, _, t in si.pairs():
        if t > 0:
            rows[j][x[i, j]] = t
    return rows


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")


def _tail_weight(si: SparseInstance, beta: float) -> float:
    return 1.0 / ((1.0 - beta) * si.n_demands)


def max_mean_improvement(si: SparseInstance) -> float:
    return float(si.best_improvement().mean())


def _warn_gamma(si: SparseInstance, gamma: float) -> None:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    best = max_mean_improvement(si)
    if gamma > best + 1e-9:
        warnings.warn(
            f"target improvement {gamma:g} s exceeds the best achievable mean improvement {best:g} s",
            InfeasibleTargetWarning,
            stacklevel=3,
        )


# -- stage one --------------------------------------------------------------


def build_med_rt(si: SparseInstance, gamma: float, rho_table: RhoTable, zeta: float = 1.0) -> MilpModel:
    """Fewest drones such that the mean response time drops by at least ``gamma`` seconds."""
    _warn_gamma(si, gamma)
    model = _network(si, rho_table, "med_rt")
    row: dict[str, float] = {}
    for terms in _response_terms(model, si).values():
        row.update(terms)
    n = si.n_demands
    model.add_constraint("response", row, "<=", float(si.baseline.sum()) - n * gamma)
    _stage1_objective(model, zeta)
    model.meta.update(kind="med_rt", gamma=gamma)
    return model


def build_irt(si: SparseInstance, gamma: float, rho_table: RhoTable, zeta: float = 1.0) -> MilpModel:
    """Fewest drones such that the mean response-time improvement is at least ``gamma``."""
    _warn_gamma(si, gamma)
    model = _network(si, rho_table, "irt")
    row: dict[str, float] = {}
    for terms in _improvement_terms(model, si).values():
        row.update(terms)
    model.add_constraint("improvement", row, ">=", si.n_demands * gamma)
    _stage1_objective(model, zeta)
    model.meta.update(kind="irt", gamma=gamma)
    return model


def _add_upper_tail(model: MilpModel, si: SparseInstance, beta: float) -> dict[str, float]:
    """``z_j >= R_j - alpha``; returns the CVaR expression ``alpha + c sum z``."""
    model.add_var(ALPHA, "continuous", -math.inf, math.inf)
    c = _tail_weight(si, beta)
    expr = {ALPHA: 1.0}
    for j, terms in _response_terms(model, si).items():
        z = model.add_var(z_name(j), "continuous", 0.0, math.inf)
        row = {z: 1.0, ALPHA: 1.0}
        row.update({v: -coef for v, coef in terms.items()})
        model.add_constraint(f"tail_{j}", row, ">=", 0.0)
        expr[z] = c
    return expr


def build_rt_cvar(
    si: SparseInstance, gamma90: float, beta: float, rho_table: RhoTable, zeta: float = 1.0
) -> MilpModel:
    """Fewest drones such that the mean of the slowest ``1 - beta`` share of responses is at most ``gamma90``."""
    _check_beta(beta)
    if not gamma90 > 0:
        raise ValueError("gamma90 must be positive")
    best = empirical_cvar(si.best_response(), beta)
    if gamma90 < best - 1e-9:
        warnings.warn(
            f"tail target {gamma90:g} s is below the best achievable tail mean {best:g} s",
            InfeasibleTargetWarning,
            stacklevel=2,
        )
    model = _network(si, rho_table, "rt_cvar")
    expr = _add_upper_tail(model, si, beta)
    model.add_constraint("cvar", expr, "<=", gamma90)
    _stage1_objective(model, zeta)
    model.meta.update(kind="rt_cvar", gamma90=gamma90, beta=beta)
    return model


def build_it_cvar(
    si: SparseInstance, gamma: float, beta: float, rho_table: RhoTable, zeta: float = 1.0
) -> MilpModel:
    """Fewest drones such that the smallest ``1 - beta`` share of improvements averages at least ``gamma``.

    The lower tail of the improvement distribution is the risk side for a
    quantity that should be large.  Since ``R = B - I``, subadditivity of the
    upper-tail mean gives ``tail(R) <= tail(B) - lower_tail(I)`` at the same
    ``beta``, so a feasible design here is feasible for ``build_rt_cvar`` with
    ``gamma90 = empirical_cvar(baseline, beta) - gamma``; the drone count found
    here bounds that model's optimum from above.  ``beta = 0`` is the
    mean-improvement constraint of ``build_irt``.
    """
    _check_beta(beta)
    _warn_gamma(si, gamma)
    model = _network(si, rho_table, "it_cvar")
    improvement = _improvement_terms(model, si)
    if beta == 0.0:
        row: dict[str, float] = {}
        for terms in improvement.values():
            row.update(terms)
        model.add_constraint("improvement", row, ">=", si.n_demands * gamma)
    else:
        model.add_var(ALPHA, "continuous", -math.inf, math.inf)
        c = _tail_weight(si, beta)
        expr = {ALPHA: 1.0}
        for j, terms in improvement.items():
            z = model.add_var(z_name(j), "continuous", 0.0, math.inf)
            row = {z: 1.0, ALPHA: -1.0}
            row.update(terms)
            model.add_constraint(f"tail_{j}", row, ">=", 0.0)
            expr[z] = -c
        model.add_constraint("cvar", expr, ">=", gamma)
    _stage1_objective(model, zeta)
    model.meta.update(kind="it_cvar", gamma=gamma, beta=beta)
    return model


# -- stage two --------------------------------------------------------------


def _fix_drone_total(model: MilpModel, p_star: int) -> None:
    if p_star < 0 or int(p_star) != p_star:
        raise ValueError("drone total must be a non-negative integer")
    model.add_constraint("drones", _drone_terms(model), "=", float(p_star))
    model.meta["p_star"] = int(p_star)


def build_stage2_mean(si: SparseInstance, p_star: int, rho_table: RhoTable) -> MilpModel:
    """Largest mean improvement achievable with exactly ``p_star`` drones."""
    model = _network(si, rho_table, "stage2_mean", sense="max")
    _fix_drone_total(model, p_star)
    n = si.n_demands
    obj: dict[str, float] = {}
    for terms in _improvement_terms(model, si).values():
        obj.update({v: t / n for v, t in terms.items()})
    model.objective = obj
    model.meta.update(kind="stage2_mean")
    return model


def build_stage2_cvar(si: SparseInstance, p_star: int, beta: float, rho_table: RhoTable) -> MilpModel:
    """Smallest tail-mean response time achievable with exactly ``p_star`` drones."""
    _check_beta(beta)
    model = _network(si, rho_table, "stage2_cvar")
    _fix_drone_total(model, p_star)
    model.objective = _add_upper_tail(model, si, beta)
    model.meta.update(kind="stage2_cvar", beta=beta)
    return model


# -- derived models ---------------------------------------------------------


def fewest_bases(model: MilpModel, value: float, tol: float = 1e-7) -> MilpModel:
    """Keep the objective within ``tol`` of ``value`` and minimise the bases opened instead."""
    out = model.copy(name=model.name + "_bases")
    if model.sense == "max":
        out.add_constraint("objective_floor", model.objective, ">=", value - tol)
    else:
        out.add_constraint("objective_ceiling", model.objective, "<=", value + tol)
    out.sense = "min"
    out.objective = {v: 1.0 for (i, d), v in model.meta["y"].items() if i != BASELINE and d == 1}
    out.meta["secondary"] = "bases"
    return out


def fix_drones(model: MilpModel, drones_per_base: dict[int, int]) -> MilpModel:
    """Pin every ``y_i_d`` to the given design."""
    out = model.copy(name=model.name + "_fixed")
    for (i, d), v in model.meta["y"].items():
        if i == BASELINE:
            continue
        val = 1.0 if drones_per_base.get(i, 0) >= d else 0.0
        out.variables[v].lb = out.variables[v].ub = val
    return out


# -- designs ----------------------------------------------------------------


@dataclass
class NetworkDesign:
    drones_per_base: dict[int, int]
    assignments: dict[tuple[int, int], float]
    objective_value: float | None = None
    stage2_value: float | None = None

    @property
    def drone_count(self) -> int:
        return int(sum(self.drones_per_base.values()))

    @property
    def bases_opened(self) -> list[int]:
        return sorted(i for i, d in self.drones_per_base.items() if d > 0)

    def realized_response(self, si: SparseInstance) -> np.ndarray:
        """Assignment-weighted response time per demand."""
        out = np.zeros(si.n_demands)
        r = {(i, j): rr for i, j, rr, _ in si.pairs()}
        for (i, j), frac in self.assignments.items():
            out[j] += frac * (si.baseline[j] if i == BASELINE else r[i, j])
        return out

    def mean_improvement(self, si: SparseInstance) -> float:
        return float((si.baseline - self.realized_response(si)).mean())

    def base_loads(self, si: SparseInstance) -> dict[int, float]:
        loads: dict[int, float] = {}
        for (i, j), frac in self.assignments.items():
            if i != BASELINE:
                loads[i] = loads.get(i, 0.0) + float(si.arrival_scale_f[j]) * frac
        return loads


def extract_design(model: MilpModel, values: dict[str, float], objective: float | None = None) -> NetworkDesign:
    """Read a solver solution back into drones per base and per-demand shares.

    Binary values are rounded; a value further than ``BINARY_TOL`` from 0 or 1
    raises.  Shares at or below ``SHARE_TOL`` or on closed bases are dropped
    and the rest rescaled to sum to one per demand.
    """
    drones: dict[int, int] = {}
    for (i, d), v in model.meta["y"].items():
        if i == BASELINE:
            continue
        val = values.get(v, 0.0)
        if abs(val - round(val)) > BINARY_TOL:
            raise ValueError(f"binary {v} has fractional value {val}")
        if round(val) == 1:
            drones[i] = drones.get(i, 0) + 1
    raw: dict[int, dict[int, float]] = {}
    for (i, j), v in model.meta["x"].items():
        val = values.get(v, 0.0)
        if val <= SHARE_TOL or (i != BASELINE and i not in drones):
            val = 0.0  # solver round-off, or a share on a closed base
        raw.setdefault(j, {})[i] = val
    assignments: dict[tuple[int, int], float] = {}
    for j, shares in raw.items():
        total = sum(shares.values())
        if total <= 0:
            assignments[BASELINE, j] = 1.0
            continue
        for i, val in shares.items():
            if val > 0:
                assignments[i, j] = val / total
    return NetworkDesign(drones, assignments, objective)
