"""Exhaustive ground truth for small instances.

Every drones-per-base vector in ``{0..D_max}^m`` is scored with the
assignment subproblem solved exactly for that fixed design:

* mean targets: a capacitated transportation problem, solved as a min-cost
  flow by successive shortest paths with integer-scaled arc costs;
* tail targets: the fixed-design LP, solved with SciPy's HiGHS interface.

Neither path touches the MILP serialiser or the external solver.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ..model import SparseInstance
from ..queueing import RhoTable

MAX_BASES = 6
MAX_DEMANDS = 40
MAX_D_CAP = 4
COST_SCALE = 10**6
FEAS_TOL = 1e-9


class OracleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class MeanTarget:
    """Mean improvement of at least ``gamma`` seconds."""

    gamma: float


@dataclass(frozen=True)
class CvarTarget:
    """Upper-tail mean response time of at most ``gamma90`` seconds."""

    gamma90: float
    beta: float


@dataclass(frozen=True)
class ImprovementCvarTarget:
    """Lower-tail mean improvement of at least ``gamma`` seconds."""

    gamma: float
    beta: float


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    drone_count: int | None
    drones_per_base: tuple[int, ...] | None
    stage1_objective: float | None
    stage2_value: float | None
    stage2_design: tuple[int, ...] | None
    evaluated: int


# -- min-cost flow ----------------------------------------------------------


class _FlowGraph:
    def __init__(self, n: int):
        self.n = n
        self.head: list[list[int]] = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[float] = []
        self.cost: list[int] = []

    def add(self, u: int, v: int, cap: float, cost: int) -> int:
        k = len(self.to)
        self.to += [v, u]
        self.cap += [cap, 0.0]
        self.cost += [cost, -cost]
        self.head[u].append(k)
        self.head[v].append(k + 1)
        return k

    def max_gain(self, s: int, t: int, eps: float = 1e-12) -> None:
        """Augment along negative-cost paths until none remain."""
        while True:
            dist = [math.inf] * self.n
            prev = [-1] * self.n
            dist[s] = 0
            for _ in range(self.n - 1):
                changed = False
                for u in range(self.n):
                    du = dist[u]
                    if du == math.inf:
                        continue
                    for k in self.head[u]:
                        if self.cap[k] > eps:
                            v = self.to[k]
                            nd = du + self.cost[k]
                            if nd < dist[v]:
                                dist[v] = nd
                                prev[v] = k
                                changed = True
                if not changed:
                    break
            if dist[t] == math.inf or dist[t] >= 0:
                return
            push = math.inf
            v = t
            while v != s:
                k = prev[v]
                push = min(push, self.cap[k])
                v = self.to[k ^ 1]
            v = t
            while v != s:
                k = prev[v]
                self.cap[k] -= push
                self.cap[k ^ 1] += push
                v = self.to[k ^ 1]


def best_mean_improvement(si: SparseInstance, design, rho_table: RhoTable) -> float:
    """Largest mean improvement achievable with a fixed drones-per-base vector.

    Flow units are calls per day; shipping ``f_j x_ij`` from base ``i`` to
    demand ``j`` earns ``t_ij x_ij``.  Base arcs carry the queueing
    capacity, demand arcs the demand's own arrival rate.
    """
    n, m = si.n_demands, si.n_bases
    f = si.arrival_scale_f
    src, sink = m + n, m + n + 1
    g = _FlowGraph(m + n + 2)
    for i in range(m):
        d = int(design[i])
        if d > 0:
            g.add(src, i, si.service_rate_mu * rho_table.load_bound(d), 0)
    pair_arcs = []
    for i, j, _, t in si.pairs():
        if design[i] > 0 and t > 0:
            k = g.add(i, m + j, math.inf, -int(round(t / f[j] * COST_SCALE)))
            pair_arcs.append((k, j, t))
    if not pair_arcs:
        return 0.0
    for j in range(n):
        g.add(m + j, sink, float(f[j]), 0)
    g.max_gain(src, sink)
    total = 0.0
    for k, j, t in pair_arcs:
        flow = g.cap[k ^ 1]
        total += t * flow / f[j]
    return float(total / n)


# -- fixed-design LPs -------------------------------------------------------


def _fixed_design_lp(si: SparseInstance, design, rho_table: RhoTable, beta: float, improvement: bool) -> float:
    """Optimal tail value for a fixed design.

    ``improvement=False``: minimise the upper-tail mean response time.
    ``improvement=True``: maximise the lower-tail mean improvement.
    Columns: kept open pairs, one baseline share per demand, ``alpha``, ``z``.
    """
    n = si.n_demands
    f = si.arrival_scale_f
    pairs = [(i, j, r, t) for i, j, r, t in si.pairs() if design[i] > 0]
    P = len(pairs)
    nx = P + n
    a_col, z0 = nx, nx + 1
    nv = nx + 1 + n
    c_tail = 1.0 / ((1.0 - beta) * n)

    cost = np.zeros(nv)
    if improvement:
        cost[a_col] = -1.0
        cost[z0:] = c_tail
    else:
        cost[a_col] = 1.0
        cost[z0:] = c_tail

    A_eq = np.zeros((n, nv))
    for k, (_, j, _, _) in enumerate(pairs):
        A_eq[j, k] = 1.0
    for j in range(n):
        A_eq[j, P + j] = 1.0
    b_eq = np.ones(n)

    rows, rhs = [], []
    for j in range(n):
        row = np.zeros(nv)
        if improvement:
            # alpha - sum t x - z_j <= 0
            row[a_col] = 1.0
            for k, (_, jj, _, t) in enumerate(pairs):
                if jj == j:
                    row[k] = -t
        else:
            # sum r x + b x_B - alpha - z_j <= 0
            row[a_col] = -1.0
            for k, (_, jj, r, _) in enumerate(pairs):
                if jj == j:
                    row[k] = r
            row[P + j] = si.baseline[j]
        row[z0 + j] = -1.0
        rows.append(row)
        rhs.append(0.0)
    for i in range(si.n_bases):
        if design[i] <= 0:
            continue
        row = np.zeros(nv)
        touched = False
        for k, (ii, j, _, _) in enumerate(pairs):
            if ii == i:
                row[k] = f[j]
                touched = True
        if touched:
            rows.append(row)
            rhs.append(si.service_rate_mu * rho_table.load_bound(int(design[i])))

    bounds = [(0.0, 1.0)] * nx + [(None, None)] + [(0.0, None)] * n
    res = linprog(
        cost,
        A_ub=np.array(rows),
        b_ub=np.array(rhs),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"fixed-design LP failed: {res.message}")
    return float(-res.fun if improvement else res.fun)


def best_tail_response(si: SparseInstance, design, rho_table: RhoTable, beta: float) -> float:
    return _fixed_design_lp(si, design, rho_table, beta, improvement=False)


def best_tail_improvement(si: SparseInstance, design, rho_table: RhoTable, beta: float) -> float:
    if beta == 0.0:
        return best_mean_improvement(si, design, rho_table)
    return _fixed_design_lp(si, design, rho_table, beta, improvement=True)


# -- enumeration ------------------------------------------------------------


def _score(si, target, design, rho_table) -> tuple[float, bool]:
    """``(value, meets_target)``; values are oriented so that larger is better for mean/improvement."""
    if isinstance(target, MeanTarget):
        v = best_mean_improvement(si, design, rho_table)
        return v, v >= target.gamma - FEAS_TOL
    if isinstance(target, CvarTarget):
        v = best_tail_response(si, design, rho_table, target.beta)
        return v, v <= target.gamma90 + FEAS_TOL
    if isinstance(target, ImprovementCvarTarget):
        v = best_tail_improvement(si, design, rho_table, target.beta)
        return v, v >= target.gamma - FEAS_TOL
    raise TypeError(f"unknown target {target!r}")


def stage1_objective(design, zeta: float) -> float:
    opened = sum(1 for d in design if d > 0)
    return opened + zeta * (sum(design) - opened)


def enumerate_oracle(
    si: SparseInstance,
    target,
    rho_table: RhoTable,
    d_cap: int | None = None,
    zeta: float = 1.0,
) -> OracleResult:
    """Exhaustive two-stage optimum.

    Stage one: the design minimising the drone/base objective that meets
    ``target``; ties go to fewer bases, then the lexicographically smallest
    vector.  Stage two: the best value (largest improvement, or smallest tail
    response time) among all designs with the stage-one drone total, ties
    again to fewer bases then the smallest vector.  Improvement-tail targets
    use the mean improvement in stage two.
    """
    d_max = rho_table.d_max
    d_cap = d_max if d_cap is None else d_cap
    if si.n_bases > MAX_BASES or si.n_demands > MAX_DEMANDS:
        raise OracleSizeError(
            f"oracle limited to {MAX_BASES} bases and {MAX_DEMANDS} demands, got {si.n_bases} and {si.n_demands}"
        )
    if not d_max <= d_cap <= MAX_D_CAP:
        raise OracleSizeError(f"need D_max <= d_cap <= {MAX_D_CAP}, got D_max={d_max}, d_cap={d_cap}")

    designs = list(itertools.product(range(d_max + 1), repeat=si.n_bases))
    designs.sort(key=lambda v: (stage1_objective(v, zeta), sum(1 for d in v if d > 0), v))
    evaluated = 0
    best = None
    for v in designs:
        evaluated += 1
        _, ok = _score(si, target, v, rho_table)
        if ok:
            best = v
            break
    if best is None:
        return OracleResult(False, None, None, None, None, None, evaluated)

    p_star = sum(best)
    maximise = not isinstance(target, CvarTarget)
    stage2_value, stage2_design = None, None
    for v in sorted((d for d in designs if sum(d) == p_star), key=lambda d: (sum(1 for x in d if x > 0), d)):
        evaluated += 1
        if isinstance(target, CvarTarget):
            val = best_tail_response(si, v, rho_table, target.beta)
        else:
            val = best_mean_improvement(si, v, rho_table)
        better = stage2_value is None or (val > stage2_value + FEAS_TOL if maximise else val < stage2_value - FEAS_TOL)
        if better:
            stage2_value, stage2_design = val, v
    return OracleResult(True, p_star, best, stage1_objective(best, zeta), stage2_value, stage2_design, evaluated)
