"""Deterministic writer for the CPLEX-style LP text format."""

from __future__ import annotations

import math
import re

from ..model import MilpModel

MAX_LINE = 240
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")
_RESERVED = {"obj", "free", "inf", "infinity", "end", "st", "bounds", "binaries", "generals"}
_SENSE = {"<=": "<=", ">=": ">=", "=": "="}


class LpNameError(ValueError):
    """A variable or constraint name is invalid or used twice."""


def _num(value: float) -> str:
    value = float(value)
    if value == 0.0:
        return "0"
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _check_name(name: str, kind: str) -> None:
    if not _NAME_RE.match(name) or name.lower() in _RESERVED:
        raise LpNameError(f"invalid {kind} name {name!r}")
    if re.match(r"^[eE][0-9+\-]", name):
        raise LpNameError(f"{kind} name {name!r} reads as an exponent")


def _terms(coeffs: dict[str, float]) -> list[str]:
    out = []
    for name, c in coeffs.items():
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        tok = name if mag == 1.0 else f"{_num(mag)} {name}"
        out.append(f"{sign} {tok}")
    if out and out[0].startswith("+ "):
        out[0] = out[0][2:]
    return out


def _wrap(head: str, pieces: list[str]) -> list[str]:
    lines, cur = [], head
    for p in pieces:
        if len(cur) + 1 + len(p) > MAX_LINE and cur.strip():
            lines.append(cur)
            cur = "   " + p
        else:
            cur = f"{cur} {p}" if cur else p
    lines.append(cur)
    return lines


def _bound_line(name: str, lb: float, ub: float, binary: bool) -> str | None:
    if binary:
        if lb == ub:
            return f" {name} = {_num(lb)}"
        return None  # [0, 1] implied by the Binaries section
    if lb == -math.inf and ub == math.inf:
        return f" {name} free"
    if lb == ub:
        return f" {name} = {_num(lb)}"
    if lb == 0.0 and ub == math.inf:
        return None
    lo = "-inf" if lb == -math.inf else _num(lb)
    if ub == math.inf:
        return f" {name} >= {lo}"
    return f" {lo} <= {name} <= {_num(ub)}"


def write_lp(model: MilpModel) -> str:
    """Serialise ``model``; identical models produce byte-identical text.

    Sections, rows and terms follow the model's insertion order.
    Empty sections are omitted.  A row or objective without terms is written
    with a zero coefficient on the first declared variable, because LP
    readers reject an empty linear expression.
    """
    model.validate()
    for name in model.variables:
        _check_name(name, "variable")
    seen: set[str] = set()
    for c in model.constraints:
        _check_name(c.name, "constraint")
        if c.name in seen:
            raise LpNameError(f"constraint name {c.name!r} used twice")
        seen.add(c.name)
    first = next(iter(model.variables), None)

    def expr(coeffs: dict[str, float]) -> list[str]:
        pieces = _terms(coeffs)
        if not pieces and first is not None:
            pieces = [f"0 {first}"]
        return pieces

    lines = [f"\\ {model.name}", "Maximize" if model.sense == "max" else "Minimize"]
    lines += _wrap(" obj:", expr(model.objective))
    if model.constraints:
        lines.append("Subject To")
        for c in model.constraints:
            pieces = expr(c.coeffs) + [_SENSE[c.sense], _num(c.rhs)]
            lines += _wrap(f" {c.name}:", pieces)
    bounds = []
    for v in model.variables.values():
        line = _bound_line(v.name, v.lb, v.ub, v.kind == "binary")
        if line:
            bounds.append(line)
    if bounds:
        lines.append("Bounds")
        lines += bounds
    binaries = model.binaries()
    if binaries:
        lines.append("Binaries")
        lines += _wrap("", binaries)
    lines.append("End")
    return "\n".join(lines) + "\n"


def max_violation(model: MilpModel, values: dict[str, float]) -> float:
    """Largest bound or row violation of ``values`` (missing names read as 0)."""
    worst = 0.0
    for v in model.variables.values():
        val = values.get(v.name, 0.0)
        worst = max(worst, v.lb - val, val - v.ub)
    for c in model.constraints:
        lhs = sum(coef * values.get(name, 0.0) for name, coef in c.coeffs.items())
        if c.sense == "<=":
            worst = max(worst, lhs - c.rhs)
        elif c.sense == ">=":
            worst = max(worst, c.rhs - lhs)
        else:
            worst = max(worst, abs(lhs - c.rhs))
    return worst


def objective_value(model: MilpModel, values: dict[str, float]) -> float:
    return float(sum(coef * values.get(name, 0.0) for name, coef in model.objective.items()))
