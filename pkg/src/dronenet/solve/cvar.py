"""Empirical conditional value-at-risk."""

from __future__ import annotations

import math

import numpy as np


def empirical_cvar(samples, beta: float) -> float:
    """Mean of the upper ``1 - beta`` tail of an empirical distribution.

    Equals ``min_a a + sum(max(s - a, 0)) / ((1 - beta) n)``.  The tail holds
    mass ``(1 - beta) n`` observations; the order statistic straddling the
    boundary contributes fractionally.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empirical CVaR of an empty sample")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        return float(s.mean())
    n = s.size
    mass = (1.0 - beta) * n
    if abs(mass - round(mass)) < 1e-9:
        mass = float(round(mass))
    desc = np.sort(s)[::-1]
    whole = min(int(math.floor(mass)), n)
    total = float(desc[:whole].sum())
    frac = mass - whole
    if frac > 1e-12 and whole < n:
        total += frac * float(desc[whole])
    return total / mass


def empirical_lower_cvar(samples, beta: float) -> float:
    """Mean of the lower ``1 - beta`` tail, ``-empirical_cvar(-s, beta)``."""
    return -empirical_cvar(-np.asarray(samples, dtype=float), beta)
