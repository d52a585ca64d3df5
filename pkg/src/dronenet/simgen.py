"""Synthetic incident generation.

Locations come from an isotropic Gaussian KDE whose bandwidth is picked by
k-fold cross-validated log-likelihood.  Baseline response times come from an
inverse-distance-weighted KNN regressor, followed by an affine shift/dispersion
transform tuned against a mean-plus-tail error score.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .travel import DemandPoint, PlanarPoint, coords

RatioOrientation = Literal["printed", "inverse"]

DEFAULT_TIME_FLOOR = 60.0
DAYS_PER_YEAR = 365.0


def nearest_rank(values, q: float) -> float:
    """Smallest sample value with at least a fraction ``q`` of the sample at or below it."""
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(q * arr.size - 1e-12))
    return float(arr[rank - 1])


def cv_folds(n: int, folds: int, seed) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous split into ``folds`` index blocks."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise ValueError(f"{n} points cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(block) for block in np.array_split(order, folds)]


def _train_mask(n: int, held_out: np.ndarray) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[held_out] = False
    if not mask.any():
        raise ValueError("a cross-validation fold left no training points")
    return mask


# -- kernel density ---------------------------------------------------------


@dataclass(frozen=True)
class KdeModel:
    training_points: np.ndarray = field(repr=False)  # (n, 2) metres
    bandwidth_b: float

    def __post_init__(self):
        pts = np.asarray(self.training_points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "training_points", pts)
        if pts.shape[0] < 2:
            raise ValueError("KDE needs at least two training points")
        if not self.bandwidth_b > 0:
            raise ValueError("bandwidth must be positive")

    @classmethod
    def fit(cls, points: Sequence[PlanarPoint] | np.ndarray, bandwidth: float) -> "KdeModel":
        pts = points if isinstance(points, np.ndarray) else coords(points)
        return cls(pts, float(bandwidth))


def _kde_logpdf(train: np.ndarray, query: np.ndarray, b: float, chunk: int = 2048) -> np.ndarray:
    n = train.shape[0]
    log_norm = -math.log(2.0 * math.pi * b * b) - math.log(n)
    out = np.empty(query.shape[0])
    for start in range(0, query.shape[0], chunk):
        q = query[start:start + chunk]
        sq = (q[:, None, 0] - train[None, :, 0]) ** 2 + (q[:, None, 1] - train[None, :, 1]) ** 2
        out[start:start + chunk] = logsumexp(-sq / (2.0 * b * b), axis=1) + log_norm
    return out


def kde_log_density(model: KdeModel, p: PlanarPoint | np.ndarray):
    """Log density at one point (``PlanarPoint``) or at rows of an ``(m, 2)`` array."""
    if isinstance(p, PlanarPoint):
        return float(_kde_logpdf(model.training_points, np.array([[p.x, p.y]]), model.bandwidth_b)[0])
    return _kde_logpdf(model.training_points, np.asarray(p, dtype=float).reshape(-1, 2), model.bandwidth_b)


def kde_cv_scores(points, bandwidth_grid: Iterable[float], folds: int = 10, seed=0) -> dict[float, float]:
    """Mean held-out log-likelihood per bandwidth."""
    pts = points if isinstance(points, np.ndarray) else coords(points)
    grid = sorted(set(float(b) for b in bandwidth_grid))
    if not grid:
        raise ValueError("bandwidth grid is empty")
    blocks = cv_folds(pts.shape[0], folds, seed)
    totals = dict.fromkeys(grid, 0.0)
    for held in blocks:
        train = pts[_train_mask(pts.shape[0], held)]
        for b in grid:
            totals[b] += float(_kde_logpdf(train, pts[held], b).sum())
    return {b: s / pts.shape[0] for b, s in totals.items()}


def kde_cv_bandwidth(points, bandwidth_grid: Iterable[float], folds: int = 10, seed=0) -> float:
    """Grid bandwidth with the best cross-validated log-likelihood (ties go to the larger)."""
    scores = kde_cv_scores(points, bandwidth_grid, folds, seed)
    best = max(scores.values())
    return max(b for b, s in scores.items() if s == best)


def kde_sample(model: KdeModel, n: int, seed=None) -> np.ndarray:
    """``n`` draws from the KDE mixture as an ``(n, 2)`` array."""
    if n < 0:
        raise ValueError("sample size must be non-negative")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, model.training_points.shape[0], size=n)
    return model.training_points[pick] + rng.normal(0.0, model.bandwidth_b, size=(n, 2))


# -- response-time regression -----------------------------------------------


@dataclass(frozen=True)
class KnnModel:
    training_locations: np.ndarray = field(repr=False)
    training_times: np.ndarray = field(repr=False)
    k: int = 10
    shift_a: float = 0.0
    dispersion_b: float = 1.0
    ratio: RatioOrientation = "printed"
    tree: cKDTree = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        locs = np.asarray(self.training_locations, dtype=float).reshape(-1, 2)
        times = np.asarray(self.training_times, dtype=float).reshape(-1)
        if locs.shape[0] != times.shape[0]:
            raise ValueError("one response time per training location required")
        if not 1 <= self.k <= locs.shape[0]:
            raise ValueError(f"k={self.k} outside 1..{locs.shape[0]}")
        if self.dispersion_b < 0:
            raise ValueError("dispersion must be non-negative")
        if self.ratio not in ("printed", "inverse"):
            raise ValueError(f"unknown ratio orientation {self.ratio!r}")
        object.__setattr__(self, "training_locations", locs)
        object.__setattr__(self, "training_times", times)
        if not self.hist_std > 0:
            raise ValueError("historical response times have zero spread")
        object.__setattr__(self, "tree", cKDTree(locs))

    @property
    def hist_mean(self) -> float:
        return float(self.training_times.mean())

    @property
    def hist_std(self) -> float:
        return float(self.training_times.std())

    def with_params(self, k=None, shift_a=None, dispersion_b=None) -> "KnnModel":
        return KnnModel(
            self.training_locations,
            self.training_times,
            self.k if k is None else k,
            self.shift_a if shift_a is None else shift_a,
            self.dispersion_b if dispersion_b is None else dispersion_b,
            self.ratio,
        )


def _idw(dist: np.ndarray, vals: np.ndarray) -> np.ndarray:
    dist = dist.reshape(dist.shape[0], -1)
    vals = vals.reshape(dist.shape)
    exact = dist == 0.0
    with np.errstate(divide="ignore"):
        w = np.where(exact, 0.0, 1.0 / dist)
    out = (w * vals).sum(axis=1) / np.where(w.sum(axis=1) > 0, w.sum(axis=1), 1.0)
    hit = exact.any(axis=1)
    if hit.any():
        # coincident training points short-circuit the weighting
        out[hit] = (np.where(exact, vals, 0.0).sum(axis=1) / np.maximum(exact.sum(axis=1), 1))[hit]
    return out


def knn_predict(model: KnnModel, q):
    """Inverse-distance-weighted mean over the ``k`` nearest training locations.

    Accepts one ``PlanarPoint`` (returns a float) or an ``(m, 2)`` array.
    """
    single = isinstance(q, PlanarPoint)
    query = np.array([[q.x, q.y]]) if single else np.asarray(q, dtype=float).reshape(-1, 2)
    dist, idx = model.tree.query(query, k=model.k)
    pred = _idw(np.asarray(dist), model.training_times[np.asarray(idx)])
    return float(pred[0]) if single else pred


def _affine_transform(h_bar, mean, sd_hist, a, b, ratio):
    h_bar = np.asarray(h_bar, dtype=float)
    sd_pred = float(h_bar.std()) if h_bar.size else 0.0
    if sd_pred == 0.0 or sd_hist == 0.0:
        scale = 0.0
    elif ratio == "printed":
        scale = b * sd_pred / sd_hist
    else:
        scale = b * sd_hist / sd_pred
    return mean + a + (h_bar - mean) * scale


def transform_times(h_bar, model: KnnModel) -> np.ndarray:
    """Re-center on the historical mean, shift by ``a`` and rescale the spread by ``b``.

    ``h = E(h_hist) + a + (h_bar - E(h_hist)) * b * sigma(h_bar) / sigma(h_hist)``;
    ``ratio="inverse"`` swaps the two standard deviations.  A constant
    prediction vector has no spread to rescale and maps to ``E(h_hist) + a``.
    """
    return _affine_transform(
        h_bar, model.hist_mean, model.hist_std, model.shift_a, model.dispersion_b, model.ratio
    )


def knn_score(predicted, actual) -> float:
    """Mean absolute error plus the absolute gap between nearest-rank 90th percentiles."""
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.abs(p - a).mean() + abs(nearest_rank(p, 0.9) - nearest_rank(a, 0.9)))


def knn_cv_scores(locations, times, grid, folds: int = 10, seed=0, ratio: RatioOrientation = "printed"):
    """Mean held-out score for every ``(k, a, b)`` triple in ``grid``."""
    locs = locations if isinstance(locations, np.ndarray) else coords(locations)
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    times = np.asarray(times, dtype=float)
    triples = sorted(set((int(k), float(a), float(b)) for k, a, b in grid))
    if not triples:
        raise ValueError("hyper-parameter grid is empty")
    blocks = cv_folds(locs.shape[0], folds, seed)
    k_max = max(t[0] for t in triples)
    totals = dict.fromkeys(triples, 0.0)
    for held in blocks:
        mask = _train_mask(locs.shape[0], held)
        if k_max > mask.sum():
            raise ValueError(f"k={k_max} exceeds the {mask.sum()} training points in a fold")
        train_times = times[mask]
        mean, sd = float(train_times.mean()), float(train_times.std())
        dist, idx = cKDTree(locs[mask]).query(locs[held], k=k_max)
        dist = np.asarray(dist).reshape(len(held), -1)
        vals = train_times[np.asarray(idx).reshape(len(held), -1)]
        by_k = {k: _idw(dist[:, :k], vals[:, :k]) for k in {t[0] for t in triples}}
        for k, a, b in triples:
            h = _affine_transform(by_k[k], mean, sd, a, b, ratio)
            totals[(k, a, b)] += knn_score(h, times[held])
    return {t: s / len(blocks) for t, s in totals.items()}


def knn_cv_tune(locations, times, grid, folds: int = 10, seed=0, ratio: RatioOrientation = "printed"):
    """Grid triple ``(k, a, b)`` with the lowest mean held-out score; ties go to the smallest triple."""
    scores = knn_cv_scores(locations, times, grid, folds, seed, ratio)
    best = min(scores.values())
    return min(t for t, s in scores.items() if s == best)


def param_grid(ks, shifts, dispersions):
    return list(itertools.product(ks, shifts, dispersions))


# -- simulated years --------------------------------------------------------


@dataclass(frozen=True)
class SimulatedYear:
    incidents: tuple[DemandPoint, ...]
    seed: object
    multiplier: float
    horizon_days: float

    @property
    def daily_rate_per_incident(self) -> float:
        """Arrival-scale factor ``f_j``: each incident occurs once within the horizon."""
        return 1.0 / self.horizon_days


def simulate_year(
    kde: KdeModel,
    knn: KnnModel,
    annual_confirmed: int,
    multiplier: float = 5.0,
    seed=None,
    time_floor: float = DEFAULT_TIME_FLOOR,
) -> SimulatedYear:
    """One year of confirmed incidents compressed into ``365 / multiplier`` days."""
    if annual_confirmed < 0:
        raise ValueError("incident count must be non-negative")
    if multiplier < 1:
        raise ValueError("call-volume multiplier must be at least 1")
    if not time_floor > 0:
        raise ValueError("time floor must be positive")
    horizon = DAYS_PER_YEAR / multiplier
    if annual_confirmed == 0:
        return SimulatedYear((), seed, multiplier, horizon)
    pts = kde_sample(kde, annual_confirmed, seed)
    times = np.maximum(transform_times(knn_predict(knn, pts), knn), time_floor)
    incidents = tuple(
        DemandPoint(PlanarPoint(float(x), float(y)), float(t)) for (x, y), t in zip(pts, times)
    )
    return SimulatedYear(incidents, seed, multiplier, horizon)


# -- fitted generator -------------------------------------------------------


@dataclass(frozen=True)
class SimModels:
    kde: KdeModel
    knn: KnnModel
    fold_of: tuple[int, ...]  # CV fold index of every fitting point, for audit

    def year(self, annual_confirmed: int, multiplier: float, seed, time_floor: float = DEFAULT_TIME_FLOOR) -> SimulatedYear:
        return simulate_year(self.kde, self.knn, annual_confirmed, multiplier, seed, time_floor)


def fit_sim_models(
    locations,
    times,
    bandwidth_grid: Iterable[float],
    knn_grid,
    folds: int = 10,
    seed=0,
    ratio: RatioOrientation = "printed",
) -> SimModels:
    """Tune the KDE bandwidth and the KNN triple on the same seeded folds."""
    locs = locations if isinstance(locations, np.ndarray) else coords(locations)
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    times = np.asarray(times, dtype=float)
    bandwidth = kde_cv_bandwidth(locs, bandwidth_grid, folds, seed)
    usable = [t for t in knn_grid if t[0] <= locs.shape[0] - math.ceil(locs.shape[0] / folds)]
    if not usable:
        raise ValueError("every k in the grid exceeds the training points per fold")
    k, a, b = knn_cv_tune(locs, times, usable, folds, seed, ratio)
    fold_of = np.empty(locs.shape[0], dtype=int)
    for f, block in enumerate(cv_folds(locs.shape[0], folds, seed)):
        fold_of[block] = f
    return SimModels(
        KdeModel.fit(locs, bandwidth),
        KnnModel(locs, times, k, a, b, ratio),
        tuple(int(v) for v in fold_of),
    )
