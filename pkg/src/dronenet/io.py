"""CSV ingestion and result files (JSON report, CSV summary, GeoJSON)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .simgen import KnnModel, SimulatedYear, knn_predict
from .travel import DemandPoint, PlanarPoint

STATION_COLUMNS = ("id", "x_m", "y_m", "kind")
INCIDENT_COLUMNS = ("x_m", "y_m", "baseline_s")


class SchemaError(ValueError):
    def __init__(self, path, row: int | None, message: str):
        where = f"{path}" if row is None else f"{path}, row {row}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.row = row


@dataclass(frozen=True)
class Stations:
    ids: tuple[str, ...]
    points: tuple[PlanarPoint, ...]
    kinds: tuple[str, ...]


@dataclass(frozen=True)
class Incidents:
    demands: tuple[DemandPoint, ...]
    dropped_rows: tuple[int, ...] = ()
    imputed_rows: tuple[int, ...] = ()


def _rows(path, columns: Sequence[str]):
    path = Path(path)
    if not path.is_file():
        raise SchemaError(path, None, "file not found")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        if not header:
            raise SchemaError(path, None, "empty file")
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(path, 1, f"missing columns {missing}; expected header {','.join(columns)}")
        reader.fieldnames = header
        rows = []
        for line, row in enumerate(reader, start=2):
            if all((v or "").strip() == "" for v in row.values() if isinstance(v, str)):
                continue
            rows.append((line, row))
    if not rows:
        raise SchemaError(path, None, "no data rows")
    return path, rows


def _coord(path, line: int, row: dict, key: str) -> float:
    raw = (row.get(key) or "").strip()
    try:
        value = float(raw)
    except ValueError:
        raise SchemaError(path, line, f"{key}={raw!r} is not a number") from None
    if not math.isfinite(value):
        raise SchemaError(path, line, f"{key} is not finite")
    return value


def read_stations(path) -> Stations:
    """Every row is a candidate base; ``kind`` is carried through as a label."""
    path, rows = _rows(path, STATION_COLUMNS)
    ids, pts, kinds = [], [], []
    seen: dict[str, int] = {}
    for line, row in rows:
        sid = (row.get("id") or "").strip()
        if not sid:
            raise SchemaError(path, line, "empty station id")
        if sid in seen:
            raise SchemaError(path, line, f"station id {sid!r} repeats row {seen[sid]}")
        seen[sid] = line
        ids.append(sid)
        pts.append(PlanarPoint(_coord(path, line, row, "x_m"), _coord(path, line, row, "y_m")))
        kinds.append((row.get("kind") or "").strip())
    return Stations(tuple(ids), tuple(pts), tuple(kinds))


def read_incident_table(path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Locations ``(n, 2)``, baselines (NaN where blank) and source line numbers."""
    path, rows = _rows(path, INCIDENT_COLUMNS)
    locs, times, lines = [], [], []
    for line, row in rows:
        x, y = _coord(path, line, row, "x_m"), _coord(path, line, row, "y_m")
        raw = (row.get("baseline_s") or "").strip()
        if raw == "":
            t = math.nan
        else:
            try:
                t = float(raw)
            except ValueError:
                raise SchemaError(path, line, f"baseline_s={raw!r} is not a number") from None
            if not math.isfinite(t) or t < 0:
                raise SchemaError(path, line, f"baseline_s must be a non-negative number, got {raw}")
        locs.append((x, y))
        times.append(t)
        lines.append(line)
    return np.array(locs, dtype=float).reshape(-1, 2), np.array(times, dtype=float), lines


def read_incidents(path, missing: str = "drop", impute_k: int = 5) -> Incidents:
    """Incident rows as demand points; blank baselines are dropped or imputed by KNN."""
    locs, times, lines = read_incident_table(path)
    gap = np.isnan(times)
    if missing not in ("drop", "impute"):
        raise ValueError(f"missing-baseline policy must be drop or impute, got {missing!r}")
    known = ~gap
    if not known.any():
        raise SchemaError(path, None, "no row has a baseline response time")
    imputed: list[int] = []
    if gap.any() and missing == "impute":
        k = min(impute_k, int(known.sum()))
        model = KnnModel(locs[known], times[known], k) if times[known].std() > 0 else None
        if model is None:
            times[gap] = times[known][0]
        else:
            times[gap] = knn_predict(model, locs[gap])
        imputed = [lines[i] for i in np.flatnonzero(gap)]
        keep = np.ones_like(gap)
    else:
        keep = known
    demands = tuple(
        DemandPoint(PlanarPoint(float(x), float(y)), float(t)) for (x, y), t in zip(locs[keep], times[keep])
    )
    dropped = [lines[i] for i in np.flatnonzero(~keep)]
    return Incidents(demands, tuple(dropped), tuple(imputed))


def ingest(stations_csv, incidents_csv, missing: str = "drop", impute_k: int = 5):
    """``(Stations, Incidents)`` from the two input files."""
    return read_stations(stations_csv), read_incidents(incidents_csv, missing, impute_k)


def write_year_csv(year: SimulatedYear, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INCIDENT_COLUMNS)
        for d in year.incidents:
            w.writerow([repr(d.location.x), repr(d.location.y), repr(d.baseline_seconds)])


# -- outputs ----------------------------------------------------------------


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


SUMMARY_COLUMNS = (
    "set", "n", "baseline_mean_s", "optimized_mean_s", "baseline_p90_s", "optimized_p90_s",
    "mean_improvement_s", "p90_improvement_s",
)


def summary_rows(report: dict) -> list[list]:
    rows = []
    ev = report.get("evaluation") or {}
    sets = [("train", ev["train"])] if ev.get("train") else []
    sets += [(f"test_{k:03d}", m) for k, m in enumerate(ev.get("test_sets", []))]
    for name, m in sets:
        rows.append([
            name, m["n"], m["baseline_mean_s"], m["optimized_mean_s"], m["baseline_p90_s"],
            m["optimized_p90_s"], m["mean_improvement_s"], m["p90_improvement_s"],
        ])
    return rows


def geojson(
    stations: Stations,
    drones_per_base: dict[str, int],
    demands: Sequence[DemandPoint],
    optimized_seconds: Sequence[float] | None = None,
    crs: str | None = None,
) -> dict:
    """Open bases with their drone counts, then every demand point with both response times."""
    features = []
    for sid, p, kind in zip(stations.ids, stations.points, stations.kinds):
        n = int(drones_per_base.get(sid, 0))
        if n <= 0:
            continue
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [p.x, p.y]},
            "properties": {"layer": "base", "id": sid, "kind": kind, "drones": n},
        })
    for j, d in enumerate(demands):
        props = {"layer": "demand", "index": j, "baseline_s": d.baseline_seconds}
        props["optimized_s"] = float(optimized_seconds[j]) if optimized_seconds is not None else d.baseline_seconds
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [d.location.x, d.location.y]},
            "properties": props,
        })
    out = {"type": "FeatureCollection", "features": features}
    if crs:
        out["crs"] = {"type": "name", "properties": {"name": crs}}
    return out


def emit_outputs(
    report: dict,
    stations: Stations,
    demands: Sequence[DemandPoint],
    optimized_seconds: Sequence[float] | None,
    out_dir,
    crs: str | None = None,
) -> dict[str, Path]:
    """Write ``report.json``, ``summary.csv`` and ``network.geojson`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "summary": out / "summary.csv", "geojson": out / "network.geojson"}
    paths["report"].write_text(dump_json(report), encoding="utf-8")
    with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(summary_rows(report))
    design = (report.get("stage1") or {}).get("drones_per_base") or {}
    paths["geojson"].write_text(dump_json(geojson(stations, design, demands, optimized_seconds, crs)), encoding="utf-8")
    return paths
