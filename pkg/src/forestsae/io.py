"""Flat-file ingestion with row-level validation, table writers carrying a
config fingerprint, and the run configuration schema."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forestsae.model import LidarRecord, PlotRecord, PredictionCell
from forestsae.spatial import Location

PLOT_COLUMNS = ["id", "x_km", "y_km", "stratum", "y_mgha", "x_ch_m", "v_tc_pct"]
LIDAR_COLUMNS = ["id", "x_km", "y_km", "stratum", "x_ch_m", "v_tc_pct"]
CELL_COLUMNS = ["id", "x_km", "y_km", "stratum", "v_tc_pct", "area_ha"]

CONFIG_VERSION = 1


class ValidationError(ValueError):
    """Aggregated row-level failures, each tagged with its line number."""

    def __init__(self, path, errors):
        self.path = str(path)
        self.errors = errors
        preview = "; ".join(f"line {ln}: {msg}" for ln, msg in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{path}: {len(errors)} invalid rows: {preview}{more}")


def _parse_rows(path, columns):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(path, [(1, "empty file")])
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise ValidationError(path, [(1, f"missing columns {missing}")])
        rows = [(reader.line_num, row) for row in reader]
    return rows


def _load_records(path, columns, build, n_strata=None):
    rows = _parse_rows(path, columns)
    records, errors = [], []
    for line, row in rows:
        try:
            rid = int(row["id"])
            stratum = int(row["stratum"])
            if n_strata is not None and not 0 <= stratum < n_strata:
                raise ValueError(f"stratum {stratum} outside 0..{n_strata - 1}")
            loc = Location(float(row["x_km"]), float(row["y_km"]), rid)
            records.append(build(loc, stratum, row))
        except (ValueError, TypeError) as exc:
            errors.append((line, str(exc)))
    if errors:
        raise ValidationError(path, errors)
    return records


def load_plots(path, n_strata=None) -> list[PlotRecord]:
    return _load_records(
        path, PLOT_COLUMNS,
        lambda loc, s, row: PlotRecord(loc, float(row["y_mgha"]), s,
                                       float(row["x_ch_m"]),
                                       float(row["v_tc_pct"])),
        n_strata)


def load_lidar(path, n_strata=None) -> list[LidarRecord]:
    return _load_records(
        path, LIDAR_COLUMNS,
        lambda loc, s, row: LidarRecord(loc, s, float(row["x_ch_m"]),
                                        float(row["v_tc_pct"])),
        n_strata)


def load_cells(path, n_strata=None) -> list[PredictionCell]:
    return _load_records(
        path, CELL_COLUMNS,
        lambda loc, s, row: PredictionCell(loc, s, float(row["v_tc_pct"]),
                                           float(row["area_ha"])),
        n_strata)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _r(v):
    # shortest round-trip decimal for exact reload equality
    return repr(float(v))


def write_plots(path, records):
    _write_csv(path, PLOT_COLUMNS,
               [(r.location.id, _r(r.location.x), _r(r.location.y),
                 r.stratum, _r(r.y), _r(r.x_ch), _r(r.v_tc))
                for r in records])


def write_lidar(path, records):
    _write_csv(path, LIDAR_COLUMNS,
               [(r.location.id, _r(r.location.x), _r(r.location.y),
                 r.stratum, _r(r.x_ch), _r(r.v_tc)) for r in records])


def write_cells(path, records):
    _write_csv(path, CELL_COLUMNS,
               [(r.location.id, _r(r.location.x), _r(r.location.y),
                 r.stratum, _r(r.v_tc), _r(r.cell_area))
                for r in records])


def write_table(path, columns, rows, fingerprint=""):
    """CSV with a leading comment line carrying the config fingerprint."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_fingerprint={fingerprint}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_table(path):
    """Read back a write_table file: (fingerprint, columns, rows-as-dicts)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        fingerprint = first.split("=", 1)[1] if "=" in first else ""
        reader = csv.DictReader(fh)
        rows = list(reader)
    return fingerprint, reader.fieldnames, rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, (np.floating,)):
        return f"{float(v):.6f}"
    return v


@dataclass
class RunConfig:
    """The versioned run configuration; raw holds the exact loaded document
    so the fingerprint covers every setting."""

    plots: str | None = None
    lidar: str | None = None
    cells: str | None = None
    output: str = "."
    seed: int = 0
    model: str = "FULL"
    n_strata: int | None = None
    neighbors: int = 15
    prediction_mode: str = "independent"
    allow_novel_strata: bool = False
    mcmc: dict = field(default_factory=dict)
    priors: dict = field(default_factory=dict)
    stability_fractions: list = field(
        default_factory=lambda: [1.0, 0.25, 0.0625, 0.015625])
    simulate: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        version = doc.get("version")
        if version != CONFIG_VERSION:
            raise ValueError(f"config version {version!r} unsupported "
                             f"(expected {CONFIG_VERSION})")
        if "seed" not in doc:
            raise ValueError("config must set a seed (reproducibility)")
        known = {f for f in cls.__dataclass_fields__ if f != "raw"}
        unknown = set(doc) - known - {"version"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in doc.items() if k in known}
        cfg = cls(**kwargs)
        cfg.raw = doc
        return cfg

    def fingerprint(self) -> str:
        doc = dict(self.raw) if self.raw else {
            k: getattr(self, k) for k in self.__dataclass_fields__
            if k != "raw"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve(self, base: Path):
        """Interpret relative data paths against the config file's folder."""
        for attr in ("plots", "lidar", "cells"):
            p = getattr(self, attr)
            if p is not None and not Path(p).is_absolute():
                setattr(self, attr, str(base / p))
        return self
