"""Ingestion and descriptive statistics of per-system telemetry logs.

A system log holds one row per timestamp with the pack current, the eight
series cell voltages, four temperature sensors (each shared by two adjacent
cells) and the BMS state of charge.  Records are stored column-wise; indexing
a :class:`Telemetry` with an integer yields a :class:`TelemetryRecord`.
"""

from __future__ import annotations

import collections
import dataclasses
import logging
import math
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractViolation, DataError

log = logging.getLogger(__name__)

N_CELLS = 8
N_SENSORS = 4
SECONDS_PER_DAY = 86400.0


class TelemetryRecord(NamedTuple):
    timestamp: float
    pack_current: float
    cell_voltages: tuple
    temperatures: tuple
    soc: float
    balancing_currents: Optional[tuple] = None


@dataclasses.dataclass(frozen=True)
class Schema:
    """Maps logical telemetry fields to CSV column names."""

    timestamp: str = "timestamp"
    current: str = "current"
    voltages: tuple = tuple(f"u{i}" for i in range(1, N_CELLS + 1))
    temperatures: tuple = tuple(f"t{i}" for i in range(1, N_SENSORS + 1))
    soc: str = "soc"
    balancing: Optional[tuple] = None
    delimiter: str = ","

    def __post_init__(self):
        if len(self.voltages) != N_CELLS:
            raise ConfigError(f"schema needs {N_CELLS} voltage columns, got {len(self.voltages)}")
        if len(self.temperatures) != N_SENSORS:
            raise ConfigError(f"schema needs {N_SENSORS} temperature columns")
        if self.balancing is not None and len(self.balancing) != N_CELLS:
            raise ConfigError(f"schema needs {N_CELLS} balancing columns")

    def required_columns(self) -> list:
        return [self.timestamp, self.current, *self.voltages, *self.temperatures, self.soc]

    @classmethod
    def from_dict(cls, data: dict) -> "Schema":
        fields = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in fields:
                raise ConfigError(f"unknown schema key: {key!r}")
        kw = dict(data)
        for key in ("voltages", "temperatures", "balancing"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("voltages", "temperatures", "balancing"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


@dataclasses.dataclass
class Telemetry:
    """Column-wise telemetry of one system, sorted by timestamp.

    ``rejects`` counts dropped input rows by reason code.
    """

    timestamp: np.ndarray
    pack_current: np.ndarray
    cell_voltages: np.ndarray  # (n, 8)
    temperatures: np.ndarray  # (n, 4)
    soc: np.ndarray
    balancing_currents: Optional[np.ndarray] = None
    rejects: dict = dataclasses.field(default_factory=dict)
    name: str = ""

    def __len__(self):
        return self.timestamp.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            bal = None
            if self.balancing_currents is not None:
                bal = tuple(map(float, self.balancing_currents[i]))
            return TelemetryRecord(
                float(self.timestamp[i]), float(self.pack_current[i]),
                tuple(map(float, self.cell_voltages[i])),
                tuple(map(float, self.temperatures[i])),
                float(self.soc[i]), bal,
            )
        bal = None if self.balancing_currents is None else self.balancing_currents[i]
        return Telemetry(
            self.timestamp[i], self.pack_current[i], self.cell_voltages[i],
            self.temperatures[i], self.soc[i], bal, dict(self.rejects), self.name,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_records(cls, records, name: str = "") -> "Telemetry":
        records = list(records)
        has_bal = bool(records) and all(r.balancing_currents is not None for r in records)
        return cls(
            np.array([r.timestamp for r in records], dtype=float),
            np.array([r.pack_current for r in records], dtype=float),
            np.array([r.cell_voltages for r in records], dtype=float).reshape(-1, N_CELLS),
            np.array([r.temperatures for r in records], dtype=float).reshape(-1, N_SENSORS),
            np.array([r.soc for r in records], dtype=float),
            np.array([r.balancing_currents for r in records], dtype=float) if has_bal else None,
            name=name,
        )

    def to_frame(self, schema: Schema = Schema()) -> pd.DataFrame:
        cols = {schema.timestamp: self.timestamp, schema.current: self.pack_current}
        for j, name in enumerate(schema.voltages):
            cols[name] = self.cell_voltages[:, j]
        for j, name in enumerate(schema.temperatures):
            cols[name] = self.temperatures[:, j]
        cols[schema.soc] = self.soc
        if schema.balancing is not None and self.balancing_currents is not None:
            for j, name in enumerate(schema.balancing):
                cols[name] = self.balancing_currents[:, j]
        return pd.DataFrame(cols)

    def to_csv(self, path, schema: Schema = Schema()) -> None:
        self.to_frame(schema).to_csv(path, index=False, sep=schema.delimiter, float_format="%.17g")

    def cell(self, cell_index: int) -> "CellSamples":
        """Samples of one cell, with the temperature of its shared sensor."""
        sensor = map_temperature(cell_index)
        return CellSamples(
            self.timestamp, self.pack_current, self.cell_voltages[:, cell_index - 1],
            self.temperatures[:, sensor - 1], self.soc, cell_index,
        )


def _to_seconds(col: pd.Series) -> pd.Series:
    if pd.api.types.is_numeric_dtype(col):
        return col.astype(float)
    numeric = pd.to_numeric(col, errors="coerce")
    if numeric.notna().sum() >= max(1, col.notna().sum() // 2):
        return numeric.astype(float)
    parsed = pd.to_datetime(col, errors="coerce", utc=True)
    secs = (parsed - pd.Timestamp(0, tz="UTC")).dt.total_seconds()
    return secs.astype(float)


def parse_csv(path, schema: Schema = Schema(), name: Optional[str] = None) -> Telemetry:
    """Read one system log.

    Rows with a missing or non-numeric required field, a non-finite
    timestamp, an SOC outside [0, 100] or a duplicated timestamp are
    rejected (first occurrence of a duplicate is kept); counts per reason are
    stored in ``Telemetry.rejects`` and logged.  Nothing is imputed.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"telemetry file not found: {path}")
    raw = pd.read_csv(path, sep=schema.delimiter, skipinitialspace=True, low_memory=False,
                      float_precision="round_trip")
    raw.columns = [c.strip() for c in raw.columns]
    missing = [c for c in schema.required_columns() if c not in raw.columns]
    if schema.balancing is not None:
        missing += [c for c in schema.balancing if c not in raw.columns]
    if missing:
        raise ConfigError(f"{path.name}: missing required column(s) {missing}")

    rejects = collections.Counter()
    ts = _to_seconds(raw[schema.timestamp])
    numeric_cols = [schema.current, *schema.voltages, *schema.temperatures, schema.soc]
    if schema.balancing is not None:
        numeric_cols += list(schema.balancing)
    values = raw[numeric_cols].apply(pd.to_numeric, errors="coerce")

    bad_ts = ~np.isfinite(ts.to_numpy())
    rejects["bad_timestamp"] += int(bad_ts.sum())
    finite = np.isfinite(values.to_numpy(dtype=float)).all(axis=1)
    bad_val = ~bad_ts & ~finite
    rejects["missing_or_non_numeric"] += int(bad_val.sum())
    soc = values[schema.soc].to_numpy(dtype=float)
    with np.errstate(invalid="ignore"):
        bad_soc = ~bad_ts & finite & ~((soc >= 0) & (soc <= 100))
    rejects["soc_out_of_range"] += int(bad_soc.sum())
    keep = ~(bad_ts | bad_val | bad_soc)

    frame = values[keep].copy()
    frame["__ts"] = ts[keep].to_numpy()
    frame = frame.sort_values("__ts", kind="mergesort")
    dup = frame["__ts"].duplicated(keep="first").to_numpy()
    rejects["duplicate_timestamp"] += int(dup.sum())
    frame = frame[~dup]

    t = frame["__ts"].to_numpy(dtype=float)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise DataError(f"{path.name}: timestamps not strictly increasing after sort")

    rejects = {k: v for k, v in rejects.items() if v}
    if rejects:
        log.warning("%s: rejected rows %s", path.name, rejects)
    bal = None
    if schema.balancing is not None:
        bal = frame[list(schema.balancing)].to_numpy(dtype=float)
    return Telemetry(
        t,
        frame[schema.current].to_numpy(dtype=float),
        frame[list(schema.voltages)].to_numpy(dtype=float),
        frame[list(schema.temperatures)].to_numpy(dtype=float),
        frame[schema.soc].to_numpy(dtype=float),
        bal,
        rejects,
        name if name is not None else path.stem,
    )


def map_temperature(cell_index: int) -> int:
    """Sensor (1..4) shared by cell pair (2k-1, 2k)."""
    if not isinstance(cell_index, (int, np.integer)) or not 1 <= cell_index <= N_CELLS:
        raise ContractViolation(f"cell index must be in 1..{N_CELLS}, got {cell_index!r}")
    return (int(cell_index) + 1) // 2


class CellSample(NamedTuple):
    timestamp: float
    current: float
    voltage: float
    temperature: float
    soc: float
    cell_index: int


@dataclasses.dataclass
class CellSamples:
    """Column-wise samples of one cell."""

    timestamp: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray
    soc: np.ndarray
    cell_index: int

    def __len__(self):
        return self.timestamp.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return CellSample(
                float(self.timestamp[i]), float(self.current[i]), float(self.voltage[i]),
                float(self.temperature[i]), float(self.soc[i]), self.cell_index,
            )
        return CellSamples(
            self.timestamp[i], self.current[i], self.voltage[i],
            self.temperature[i], self.soc[i], self.cell_index,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples, cell_index: Optional[int] = None) -> "CellSamples":
        samples = list(samples)
        if cell_index is None:
            cell_index = samples[0].cell_index if samples else 1
        cols = np.array([s[:5] for s in samples], dtype=float).reshape(-1, 5)
        return cls(*cols.T, cell_index)

    def within(self, section: "DataSection") -> "CellSamples":
        keep = (self.timestamp >= section.start) & (self.timestamp <= section.end)
        return self[keep]


def mean_subtracted_voltage(voltages, cell_index: int) -> np.ndarray:
    """Cell voltage minus the mean of the other cells, per row.

    ``voltages`` is a :class:`Telemetry` or an ``(n_rows, n_cells)`` array.
    """
    u = _voltage_matrix(voltages)
    n = u.shape[1]
    if n < 2:
        raise ContractViolation("need at least two cells")
    if not 1 <= cell_index <= n:
        raise ContractViolation(f"cell index must be in 1..{n}")
    ui = u[:, cell_index - 1]
    return ui - (u.sum(axis=1) - ui) / (n - 1)


def voltage_std(voltages) -> np.ndarray:
    """Sample standard deviation of the cell voltages, per row."""
    u = _voltage_matrix(voltages)
    if u.shape[1] < 2:
        raise ContractViolation("need at least two cells")
    return np.std(u, axis=1, ddof=1)


def _voltage_matrix(voltages) -> np.ndarray:
    if isinstance(voltages, Telemetry):
        return voltages.cell_voltages
    return np.atleast_2d(np.asarray(voltages, dtype=float))


def voltage_statistics(telemetry: Telemetry) -> pd.DataFrame:
    """Per-row mean-subtracted voltage of every cell and the voltage spread."""
    cols = {"timestamp": telemetry.timestamp}
    for i in range(1, N_CELLS + 1):
        cols[f"u_tilde_{i}"] = mean_subtracted_voltage(telemetry, i)
    cols["sigma_u"] = voltage_std(telemetry)
    return pd.DataFrame(cols)


@dataclasses.dataclass(frozen=True)
class DataSection:
    start: float
    end: float
    sample_count: int
    cell_index: int

    @property
    def duration_days(self) -> float:
        return (self.end - self.start) / SECONDS_PER_DAY


def split_sections(samples: CellSamples, gap_days: float = 100.0) -> list:
    """All sections separated by gaps longer than ``gap_days``."""
    t = samples.timestamp
    if t.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(t) > gap_days * SECONDS_PER_DAY) + 1
    bounds = np.concatenate([[0], cuts, [t.size]])
    return [
        DataSection(float(t[a]), float(t[b - 1]), int(b - a), samples.cell_index)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]


def segment_sections(samples: CellSamples, gap_days: float = 100.0,
                     min_points: int = 600) -> Optional[DataSection]:
    """Latest gap-free section, or None when it has too few samples."""
    sections = split_sections(samples, gap_days)
    if not sections or sections[-1].sample_count < min_points:
        return None
    return sections[-1]


def equivalent_full_cycles(telemetry: Telemetry, nominal_capacity: float,
                           max_gap_s: float = 3600.0) -> float:
    """Charge throughput / (2 x nominal capacity), trapezoidal in time.

    Intervals longer than ``max_gap_s`` (logger off) contribute nothing.
    """
    if not nominal_capacity > 0:
        raise ContractViolation("nominal capacity must be positive")
    t = telemetry.timestamp
    if t.size < 2:
        return 0.0
    i = np.abs(telemetry.pack_current)
    dt = np.diff(t)
    seg = 0.5 * (i[1:] + i[:-1]) * dt
    seg[dt > max_gap_s] = 0.0
    amp_hours = float(seg.sum()) / 3600.0
    return amp_hours / (2.0 * nominal_capacity)


def days(seconds, origin: float) -> np.ndarray:
    return (np.asarray(seconds, dtype=float) - origin) / SECONDS_PER_DAY


def floor_to_hour(timestamp: float) -> float:
    return math.floor(timestamp / 3600.0) * 3600.0
