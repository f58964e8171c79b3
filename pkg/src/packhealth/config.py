"""Run configuration: a JSON key-value file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

from .ecm import PseudoOcv, SelectionWindow
from .errors import ConfigError, ContractViolation
from .faults import DEFAULT_BAND, FaultConfig
from .kernels import Hyperparameters
from .telemetry import Schema

BACKENDS = ("exact", "recursive")
BASIS_METHODS = ("kmeans", "grid")
MEAN_MODES = ("zero", "constant")


@dataclasses.dataclass
class TuneConfig:
    points: int = 16000
    budget: int = 400
    restarts: int = 0
    n_systems: int = 4
    systems: Optional[list] = None


@dataclasses.dataclass
class RunConfig:
    inputs: list = dataclasses.field(default_factory=list)
    schema: Schema = Schema()
    selection: SelectionWindow = SelectionWindow()
    pocv: PseudoOcv = PseudoOcv()
    hyperparameters: Hyperparameters = Hyperparameters()
    band_b: float = DEFAULT_BAND
    alert_settling_days: float = 30.0
    reference_op: Optional[tuple] = None  # None: mean of the systems' mean operating points
    backend: str = "recursive"
    basis: str = "kmeans"
    n_kmeans: int = 27
    max_basis: int = 64
    update_interval_hours: float = 1.0
    gap_days: float = 100.0
    min_points: int = 600
    nominal_capacity_ah: float = 160.0
    downselect_cap: int = 4000
    mean: str = "zero"
    seed: int = 0
    output: str = "out"
    tune: TuneConfig = dataclasses.field(default_factory=TuneConfig)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.basis not in BASIS_METHODS:
            raise ConfigError(f"basis must be one of {BASIS_METHODS}, got {self.basis!r}")
        if self.mean not in MEAN_MODES:
            raise ConfigError(f"mean must be one of {MEAN_MODES}, got {self.mean!r}")
        if self.update_interval_hours <= 0:
            raise ConfigError("update_interval_hours must be positive")
        if self.alert_settling_days < 0:
            raise ConfigError("alert_settling_days must be >= 0")
        if self.nominal_capacity_ah <= 0:
            raise ConfigError("nominal_capacity_ah must be positive")

    def fault_config(self, reference_op) -> FaultConfig:
        return FaultConfig(self.band_b, tuple(reference_op), self.selection)

    def input_files(self) -> list:
        """CSV files named by ``inputs`` (directories are expanded)."""
        files = []
        for entry in self.inputs:
            p = Path(entry)
            if not p.is_absolute():
                p = self.base_dir / p
            if p.is_dir():
                files.extend(sorted(p.glob("*.csv")))
            elif p.is_file():
                files.append(p)
            else:
                raise ConfigError(f"input path does not exist: {p}")
        return files

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        kw = {"base_dir": Path(base_dir)}
        hp_file = data.get("hyperparameters_file")
        for key, value in data.items():
            if key == "hyperparameters_file":
                continue
            if key not in names:
                raise ConfigError(f"unknown config key: {key!r}")
            try:
                kw[key] = _convert(key, value)
            except (TypeError, ContractViolation) as exc:
                raise ConfigError(f"invalid value for config key {key!r}: {exc}") from exc
        if hp_file is not None:
            if "hyperparameters" in data:
                raise ConfigError("give either 'hyperparameters' or 'hyperparameters_file', not both")
            path = Path(hp_file)
            kw["hyperparameters"] = Hyperparameters.load(path if path.is_absolute() else Path(base_dir) / path)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        return {
            "inputs": [str(p) for p in self.inputs],
            "schema": self.schema.to_dict(),
            "selection": {k: list(v) for k, v in dataclasses.asdict(self.selection).items()},
            "pocv": dataclasses.asdict(self.pocv),
            "hyperparameters": self.hyperparameters.to_dict(),
            "band_b": self.band_b,
            "alert_settling_days": self.alert_settling_days,
            "reference_op": None if self.reference_op is None else list(self.reference_op),
            "backend": self.backend,
            "basis": self.basis,
            "n_kmeans": self.n_kmeans,
            "max_basis": self.max_basis,
            "update_interval_hours": self.update_interval_hours,
            "gap_days": self.gap_days,
            "min_points": self.min_points,
            "nominal_capacity_ah": self.nominal_capacity_ah,
            "downselect_cap": self.downselect_cap,
            "mean": self.mean,
            "seed": self.seed,
            "output": self.output,
            "tune": dataclasses.asdict(self.tune),
        }


def _strict(klass, value: dict, prefix: str):
    if not isinstance(value, dict):
        raise ConfigError(f"config key {prefix!r} must be an object")
    names = {f.name for f in dataclasses.fields(klass)}
    for k in value:
        if k not in names:
            raise ConfigError(f"unknown config key: '{prefix}.{k}'")
    return klass(**value)


def _convert(key, value):
    if key == "schema":
        if not isinstance(value, dict):
            raise ConfigError("config key 'schema' must be an object")
        try:
            return Schema.from_dict(value)
        except ConfigError as exc:
            raise ConfigError(f"schema: {exc}") from exc
    if key == "selection":
        return _strict(SelectionWindow, {k: tuple(v) for k, v in value.items()}, key)
    if key == "pocv":
        return _strict(PseudoOcv, value, key)
    if key == "hyperparameters":
        try:
            return Hyperparameters.from_dict(value)
        except ConfigError as exc:
            raise ConfigError(f"hyperparameters: {exc}") from exc
    if key == "tune":
        return _strict(TuneConfig, value, key)
    if key == "reference_op":
        if value is None:
            return None
        if len(value) != 3:
            raise ConfigError("reference_op needs (current, soc, temperature)")
        return tuple(float(v) for v in value)
    if key == "inputs":
        return [str(v) for v in (value if isinstance(value, list) else [value])]
    return value
