"""Zero-order equivalent circuit: resistance observations from telemetry.

The cell is modelled as a linear pseudo open-circuit voltage in series with
a resistance, so every selected discharge sample yields one observation
``R = (u - OCV(soc)) / i``.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation
from .telemetry import CellSamples

# observations below this are treated as sensor faults, not noise
MIN_RESISTANCE = -0.05


class OperatingPoint(NamedTuple):
    current: float
    soc: float
    temperature: float


@dataclasses.dataclass(frozen=True)
class PseudoOcv:
    """Linear OCV(soc) between the 0 % and 100 % endpoint voltages."""

    v_at_0: float = 3.00
    v_at_100: float = 3.40

    def __post_init__(self):
        if not self.v_at_100 > self.v_at_0:
            raise ContractViolation("pseudo-OCV must increase with SOC")
        for v in (self.v_at_0, self.v_at_100):
            if not 2.0 < v < 4.0:
                raise ContractViolation(f"pseudo-OCV endpoint {v} V outside (2, 4) V")

    def __call__(self, soc):
        return pseudo_ocv(self, soc)


def pseudo_ocv(pocv: PseudoOcv, soc):
    soc_arr = np.asarray(soc, dtype=float)
    if np.any((soc_arr < 0) | (soc_arr > 100)):
        raise ContractViolation("SOC must lie in [0, 100] %")
    out = pocv.v_at_0 + soc_arr / 100.0 * (pocv.v_at_100 - pocv.v_at_0)
    return float(out) if out.ndim == 0 else out


@dataclasses.dataclass(frozen=True)
class SelectionWindow:
    """Open intervals a sample must fall in to be used for modelling."""

    current: tuple[float, float] = (-200.0, -5.0)
    soc: tuple[float, float] = (40.0, 94.0)
    temperature: tuple[float, float] = (10.0, 100.0)

    def __post_init__(self):
        for name in ("current", "soc", "temperature"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ContractViolation(f"selection bound {name} has lo > hi")
        if self.current[1] > 0:
            raise ContractViolation("selection must be restricted to discharge (current < 0)")

    @property
    def min_abs_current(self) -> float:
        return abs(self.current[1])

    def contains(self, current, soc, temperature) -> np.ndarray:
        current = np.asarray(current, dtype=float)
        soc = np.asarray(soc, dtype=float)
        temperature = np.asarray(temperature, dtype=float)
        return (
            (current > self.current[0]) & (current < self.current[1])
            & (soc > self.soc[0]) & (soc < self.soc[1])
            & (temperature > self.temperature[0]) & (temperature < self.temperature[1])
        )

    def as_bounds(self) -> np.ndarray:
        """Window as a (3, 2) array of (lo, hi), rows ordered like operating points."""
        return np.array([self.current, self.soc, self.temperature], dtype=float)


DEFAULT_WINDOW = SelectionWindow()


class ResistanceObservation(NamedTuple):
    time: float
    op: OperatingPoint
    resistance: float
    cell_index: int


@dataclasses.dataclass
class Observations:
    """Columnar resistance observations for one cell, sorted by time.

    ``time`` is in days relative to ``origin`` (epoch seconds).
    """

    time: np.ndarray
    ops: np.ndarray
    resistance: np.ndarray
    cell_index: int
    origin: float = 0.0

    def __len__(self):
        return self.time.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return ResistanceObservation(
                float(self.time[i]), OperatingPoint(*map(float, self.ops[i])),
                float(self.resistance[i]), self.cell_index,
            )
        return Observations(self.time[i], self.ops[i], self.resistance[i], self.cell_index, self.origin)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def rebase(self, origin: float) -> "Observations":
        """Same observations with times re-expressed relative to a new origin."""
        shift = (self.origin - origin) / 86400.0
        return Observations(self.time + shift, self.ops, self.resistance, self.cell_index, origin)


def select_samples(samples: CellSamples, window: SelectionWindow = DEFAULT_WINDOW) -> CellSamples:
    """Keep discharge samples strictly inside the selection window."""
    keep = window.contains(samples.current, samples.soc, samples.temperature)
    return samples[keep]


def resistance_observation(sample, pocv: PseudoOcv = PseudoOcv(),
                           min_abs_current: float = DEFAULT_WINDOW.min_abs_current,
                           origin: float = 0.0) -> ResistanceObservation:
    """Equivalent resistance of a single selected sample."""
    if not abs(sample.current) >= min_abs_current or sample.current >= 0:
        raise ContractViolation(
            f"|current| {abs(sample.current)} A is below the selection floor {min_abs_current} A"
        )
    r = (sample.voltage - pseudo_ocv(pocv, sample.soc)) / sample.current
    return ResistanceObservation(
        (sample.timestamp - origin) / 86400.0,
        OperatingPoint(sample.current, sample.soc, sample.temperature),
        r, sample.cell_index,
    )


def resistance_observations(samples: CellSamples, pocv: PseudoOcv = PseudoOcv(),
                            origin: float | None = None,
                            min_abs_current: float = DEFAULT_WINDOW.min_abs_current) -> Observations:
    """Vectorised :func:`resistance_observation` over selected samples.

    Observations below ``MIN_RESISTANCE`` are dropped as sensor faults.
    ``origin`` defaults to the first sample's timestamp.
    """
    if len(samples) and (np.any(samples.current >= 0)
                         or np.any(np.abs(samples.current) < min_abs_current)):
        raise ContractViolation("resistance requires selected discharge samples")
    if origin is None:
        origin = float(samples.timestamp[0]) if len(samples) else 0.0
    r = (samples.voltage - pseudo_ocv(pocv, samples.soc)) / samples.current
    ok = np.isfinite(r) & (r > MIN_RESISTANCE)
    ops = np.column_stack([samples.current, samples.soc, samples.temperature])[ok]
    return Observations(
        (samples.timestamp[ok] - origin) / 86400.0, ops, r[ok], samples.cell_index, origin
    )


def downselect_indices(count: int, cap: int = 40000) -> np.ndarray:
    """Linearly spaced indices, first and last always included."""
    if cap < 1:
        raise ContractViolation("downselect cap must be >= 1")
    if count <= cap:
        return np.arange(count)
    if cap == 1:
        return np.array([0])
    return np.round(np.linspace(0, count - 1, cap)).astype(np.int64)


def downselect(observations, cap: int = 40000):
    idx = downselect_indices(len(observations), cap)
    if isinstance(observations, (Observations, CellSamples, np.ndarray)):
        return observations[idx]
    return [observations[i] for i in idx]
