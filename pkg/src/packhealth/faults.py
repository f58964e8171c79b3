"""Cell and pack resistance-fault probabilities.

A cell is faulty when its resistance leaves a band of half-width ``b``
around the mean resistance of the other cells.  A series pack fails with
its weakest cell, so the pack probability is ``1 - prod(1 - p_i)``.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pandas as pd
from scipy import special

from .ecm import DEFAULT_WINDOW, OperatingPoint, SelectionWindow
from .errors import AlignmentError, ContractViolation

DEFAULT_BAND = 0.33e-3
DEFAULT_REFERENCE = OperatingPoint(-50.0, 70.0, 25.0)


@dataclasses.dataclass(frozen=True)
class FaultConfig:
    band_b: float = DEFAULT_BAND
    reference_op: OperatingPoint = DEFAULT_REFERENCE
    window: SelectionWindow = DEFAULT_WINDOW

    def __post_init__(self):
        if not self.band_b > 0:
            raise ContractViolation("fault band b must be positive")
        ref = OperatingPoint(*map(float, self.reference_op))
        object.__setattr__(self, "reference_op", ref)
        if not bool(self.window.contains(*ref)):
            raise ContractViolation(f"reference operating point {ref} outside the selection window")


def upper_tail(threshold, mean, std):
    """P(X > threshold) for X ~ N(mean, std^2); a step function when std == 0."""
    threshold, mean, std = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                                 for a in (threshold, mean, std)))
    out = np.where(mean > threshold, 1.0, 0.0)
    pos = std > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (threshold - mean) / (std * math.sqrt(2.0))
    out = np.where(pos, 0.5 * special.erfc(z), out)
    return out


def cell_fault_prob(mean_i, var_i, peer_means, cfg: FaultConfig = FaultConfig()):
    """Probability that a cell's resistance lies outside the peer band.

    ``peer_means`` holds the other cells' means along the last axis.
    """
    var_i = np.asarray(var_i, dtype=float)
    if np.any(var_i < 0):
        raise ContractViolation("variance must be non-negative")
    peer_mean = np.mean(np.asarray(peer_means, dtype=float), axis=-1)
    return _band_prob(np.asarray(mean_i, dtype=float), np.sqrt(var_i), peer_mean, cfg.band_b)


def _band_prob(mean, std, peer_mean, b):
    above = upper_tail(peer_mean + b, mean, std)
    # P(X < c) = P(-X > -c)
    below = upper_tail(-(peer_mean - b), -mean, std)
    p = np.clip(above + below, 0.0, 1.0)
    return p if np.ndim(p) else float(p)


def _validate_probs(p):
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ContractViolation("probabilities must lie in [0, 1]")
    return p


def pack_fault_prob(cell_probs):
    """Weakest-link pack probability over the last axis.

    Accumulated as ``q <- q + (1 - q) p`` from the largest entry down, which
    equals ``1 - prod(1 - p)`` and in floating point is never below the
    largest cell probability (and equals it if only one entry is nonzero).
    """
    p = _validate_probs(cell_probs)
    ordered = -np.sort(-p, axis=-1)
    q = ordered[..., 0].copy()
    for j in range(1, ordered.shape[-1]):
        q = q + (1.0 - q) * ordered[..., j]
    q = np.minimum(q, 1.0)
    return q if np.ndim(q) else float(q)


def pack_fault_max(cell_probs):
    """Single-dominant-cell approximation of the pack probability."""
    p = _validate_probs(cell_probs)
    out = np.max(p, axis=-1)
    return out if np.ndim(out) else float(out)


@dataclasses.dataclass
class FaultSeries:
    times: np.ndarray  # days
    cell_probs: np.ndarray  # (T, n_cells)
    pack_exact: np.ndarray
    pack_max: np.ndarray
    variant: str
    origin: float = 0.0
    cell_ids: tuple = tuple(range(1, 9))
    means: np.ndarray | None = None
    stds: np.ndarray | None = None

    def to_frame(self) -> pd.DataFrame:
        cols = {"time_days": self.times}
        for j, c in enumerate(self.cell_ids):
            cols[f"p_cell_{c}"] = self.cell_probs[:, j]
        cols["p_pack_exact"] = self.pack_exact
        cols["p_pack_max"] = self.pack_max
        cols["variant"] = self.variant
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")

    def crossings(self, threshold: float = 0.5, settle_days: float = 0.0) -> list:
        """Rising crossings of ``threshold`` by any cell or the pack.

        A series that starts above the threshold is not reported until it
        has dropped below and risen again.  Nothing before ``settle_days`` is
        reported; a series already above the threshold when the settling
        window ends is reported at that time.
        """
        events = []
        targets = [(f"cell_{c}", self.cell_probs[:, j]) for j, c in enumerate(self.cell_ids)]
        targets.append(("pack", self.pack_exact))
        first = int(np.searchsorted(self.times, settle_days)) if settle_days > 0 else 0
        for name, p in targets:
            above = p > threshold
            rising = np.flatnonzero(~above[:-1] & above[1:]) + 1
            rising = rising[rising > first]
            if settle_days > 0 and first < p.size and above[first]:
                rising = np.concatenate([[first], rising])
            for k in rising:
                t = float(self.times[k])
                events.append({
                    "target": name,
                    "time_days": t,
                    "timestamp": self.origin + t * 86400.0,
                    "probability": float(p[k]),
                    "variant": self.variant,
                })
        events.sort(key=lambda e: (e["time_days"], e["target"]))
        return events


def fault_series_from_estimates(estimates: list, cfg: FaultConfig = FaultConfig(),
                                variant: str | None = None,
                                cell_ids: tuple | None = None) -> FaultSeries:
    """Fault series from per-cell resistance series at the reference point."""
    if len(estimates) < 2:
        raise ContractViolation("need at least two cells")
    times = estimates[0].times
    for est in estimates[1:]:
        if est.times.shape != times.shape or not np.array_equal(est.times, times):
            raise AlignmentError("cell traces are not on a common update grid")
    means = np.column_stack([e.mean for e in estimates])
    stds = np.column_stack([e.std for e in estimates])
    n = means.shape[1]
    peer = (means.sum(axis=1, keepdims=True) - means) / (n - 1)
    probs = _band_prob(means, stds, peer, cfg.band_b)
    variant = variant or estimates[0].provenance
    return FaultSeries(
        times.copy(), probs, pack_fault_prob(probs), pack_fault_max(probs), variant,
        estimates[0].origin, tuple(cell_ids or range(1, n + 1)), means, stds,
    )


def forward_series(traces: list, cfg: FaultConfig = FaultConfig()) -> FaultSeries:
    """Causal fault probabilities from filtered states."""
    return fault_series_from_estimates(
        [tr.estimates(cfg.reference_op) for tr in traces], cfg, "forward")


def smooth_series(smoothed: list, cfg: FaultConfig = FaultConfig()) -> FaultSeries:
    """Retrospective fault probabilities from RTS-smoothed states."""
    return fault_series_from_estimates(
        [tr.estimates(cfg.reference_op) for tr in smoothed], cfg, "smoothed")


def write_alerts(path, series: list, threshold: float = 0.5, settle_days: float = 0.0) -> list:
    events = [e for s in series for e in s.crossings(threshold, settle_days)]
    with open(path, "w") as fh:
        json.dump({"threshold": threshold, "settle_days": settle_days, "events": events}, fh, indent=2)
        fh.write("\n")
    return events
