"""Per-system and per-cell processing shared by the CLI commands."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import pandas as pd

from . import ecm, exact_gp, stgp
from .config import RunConfig
from .errors import ConfigError
from .kernels import Hyperparameters
from .telemetry import N_CELLS, Telemetry, equivalent_full_cycles, parse_csv, segment_sections

log = logging.getLogger(__name__)

QUERY_CHUNK = 2000


@dataclasses.dataclass
class CellData:
    cell_index: int
    n_selected: int
    section: object = None
    obs: ecm.Observations | None = None
    reason: str = ""

    @property
    def usable(self) -> bool:
        return self.obs is not None


@dataclasses.dataclass
class SystemData:
    name: str
    telemetry: Telemetry
    cells: list
    origin: float
    end_days: float
    efc: float

    @property
    def complete(self) -> bool:
        return all(c.usable for c in self.cells)

    def mean_operating_point(self) -> np.ndarray | None:
        ops = [c.obs.ops for c in self.cells if c.usable]
        if not ops:
            return None
        return np.vstack(ops).mean(axis=0)


def prepare_cell(telemetry: Telemetry, cell_index: int, cfg: RunConfig) -> CellData:
    """Selection, latest-section segmentation and resistance extraction."""
    selected = ecm.select_samples(telemetry.cell(cell_index), cfg.selection)
    section = segment_sections(selected, cfg.gap_days, cfg.min_points)
    if section is None:
        return CellData(cell_index, len(selected), None, None,
                        f"latest section has fewer than {cfg.min_points} valid points "
                        f"(gap threshold {cfg.gap_days:g} days)")
    samples = selected.within(section)
    obs = ecm.resistance_observations(samples, cfg.pocv, origin=section.start,
                                      min_abs_current=cfg.selection.min_abs_current)
    if len(obs) < cfg.min_points:
        return CellData(cell_index, len(selected), section, None,
                        f"only {len(obs)} plausible resistance observations in the latest section")
    return CellData(cell_index, len(selected), section, obs)


def prepare_system(telemetry: Telemetry, cfg: RunConfig) -> SystemData:
    cells = [prepare_cell(telemetry, c, cfg) for c in range(1, N_CELLS + 1)]
    usable = [c for c in cells if c.usable]
    origin = min((c.section.start for c in usable), default=float(telemetry.timestamp[0]) if len(telemetry) else 0.0)
    for c in usable:
        c.obs = c.obs.rebase(origin)
    end = max((c.section.end for c in usable), default=origin)
    efc = equivalent_full_cycles(telemetry, cfg.nominal_capacity_ah)
    return SystemData(telemetry.name, telemetry, cells, origin, (end - origin) / 86400.0, efc)


def load_systems(cfg: RunConfig) -> list:
    files = cfg.input_files()
    if not files:
        raise ConfigError("no telemetry CSV files found in the configured inputs")
    systems = []
    for path in files:
        tel = parse_csv(path, cfg.schema)
        systems.append(prepare_system(tel, cfg))
    return systems


def reference_operating_point(systems: list, cfg: RunConfig) -> tuple:
    """Configured reference point, or the mean of the systems' mean operating points."""
    if cfg.reference_op is not None:
        return tuple(cfg.reference_op)
    means = [m for m in (s.mean_operating_point() for s in systems) if m is not None]
    if not means:
        raise ConfigError("cannot derive a reference operating point: no usable data")
    return tuple(float(v) for v in np.mean(means, axis=0))


def build_basis(obs: ecm.Observations, cfg: RunConfig, hp: Hyperparameters, reference) -> stgp.BasisSet:
    if cfg.basis == "grid":
        return stgp.select_basis_grid(cfg.selection, hp, reference, cfg.max_basis)
    return stgp.select_basis_kmeans(obs.ops, cfg.n_kmeans, reference, hp, cfg.seed)


def prior_offset(obs: ecm.Observations, cfg: RunConfig) -> float:
    return float(np.mean(obs.resistance)) if cfg.mean == "constant" else 0.0


def recursive_cell(obs: ecm.Observations, cfg: RunConfig, hp: Hyperparameters, reference,
                   end_days: float | None = None) -> dict:
    """Filter + smoother for one cell; returns series at the reference point."""
    basis = build_basis(obs, cfg, hp, reference)
    trace = stgp.run_filter(obs.time, obs.ops, obs.resistance, basis, hp,
                            cfg.update_interval_hours, start=0.0, end=end_days,
                            origin=obs.origin, prior_offset=prior_offset(obs, cfg))
    smoothed = stgp.rts_smooth(trace)
    out = {
        "forward": trace.estimates(reference),
        "smoothed": smoothed.estimates(reference),
        "forward_temporal": trace.estimates(reference, "temporal"),
        "smoothed_temporal": smoothed.estimates(reference, "temporal"),
        "n_basis": basis.size,
        "n_updates": int(np.count_nonzero(trace.n_obs)),
        "trace": trace.to_frame(),
    }
    return out


def exact_cell(obs: ecm.Observations, cfg: RunConfig, hp: Hyperparameters, reference,
               query_times) -> exact_gp.Posterior:
    cap = min(cfg.downselect_cap, exact_gp.MAX_POINTS)
    train = exact_gp.TrainingSet.from_observations(ecm.downselect(obs, cap))
    means, variances = [], []
    for a in range(0, len(query_times), QUERY_CHUNK):
        q = query_times[a:a + QUERY_CHUNK]
        post = exact_gp.posterior_predict(train, q, reference, hp, mean=cfg.mean, full_cov=False)
        means.append(post.mean)
        variances.append(post.variance)
    return exact_gp.Posterior(np.concatenate(means), None, np.concatenate(variances))


def availability(obs: ecm.Observations, end_days: float) -> pd.DataFrame:
    """Selected observations per day (data-availability histogram)."""
    n_days = int(np.floor(max(end_days, obs.time[-1] if len(obs) else 0.0))) + 1
    counts = np.bincount(np.floor(obs.time).astype(int), minlength=n_days)[:n_days]
    return pd.DataFrame({"day": np.arange(n_days), "count": counts})
