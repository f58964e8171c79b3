"""Command-line entry point: ``packhealth {analyze,faults,tune,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
error.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import dataclasses
import datetime as dt
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import pandas as pd

from . import ecm, exact_gp, faults, pipeline, synth
from .config import BACKENDS, BASIS_METHODS, RunConfig
from .errors import ConfigError, ContractViolation, DataError, OptimizationError, PackHealthError
from .telemetry import voltage_statistics

log = logging.getLogger("packhealth")


def _map(fn, tasks, jobs: int):
    """Run tasks, collecting (result, error) pairs in task order."""
    def guarded(task):
        try:
            return fn(*task), None
        except Exception as exc:  # one cell failing must not abort the others
            return None, exc

    if jobs <= 1 or len(tasks) <= 1:
        return [guarded(t) for t in tasks]
    with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        out = []
        for fut in futures:
            try:
                out.append((fut.result(), None))
            except Exception as exc:
                out.append((None, exc))
        return out


def _exit_code(exc) -> int:
    if isinstance(exc, PackHealthError):
        return exc.exit_code
    if isinstance(exc, ContractViolation):
        return DataError.exit_code
    return 1


def _write_json(path: Path, payload: dict, deterministic: bool) -> None:
    if not deterministic:
        payload = {"generated_at": dt.datetime.now(dt.timezone.utc).isoformat(), **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=False, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _series_frame(est, origin: float, prefix: str = "") -> dict:
    std = est.std
    return {
        f"{prefix}mean_ohm": est.mean,
        f"{prefix}std_ohm": std,
        f"{prefix}lower_2sigma_ohm": est.mean - 2 * std,
        f"{prefix}upper_2sigma_ohm": est.mean + 2 * std,
        f"{prefix}mean_mohm": est.mean * 1e3,
        f"{prefix}lower_2sigma_mohm": (est.mean - 2 * std) * 1e3,
        f"{prefix}upper_2sigma_mohm": (est.mean + 2 * std) * 1e3,
    }


def _analyze_task(obs, cfg: RunConfig, reference, end_days):
    hp = cfg.hyperparameters
    if cfg.backend == "recursive":
        res = pipeline.recursive_cell(obs, cfg, hp, reference, end_days)
        sm = res["smoothed"]
        cols = {"time_days": sm.times, "timestamp": obs.origin + sm.times * 86400.0}
        cols.update(_series_frame(sm, obs.origin))
        cols.update(_series_frame(res["forward"], obs.origin, "forward_"))
        cols.update(_series_frame(res["smoothed_temporal"], obs.origin, "temporal_"))
        info = {"n_basis": res["n_basis"], "n_updates": res["n_updates"]}
        trace = res["trace"]
    else:
        times = np.arange(0.0, np.floor(end_days) + 1.0)
        post = pipeline.exact_cell(obs, cfg, hp, reference, times)
        cols = {"time_days": times, "timestamp": obs.origin + times * 86400.0}
        cols.update(_series_frame(
            _Series(post.mean, post.variance), obs.origin))
        info = {"n_train": min(len(obs), cfg.downselect_cap, exact_gp.MAX_POINTS)}
        trace = None
    return pd.DataFrame(cols), info, trace


@dataclasses.dataclass
class _Series:
    mean: np.ndarray
    variance: np.ndarray

    @property
    def std(self):
        return np.sqrt(np.maximum(self.variance, 0.0))


def cmd_analyze(cfg: RunConfig, out: Path, jobs: int = 1, deterministic: bool = False) -> int:
    systems = pipeline.load_systems(cfg)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"backend": cfg.backend, "basis": cfg.basis, "systems": []}
    modelled = [s for s in systems if any(c.usable for c in s.cells)]
    if not modelled:
        summary["error"] = (f"no system has a section with at least {cfg.min_points} valid points "
                            f"and no gap above {cfg.gap_days:g} days")
        summary["systems"] = [_system_summary(s) for s in systems]
        _write_json(out / "summary.json", summary, deterministic)
        log.error(summary["error"])
        return DataError.exit_code
    reference = pipeline.reference_operating_point(modelled, cfg)
    summary["reference_op"] = list(reference)

    tasks, keys = [], []
    for s in modelled:
        sdir = out / s.name
        sdir.mkdir(exist_ok=True)
        voltage_statistics(s.telemetry).to_csv(sdir / "voltage_stats.csv", index=False, float_format="%.10g")
        for c in s.cells:
            if c.usable:
                tasks.append((c.obs, cfg, reference, s.end_days))
                keys.append((s, c))
    results = _map(_analyze_task, tasks, jobs)

    exit_code = 0
    cell_status = {}
    for (s, c), (res, err) in zip(keys, results):
        sdir = out / s.name
        if err is not None:
            log.error("%s cell %d failed: %s", s.name, c.cell_index, err)
            cell_status[(s.name, c.cell_index)] = {"status": "failed", "reason": str(err)}
            exit_code = max(exit_code, _exit_code(err))
            continue
        frame, info, trace = res
        frame.to_csv(sdir / f"cell_{c.cell_index}_trajectory.csv", index=False, float_format="%.10g")
        if trace is not None:
            trace.to_csv(sdir / f"cell_{c.cell_index}_filter_trace.csv", index=False,
                         float_format="%.12g")
        pipeline.availability(c.obs, s.end_days).to_csv(
            sdir / f"cell_{c.cell_index}_data_availability.csv", index=False)
        cell_status[(s.name, c.cell_index)] = {"status": "ok", **info}
    summary["systems"] = [_system_summary(s, cell_status) for s in systems]
    summary["n_systems_modelled"] = sum(1 for s in systems if s.complete)
    _write_json(out / "summary.json", summary, deterministic)
    pd.DataFrame([
        {"system": s["name"], "cell": c["cell"], "status": c["status"], "n_selected": c["n_selected"],
         "n_section": c.get("n_section", 0), "reason": c.get("reason", "")}
        for s in summary["systems"] for c in s["cells"]
    ]).to_csv(out / "summary.csv", index=False)
    return exit_code


def _system_summary(s, cell_status=None) -> dict:
    cells = []
    for c in s.cells:
        entry = {"cell": c.cell_index, "n_selected": c.n_selected}
        if c.usable:
            entry["n_section"] = len(c.obs)
            entry["section_start"] = c.section.start
            entry["section_end"] = c.section.end
            entry.update((cell_status or {}).get((s.name, c.cell_index), {"status": "prepared"}))
        else:
            entry.update({"status": "skipped", "reason": c.reason})
        cells.append(entry)
    return {
        "name": s.name,
        "rows": len(s.telemetry),
        "rejected_rows": s.telemetry.rejects,
        "equivalent_full_cycles": s.efc,
        "modelled": s.complete,
        "origin_timestamp": s.origin,
        "cells": cells,
    }


def _faults_task(obs, cfg: RunConfig, reference, end_days):
    res = pipeline.recursive_cell(obs, cfg, cfg.hyperparameters, reference, end_days)
    return {k: v for k, v in res.items() if k in ("forward", "smoothed", "forward_temporal",
                                                 "smoothed_temporal")}


def cmd_faults(cfg: RunConfig, out: Path, jobs: int = 1, deterministic: bool = False) -> int:
    if cfg.backend != "recursive":
        raise ConfigError("fault probabilities need the recursive backend: forward (causal) "
                          "estimates only exist for the Kalman filter; set backend to 'recursive'")
    systems = pipeline.load_systems(cfg)
    complete = [s for s in systems if s.complete]
    out.mkdir(parents=True, exist_ok=True)
    summary = {"systems": []}
    if not complete:
        summary["error"] = "no system has a usable section for all cells"
        summary["systems"] = [_system_summary(s) for s in systems]
        _write_json(out / "summary.json", summary, deterministic)
        log.error(summary["error"])
        return DataError.exit_code
    reference = pipeline.reference_operating_point(complete, cfg)
    fcfg = cfg.fault_config(reference)
    tasks, keys = [], []
    for s in complete:
        for c in s.cells:
            tasks.append((c.obs, cfg, reference, s.end_days))
            keys.append(s.name)
    results = _map(_faults_task, tasks, jobs)

    exit_code = 0
    all_events = []
    for s in complete:
        per_cell = [r for k, r in zip(keys, results) if k == s.name]
        errs = [e for _, e in per_cell if e is not None]
        if errs:
            log.error("%s: %d cell(s) failed: %s", s.name, len(errs), errs[0])
            exit_code = max(exit_code, max(_exit_code(e) for e in errs))
            summary["systems"].append({"name": s.name, "status": "failed", "reason": str(errs[0])})
            continue
        sdir = out / s.name
        sdir.mkdir(exist_ok=True)
        series = {}
        for variant in ("forward", "smoothed", "forward_temporal", "smoothed_temporal"):
            est = [r[variant] for r, _ in per_cell]
            fs = faults.fault_series_from_estimates(est, fcfg, variant)
            fs.to_csv(sdir / f"faults_{variant}.csv")
            series[variant] = fs
        events = faults.write_alerts(sdir / "alerts.json", [series["forward"]],
                                     settle_days=cfg.alert_settling_days)
        for e in events:
            e["system"] = s.name
        all_events.extend(events)
        summary["systems"].append({
            "name": s.name, "status": "ok", "n_alerts": len(events),
            "max_forward_pack_probability": float(series["forward"].pack_exact.max()),
        })
    summary["reference_op"] = list(reference)
    summary["band_b"] = cfg.band_b
    (out / "alerts.json").write_text(json.dumps(
        {"threshold": 0.5, "settle_days": cfg.alert_settling_days, "events": all_events}, indent=2) + "\n")
    _write_json(out / "summary.json", summary, deterministic)
    return exit_code


def _tune_task(obs, cfg: RunConfig):
    cap = min(cfg.tune.points, exact_gp.MAX_POINTS)
    train = exact_gp.TrainingSet.from_observations(ecm.downselect(obs, cap))
    return exact_gp.optimize_hypers(train, cfg.hyperparameters, cfg.tune.budget, mean=cfg.mean,
                                    restarts=cfg.tune.restarts, seed=cfg.seed)


def cmd_tune(cfg: RunConfig, out: Path, jobs: int = 1, deterministic: bool = False) -> int:
    systems = [s for s in pipeline.load_systems(cfg) if any(c.usable for c in s.cells)]
    if cfg.tune.systems:
        wanted = set(cfg.tune.systems)
        systems = [s for s in systems if s.name in wanted]
    else:
        systems = sorted(systems, key=lambda s: -s.efc)[:cfg.tune.n_systems]
    if not systems:
        raise DataError("no system with sufficient data to tune on")
    if cfg.tune.points > exact_gp.MAX_POINTS:
        log.warning("tune.points %d exceeds the exact-GP cap; using %d",
                    cfg.tune.points, exact_gp.MAX_POINTS)
    tasks, keys = [], []
    for s in systems:
        for c in s.cells:
            if c.usable:
                tasks.append((c.obs, cfg))
                keys.append((s.name, c.cell_index))
    results = _map(_tune_task, tasks, jobs)
    fitted = [r for r, e in results if e is None]
    if not fitted:
        raise OptimizationError(f"hyperparameter optimisation failed on every cell: {results[0][1]}")
    mode = exact_gp.aggregate_mode(fitted)
    out.mkdir(parents=True, exist_ok=True)
    mode.save(out / "hyperparameters.json")
    rows = []
    for (name, cell), (r, e) in zip(keys, results):
        row = {"system": name, "cell": cell, "status": "ok" if e is None else f"failed: {e}"}
        if r is not None:
            row.update(r.to_dict())
        rows.append(row)
    pd.DataFrame(rows).to_csv(out / "per_cell_hyperparameters.csv", index=False, float_format="%.10g")
    _write_json(out / "tune_summary.json", {
        "systems": [s.name for s in systems], "n_cells": len(fitted),
        "hyperparameters": mode.to_dict(),
    }, deterministic)
    return 0


def cmd_synth(spec_path, seed: int, out: Path, name: str = "synthetic") -> int:
    spec = synth.SynthSpec.load(spec_path) if spec_path else synth.SynthSpec()
    out.mkdir(parents=True, exist_ok=True)
    result = synth.generate(spec, seed)
    # ground truth goes in a subdirectory so ``out`` can be used directly as an input
    (out / "truth").mkdir(exist_ok=True)
    synth.write(result, out / f"{name}.csv", out / "truth" / f"{name}.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="packhealth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, required=True, help="JSON run configuration")
        p.add_argument("--out", type=Path, help="output directory (overrides config 'output')")
        p.add_argument("--backend", choices=BACKENDS)
        p.add_argument("--basis", choices=BASIS_METHODS)
        p.add_argument("--deterministic", action="store_true",
                       help="omit wall-clock timestamps from logs and reports")
        p.add_argument("--jobs", type=int, default=1, help="worker processes across cells")

    common(sub.add_parser("analyze", help="resistance trajectories per cell"))
    common(sub.add_parser("faults", help="forward and smoothed fault probabilities"))
    common(sub.add_parser("tune", help="fit hyperparameters and take the per-parameter mode"))
    p = sub.add_parser("synth", help="generate synthetic pack telemetry")
    p.add_argument("--spec", type=Path, help="JSON synthetic spec (defaults if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--deterministic", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fmt = "%(levelname)s %(name)s: %(message)s" if args.deterministic else \
        "%(asctime)s %(levelname)s %(name)s: %(message)s"
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=fmt, force=True)
    try:
        if args.command == "synth":
            return cmd_synth(args.spec, args.seed, args.out, args.name)
        cfg = RunConfig.load(args.config)
        if args.backend:
            cfg.backend = args.backend
        if args.basis:
            cfg.basis = args.basis
        cfg.__post_init__()
        out = args.out or (cfg.base_dir / cfg.output)
        command = {"analyze": cmd_analyze, "faults": cmd_faults, "tune": cmd_tune}[args.command]
        return command(cfg, out, max(1, args.jobs), args.deterministic)
    except PackHealthError as exc:
        log.error("%s", exc)
        if args.verbose:
            traceback.print_exc()
        return exc.exit_code
    except ContractViolation as exc:
        log.error("%s", exc)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
