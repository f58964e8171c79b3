"""Synthetic pack telemetry with known resistance, plus independent oracles.

Each cell's terminal voltage is ``OCV(soc) + i * (R_op(i, soc, T) + R_t(t))``
with Gaussian voltage noise of standard deviation ``|i| * noise_std``, i.e.
``noise_std`` is the equivalent resistance noise in Ohm.  Alternatively the
resistance can be drawn from the GP prior of a known hyperparameter set,
which is what hyperparameter-recovery checks use.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .ecm import DEFAULT_WINDOW, PseudoOcv
from .errors import ConfigError, SpecError
from .kernels import Hyperparameters
from .telemetry import N_CELLS, N_SENSORS, Telemetry, map_temperature

KELVIN = 273.15
MAX_GP_DRAW = 6000


@dataclasses.dataclass(frozen=True)
class Surface:
    """Operating-point resistance: Arrhenius-like in T, linear in |i| and SOC."""

    r_ref: float = 1.5e-3
    activation_k: float = 1500.0
    t_ref: float = 25.0
    current_coef: float = 2e-6  # Ohm per A of |i| above |i_ref|
    i_ref: float = 50.0
    soc_coef: float = -4e-6  # Ohm per % SOC above soc_ref
    soc_ref: float = 70.0

    def __call__(self, current, soc, temperature):
        current = np.asarray(current, dtype=float)
        arr = np.exp(self.activation_k * (1.0 / (np.asarray(temperature) + KELVIN)
                                          - 1.0 / (self.t_ref + KELVIN)))
        return (self.r_ref * arr + self.current_coef * (np.abs(current) - self.i_ref)
                + self.soc_coef * (np.asarray(soc) - self.soc_ref))


@dataclasses.dataclass(frozen=True)
class Knee:
    time: float  # days from the start
    slope: float  # additional Ohm/day after the knee


@dataclasses.dataclass(frozen=True)
class Usage:
    """Daily duty cycle: discharge blocks followed by a charge block."""

    start: float = 1.5e9  # epoch seconds
    duration_days: float = 365.0
    blocks_per_day: int = 2
    block_minutes: float = 30.0
    sample_period_s: float = 5.0
    current_mean: float = -60.0
    current_std: float = 25.0
    current_limits: tuple = (-190.0, -8.0)
    soc_high: float = 92.0
    soc_low: float = 45.0
    charge_minutes: float = 20.0
    charge_current: float = 60.0
    charge_period_s: float = 60.0
    temp_mean: float = 25.0
    temp_seasonal: float = 6.0
    temp_daily: float = 2.0
    temp_noise: float = 0.3
    active_fraction: float = 1.0
    gaps: tuple = ()  # (start_day, end_day) windows without any data


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    surface: Surface = Surface()
    usage: Usage = Usage()
    drift_slope: float = 1e-6  # Ohm/day for every cell
    cell_offsets: tuple = (0.0,) * N_CELLS
    knees: tuple = ()  # ((cell_index, Knee), ...)
    noise_std: float = 5e-4  # Ohm
    pocv: PseudoOcv = PseudoOcv()
    gp_hypers: Optional[Hyperparameters] = None
    gp_mean: float = 3e-3

    def __post_init__(self):
        if self.noise_std < 0:
            raise SpecError("noise_std must be >= 0")
        if len(self.cell_offsets) != N_CELLS:
            raise SpecError(f"need {N_CELLS} cell offsets")
        if self.gp_hypers is None:
            b = DEFAULT_WINDOW.as_bounds()
            grid = np.meshgrid(*[np.linspace(lo, hi, 7) for lo, hi in b], indexing="ij")
            r = self.surface(*grid) + min(self.cell_offsets)
            if np.any(r <= 0):
                raise SpecError("operating-point resistance must be positive over the selection window")

    def knee_of(self, cell_index: int) -> Optional[Knee]:
        for c, knee in self.knees:
            if c == cell_index:
                return knee
        return None

    def r_time(self, cell_index: int, t_days) -> np.ndarray:
        """Time-dependent resistor of one cell (includes its offset)."""
        t = np.asarray(t_days, dtype=float)
        r = self.cell_offsets[cell_index - 1] + self.drift_slope * t
        knee = self.knee_of(cell_index)
        if knee is not None:
            r = r + knee.slope * np.maximum(t - knee.time, 0.0)
        return r

    def resistance(self, cell_index: int, t_days, op) -> np.ndarray:
        op = np.atleast_2d(np.asarray(op, dtype=float))
        return self.surface(op[:, 0], op[:, 1], op[:, 2]) + self.r_time(cell_index, t_days)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        sub = {"surface": Surface, "usage": Usage, "pocv": PseudoOcv, "gp_hypers": Hyperparameters}
        kw = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(f"unknown synth spec key: {key!r}")
            if key in sub and value is not None:
                inner = {f.name for f in dataclasses.fields(sub[key])}
                for k in value:
                    if k not in inner and not (key == "gp_hypers" and k == "units"):
                        raise ConfigError(f"unknown synth spec key: {key}.{k}")
                if key == "gp_hypers":
                    value = Hyperparameters.from_dict(value)
                else:
                    value = sub[key](**{k: tuple(map(tuple, v)) if k == "gaps" else
                                        tuple(v) if isinstance(v, list) else v
                                        for k, v in value.items()})
            elif key == "knees":
                value = tuple((int(c), Knee(**k)) for c, k in value)
            elif key == "cell_offsets":
                value = tuple(float(v) for v in value)
            kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclasses.dataclass
class SynthResult:
    telemetry: Telemetry
    resistance: np.ndarray  # (n_rows, 8) true cell resistance per row, Ohm
    spec: SynthSpec

    def truth_frame(self) -> pd.DataFrame:
        cols = {"timestamp": self.telemetry.timestamp}
        for j in range(N_CELLS):
            cols[f"r_cell_{j + 1}"] = self.resistance[:, j]
        return pd.DataFrame(cols)

    def reference_truth(self, times_days, reference_op) -> np.ndarray:
        """True resistance at a fixed operating point, shape (T, 8).

        Times are days since the usage start.  Not available for GP draws.
        """
        if self.spec.gp_hypers is not None:
            raise SpecError("GP-prior draws have no closed-form reference trajectory")
        t = np.asarray(times_days, dtype=float)
        op = np.repeat(np.atleast_2d(np.asarray(reference_op, dtype=float)), t.size, axis=0)
        return np.column_stack([self.spec.resistance(c, t, op) for c in range(1, N_CELLS + 1)])


def _schedule(usage: Usage, rng: np.random.Generator):
    """Timestamps, current and SOC for every logged row."""
    n_days = int(math.ceil(usage.duration_days))
    active = rng.random(n_days) < usage.active_fraction
    for lo, hi in usage.gaps:
        active[int(lo):int(math.ceil(hi))] = False
    days = np.flatnonzero(active)
    n_dis = max(1, int(round(usage.block_minutes * 60.0 / usage.sample_period_s)))
    n_chg = int(round(usage.charge_minutes * 60.0 / usage.charge_period_s))
    bpd = usage.blocks_per_day
    # block starts spread over 06:00-20:00 with minute-level jitter
    slot = 14.0 / bpd
    hours = 6.0 + slot * np.arange(bpd)[None, :] + rng.uniform(0, slot * 0.4, (days.size, bpd))
    starts = usage.start + days[:, None] * 86400.0 + hours * 3600.0
    levels = np.clip(rng.normal(usage.current_mean, usage.current_std, starts.shape),
                     *usage.current_limits)
    soc_top = rng.uniform(usage.soc_low + 0.6 * (usage.soc_high - usage.soc_low),
                          usage.soc_high, starts.shape)

    k = np.arange(n_dis)
    t_dis = starts[..., None] + k * usage.sample_period_s
    i_dis = levels[..., None] * (1.0 + 0.05 * rng.standard_normal(t_dis.shape))
    i_dis = np.clip(i_dis, *usage.current_limits)
    frac = k / max(n_dis - 1, 1)
    soc_dis = soc_top[..., None] - frac * (soc_top[..., None] - usage.soc_low)

    parts_t, parts_i, parts_s = [t_dis.reshape(-1)], [i_dis.reshape(-1)], [soc_dis.reshape(-1)]
    if n_chg:
        kc = np.arange(n_chg)
        t0 = starts + n_dis * usage.sample_period_s + 300.0
        parts_t.append((t0[..., None] + kc * usage.charge_period_s).reshape(-1))
        parts_i.append(np.full(t0.size * n_chg, usage.charge_current))
        soc_c = usage.soc_low + (kc + 1) / n_chg * (soc_top[..., None] - usage.soc_low)
        parts_s.append(np.broadcast_to(soc_c, t0.shape + (n_chg,)).reshape(-1))
    t = np.concatenate(parts_t)
    order = np.argsort(t, kind="mergesort")
    return t[order], np.concatenate(parts_i)[order], np.concatenate(parts_s)[order]


def _temperatures(usage: Usage, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    day = (t - usage.start) / 86400.0
    base = (usage.temp_mean
            + usage.temp_seasonal * np.sin(2 * np.pi * day / 365.25)
            + usage.temp_daily * np.sin(2 * np.pi * (day % 1.0 - 0.25)))
    sensor_offsets = np.linspace(-0.5, 0.5, N_SENSORS)
    noise = usage.temp_noise * rng.standard_normal((t.size, N_SENSORS))
    return base[:, None] + sensor_offsets[None, :] + noise


def _gp_draw(times_d, ops, hp: Hyperparameters, rng: np.random.Generator) -> np.ndarray:
    """One sample of the combined WV + SE-ARD prior at the given inputs."""
    ls = hp.length_scales
    a = ops / ls
    sq = ((a[:, None, :] - a[None, :, :]) ** 2).sum(-1)
    lo = np.minimum(times_d[:, None], times_d[None, :])
    k = (hp.se_output_scale * np.exp(-0.5 * sq)
         + hp.wv_output_scale * (lo**3 / 3 + np.abs(times_d[:, None] - times_d[None, :]) * lo**2 / 2))
    w, v = np.linalg.eigh(k)
    return v @ (np.sqrt(np.maximum(w, 0.0)) * rng.standard_normal(w.size))


def generate(spec: SynthSpec = SynthSpec(), seed: int = 0) -> SynthResult:
    """Synthesize one system's telemetry and the true per-row resistances."""
    rng = np.random.default_rng(seed)
    usage = spec.usage
    t, current, soc = _schedule(usage, rng)
    temps = _temperatures(usage, t, rng)
    t_days = (t - usage.start) / 86400.0
    ocv = spec.pocv(np.clip(soc, 0.0, 100.0))

    r = np.empty((t.size, N_CELLS))
    for c in range(1, N_CELLS + 1):
        temp_c = temps[:, map_temperature(c) - 1]
        if spec.gp_hypers is None:
            r[:, c - 1] = spec.surface(current, soc, temp_c) + spec.r_time(c, t_days)
            continue
        r[:, c - 1] = spec.gp_mean
        inside = DEFAULT_WINDOW.contains(current, soc, temp_c)
        idx = np.flatnonzero(inside)
        if idx.size > MAX_GP_DRAW:
            raise SpecError(f"GP-prior draw limited to {MAX_GP_DRAW} in-window rows, got {idx.size}")
        if idx.size:
            td = t_days[idx] - t_days[idx[0]]
            ops = np.column_stack([current[idx], soc[idx], temp_c[idx]])
            r[idx, c - 1] += _gp_draw(td, ops, spec.gp_hypers, rng)

    noise = rng.standard_normal((t.size, N_CELLS)) * (np.abs(current)[:, None] * spec.noise_std)
    volts = ocv[:, None] + current[:, None] * r + noise
    if volts.size and (volts.min() <= 1.5 or volts.max() >= 4.2):
        raise SpecError(
            f"synthesized voltages span [{volts.min():.3f}, {volts.max():.3f}] V, outside (1.5, 4.2) V"
        )
    telem = Telemetry(t, current, volts, temps, soc, name="synthetic")
    return SynthResult(telem, r, spec)


def write(result: SynthResult, telemetry_path, truth_path=None) -> None:
    result.telemetry.to_csv(telemetry_path)
    if truth_path is not None:
        result.truth_frame().to_csv(truth_path, index=False, float_format="%.17g")


# Independent dense reference, deliberately sharing no code with exact_gp/kernels.

def _oracle_kernel(ta, xa, tb, xb, hp):
    k = np.empty((len(ta), len(tb)))
    ls = np.array([hp.len_current, hp.len_soc, hp.len_temp])
    for i in range(len(ta)):
        for j in range(len(tb)):
            d = (np.asarray(xa[i]) - np.asarray(xb[j])) / ls
            m = min(ta[i], tb[j])
            k[i, j] = (hp.se_output_scale * math.exp(-0.5 * float(d @ d))
                       + hp.wv_output_scale * (m**3 / 3.0 + abs(ta[i] - tb[j]) * m**2 / 2.0))
    return k


def oracle_posterior(train_times, train_ops, targets, query_times, query_ops, hp):
    """Predictive mean and covariance by explicit matrix inversion."""
    n = len(train_times)
    if n > 500:
        raise SpecError("oracle limited to 500 training points")
    k_oo = _oracle_kernel(train_times, train_ops, train_times, train_ops, hp)
    k_qo = _oracle_kernel(query_times, query_ops, train_times, train_ops, hp)
    k_qq = _oracle_kernel(query_times, query_ops, query_times, query_ops, hp)
    inv = np.linalg.inv(k_oo + hp.noise_var * np.eye(n))
    mean = k_qo @ inv @ np.asarray(targets, dtype=float)
    cov = k_qq - k_qo @ inv @ k_qo.T
    return mean, cov


def oracle_nlml(train_times, train_ops, targets, hp):
    n = len(train_times)
    k = _oracle_kernel(train_times, train_ops, train_times, train_ops, hp) + hp.noise_var * np.eye(n)
    y = np.asarray(targets, dtype=float)
    sign, logdet = np.linalg.slogdet(k)
    return 0.5 * y @ np.linalg.inv(k) @ y + 0.5 * logdet + 0.5 * n * math.log(2 * math.pi)
