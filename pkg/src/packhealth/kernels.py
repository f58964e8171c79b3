"""Covariance functions for the two-resistor resistance model.

Operating points are handled as arrays of shape ``(n, 3)`` with columns
ordered (current [A], SOC [%], temperature [degC]); a single
:class:`~packhealth.ecm.OperatingPoint` is accepted anywhere an array is.
Time is in days, measured from the start of the modelled data section.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation

# (name, unit) in the order used by log-parameter vectors
HYPER_FIELDS = (
    ("se_output_scale", "Ohm^2"),
    ("len_current", "A"),
    ("len_soc", "%"),
    ("len_temp", "degC"),
    ("wv_output_scale", "Ohm^2/day^3"),
    ("noise_var", "Ohm^2"),
)


@dataclasses.dataclass(frozen=True)
class Hyperparameters:
    """The six scalars defining the resistance GP.

    ``noise_var`` may be zero to express noise-free interpolation; all
    other entries must be strictly positive.
    """

    se_output_scale: float = 1e-6
    len_current: float = 50.0
    len_soc: float = 20.0
    len_temp: float = 10.0
    wv_output_scale: float = 1e-8
    noise_var: float = 2.5e-7

    def __post_init__(self):
        for name, _ in HYPER_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ContractViolation(f"{name} must be finite, got {value}")
            if name == "noise_var":
                if value < 0:
                    raise ContractViolation(f"noise_var must be >= 0, got {value}")
            elif value <= 0:
                raise ContractViolation(f"{name} must be > 0, got {value}")

    @property
    def length_scales(self) -> np.ndarray:
        return np.array([self.len_current, self.len_soc, self.len_temp])

    def to_log_vector(self) -> np.ndarray:
        return np.log([getattr(self, name) for name, _ in HYPER_FIELDS])

    @classmethod
    def from_log_vector(cls, theta) -> "Hyperparameters":
        values = np.exp(np.asarray(theta, dtype=float))
        return cls(**{name: float(v) for (name, _), v in zip(HYPER_FIELDS, values)})

    def replace(self, **changes) -> "Hyperparameters":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {name: float(getattr(self, name)) for name, _ in HYPER_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "Hyperparameters":
        known = {name for name, _ in HYPER_FIELDS}
        for key in data:
            if key not in known and key != "units":
                raise ConfigError(f"unknown hyperparameter key: {key!r}")
        return cls(**{k: float(v) for k, v in data.items() if k in known})

    def save(self, path) -> None:
        payload = self.to_dict()
        payload["units"] = dict(HYPER_FIELDS)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Hyperparameters":
        return cls.from_dict(json.loads(Path(path).read_text()))


def as_ops(x) -> np.ndarray:
    """Coerce operating point(s) to a float array of shape (n, 3)."""
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if arr.shape[-1] != 3:
        raise ContractViolation(f"operating points need 3 columns, got shape {arr.shape}")
    return arr


def k_se_ard(op1, op2, hp: Hyperparameters) -> np.ndarray:
    """SE-ARD covariance matrix between two sets of operating points."""
    a = as_ops(op1) / hp.length_scales
    b = as_ops(op2) / hp.length_scales
    # per-dimension differences: exact zero on the diagonal, O(n*m) memory
    sq = np.zeros((a.shape[0], b.shape[0]))
    for d in range(3):
        diff = a[:, d, None] - b[None, :, d]
        sq += diff * diff
    return hp.se_output_scale * np.exp(-0.5 * sq)


def k_se_ard_diag(ops, hp: Hyperparameters) -> np.ndarray:
    return np.full(as_ops(ops).shape[0], hp.se_output_scale)


def k_wv(t1, t2, hp: Hyperparameters) -> np.ndarray:
    """Wiener-velocity (integrated Wiener process) covariance matrix."""
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    if np.any(t1 < 0) or np.any(t2 < 0):
        raise ContractViolation("Wiener-velocity kernel requires non-negative times")
    lo = np.minimum(t1[:, None], t2[None, :])
    dist = np.abs(t1[:, None] - t2[None, :])
    return hp.wv_output_scale * (lo**3 / 3.0 + dist * lo**2 / 2.0)


def k_combined(t1, ops1, t2, ops2, hp: Hyperparameters) -> np.ndarray:
    """Additive temporal + spatial covariance (two resistors in series)."""
    return k_wv(t1, t2, hp) + k_se_ard(ops1, ops2, hp)


KERNEL_PARTS = ("combined", "temporal", "spatial")


def gram(t1, ops1, t2, ops2, hp: Hyperparameters, part: str = "combined") -> np.ndarray:
    """Covariance matrix restricted to one kernel component."""
    if part == "combined":
        return k_combined(t1, ops1, t2, ops2, hp)
    if part == "temporal":
        return k_wv(t1, t2, hp)
    if part == "spatial":
        return k_se_ard(ops1, ops2, hp)
    raise ContractViolation(f"unknown kernel part {part!r}; expected one of {KERNEL_PARTS}")
