"""Exact (dense) Gaussian process regression on resistance observations.

Used as the reference backend, for hyperparameter tuning and as the oracle
the recursive filter is checked against.  Cost is cubic in the number of
training points, so callers keep it at desk scale (``MAX_POINTS``).
"""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np
from scipy import linalg, optimize, stats

from .errors import ContractViolation, NumericalError, OptimizationError
from .kernels import HYPER_FIELDS, Hyperparameters, as_ops, gram

log = logging.getLogger(__name__)

MAX_POINTS = 4000
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclasses.dataclass
class TrainingSet:
    times: np.ndarray  # days
    ops: np.ndarray  # (n, 3)
    targets: np.ndarray  # Ohm

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.ops = as_ops(self.ops)
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        n = self.times.size
        if n < 1:
            raise ContractViolation("training set must hold at least one point")
        if self.ops.shape[0] != n or self.targets.size != n:
            raise ContractViolation("training inputs and targets differ in length")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.ops))
                and np.all(np.isfinite(self.targets))):
            raise ContractViolation("training data must be finite")
        if np.any(np.diff(self.times) < 0):
            raise ContractViolation("training inputs must be time-sorted")

    def __len__(self):
        return self.times.size

    @classmethod
    def from_observations(cls, obs) -> "TrainingSet":
        return cls(obs.time, obs.ops, obs.resistance)


@dataclasses.dataclass
class Posterior:
    mean: np.ndarray
    covariance: np.ndarray | None = None
    variance: np.ndarray | None = None

    def __post_init__(self):
        if self.variance is None and self.covariance is not None:
            self.variance = np.diag(self.covariance).copy()

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, 0.0))


def _prior_mean(train: TrainingSet, mean: str) -> float:
    if mean == "zero":
        return 0.0
    if mean == "constant":
        return float(np.mean(train.targets))
    raise ContractViolation(f"unknown mean mode {mean!r}")


def stable_cholesky(k: np.ndarray):
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Jitter is relative to the mean diagonal.  Raises NumericalError with a
    condition estimate when the whole ladder fails.
    """
    scale = float(np.mean(np.diag(k))) if k.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    for rel in JITTER_LADDER:
        try:
            a = k if rel == 0.0 else k + rel * scale * np.eye(k.shape[0])
            return linalg.cholesky(a, lower=True, check_finite=False), rel
        except linalg.LinAlgError:
            continue
    try:
        cond = float(np.linalg.cond(k))
    except np.linalg.LinAlgError:
        cond = math.inf
    raise NumericalError(
        f"Gram matrix ({k.shape[0]}x{k.shape[0]}) not factorizable with jitter up to "
        f"{JITTER_LADDER[-1]:g} x mean diagonal; condition estimate {cond:.3e}"
    )


def _train_factor(train: TrainingSet, hp: Hyperparameters, part: str):
    k = gram(train.times, train.ops, train.times, train.ops, hp, part)
    k[np.diag_indices_from(k)] += hp.noise_var
    return stable_cholesky(k)


def posterior_predict(train: TrainingSet, query_times, query_ops, hp: Hyperparameters,
                      part: str = "combined", mean: str = "zero",
                      full_cov: bool = True) -> Posterior:
    """Posterior of the latent resistance at the query inputs.

    With ``full_cov=False`` only the marginal variances are formed, which
    keeps long query grids cheap.
    """
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    query_ops = as_ops(query_ops)
    if query_ops.shape[0] == 1 and query_times.size > 1:
        query_ops = np.repeat(query_ops, query_times.size, axis=0)
    m0 = _prior_mean(train, mean)
    chol, _ = _train_factor(train, hp, part)
    k_qo = gram(query_times, query_ops, train.times, train.ops, hp, part)
    alpha = linalg.cho_solve((chol, True), train.targets - m0, check_finite=False)
    mu = k_qo @ alpha + m0
    v = linalg.solve_triangular(chol, k_qo.T, lower=True, check_finite=False)
    if full_cov:
        k_qq = gram(query_times, query_ops, query_times, query_ops, hp, part)
        cov = k_qq - v.T @ v
        cov = 0.5 * (cov + cov.T)
        return Posterior(mu, cov)
    prior_var = _prior_diag(query_times, query_ops, hp, part)
    return Posterior(mu, None, prior_var - np.sum(v * v, axis=0))


def _prior_diag(times, ops, hp: Hyperparameters, part: str) -> np.ndarray:
    wv = hp.wv_output_scale * times**3 / 3.0
    se = np.full(times.size, hp.se_output_scale)
    if part == "temporal":
        return wv
    if part == "spatial":
        return se
    return wv + se


def nlml(train: TrainingSet, hp: Hyperparameters, part: str = "combined",
         mean: str = "zero") -> float:
    """Negative log marginal likelihood in nats."""
    chol, _ = _train_factor(train, hp, part)
    y = train.targets - _prior_mean(train, mean)
    a = linalg.solve_triangular(chol, y, lower=True, check_finite=False)
    n = y.size
    return float(0.5 * a @ a + np.sum(np.log(np.diag(chol))) + 0.5 * n * math.log(2 * math.pi))


def optimize_hypers(train: TrainingSet, init: Hyperparameters, budget: int = 400,
                    part: str = "combined", mean: str = "zero", restarts: int = 0,
                    seed: int = 0, fixed: tuple = ()) -> Hyperparameters:
    """Minimise the NLML over log-hyperparameters with Nelder-Mead.

    ``budget`` bounds the total number of NLML evaluations across all
    starts.  ``restarts`` extra starts are drawn around ``init`` with a
    seeded generator.  Names in ``fixed`` are held at their initial value.
    The result never has a larger NLML than ``init``.
    """
    if budget < 1:
        raise ContractViolation("optimisation budget must be >= 1")
    names = [name for name, _ in HYPER_FIELDS]
    free = [i for i, name in enumerate(names) if name not in fixed]
    theta0 = init.to_log_vector()
    if init.noise_var == 0:
        raise ContractViolation("noise_var must be > 0 for optimisation on log scale")
    evals = {"n": 0, "ok": 0}

    def objective(x):
        evals["n"] += 1
        theta = theta0.copy()
        theta[free] = x
        try:
            value = nlml(train, Hyperparameters.from_log_vector(theta), part, mean)
        except (NumericalError, ContractViolation, FloatingPointError):
            return 1e300
        if not math.isfinite(value):
            return 1e300
        evals["ok"] += 1
        return value

    best_theta = theta0.copy()
    best_value = objective(theta0[free])
    rng = np.random.default_rng(seed)
    starts = [theta0[free]] + [theta0[free] + rng.normal(0.0, 1.0, len(free))
                                for _ in range(restarts)]
    remaining = budget - 1
    for k, x0 in enumerate(starts):
        if remaining <= 0:
            break
        share = remaining // (len(starts) - k)
        if share < 1:
            break
        before = evals["n"]
        res = optimize.minimize(
            objective, x0, method="Nelder-Mead",
            options={"maxfev": share, "xatol": 1e-4, "fatol": 1e-6, "adaptive": len(free) > 4},
        )
        remaining -= evals["n"] - before
        if res.fun < best_value:
            best_value = float(res.fun)
            best_theta = theta0.copy()
            best_theta[free] = res.x
    if evals["ok"] == 0:
        raise OptimizationError("every NLML evaluation failed numerically")
    log.debug("optimize_hypers: %d evaluations, nlml %.6g", evals["n"], best_value)
    return Hyperparameters.from_log_vector(best_theta) if best_value < 1e300 else init


def log_mode(values) -> float:
    """Mode of positive samples: the sample at the KDE density peak on log scale."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ContractViolation("cannot take the mode of an empty set")
    x = np.log(values)
    if x.size == 1 or np.ptp(x) == 0.0:
        return float(values[0])
    try:
        density = stats.gaussian_kde(x)(x)
    except np.linalg.LinAlgError:
        return float(values[0])
    return float(values[int(np.argmax(density))])


def aggregate_mode(per_cell: list) -> Hyperparameters:
    """Per-parameter mode across cells, parameters treated as independent."""
    if not per_cell:
        raise ContractViolation("need at least one hyperparameter set")
    return Hyperparameters(**{
        name: log_mode([getattr(hp, name) for hp in per_cell]) for name, _ in HYPER_FIELDS
    })
