"""Recursive spatiotemporal GP: a Kalman filter over a partitioned state.

The state ``z = (z_t, z_s)`` stacks the Wiener-velocity temporal resistance
(level and its time derivative) and the spatial resistance at a fixed set of
basis operating points.  Measurements at arbitrary operating points enter
through ``H = [H_t, H_s]`` with ``H_s = K_qb K_bb^-1``; the part of the
spatial prior not explained by the basis is carried as extra measurement
covariance.  Setting the basis to :meth:`BasisSet.empty` leaves a pure
temporal Kalman filter, which reproduces the exact WV-kernel GP.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.cluster.vq import ClusterError, kmeans2

from .errors import ContractViolation, NumericalError
from .kernels import Hyperparameters, as_ops, k_se_ard

log = logging.getLogger(__name__)

N_TEMPORAL = 2
KMEANS_MAX_POINTS = 50000
KMEANS_RESEEDS = 5


@dataclasses.dataclass
class BasisSet:
    vectors: np.ndarray  # (n_b, 3)
    k_bb: np.ndarray
    k_bb_inverse: np.ndarray

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def from_vectors(cls, vectors, hp: Hyperparameters, jitter: float = 1e-8) -> "BasisSet":
        vectors = as_ops(vectors) if np.size(vectors) else np.zeros((0, 3))
        n = vectors.shape[0]
        if n == 0:
            return cls.empty()
        k_bb = k_se_ard(vectors, vectors, hp)
        k_bb[np.diag_indices(n)] += jitter * hp.se_output_scale
        chol = linalg.cho_factor(k_bb, lower=True)
        inv = linalg.cho_solve(chol, np.eye(n))
        return cls(vectors, k_bb, 0.5 * (inv + inv.T))

    @classmethod
    def empty(cls) -> "BasisSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 0)), np.zeros((0, 0)))


def select_basis_kmeans(ops, k: int = 27, reference=None, hp: Hyperparameters = Hyperparameters(),
                        seed: int = 0) -> BasisSet:
    """k-means centroids of the operating points, plus the reference point.

    Clustering runs in length-scale units so distances match the kernel.
    Large inputs are thinned to ``KMEANS_MAX_POINTS`` evenly spaced rows.
    """
    ops = as_ops(ops)
    if np.unique(ops, axis=0).shape[0] < k:
        raise ContractViolation(f"need at least {k} distinct operating points for k-means")
    if ops.shape[0] > KMEANS_MAX_POINTS:
        ops = ops[np.linspace(0, ops.shape[0] - 1, KMEANS_MAX_POINTS).astype(int)]
    scale = hp.length_scales
    data = ops / scale
    for attempt in range(KMEANS_RESEEDS + 1):
        try:
            centroids, _ = kmeans2(data, k, minit="++", missing="raise",
                                   seed=np.random.default_rng(seed + attempt))
            break
        except ClusterError:
            log.debug("k-means produced an empty cluster, reseeding (attempt %d)", attempt + 1)
    else:
        raise NumericalError(f"k-means kept producing empty clusters after {KMEANS_RESEEDS} reseeds")
    vectors = centroids * scale
    if reference is not None:
        vectors = np.vstack([vectors, as_ops(reference)])
    return BasisSet.from_vectors(vectors, hp)


def grid_counts(bounds, hp: Hyperparameters) -> np.ndarray:
    """Points per axis so that spacing never exceeds the length scale."""
    bounds = np.asarray(bounds, dtype=float)
    width = bounds[:, 1] - bounds[:, 0]
    counts = np.ones(3, dtype=int)
    pos = width > 0
    counts[pos] = np.ceil(width[pos] / hp.length_scales[pos] - 1e-12).astype(int) + 1
    return counts


def select_basis_grid(bounds, hp: Hyperparameters = Hyperparameters(), reference=None,
                      max_basis: int = 64) -> BasisSet:
    """Axis-aligned grid over the selection window (edges included)."""
    bounds = np.asarray(bounds.as_bounds() if hasattr(bounds, "as_bounds") else bounds, dtype=float)
    counts = grid_counts(bounds, hp)
    total = int(np.prod(counts)) + (reference is not None)
    if total > max_basis:
        raise ContractViolation(
            f"grid needs {total} basis vectors (per axis {counts.tolist()}) but max_basis is "
            f"{max_basis}; use longer length scales, a narrower window or raise max_basis"
        )
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    vectors = np.column_stack([m.ravel() for m in mesh])
    if reference is not None:
        vectors = np.vstack([vectors, as_ops(reference)])
    return BasisSet.from_vectors(vectors, hp)


@dataclasses.dataclass
class KalmanState:
    z: np.ndarray
    P: np.ndarray

    @property
    def z_t(self) -> np.ndarray:
        return self.z[:N_TEMPORAL]

    @property
    def z_s(self) -> np.ndarray:
        return self.z[N_TEMPORAL:]

    @classmethod
    def initial(cls, basis: BasisSet) -> "KalmanState":
        d = N_TEMPORAL + basis.size
        P = np.zeros((d, d))
        P[N_TEMPORAL:, N_TEMPORAL:] = basis.k_bb
        return cls(np.zeros(d), P)


def transition(ts: float, hp: Hyperparameters, n_spatial: int):
    """State transition A(ts) and process noise Q(ts)."""
    d = N_TEMPORAL + n_spatial
    A = np.eye(d)
    A[0, 1] = ts
    Q = np.zeros((d, d))
    q = hp.wv_output_scale
    Q[:2, :2] = q * np.array([[ts**3 / 3.0, ts**2 / 2.0], [ts**2 / 2.0, ts]])
    return A, Q


def _symmetrize(P):
    return 0.5 * (P + P.T)


def predict_step(state: KalmanState, ts: float, hp: Hyperparameters) -> KalmanState:
    if ts < 0:
        raise ContractViolation(f"prediction step length must be >= 0, got {ts}")
    if ts == 0:
        return KalmanState(state.z.copy(), state.P.copy())
    A, Q = transition(ts, hp, state.z.size - N_TEMPORAL)
    return KalmanState(A @ state.z, _symmetrize(A @ state.P @ A.T + Q))


def measurement_matrix(ops, basis: BasisSet, hp: Hyperparameters):
    """``H = [H_t, H_s]`` for query operating points, plus ``K_qb``."""
    ops = as_ops(ops)
    n = ops.shape[0]
    H = np.zeros((n, N_TEMPORAL + basis.size))
    H[:, 0] = 1.0
    if basis.size == 0:
        return H, np.zeros((n, 0))
    k_qb = k_se_ard(ops, basis.vectors, hp)
    H[:, N_TEMPORAL:] = k_qb @ basis.k_bb_inverse
    return H, k_qb


def _residual_cov(ops, H, k_qb, basis: BasisSet, hp: Hyperparameters, full: bool = True):
    """K_qq - H_s K_bb H_s^T: spatial prior variance the basis does not capture."""
    if basis.size == 0:
        n = H.shape[0]
        return np.zeros((n, n)) if full else np.zeros(n)
    h_s = H[:, N_TEMPORAL:]
    if full:
        return k_se_ard(ops, ops, hp) - h_s @ k_qb.T
    return hp.se_output_scale - np.sum(h_s * k_qb, axis=1)


def evaluate(state: KalmanState, queries, basis: BasisSet, hp: Hyperparameters):
    """Mean vector and covariance matrix of the resistance at query points."""
    ops = as_ops(queries)
    H, _ = measurement_matrix(ops, basis, hp)
    mean = H @ state.z
    # K_qq + H P H^T - H_s K_bb H_s^T, grouped as K_qq + H (P - blkdiag(0, K_bb)) H^T
    # so that a fresh state returns K_qq without cancellation error
    D = state.P.copy()
    D[N_TEMPORAL:, N_TEMPORAL:] -= basis.k_bb
    k_qq = k_se_ard(ops, ops, hp) if basis.size else np.zeros((ops.shape[0],) * 2)
    return mean, _symmetrize(k_qq + H @ D @ H.T)


def correct_step(state: KalmanState, ops, targets, hp: Hyperparameters,
                 basis: BasisSet) -> KalmanState:
    """Minibatch correction, Joseph-form covariance update."""
    ops = as_ops(ops)
    y = np.asarray(targets, dtype=float).ravel()
    if y.size < 1 or y.size != ops.shape[0]:
        raise ContractViolation("correction needs >= 1 measurement with matching operating points")
    if not np.all(np.isfinite(y)):
        raise ContractViolation("measurement targets must be finite")
    H, k_qb = measurement_matrix(ops, basis, hp)
    R = _residual_cov(ops, H, k_qb, basis, hp)
    R[np.diag_indices_from(R)] += hp.noise_var
    PHt = state.P @ H.T
    S = _symmetrize(H @ PHt + R)
    try:
        chol = linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            f"innovation covariance not positive definite (n_m={y.size}); "
            f"state z={state.z!r}, diag(P)={np.diag(state.P)!r}"
        ) from exc
    K = linalg.cho_solve(chol, PHt.T, check_finite=False).T
    z = state.z + K @ (y - H @ state.z)
    I_KH = np.eye(state.z.size) - K @ H
    P = I_KH @ state.P @ I_KH.T + K @ R @ K.T
    return KalmanState(z, _symmetrize(P))


@dataclasses.dataclass
class FilterTrace:
    """Filtered states at every update time.

    Predicted quantities are not stored; :meth:`predicted` recomputes them
    from the previous filtered state with the same arithmetic as the forward
    pass.  ``n_obs[k]`` counts measurements absorbed at ``times[k]``.
    """

    times: np.ndarray
    z: np.ndarray  # (K, d)
    P: np.ndarray  # (K, d, d)
    n_obs: np.ndarray
    basis: BasisSet
    hp: Hyperparameters
    origin: float = 0.0
    prior_offset: float = 0.0

    def __len__(self):
        return self.times.size

    def state(self, k: int) -> KalmanState:
        return KalmanState(self.z[k], self.P[k])

    def predicted(self, k: int) -> KalmanState:
        """z_{k|k-1}, P_{k|k-1}; for k = 0 the prior propagated from t = 0."""
        if k == 0:
            prior = KalmanState.initial(self.basis)
            prior.z[0] = self.prior_offset
            return predict_step(prior, self.times[0], self.hp)
        return predict_step(self.state(k - 1), self.times[k] - self.times[k - 1], self.hp)

    def estimates(self, query, part: str = "total") -> "ResistanceSeries":
        return series_at(self.times, self.z, self.P, query, self.basis, self.hp,
                         "forward", part, self.origin)

    def to_frame(self) -> pd.DataFrame:
        return trace_frame(self.times, self.z, self.P, self.n_obs)


@dataclasses.dataclass
class SmoothedTrace:
    times: np.ndarray
    z: np.ndarray
    P: np.ndarray
    basis: BasisSet
    hp: Hyperparameters
    origin: float = 0.0

    def __len__(self):
        return self.times.size

    def estimates(self, query, part: str = "total") -> "ResistanceSeries":
        return series_at(self.times, self.z, self.P, query, self.basis, self.hp,
                         "smoothed", part, self.origin)

    def to_frame(self) -> pd.DataFrame:
        return trace_frame(self.times, self.z, self.P)


def trace_frame(times, Z, P, n_obs=None) -> pd.DataFrame:
    """Flat table of a trace: one row per update time.

    Columns: ``time_days``, ``n_obs`` (filter traces only),
    ``temporal_mean_ohm``, ``temporal_var_ohm2``, ``velocity_ohm_per_day``,
    then ``basis_<j>_mean`` for each basis weight (units of K_bb^-1 f).
    """
    cols = {"time_days": times}
    if n_obs is not None:
        cols["n_obs"] = n_obs
    cols["temporal_mean_ohm"] = Z[:, 0]
    cols["temporal_var_ohm2"] = P[:, 0, 0]
    cols["velocity_ohm_per_day"] = Z[:, 1]
    for j in range(Z.shape[1] - N_TEMPORAL):
        cols[f"basis_{j + 1}_mean"] = Z[:, N_TEMPORAL + j]
    return pd.DataFrame(cols)


@dataclasses.dataclass
class ResistanceSeries:
    """Resistance at one query operating point along a trace."""

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    query_op: np.ndarray
    provenance: str
    origin: float = 0.0

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, 0.0))


def series_at(times, Z, P, query, basis, hp, provenance, part="total", origin=0.0):
    """Evaluate mean/variance at a single query point for every stored state.

    ``part="temporal"`` returns only the time-dependent resistor.
    """
    op = as_ops(query)
    if op.shape[0] != 1:
        raise ContractViolation("series evaluation takes a single query operating point")
    if part == "temporal":
        h = np.zeros(Z.shape[1])
        h[0] = 1.0
        resid = 0.0
    elif part == "total":
        H, k_qb = measurement_matrix(op, basis, hp)
        h = H[0]
        resid = float(_residual_cov(op, H, k_qb, basis, hp, full=False)[0])
    else:
        raise ContractViolation(f"unknown series part {part!r}")
    mean = Z @ h
    var = np.einsum("i,kij,j->k", h, P, h) + resid
    return ResistanceSeries(np.asarray(times).copy(), mean, var, op[0], provenance, origin)


def update_grid(obs_times, update_interval_hours, start=None, end=None):
    """Update times and, per observation, the index of the update it joins.

    With an interval, the grid is ``start + k * dt`` and an observation at
    time t joins the first grid point >= t.  With ``None`` every distinct
    observation time becomes an update point.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    if update_interval_hours is None:
        uniq = np.unique(obs_times)
        if start is None:
            start = min(0.0, float(uniq[0])) if uniq.size else 0.0
        if uniq.size and uniq[0] < start:
            raise ContractViolation("observations precede the filter start")
        grid = np.concatenate([[start], uniq[uniq > start]])
        if end is not None and end > grid[-1]:
            grid = np.append(grid, end)
        return grid, np.searchsorted(grid, obs_times)
    dt = update_interval_hours / 24.0
    if start is None:
        start = np.floor(obs_times[0] / dt) * dt if obs_times.size else 0.0
    last = obs_times[-1] if obs_times.size else start
    if end is not None:
        last = max(last, end)
    if obs_times.size and obs_times[0] < start - 1e-12:
        raise ContractViolation("observations precede the filter start")
    n_steps = int(np.ceil((last - start) / dt - 1e-9))
    grid = start + dt * np.arange(n_steps + 1)
    idx = np.ceil((obs_times - start) / dt - 1e-9).astype(np.int64)
    return grid, np.clip(idx, 0, n_steps)


def run_filter(obs_times, obs_ops, obs_y, basis: BasisSet, hp: Hyperparameters,
               update_interval: float | None = 1.0, start: float | None = None,
               end: float | None = None, origin: float = 0.0,
               prior_offset: float = 0.0) -> FilterTrace:
    """Forward Kalman pass on a regular update grid.

    Observations falling in one update interval form a single minibatch
    correction; intervals without data get a prediction-only step.
    ``update_interval`` is in hours (``None``: update at each observation
    time).  ``prior_offset`` is a constant prior mean subtracted from the
    targets; estimates are relative to it.
    """
    obs_times = np.asarray(obs_times, dtype=float).ravel()
    obs_y = np.asarray(obs_y, dtype=float).ravel() - prior_offset
    obs_ops = as_ops(obs_ops) if obs_times.size else np.zeros((0, 3))
    if obs_times.size and np.any(np.diff(obs_times) < 0):
        raise ContractViolation("observations must be time-sorted")
    if obs_ops.shape[0] != obs_times.size or obs_y.size != obs_times.size:
        raise ContractViolation("observation arrays differ in length")
    grid, idx = update_grid(obs_times, update_interval, start, end)
    if grid[0] < 0:
        raise ContractViolation("filter start must be >= 0 (time origin of the WV prior)")
    bounds = np.searchsorted(idx, np.arange(grid.size + 1))

    d = N_TEMPORAL + basis.size
    Z = np.empty((grid.size, d))
    P = np.empty((grid.size, d, d))
    n_obs = np.diff(bounds)
    state = KalmanState.initial(basis)
    if grid[0] > 0:
        state = predict_step(state, grid[0], hp)
    for k in range(grid.size):
        if k:
            state = predict_step(state, grid[k] - grid[k - 1], hp)
        a, b = bounds[k], bounds[k + 1]
        if b > a:
            state = correct_step(state, obs_ops[a:b], obs_y[a:b], hp, basis)
        Z[k] = state.z
        P[k] = state.P
    if prior_offset:
        Z[:, 0] += prior_offset
    return FilterTrace(grid, Z, P, n_obs, basis, hp, origin, prior_offset)


def rts_smooth(trace: FilterTrace, hp: Hyperparameters | None = None) -> SmoothedTrace:
    """Rauch-Tung-Striebel backward pass over a stored filter trace."""
    hp = hp or trace.hp
    n = len(trace)
    if n == 0:
        raise ContractViolation("cannot smooth an empty trace")
    Zs = trace.z.copy()
    Ps = trace.P.copy()
    n_spatial = trace.basis.size
    warned = False
    for k in range(n - 2, -1, -1):
        ts = trace.times[k + 1] - trace.times[k]
        A, Q = transition(ts, hp, n_spatial)
        Pk = trace.P[k]
        z_pred = A @ trace.z[k]
        P_pred = _symmetrize(A @ Pk @ A.T + Q)
        # G = Pk A^T P_pred^-1, via a solve against the symmetric P_pred
        rhs = A @ Pk
        try:
            G = linalg.cho_solve(linalg.cho_factor(P_pred, lower=True, check_finite=False),
                                 rhs, check_finite=False).T
        except linalg.LinAlgError:
            if not warned:
                warnings.warn("predicted covariance singular in RTS smoother; using least squares",
                              RuntimeWarning, stacklevel=2)
                warned = True
            G = np.linalg.lstsq(P_pred, rhs, rcond=1e-12)[0].T
        Zs[k] = trace.z[k] + G @ (Zs[k + 1] - z_pred)
        Ps[k] = _symmetrize(Pk + G @ (Ps[k + 1] - P_pred) @ G.T)
    return SmoothedTrace(trace.times.copy(), Zs, Ps, trace.basis, hp, trace.origin)
