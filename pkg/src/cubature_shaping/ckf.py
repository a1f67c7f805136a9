"""Cubature Kalman filter that treats the autoencoder weights as the state.

State model: ``w_j = w_{j-1} + q`` with ``q ~ N(0, Q I)``.  Measurement model:
for every batch element the scalar ``sqrt(cross_entropy)`` is observed to be
zero, with independent measurement noise of variance ``R``.  One filter
iteration is predict -> cubature points -> measurement propagation -> correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from . import channels as ch
from . import nn
from .errors import InputError, NumericalBreakdown

JITTER_START = 1e-12
JITTER_MAX = 1e-6
# cubature points evaluated per vectorized forward pass (bounds memory for large M)
POINT_CHUNK = 64


@dataclass(frozen=True)
class CkfHyperparams:
    q: float
    r: float

    def __post_init__(self):
        if not self.q >= 0:
            raise InputError(f"q must be >= 0, got {self.q}")
        if not self.r > 0:
            raise InputError(f"r must be > 0, got {self.r}")


@dataclass
class CkfState:
    mean: np.ndarray
    covariance: np.ndarray
    iteration: int = 0

    @classmethod
    def initial(cls, mean: np.ndarray, p0: float = 1.0) -> "CkfState":
        mean = np.asarray(mean, dtype=float)
        return cls(mean=mean.copy(), covariance=p0 * np.eye(mean.size))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class MeasurementBatch:
    inputs: np.ndarray  # one-hot, B x M
    targets: np.ndarray  # hot indices, length B

    @property
    def measured(self) -> np.ndarray:
        return np.zeros(len(self.targets))

    @property
    def size(self) -> int:
        return len(self.targets)

    @classmethod
    def from_indices(cls, targets: np.ndarray, M: int) -> "MeasurementBatch":
        targets = np.asarray(targets, dtype=np.int64)
        return cls(inputs=nn.one_hot(targets, M), targets=targets)


def scalar_measurement(posterior_row: np.ndarray, target_index: int) -> float:
    """sqrt(-ln s_target), the per-sample measurement that is driven to zero."""
    s = max(float(posterior_row[target_index]), nn.LOG_CLIP)
    return math.sqrt(max(-math.log(s), 0.0))


def predict(state: CkfState, hp: CkfHyperparams) -> CkfState:
    cov = state.covariance.copy()
    if hp.q:
        cov[np.diag_indices_from(cov)] += hp.q
    return replace(state, mean=state.mean.copy(), covariance=cov)


def _cholesky(p: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        pass
    n = p.shape[0]
    scale = max(np.trace(p) / n, np.finfo(float).tiny)
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(p + jitter * scale * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise NumericalBreakdown("covariance is not positive definite even after maximum jitter")


def cubature_points(state: CkfState) -> np.ndarray:
    """The ``N x 2N`` matrix ``[w + sqrt(N) S, w - sqrt(N) S]`` with ``P = S S^T``."""
    n = state.dim
    spread = math.sqrt(n) * _cholesky(state.covariance)
    w = state.mean[:, None]
    return np.concatenate([w + spread, w - spread], axis=1)


MeasureFn = Callable[[np.ndarray], np.ndarray]
"""Maps a stack of weight vectors ``(P, N)`` to measurements ``(P, B)``."""


def autoencoder_measure(
    layout: nn.Layout,
    batch: MeasurementBatch,
    channel: ch.ChannelConfig,
    noise: ch.ChannelNoise,
) -> MeasureFn:
    """Measurement function sqrt(CE) with one frozen channel-noise draw."""

    def measure(weights: np.ndarray) -> np.ndarray:
        out = np.empty((weights.shape[0], batch.size))
        for lo in range(0, weights.shape[0], POINT_CHUNK):
            chunk = weights[lo : lo + POINT_CHUNK]
            ce = nn.batched_cross_entropy(chunk, layout, batch.targets, channel, noise)
            out[lo : lo + POINT_CHUNK] = np.sqrt(np.maximum(ce, 0.0))
        return out

    return measure


def propagate_measurements(
    points: np.ndarray,
    batch: MeasurementBatch,
    channel: ch.ChannelConfig,
    rng: np.random.Generator,
    layout: Optional[nn.Layout] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the measurement at every cubature point.

    One channel-noise realization is drawn from ``rng`` and shared by all
    ``2N`` columns.  Returns ``(T, t_hat)`` with ``T`` of shape ``(B, 2N)``.
    """
    if layout is None:
        layout = nn.Layout(batch.inputs.shape[1])
    noise = ch.draw_noise(channel, batch.size, rng)
    measure = autoencoder_measure(layout, batch, channel, noise)
    T = measure(points.T).T
    return T, T.mean(axis=1)


def correct(
    state: CkfState,
    points: np.ndarray,
    T: np.ndarray,
    t_hat: np.ndarray,
    hp: CkfHyperparams,
    measured: Optional[np.ndarray] = None,
) -> CkfState:
    """Kalman correction from propagated cubature points.

    ``state`` is the *predicted* state.  ``measured`` defaults to the zero
    vector used for cross-entropy training.
    """
    n2 = points.shape[1]
    dW = points - state.mean[:, None]
    dT = T - t_hat[:, None]
    p_tt = dT @ dT.T / n2
    p_tt[np.diag_indices_from(p_tt)] += hp.r
    p_wt = dW @ dT.T / n2
    try:
        factor = sla.cho_factor(p_tt, lower=True, check_finite=True)
        gain_t = sla.cho_solve(factor, p_wt.T)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalBreakdown(f"innovation covariance solve failed: {exc}") from exc
    gain = gain_t.T
    innovation = (np.zeros_like(t_hat) if measured is None else measured) - t_hat
    mean = state.mean + gain @ innovation
    # G P_TT G^T == G P_WT^T since G P_TT = P_WT
    cov = state.covariance - gain @ p_wt.T
    cov = 0.5 * (cov + cov.T)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalBreakdown("non-finite state after correction")
    return CkfState(mean=mean, covariance=cov, iteration=state.iteration + 1)


def ckf_update(state: CkfState, hp: CkfHyperparams, measure: MeasureFn, measured=None):
    """Generic iteration for any black-box measurement function.

    ``measure`` receives the ``2N + 1`` weight vectors (cubature points followed
    by the predicted mean) and returns their measurements.  Returns the new
    state and the measurement at the predicted mean.
    """
    pred = predict(state, hp)
    try:
        points = cubature_points(pred)
    except NumericalBreakdown as exc:
        raise NumericalBreakdown(str(exc.args[0]), state.iteration, hp) from None
    stacked = np.concatenate([points.T, pred.mean[None, :]], axis=0)
    values = measure(stacked)
    T = values[:-1].T
    try:
        new = correct(pred, points, T, T.mean(axis=1), hp, measured)
    except NumericalBreakdown as exc:
        raise NumericalBreakdown(str(exc.args[0]), state.iteration, hp) from None
    return new, values[-1]


def ckf_step(
    state: CkfState,
    hp: CkfHyperparams,
    batch: MeasurementBatch,
    channel: ch.ChannelConfig,
    rng: np.random.Generator,
    layout: Optional[nn.Layout] = None,
) -> tuple[CkfState, float]:
    """One training iteration on a batch.

    Returns the updated state and the mean cross-entropy (nats) of the
    predicted mean weights on this batch, which is the training-loss telemetry.
    """
    if layout is None:
        layout = nn.Layout(batch.inputs.shape[1])
    noise = ch.draw_noise(channel, batch.size, rng)
    measure = autoencoder_measure(layout, batch, channel, noise)
    new, at_mean = ckf_update(state, hp, measure)
    return new, float(np.mean(at_mean**2))
