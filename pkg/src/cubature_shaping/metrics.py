"""Mutual-information lower bounds by mismatched decoding.

Two auxiliary receivers are supported: a Gaussian channel with a fitted noise
variance, and the trained decoder network itself.  Both give
``I(X;Y) >= log2(M) - E[-log2 q(x|y)]`` for any choice of ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import logsumexp

from .errors import InputError

SIGMA_FLOOR = 1e-12
PROB_CLIP = 1e-12

ReceiverKind = Literal["gaussian", "decoder"]


@dataclass(frozen=True)
class MiEstimate:
    bits_per_symbol: float
    num_symbols: int
    receiver_kind: ReceiverKind


@dataclass(frozen=True)
class GaussianReceiver:
    """Auxiliary Gaussian channel with per-real-dimension variance ``sigma_sq``."""

    constellation: np.ndarray
    sigma_sq: float

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise InputError("sigma_sq must be positive")

    @property
    def priors(self) -> np.ndarray:
        M = len(self.constellation)
        return np.full(M, 1.0 / M)

    def log_posteriors(self, y: np.ndarray) -> np.ndarray:
        """Natural-log posteriors ``(K, M)`` for received symbols ``y``."""
        y = np.asarray(y, dtype=complex).reshape(-1)
        d2 = np.abs(y[:, None] - np.asarray(self.constellation)[None, :]) ** 2
        metric = -d2 / (2.0 * self.sigma_sq)
        return metric - logsumexp(metric, axis=1, keepdims=True)


def fit_sigma(x_sent, y_received) -> float:
    """Maximum-likelihood per-dimension noise variance ``sum|y-x|^2 / (2K)``."""
    x = np.asarray(x_sent, dtype=complex).reshape(-1)
    y = np.asarray(y_received, dtype=complex).reshape(-1)
    if x.size == 0 or x.size != y.size:
        raise InputError("fit_sigma needs equal-length, non-empty sequences")
    sigma_sq = float(np.sum(np.abs(y - x) ** 2) / (2 * x.size))
    return max(sigma_sq, SIGMA_FLOOR)


def gaussian_posterior(rx: GaussianReceiver, y: complex) -> np.ndarray:
    return np.exp(rx.log_posteriors(np.array([y]))[0])


def mi_gaussian(x_indices, y_received, constellation) -> MiEstimate:
    """MI lower bound with the mismatched Gaussian receiver, in bits/symbol.

    Negative Monte-Carlo estimates are clamped to zero.
    """
    idx = np.asarray(x_indices).reshape(-1)
    y = np.asarray(y_received, dtype=complex).reshape(-1)
    const = np.asarray(constellation, dtype=complex)
    if idx.size == 0:
        raise InputError("need at least one symbol")
    rx = GaussianReceiver(const, fit_sigma(const[idx], y))
    M = len(const)
    total = 0.0
    # chunked to keep the K x M distance matrix small
    for lo in range(0, idx.size, 65536):
        lp = rx.log_posteriors(y[lo : lo + 65536])
        total += float(np.sum(lp[np.arange(lp.shape[0]), idx[lo : lo + 65536]]))
    mi = math.log2(M) + total / idx.size / math.log(2.0)
    return MiEstimate(max(mi, 0.0), int(idx.size), "gaussian")


def mi_decoder(posteriors, target_indices) -> MiEstimate:
    """MI lower bound with the decoder posteriors as auxiliary channel."""
    s = np.asarray(posteriors, dtype=float)
    t = np.asarray(target_indices).reshape(-1)
    if s.ndim != 2 or s.shape[0] != t.size or t.size == 0:
        raise InputError("posteriors must be K x M with K = len(targets) >= 1")
    M = s.shape[1]
    picked = np.maximum(s[np.arange(t.size), t], PROB_CLIP)
    mi = math.log2(M) + float(np.mean(np.log2(picked)))
    return MiEstimate(max(mi, 0.0), int(t.size), "decoder")
