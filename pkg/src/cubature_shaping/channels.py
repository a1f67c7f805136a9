"""Seedable one-sample-per-symbol channel simulators.

Three models are provided:

* :class:`AwgnConfig` - additive white Gaussian noise.
* :class:`NlpnConfig` - dispersion-free multi-span fiber with nonlinear phase
  noise and lumped EDFA amplification.
* :class:`PhaseNoiseBpsConfig` - Wiener laser phase noise, AWGN and blind phase
  search carrier recovery (not differentiable).

Every model splits into two halves: :func:`draw_noise` consumes the random
stream and returns a :class:`ChannelNoise` realization, and :func:`transmit`
is a deterministic map from ``(x, noise)`` to the channel output.  The split
lets the CKF trainer push many weight realizations through the *same* noise
and lets the backprop baseline differentiate the channel with the noise frozen.
``transmit`` broadcasts over leading axes of ``x`` so a whole set of cubature
points is handled in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar, Optional, Union

import numba
import numpy as np

from .errors import InputError

PLANCK = 6.62607015e-34  # J*s


def db_to_lin(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def _noise_variance(snr_db):
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return float(1.0 / db_to_lin(snr_db))


@dataclass(frozen=True)
class AwgnConfig:
    snr_db: float

    kind: ClassVar[str] = "awgn"
    differentiable: ClassVar[bool] = True

    @property
    def noise_variance(self) -> float:
        """Total complex noise variance 1/SNR (0 when ``snr_db`` is +inf)."""
        return _noise_variance(self.snr_db)


@dataclass(frozen=True)
class NlpnConfig:
    launch_power_dbm: float = 0.0
    gamma: float = 1.27  # 1/(W*km)
    alpha_db_per_km: float = 0.2
    span_length_km: float = 100.0
    num_spans: int = 10
    noise_figure_db: float = 5.0
    carrier_freq_hz: float = 193.41e12
    symbol_rate_baud: float = 32e9
    ase_noise: bool = True

    kind: ClassVar[str] = "nlpn"
    differentiable: ClassVar[bool] = True

    def __post_init__(self):
        if self.num_spans < 1:
            raise InputError("num_spans must be >= 1")
        if self.alpha_db_per_km < 0 or self.span_length_km <= 0:
            raise InputError("attenuation must be >= 0 and span length > 0")

    @property
    def launch_power_w(self) -> float:
        return float(dbm_to_watt(self.launch_power_dbm))

    @property
    def alpha_per_km(self) -> float:
        """Attenuation in nepers/km (power)."""
        return self.alpha_db_per_km * math.log(10.0) / 10.0

    @property
    def effective_length_km(self) -> float:
        a = self.alpha_per_km
        if a == 0.0:
            return self.span_length_km
        return (1.0 - math.exp(-a * self.span_length_km)) / a

    @property
    def amplifier_gain(self) -> float:
        return math.exp(self.alpha_per_km * self.span_length_km)

    @property
    def ase_variance_w(self) -> float:
        """Per-span ASE variance P_n = h F_c R_s (G NF - 1) / 2 in watts."""
        if not self.ase_noise:
            return 0.0
        nf = float(db_to_lin(self.noise_figure_db))
        return (
            PLANCK
            * self.carrier_freq_hz
            * self.symbol_rate_baud
            * (self.amplifier_gain * nf - 1.0)
            / 2.0
        )

    @property
    def nonlinear_phase_per_watt(self) -> float:
        """gamma * L_eff, the per-span rotation in rad per watt of |z|^2."""
        return self.gamma * self.effective_length_km

    @property
    def output_scale(self) -> float:
        """Amplitude factor that brings the received signal back to unit power.

        The phase rotation preserves power, so for a unit-power input the
        expected output power after dividing by sqrt(P_in) is
        ``1 + num_spans * P_n / P_in``.
        """
        p_in = self.launch_power_w
        return 1.0 / math.sqrt(p_in) / math.sqrt(
            1.0 + self.num_spans * self.ase_variance_w / p_in
        )


@dataclass(frozen=True)
class PhaseNoiseBpsConfig:
    snr_db: float
    linewidth_hz: float = 100e3
    symbol_rate_baud: float = 32e9
    num_test_phases: int = 36
    window_size: int = 64

    kind: ClassVar[str] = "pn_bps"
    differentiable: ClassVar[bool] = False

    def __post_init__(self):
        if self.num_test_phases < 2:
            raise InputError("num_test_phases must be >= 2")
        if self.window_size < 1:
            raise InputError("window_size must be >= 1")
        if self.linewidth_hz < 0:
            raise InputError("linewidth must be non-negative")

    @property
    def noise_variance(self) -> float:
        return _noise_variance(self.snr_db)

    @property
    def phase_increment_variance(self) -> float:
        """sigma_phi^2 = 2 pi dnu T_s."""
        return 2.0 * math.pi * self.linewidth_hz / self.symbol_rate_baud

    @property
    def test_phases(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.num_test_phases) / self.num_test_phases


ChannelConfig = Union[AwgnConfig, NlpnConfig, PhaseNoiseBpsConfig]


@dataclass(frozen=True)
class ChannelNoise:
    """One frozen noise realization for a sequence of ``n`` symbols.

    ``additive`` holds unit-variance circular complex Gaussian samples with
    shape ``(n,)`` (AWGN, phase-noise channel) or ``(num_spans, n)`` (NLPN);
    they are scaled by the configured variance inside :func:`transmit`.
    ``phase`` is the Wiener phase trajectory for the phase-noise channel.
    """

    additive: np.ndarray
    phase: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.additive.shape[-1]


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with unit total variance."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * math.sqrt(0.5)


def wiener_phase(length: int, cfg: PhaseNoiseBpsConfig, rng: np.random.Generator) -> np.ndarray:
    """Wiener phase path starting at zero: phi_k = phi_{k-1} + N(0, sigma_phi^2)."""
    if length < 1:
        raise InputError("length must be >= 1")
    steps = rng.standard_normal(length - 1) * math.sqrt(cfg.phase_increment_variance)
    return np.concatenate(([0.0], np.cumsum(steps)))


def draw_noise(cfg: ChannelConfig, n: int, rng: np.random.Generator) -> ChannelNoise:
    if isinstance(cfg, NlpnConfig):
        return ChannelNoise(additive=complex_normal(rng, (cfg.num_spans, n)))
    if isinstance(cfg, PhaseNoiseBpsConfig):
        phase = wiener_phase(n, cfg, rng)
        return ChannelNoise(additive=complex_normal(rng, n), phase=phase)
    if isinstance(cfg, AwgnConfig):
        return ChannelNoise(additive=complex_normal(rng, n))
    raise InputError(f"unknown channel config {cfg!r}")


def _nlpn_map(x, cfg: NlpnConfig, additive):
    p_in = cfg.launch_power_w
    if p_in <= 0:
        raise InputError("launch power must be positive")
    rot = cfg.nonlinear_phase_per_watt
    ase_std = math.sqrt(cfg.ase_variance_w)
    z = math.sqrt(p_in) * np.asarray(x, dtype=complex)
    for span in range(cfg.num_spans):
        z = z * np.exp(1j * rot * (z.real**2 + z.imag**2))
        if ase_std > 0.0:
            z = z + ase_std * additive[span]
    return z * cfg.output_scale


def transmit(
    x: np.ndarray,
    cfg: ChannelConfig,
    noise: ChannelNoise,
    ref_constellation: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Deterministic channel map for a frozen noise draw.

    ``x`` has shape ``(..., n)``.  For the BPS channel ``ref_constellation``
    (shape ``(..., M)``, broadcast against the leading axes of ``x``) is the
    decision alphabet used by the phase search.
    """
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != noise.length:
        raise InputError(f"signal length {x.shape[-1]} != noise length {noise.length}")
    if isinstance(cfg, AwgnConfig):
        var = cfg.noise_variance
        return x + math.sqrt(var) * noise.additive if var > 0 else x.copy()
    if isinstance(cfg, NlpnConfig):
        return _nlpn_map(x, cfg, noise.additive)
    if isinstance(cfg, PhaseNoiseBpsConfig):
        if ref_constellation is None:
            raise InputError("the BPS channel needs a reference constellation")
        z = x * np.exp(1j * noise.phase)
        var = cfg.noise_variance
        if var > 0:
            z = z + math.sqrt(var) * noise.additive
        y, _ = bps_recover(z, ref_constellation, cfg)
        return y
    raise InputError(f"unknown channel config {cfg!r}")


def awgn_apply(x, cfg: AwgnConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    return transmit(x, cfg, draw_noise(cfg, x.shape[-1], rng))


def nlpn_apply(x, cfg: NlpnConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    return transmit(x, cfg, draw_noise(cfg, x.shape[-1], rng))


def phase_noise_channel_apply(x, cfg: PhaseNoiseBpsConfig, ref_constellation, rng) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    return transmit(x, cfg, draw_noise(cfg, x.shape[-1], rng), ref_constellation)


def apply_channel(x, cfg: ChannelConfig, rng: np.random.Generator, ref_constellation=None):
    """Draw fresh noise and pass ``x`` through the channel."""
    x = np.asarray(x, dtype=complex)
    return transmit(x, cfg, draw_noise(cfg, x.shape[-1], rng), ref_constellation)


# --------------------------------------------------------------------------
# Blind phase search
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _decision_distances(zr, zi, cr, ci, cos_t, sin_t, out):
    # out[p, k, i] = min_m |z[p,k] e^{-i theta_i} - c[p,m]|^2
    n_p, n_k = zr.shape
    n_m = cr.shape[1]
    n_s = cos_t.shape[0]
    for p in range(n_p):
        for k in range(n_k):
            a = zr[p, k]
            b = zi[p, k]
            for i in range(n_s):
                # (a + jb)(cos - j sin)
                rr = a * cos_t[i] + b * sin_t[i]
                ri = b * cos_t[i] - a * sin_t[i]
                best = np.inf
                for m in range(n_m):
                    dr = rr - cr[p, m]
                    di = ri - ci[p, m]
                    d = dr * dr + di * di
                    if d < best:
                        best = d
                out[p, k, i] = best


def bps_distances(z, ref_constellation, cfg: PhaseNoiseBpsConfig) -> np.ndarray:
    """Windowed decision distances ``d[..., k, i]`` for every symbol and test phase.

    The window of ``window_size`` symbols is centered on ``k`` (for even sizes
    it extends one symbol further forward) and truncated at the edges.
    """
    z = np.asarray(z, dtype=complex)
    c = np.asarray(ref_constellation, dtype=complex)
    if c.shape[-1] == 0:
        raise InputError("empty reference constellation")
    if z.shape[-1] == 0:
        raise InputError("empty input sequence")
    lead = np.broadcast_shapes(z.shape[:-1], c.shape[:-1])
    z2 = np.broadcast_to(z, lead + z.shape[-1:]).reshape(-1, z.shape[-1])
    c2 = np.broadcast_to(c, lead + c.shape[-1:]).reshape(-1, c.shape[-1])

    theta = cfg.test_phases
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)

    raw = np.empty(z2.shape + (len(theta),))
    _decision_distances(
        np.ascontiguousarray(z2.real),
        np.ascontiguousarray(z2.imag),
        np.ascontiguousarray(c2.real),
        np.ascontiguousarray(c2.imag),
        cos_t,
        sin_t,
        raw,
    )
    n = z2.shape[-1]
    w = cfg.window_size
    csum = np.zeros((raw.shape[0], n + 1, raw.shape[2]))
    np.cumsum(raw, axis=1, out=csum[:, 1:, :])
    k = np.arange(n)
    lo = np.clip(k - (w - 1) // 2, 0, n)
    hi = np.clip(k - (w - 1) // 2 + w, 0, n)
    d = csum[:, hi, :] - csum[:, lo, :]
    return d.reshape(lead + (n, len(theta)))


def bps_recover(z, ref_constellation, cfg: PhaseNoiseBpsConfig):
    """Blind phase search.

    Returns ``(y, phase_estimates)`` where ``y = z * exp(-1j * phase_estimates)``
    and each estimate is the test phase with the smallest windowed distance
    (lowest index on ties).
    """
    z = np.asarray(z, dtype=complex)
    d = bps_distances(z, ref_constellation, cfg)
    idx = np.argmin(d, axis=-1)
    phi = cfg.test_phases[idx]
    y = np.broadcast_to(z, idx.shape) * (np.cos(phi) - 1j * np.sin(phi))
    return y, phi
