"""Encoder/decoder networks for geometric constellation shaping.

The encoder is a bias-free linear map from a one-hot index to an I/Q point
(equivalently a lookup of an ``M x 2`` weight matrix).  The decoder is a single
hidden layer of ``M/2`` leaky-ReLU units followed by a softmax over the ``M``
symbols.

All trainable parameters live in one flat weight vector.  The functions here
accept either a single vector of shape ``(N,)`` or a stack ``(P, N)`` of weight
realizations, which is how the CKF evaluates all its cubature points at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

from . import channels as ch
from .errors import DegenerateConstellationError, InputError, UnsupportedChannelError

LEAKY_SLOPE = 0.01
LOG_CLIP = 1e-12
_LOG_FLOOR = math.log(LOG_CLIP)


@dataclass(frozen=True)
class Layout:
    """Position of each parameter block inside the flat weight vector.

    Blocks are stored neuron by neuron (each row is one neuron's incoming
    weights), encoder first, then the decoder layers in depth order::

        enc        (2, M)      rows: Re neuron, Im neuron
        hidden_w   (M/2, 2)
        hidden_b   (M/2,)
        out_w      (M, M/2)
        out_b      (M,)
    """

    M: int

    def __post_init__(self):
        if self.M < 2 or self.M % 2:
            raise InputError(f"alphabet size must be an even number >= 2, got {self.M}")

    @property
    def hidden(self) -> int:
        return self.M // 2

    @cached_property
    def blocks(self) -> dict:
        M, H = self.M, self.hidden
        shapes = [
            ("enc", (2, M)),
            ("hidden_w", (H, 2)),
            ("hidden_b", (H,)),
            ("out_w", (M, H)),
            ("out_b", (M,)),
        ]
        out, off = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            out[name] = (off, shape)
            off += size
        return out

    @property
    def num_encoder(self) -> int:
        return 2 * self.M

    @property
    def num_decoder(self) -> int:
        H = self.hidden
        return 2 * H + H + H * self.M + self.M

    @property
    def size(self) -> int:
        return self.num_encoder + self.num_decoder

    def block(self, w: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.blocks[name]
        size = int(np.prod(shape))
        return w[..., off : off + size].reshape(w.shape[:-1] + shape)


@dataclass
class EncoderNet:
    weights: np.ndarray  # (M, 2): row k is (Re, Im) of symbol k

    @property
    def M(self) -> int:
        return self.weights.shape[0]


@dataclass
class DecoderNet:
    hidden_weights: np.ndarray  # (2, M/2)
    hidden_bias: np.ndarray  # (M/2,)
    out_weights: np.ndarray  # (M/2, M)
    out_bias: np.ndarray  # (M,)
    leaky_slope: float = field(default=LEAKY_SLOPE)

    @property
    def M(self) -> int:
        return self.out_bias.shape[-1]


def unflatten(w: np.ndarray, layout: Layout) -> tuple[EncoderNet, DecoderNet]:
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != layout.size:
        raise InputError(f"weight vector has {w.shape[-1]} entries, layout needs {layout.size}")
    enc = EncoderNet(np.swapaxes(layout.block(w, "enc"), -1, -2).copy())
    dec = DecoderNet(
        hidden_weights=np.swapaxes(layout.block(w, "hidden_w"), -1, -2).copy(),
        hidden_bias=layout.block(w, "hidden_b").copy(),
        out_weights=np.swapaxes(layout.block(w, "out_w"), -1, -2).copy(),
        out_bias=layout.block(w, "out_b").copy(),
    )
    return enc, dec


def flatten(enc: EncoderNet, dec: DecoderNet) -> np.ndarray:
    parts = [
        np.swapaxes(enc.weights, -1, -2),
        np.swapaxes(dec.hidden_weights, -1, -2),
        dec.hidden_bias,
        np.swapaxes(dec.out_weights, -1, -2),
        dec.out_bias,
    ]
    lead = np.shape(enc.weights)[:-2]
    return np.concatenate([np.reshape(p, lead + (-1,)) for p in parts], axis=-1)


def glorot_init(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Glorot/Xavier uniform sample for a ``(fan_in, fan_out)`` weight matrix."""
    fan_in, fan_out = shape
    if fan_in < 1 or fan_out < 1:
        raise InputError("fan_in and fan_out must be >= 1")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_weights(layout: Layout, rng: np.random.Generator) -> np.ndarray:
    """Glorot-initialized weight vector with zero biases."""
    M, H = layout.M, layout.hidden
    enc = EncoderNet(glorot_init((M, 2), rng))
    dec = DecoderNet(
        hidden_weights=glorot_init((2, H), rng),
        hidden_bias=np.zeros(H),
        out_weights=glorot_init((H, M), rng),
        out_bias=np.zeros(M),
    )
    return flatten(enc, dec)


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def _hot_index(u: np.ndarray) -> int:
    u = np.asarray(u)
    nz = np.flatnonzero(u)
    if u.ndim != 1 or nz.size != 1 or u[nz[0]] != 1:
        raise InputError("input is not a one-hot vector")
    return int(nz[0])


def encoder_forward(enc: EncoderNet, u: np.ndarray) -> complex:
    u = np.asarray(u)
    if u.shape != (enc.M,):
        raise InputError(f"one-hot vector must have length {enc.M}")
    k = _hot_index(u)
    return complex(enc.weights[k, 0], enc.weights[k, 1])


def normalize_power(points: np.ndarray) -> np.ndarray:
    """Scale each constellation (last axis) to unit mean power."""
    points = np.asarray(points, dtype=complex)
    power = np.mean(points.real**2 + points.imag**2, axis=-1, keepdims=True)
    if np.any(power == 0.0) or not np.all(np.isfinite(power)):
        raise DegenerateConstellationError("constellation has zero (or non-finite) power")
    return points / np.sqrt(power)


def raw_points(enc_weights: np.ndarray) -> np.ndarray:
    return enc_weights[..., 0] + 1j * enc_weights[..., 1]


def constellation_of(enc: EncoderNet) -> np.ndarray:
    """Encoder outputs for all M symbols, normalized to unit average power."""
    return normalize_power(raw_points(enc.weights))


def leaky_relu(a, slope=LEAKY_SLOPE):
    return np.where(a > 0, a, slope * a)


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    return e / np.sum(e, axis=-1, keepdims=True)


def _iq(y: np.ndarray) -> np.ndarray:
    return np.stack([y.real, y.imag], axis=-1)


def decoder_logits(dec: DecoderNet, y: np.ndarray) -> np.ndarray:
    """Logits for received symbols ``y`` of shape ``(..., B)`` -> ``(..., B, M)``.

    Leading axes of ``y`` must broadcast against the leading axes of the
    decoder parameters (one decoder per cubature point).
    """
    a = _iq(np.asarray(y)) @ dec.hidden_weights + dec.hidden_bias[..., None, :]
    h = leaky_relu(a, dec.leaky_slope)
    return h @ dec.out_weights + dec.out_bias[..., None, :]


def decoder_forward(dec: DecoderNet, y: complex) -> np.ndarray:
    """Posterior row of length M for one received point."""
    y = complex(y)
    if not (math.isfinite(y.real) and math.isfinite(y.imag)):
        raise InputError("decoder input must be finite")
    return softmax(decoder_logits(dec, np.array([y]))[0])


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy in nats with probabilities clipped at 1e-12."""
    logp = log_softmax(logits)
    idx = np.broadcast_to(np.asarray(targets)[..., None], logp.shape[:-1] + (1,))
    picked = np.take_along_axis(logp, idx, axis=-1)[..., 0]
    return -np.maximum(picked, _LOG_FLOOR)


def one_hot(indices: np.ndarray, M: int) -> np.ndarray:
    return np.eye(M)[np.asarray(indices)]


def indices_from_one_hot(U: np.ndarray) -> np.ndarray:
    U = np.asarray(U)
    if U.ndim != 2 or np.any(np.count_nonzero(U, axis=1) != 1) or np.any(U.max(axis=1) != 1):
        raise InputError("every row of U must be a one-hot vector")
    return np.argmax(U, axis=1)


def transmit_batch(
    w: np.ndarray,
    layout: Layout,
    indices: np.ndarray,
    channel: ch.ChannelConfig,
    noise: ch.ChannelNoise,
) -> np.ndarray:
    """Encoder -> power normalization -> channel for one or many weight vectors."""
    enc, _ = unflatten(w, layout)
    const = constellation_of(enc)
    x = const[..., np.asarray(indices)]
    return ch.transmit(x, channel, noise, const)


@numba.njit(cache=True)
def _shifted_logits(yr, yi, hw, hb, ow, ob, targets, slope, out, picked):
    # hw (P, H, 2), hb (P, H), ow (P, M, H), ob (P, M): neuron-major blocks.
    # Writes max-subtracted logits; exponentials are left to numpy (SIMD exp).
    n_p, n_b = yr.shape
    n_h = hb.shape[1]
    n_m = ob.shape[1]
    hid = np.empty(n_h)
    for p in range(n_p):
        for b in range(n_b):
            for j in range(n_h):
                a = hw[p, j, 0] * yr[p, b] + hw[p, j, 1] * yi[p, b] + hb[p, j]
                hid[j] = a if a > 0 else slope * a
            zmax = -np.inf
            for m in range(n_m):
                acc = ob[p, m]
                for j in range(n_h):
                    acc += ow[p, m, j] * hid[j]
                out[p, b, m] = acc
                if acc > zmax:
                    zmax = acc
            for m in range(n_m):
                out[p, b, m] -= zmax
            picked[p, b] = out[p, b, targets[b]]


def batched_cross_entropy(
    w: np.ndarray,
    layout: Layout,
    targets: np.ndarray,
    channel: ch.ChannelConfig,
    noise: ch.ChannelNoise,
) -> np.ndarray:
    """Per-sample cross-entropy ``(P, B)`` for a stack of weight vectors ``(P, N)``.

    The same frozen ``noise`` is applied to every weight vector, so rows only
    differ through the weights.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    targets = np.asarray(targets, dtype=np.int64)
    y = transmit_batch(w, layout, targets, channel, noise)
    y = np.broadcast_to(y, (w.shape[0], len(targets)))
    logits = np.empty(y.shape + (layout.M,))
    picked = np.empty(y.shape)
    _shifted_logits(
        np.ascontiguousarray(y.real),
        np.ascontiguousarray(y.imag),
        np.ascontiguousarray(layout.block(w, "hidden_w")),
        np.ascontiguousarray(layout.block(w, "hidden_b")),
        np.ascontiguousarray(layout.block(w, "out_w")),
        np.ascontiguousarray(layout.block(w, "out_b")),
        targets,
        LEAKY_SLOPE,
        logits,
        picked,
    )
    np.exp(logits, out=logits)
    logp = picked - np.log(logits.sum(axis=-1))
    return -np.maximum(logp, _LOG_FLOOR)


def ae_forward(
    w: np.ndarray,
    layout: Layout,
    U: np.ndarray,
    channel: ch.ChannelConfig,
    rng: np.random.Generator | None = None,
    noise: ch.ChannelNoise | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Full autoencoder pass for a one-hot batch ``U`` (B x M).

    Returns ``(posteriors, channel_outputs)``.  Either a random stream or an
    explicit frozen ``noise`` realization must be given.
    """
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[1] != layout.M:
        raise InputError(f"U must be B x {layout.M}")
    idx = indices_from_one_hot(U)
    if noise is None:
        if rng is None:
            raise InputError("ae_forward needs rng or noise")
        noise = ch.draw_noise(channel, len(idx), rng)
    _, dec = unflatten(w, layout)
    y = transmit_batch(w, layout, idx, channel, noise)
    return softmax(decoder_logits(dec, y)), y


# --------------------------------------------------------------------------
# Backprop baseline
# --------------------------------------------------------------------------

FD_CHANNEL_STEP = 1e-6


def channel_jacobian(x: np.ndarray, channel: ch.ChannelConfig, noise: ch.ChannelNoise) -> np.ndarray:
    """Per-symbol 2x2 Jacobian d(Re y, Im y)/d(Re x, Im x), central differences.

    Only valid for memoryless per-symbol channel maps (AWGN, NLPN).
    """
    h = FD_CHANNEL_STEP
    jac = np.empty(x.shape + (2, 2))
    for col, dx in enumerate((h, 1j * h)):
        dy = (ch.transmit(x + dx, channel, noise) - ch.transmit(x - dx, channel, noise)) / (2 * h)
        jac[..., 0, col] = dy.real
        jac[..., 1, col] = dy.imag
    return jac


def loss_and_grad(
    w: np.ndarray,
    layout: Layout,
    targets: np.ndarray,
    channel: ch.ChannelConfig,
    noise: ch.ChannelNoise,
) -> tuple[float, np.ndarray]:
    """Mean batch cross-entropy (nats) and its gradient w.r.t. the flat weights."""
    if not channel.differentiable:
        raise UnsupportedChannelError(f"backprop is not available for the {channel.kind} channel")
    targets = np.asarray(targets)
    B = len(targets)
    enc, dec = unflatten(w, layout)
    e = raw_points(enc.weights)
    power = np.mean(np.abs(e) ** 2)
    if power == 0:
        raise DegenerateConstellationError("constellation has zero power")
    const = e / math.sqrt(power)
    x = const[targets]
    y = ch.transmit(x, channel, noise)

    yr = _iq(y)  # (B, 2)
    a = yr @ dec.hidden_weights + dec.hidden_bias
    hid = leaky_relu(a, dec.leaky_slope)
    z = hid @ dec.out_weights + dec.out_bias
    logp = log_softmax(z)
    picked = logp[np.arange(B), targets]
    loss = float(np.mean(-np.maximum(picked, _LOG_FLOOR)))

    dz = np.exp(logp)
    dz[np.arange(B), targets] -= 1.0
    dz[picked < _LOG_FLOOR] = 0.0
    dz /= B
    g_out_w = hid.T @ dz
    g_out_b = dz.sum(axis=0)
    dh = dz @ dec.out_weights.T
    da = dh * np.where(a > 0, 1.0, dec.leaky_slope)
    g_hid_w = yr.T @ da
    g_hid_b = da.sum(axis=0)
    dyr = da @ dec.hidden_weights.T  # (B, 2)

    jac = channel_jacobian(x, channel, noise)
    dxr = np.einsum("bi,bij->bj", dyr, jac)  # dL/d(Re x, Im x)
    g_const = np.zeros((layout.M, 2))
    np.add.at(g_const, targets, dxr)
    # through x_i = e_i / sqrt(mean |e|^2)
    er = enc.weights
    inner = np.sum(g_const * er)
    g_enc = g_const / math.sqrt(power) - er * inner / (layout.M * power**1.5)

    grad = flatten(
        EncoderNet(g_enc),
        DecoderNet(g_hid_w, g_hid_b, g_out_w, g_out_b, dec.leaky_slope),
    )
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def backprop_adam_step(
    w: np.ndarray,
    layout: Layout,
    U_or_targets: np.ndarray,
    channel: ch.ChannelConfig,
    adam: AdamState,
    rng: np.random.Generator | None = None,
    noise: ch.ChannelNoise | None = None,
) -> tuple[np.ndarray, float]:
    """One Adam update of the mean batch cross-entropy.

    Accepts either a one-hot batch (B x M) or a vector of target indices.
    Mutates ``adam`` in place and returns ``(new_weights, loss_before_step)``.
    """
    if not channel.differentiable:
        raise UnsupportedChannelError(f"backprop is not available for the {channel.kind} channel")
    arr = np.asarray(U_or_targets)
    targets = indices_from_one_hot(arr) if arr.ndim == 2 else arr
    if noise is None:
        noise = ch.draw_noise(channel, len(targets), rng)
    loss, g = loss_and_grad(w, layout, targets, channel, noise)
    if adam.m is None:
        adam.m = np.zeros_like(w)
        adam.v = np.zeros_like(w)
    adam.t += 1
    adam.m = adam.beta1 * adam.m + (1 - adam.beta1) * g
    adam.v = adam.beta2 * adam.v + (1 - adam.beta2) * g * g
    m_hat = adam.m / (1 - adam.beta1**adam.t)
    v_hat = adam.v / (1 - adam.beta2**adam.t)
    return w - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps), loss
