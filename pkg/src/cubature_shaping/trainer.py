"""Training and test protocol: batches, CKF/backprop loops, grid search, evaluation."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from . import channels as ch
from . import ckf, metrics, nn
from .errors import ConfigError, InputError, NumericalBreakdown, SearchFailure, UnsupportedChannelError

log = logging.getLogger(__name__)

DEFAULT_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
DEFAULT_MAX_ITER = {"ckf": 2000, "backprop": 20000}


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the master seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(key,)))


@dataclass(frozen=True)
class Convergence:
    window: int = 50
    rel_tol: float = 1e-4
    hits: int = 3


@dataclass
class TrainConfig:
    M: int
    channel: ch.ChannelConfig
    optimizer: Literal["ckf", "backprop"] = "ckf"
    hp: ckf.CkfHyperparams = field(default_factory=lambda: ckf.CkfHyperparams(1e-4, 1e-2))
    learning_rate: float = 1e-3
    batch_size: Optional[int] = None
    max_iterations: Optional[int] = None
    convergence: Convergence = field(default_factory=Convergence)
    master_seed: int = 0

    def __post_init__(self):
        if self.batch_size is None:
            self.batch_size = 32 * self.M
        if self.max_iterations is None:
            self.max_iterations = DEFAULT_MAX_ITER.get(self.optimizer, 2000)
        if self.M < 2 or self.M & (self.M - 1):
            raise ConfigError(f"M must be a power of two >= 2, got {self.M}")
        if self.batch_size % self.M:
            raise ConfigError(f"batch_size {self.batch_size} is not divisible by M={self.M}")
        if self.optimizer not in ("ckf", "backprop"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "backprop" and not self.channel.differentiable:
            raise UnsupportedChannelError(
                f"backprop cannot train through the non-differentiable {self.channel.kind} channel"
            )
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")

    @property
    def layout(self) -> nn.Layout:
        return nn.Layout(self.M)


@dataclass
class TrainReport:
    final_weights: np.ndarray
    loss_trace: np.ndarray
    mi_validation: float
    iterations_run: int
    hyperparams_used: Optional[ckf.CkfHyperparams]
    optimizer: str
    M: int
    converged: bool = False

    @property
    def layout(self) -> nn.Layout:
        return nn.Layout(self.M)

    @property
    def constellation(self) -> np.ndarray:
        enc, _ = nn.unflatten(self.final_weights, self.layout)
        return nn.constellation_of(enc)

    @property
    def final_loss(self) -> float:
        if len(self.loss_trace) == 0:
            return math.nan
        tail = self.loss_trace[-min(50, len(self.loss_trace)) :]
        return float(np.mean(tail))


def make_batch(M: int, B: int, rng: np.random.Generator) -> ckf.MeasurementBatch:
    """Balanced batch: every symbol exactly B/M times, in shuffled order."""
    if B % M:
        raise ConfigError(f"batch size {B} is not divisible by M={M}")
    targets = rng.permutation(np.repeat(np.arange(M), B // M))
    return ckf.MeasurementBatch.from_indices(targets, M)


class _ConvergenceMonitor:
    def __init__(self, rule: Convergence):
        self.rule = rule
        self.prev = None
        self.streak = 0

    def update(self, trace: list) -> bool:
        w = self.rule.window
        if len(trace) % w:
            return False
        cur = float(np.mean(trace[-w:]))
        done = False
        if self.prev is not None:
            rel = abs(cur - self.prev) / max(abs(self.prev), 1e-300)
            self.streak = self.streak + 1 if rel < self.rule.rel_tol else 0
            done = self.streak >= self.rule.hits
        self.prev = cur
        return done


def validation_mi(weights: np.ndarray, cfg: TrainConfig) -> float:
    rng = stream(cfg.master_seed, "validation")
    batch = make_batch(cfg.M, cfg.batch_size, rng)
    post, _ = nn.ae_forward(weights, cfg.layout, batch.inputs, cfg.channel, rng)
    return metrics.mi_decoder(post, batch.targets).bits_per_symbol


def train(cfg: TrainConfig, initial_weights: Optional[np.ndarray] = None) -> TrainReport:
    """Train one autoencoder at one operating point.

    Stops when the moving-average loss changes by less than ``rel_tol`` for
    ``hits`` consecutive windows, or at ``max_iterations``.
    """
    layout = cfg.layout
    w = (
        nn.init_weights(layout, stream(cfg.master_seed, "init"))
        if initial_weights is None
        else np.array(initial_weights, dtype=float)
    )
    batch_rng = stream(cfg.master_seed, "batch")
    noise_rng = stream(cfg.master_seed, "channel")
    monitor = _ConvergenceMonitor(cfg.convergence)
    trace: list[float] = []
    converged = False

    if cfg.optimizer == "ckf":
        state = ckf.CkfState.initial(w)
        for _ in range(cfg.max_iterations):
            batch = make_batch(cfg.M, cfg.batch_size, batch_rng)
            state, loss = ckf.ckf_step(state, cfg.hp, batch, cfg.channel, noise_rng, layout)
            trace.append(loss)
            if monitor.update(trace):
                converged = True
                break
        w = state.mean
        hp_used = cfg.hp
    else:
        adam = nn.AdamState(lr=cfg.learning_rate)
        for _ in range(cfg.max_iterations):
            batch = make_batch(cfg.M, cfg.batch_size, batch_rng)
            w, loss = nn.backprop_adam_step(w, layout, batch.targets, cfg.channel, adam, noise_rng)
            trace.append(loss)
            if monitor.update(trace):
                converged = True
                break
        hp_used = None

    log.debug("trained %s M=%d for %d iterations", cfg.optimizer, cfg.M, len(trace))
    return TrainReport(
        final_weights=w,
        loss_trace=np.asarray(trace, dtype=float),
        mi_validation=validation_mi(w, cfg),
        iterations_run=len(trace),
        hyperparams_used=hp_used,
        optimizer=cfg.optimizer,
        M=cfg.M,
        converged=converged,
    )


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalStats:
    mean: float
    max: float
    p25: float
    per_run: tuple

    @classmethod
    def from_runs(cls, values: Sequence[float]) -> "EvalStats":
        v = np.asarray(values, dtype=float)
        return cls(float(np.mean(v)), float(np.max(v)), float(np.percentile(v, 25)), tuple(v.tolist()))


def evaluate(
    channel: ch.ChannelConfig,
    num_runs: int,
    symbols_per_run: int,
    rng: np.random.Generator,
    receiver_kind: metrics.ReceiverKind = "gaussian",
    weights: Optional[np.ndarray] = None,
    constellation: Optional[np.ndarray] = None,
    M: Optional[int] = None,
) -> EvalStats:
    """Monte-Carlo test protocol: ``num_runs`` independent simulations.

    Give either trained ``weights`` (with ``M``) or a fixed ``constellation``.
    The decoder receiver needs weights.  Returns mean, max and 25th percentile
    of the per-run MI.
    """
    if num_runs < 1 or symbols_per_run < 1:
        raise InputError("num_runs and symbols_per_run must be >= 1")
    dec = None
    if weights is not None:
        if M is None:
            raise InputError("M is required together with weights")
        enc, dec = nn.unflatten(weights, nn.Layout(M))
        const = nn.constellation_of(enc)
    elif constellation is not None:
        const = np.asarray(constellation, dtype=complex)
    else:
        raise InputError("evaluate needs weights or a constellation")
    if receiver_kind == "decoder" and dec is None:
        raise InputError("the decoder receiver needs trained weights")

    seeds = rng.integers(0, 2**63 - 1, size=num_runs)
    values = []
    for seed in seeds:
        run_rng = np.random.default_rng(int(seed))
        idx = run_rng.integers(0, len(const), size=symbols_per_run)
        y = ch.apply_channel(const[idx], channel, run_rng, const)
        if receiver_kind == "gaussian":
            values.append(metrics.mi_gaussian(idx, y, const).bits_per_symbol)
        elif receiver_kind == "decoder":
            post = nn.softmax(nn.decoder_logits(dec, y))
            values.append(metrics.mi_decoder(post, idx).bits_per_symbol)
        else:
            raise InputError(f"unknown receiver {receiver_kind!r}")
    return EvalStats.from_runs(values)


# --------------------------------------------------------------------------
# Grid search
# --------------------------------------------------------------------------


@dataclass
class GridCell:
    q: float
    r: float
    status: str  # "ok" | "diverged"
    final_loss: float = math.nan
    validation_mi: float = math.nan
    test_mi: float = math.nan
    iterations: int = 0
    error: str = ""
    report: Optional[TrainReport] = field(default=None, repr=False)


@dataclass
class GridSearchResult:
    best: ckf.CkfHyperparams
    report: TrainReport
    cells: list


def grid_search(
    base_cfg: TrainConfig,
    q_set: Sequence[float] = DEFAULT_GRID,
    r_set: Sequence[float] = DEFAULT_GRID,
    test_runs: int = 1,
    test_symbols: int = 100_000,
) -> GridSearchResult:
    """Train one CKF autoencoder per (q, r) pair and keep the best.

    Cells are ranked by mean Gaussian-receiver MI on a held-out test run that
    uses the same evaluation seed for every cell; ties go to smaller q, then
    smaller r.
    """
    if not q_set or not r_set:
        raise ConfigError("grid search needs non-empty q and r sets")
    cells = []
    for q in q_set:
        for r in r_set:
            cfg = TrainConfig(**{**base_cfg.__dict__, "optimizer": "ckf", "hp": ckf.CkfHyperparams(q, r)})
            try:
                rep = train(cfg)
                if not np.all(np.isfinite(rep.final_weights)):
                    raise NumericalBreakdown("non-finite weights", rep.iterations_run, cfg.hp)
                stats = evaluate(
                    cfg.channel,
                    test_runs,
                    test_symbols,
                    stream(cfg.master_seed, "evaluation"),
                    "gaussian",
                    weights=rep.final_weights,
                    M=cfg.M,
                )
            except (NumericalBreakdown, FloatingPointError, ArithmeticError, ValueError) as exc:
                log.info("grid cell q=%g r=%g diverged: %s", q, r, exc)
                cells.append(GridCell(q, r, "diverged", error=str(exc)))
                continue
            cells.append(
                GridCell(
                    q,
                    r,
                    "ok",
                    final_loss=rep.final_loss,
                    validation_mi=rep.mi_validation,
                    test_mi=stats.mean,
                    iterations=rep.iterations_run,
                    report=rep,
                )
            )
    ok = [c for c in cells if c.status == "ok"]
    if not ok:
        raise SearchFailure("every grid cell diverged", [(c.q, c.r, c.error) for c in cells])
    best = min(ok, key=lambda c: (-c.test_mi, c.q, c.r))
    return GridSearchResult(best=ckf.CkfHyperparams(best.q, best.r), report=best.report, cells=cells)
