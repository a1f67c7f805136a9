"""Request/response models shared by the HTTP service and the command line.

An :class:`ExperimentSpec` is what a user writes in a YAML file.  Every
operation takes a request wrapping a spec and returns a response that carries
its output files as in-memory :class:`Artifact` objects; the CLI writes them to
disk, the service ships them as JSON.
"""

from __future__ import annotations

import math
from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import channels as ch
from . import ckf, trainer


class _Model(BaseModel):
    # +inf SNR (noise disabled) must survive the JSON round trip
    model_config = ConfigDict(ser_json_inf_nan="constants")


class _Strict(_Model):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")


class AwgnChannel(_Strict):
    kind: Literal["awgn"] = "awgn"
    snr_db: float = 10.0

    def to_config(self) -> ch.AwgnConfig:
        return ch.AwgnConfig(self.snr_db)


class NlpnChannel(_Strict):
    kind: Literal["nlpn"] = "nlpn"
    launch_power_dbm: float = 0.0
    gamma: float = 1.27
    alpha_db_per_km: float = Field(0.2, ge=0)
    span_length_km: float = Field(100.0, gt=0)
    num_spans: int = Field(10, ge=1)
    noise_figure_db: float = 5.0
    carrier_freq_hz: float = Field(193.41e12, gt=0)
    symbol_rate_baud: float = Field(32e9, gt=0)
    ase_noise: bool = True

    def to_config(self) -> ch.NlpnConfig:
        return ch.NlpnConfig(**self.model_dump(exclude={"kind"}))


class BpsChannel(_Strict):
    kind: Literal["pn_bps"] = "pn_bps"
    snr_db: float = 15.0
    linewidth_hz: float = Field(100e3, ge=0)
    symbol_rate_baud: float = Field(32e9, gt=0)
    num_test_phases: int = Field(36, ge=2)
    window_size: int = Field(64, ge=1)

    def to_config(self) -> ch.PhaseNoiseBpsConfig:
        return ch.PhaseNoiseBpsConfig(**self.model_dump(exclude={"kind"}))


ChannelSpec = Annotated[Union[AwgnChannel, NlpnChannel, BpsChannel], Field(discriminator="kind")]

SWEEP_PARAMETER = {"awgn": "snr_db", "pn_bps": "snr_db", "nlpn": "launch_power_dbm"}


class TrainSpec(_Strict):
    M: int = 16
    optimizer: Literal["ckf", "backprop"] = "ckf"
    q: float = Field(1e-4, ge=0)
    r: float = Field(1e-2, gt=0)
    learning_rate: float = Field(1e-3, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)
    max_iterations: Optional[int] = Field(None, ge=0)
    window: int = Field(50, ge=1)
    rel_tol: float = Field(1e-4, gt=0)
    hits: int = Field(3, ge=1)

    @field_validator("M")
    @classmethod
    def _power_of_two(cls, v):
        if v < 2 or v & (v - 1):
            raise ValueError("M must be a power of two >= 2")
        return v

    @model_validator(mode="after")
    def _checks(self):
        if self.batch_size is not None and self.batch_size % self.M:
            raise ValueError(f"batch_size {self.batch_size} is not divisible by M={self.M}")
        return self


class SweepSpec(_Strict):
    """Operating points: SNR in dB for AWGN/BPS, launch power in dBm for NLPN."""

    parameter: Optional[Literal["snr_db", "launch_power_dbm"]] = None
    values: List[float] = Field(min_length=1)


class EvaluationSpec(_Strict):
    runs: int = Field(20, ge=1)
    symbols_per_run: int = Field(10_000, ge=1)
    receivers: List[Literal["gaussian", "decoder"]] = Field(default_factory=lambda: ["gaussian"], min_length=1)


class GridSpec(_Strict):
    q: List[float] = Field(default_factory=lambda: list(trainer.DEFAULT_GRID), min_length=1)
    r: List[float] = Field(default_factory=lambda: list(trainer.DEFAULT_GRID), min_length=1)
    test_runs: int = Field(1, ge=1)
    test_symbols: int = Field(100_000, ge=1)


class CompareSpec(_Strict):
    series: List[Literal["ae-ckf", "ae-bp", "qam"]] = Field(
        default_factory=lambda: ["ae-ckf", "ae-bp", "qam"], min_length=1
    )
    grid_search: bool = False


class ExperimentSpec(_Strict):
    name: str = "experiment"
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: Optional[str] = None
    workers: int = Field(1, ge=1)
    channel: ChannelSpec = Field(default_factory=AwgnChannel)
    train: TrainSpec = Field(default_factory=TrainSpec)
    sweep: Optional[SweepSpec] = None
    evaluation: EvaluationSpec = Field(default_factory=EvaluationSpec)
    grid: GridSpec = Field(default_factory=GridSpec)
    compare: CompareSpec = Field(default_factory=CompareSpec)

    @model_validator(mode="after")
    def _sweep_matches_channel(self):
        expected = SWEEP_PARAMETER[self.channel.kind]
        if self.sweep is not None and self.sweep.parameter not in (None, expected):
            raise ValueError(
                f"sweep parameter {self.sweep.parameter!r} does not match the "
                f"{self.channel.kind} channel (expected {expected!r})"
            )
        return self

    @property
    def sweep_parameter(self) -> str:
        return SWEEP_PARAMETER[self.channel.kind]

    @property
    def operating_points(self) -> list[float]:
        if self.sweep is None:
            return [float(getattr(self.channel, self.sweep_parameter))]
        return [float(v) for v in self.sweep.values]

    def channel_at(self, point: float) -> ch.ChannelConfig:
        return self.channel.model_copy(update={self.sweep_parameter: point}).to_config()

    def train_config(self, point: float, optimizer: Optional[str] = None, hp=None) -> trainer.TrainConfig:
        t = self.train
        return trainer.TrainConfig(
            M=t.M,
            channel=self.channel_at(point),
            optimizer=optimizer or t.optimizer,
            hp=hp or ckf.CkfHyperparams(t.q, t.r),
            learning_rate=t.learning_rate,
            batch_size=t.batch_size,
            max_iterations=t.max_iterations,
            convergence=trainer.Convergence(t.window, t.rel_tol, t.hits),
            master_seed=self.seed,
        )


def point_tag(parameter: str, value: float) -> str:
    """Filename-safe operating point label, e.g. ``snr_db_10`` or ``launch_power_dbm_m2p5``."""
    if math.isinf(value):
        text = "inf" if value > 0 else "minf"
    else:
        text = repr(float(value)).removesuffix(".0").replace("-", "m").replace(".", "p")
    return f"{parameter}_{text}"


class Artifact(_Model):
    filename: str
    content: str


class ErrorInfo(_Model):
    error_type: str
    message: str
    exit_code: int


class ConstellationInput(_Model):
    """A constellation file's text, or ``qam`` to use the built-in square QAM."""

    text: Optional[str] = None
    qam: Optional[int] = None
    source: str = "<request>"

    @model_validator(mode="after")
    def _one_of(self):
        if (self.text is None) == (self.qam is None):
            raise ValueError("give exactly one of 'text' or 'qam'")
        return self


class TrainRequest(_Model):
    spec: ExperimentSpec


class EvaluateRequest(_Model):
    spec: ExperimentSpec
    constellations: List[ConstellationInput] = Field(min_length=1)


class GridSearchRequest(_Model):
    spec: ExperimentSpec


class CompareRequest(_Model):
    spec: ExperimentSpec


class ExportQamRequest(_Model):
    M: int


class PointSummary(_Model):
    operating_point: float
    label: str
    iterations: int = 0
    final_loss_nats: Optional[float] = None
    mi_validation: Optional[float] = None
    converged: bool = False
    q: Optional[float] = None
    r: Optional[float] = None


class RunResponse(_Model):
    """Output of any operation: files to write, per-point summaries, and an
    error when the run stopped early (artifacts written so far are kept)."""

    artifacts: List[Artifact] = Field(default_factory=list)
    points: List[PointSummary] = Field(default_factory=list)
    error: Optional[ErrorInfo] = None
