"""Experiment operations behind both the CLI and the HTTP service.

Each ``run_*`` function takes a request model and returns a
:class:`~cubature_shaping.schemas.RunResponse` whose artifacts hold the full
text of every output file.  Nothing here touches the filesystem.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from typing import Callable, Iterable, Optional

import numpy as np

from . import trainer
from .constellations import ConstellationFile, square_qam
from .errors import ConfigError, InputError, ShapingError, UnsupportedChannelError
from .schemas import (
    Artifact,
    CompareRequest,
    ErrorInfo,
    EvaluateRequest,
    ExperimentSpec,
    ExportQamRequest,
    GridSearchRequest,
    PointSummary,
    RunResponse,
    TrainRequest,
    point_tag,
)

CSV_SCHEMA_VERSION = 1
LOSS_COLUMNS = ("iteration", "loss_nats")
EVALUATE_COLUMNS = (
    "label",
    "operating_point",
    "receiver",
    "mi_mean",
    "mi_max",
    "mi_p25",
    "runs",
    "symbols_per_run",
    "seed",
)
COMPARE_COLUMNS = ("series", "operating_point", "receiver", "mi_mean", "mi_max", "mi_p25")
GRID_COLUMNS = ("q", "r", "status", "final_loss_nats", "validation_mi", "test_mi", "iterations", "selected")
# final test runs use their own stream so they never reuse the grid-search selection draws
TEST_STREAM = "test"


def fmt(value) -> str:
    """Full-precision text for CSV cells."""
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def to_csv(columns: Iterable[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def to_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("cubature-shaping", "numpy", "scipy", "numba", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def error_info(exc: BaseException) -> ErrorInfo:
    code = getattr(exc, "exit_code", 1)
    if isinstance(exc, OSError) and not isinstance(exc, ShapingError):
        code = 3
    return ErrorInfo(error_type=type(exc).__name__, message=str(exc), exit_code=code)


def _fan_out(fn: Callable, jobs: list, workers: int) -> list:
    """Run ``fn`` over ``jobs`` and return results in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _channel_doc(spec: ExperimentSpec, point: float) -> dict:
    return spec.channel.model_copy(update={spec.sweep_parameter: point}).model_dump()


def _hp_doc(report: trainer.TrainReport, spec: ExperimentSpec) -> dict:
    if report.optimizer == "ckf":
        return {"q": report.hyperparams_used.q, "r": report.hyperparams_used.r}
    return {"learning_rate": spec.train.learning_rate, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


def training_artifacts(
    spec: ExperimentSpec, point: float, report: trainer.TrainReport, stem: str, extra: Optional[dict] = None
) -> list[Artifact]:
    """Constellation file, loss trace and manifest for one trained model."""
    hp = _hp_doc(report, spec)
    meta = {
        "label": stem,
        "channel": _channel_doc(spec, point),
        "operating_point": point,
        "sweep_parameter": spec.sweep_parameter,
        "seed": spec.seed,
        "optimizer": report.optimizer,
        **hp,
    }
    cf = ConstellationFile(report.constellation, meta)
    loss = to_csv(LOSS_COLUMNS, ((i + 1, float(v)) for i, v in enumerate(report.loss_trace)))
    manifest = {
        "name": spec.name,
        "seed": spec.seed,
        "operating_point": point,
        "sweep_parameter": spec.sweep_parameter,
        "spec": spec.model_dump(),
        "optimizer": report.optimizer,
        "hyperparams": hp,
        "iterations_run": report.iterations_run,
        "converged": report.converged,
        "final_loss_nats": report.final_loss,
        "mi_validation_bits": report.mi_validation,
        "M": report.M,
        "weights": [float(v) for v in report.final_weights],
        "versions": versions(),
        "csv_schema_version": CSV_SCHEMA_VERSION,
        **(extra or {}),
    }
    return [
        Artifact(filename=f"{stem}_constellation.json", content=cf.to_text()),
        Artifact(filename=f"{stem}_loss.csv", content=loss),
        Artifact(filename=f"{stem}_manifest.json", content=to_json(manifest)),
    ]


def _summary(point: float, label: str, report: trainer.TrainReport) -> PointSummary:
    hp = report.hyperparams_used
    return PointSummary(
        operating_point=point,
        label=label,
        iterations=report.iterations_run,
        final_loss_nats=None if math.isnan(report.final_loss) else report.final_loss,
        mi_validation=report.mi_validation,
        converged=report.converged,
        q=hp.q if hp else None,
        r=hp.r if hp else None,
    )


def _collect(resp: RunResponse, outcomes: list) -> RunResponse:
    """Merge per-point outcomes in order; the first failure stops the merge
    but everything produced before it is kept."""
    for artifacts, points, err in outcomes:
        resp.artifacts.extend(artifacts)
        resp.points.extend(points)
        if err is not None:
            resp.error = err
            break
    return resp


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _train_job(job):
    spec, point = job
    stem = f"{spec.name}_{point_tag(spec.sweep_parameter, point)}"
    try:
        report = trainer.train(spec.train_config(point))
    except ShapingError as exc:
        return [], [], error_info(exc)
    return training_artifacts(spec, point, report, stem), [_summary(point, stem, report)], None


def run_train(req: TrainRequest) -> RunResponse:
    spec = req.spec
    points = spec.operating_points
    for p in points:
        spec.train_config(p)  # surface config errors before any work
    outcomes = _fan_out(_train_job, [(spec, p) for p in points], spec.workers)
    return _collect(RunResponse(), outcomes)


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def _load_constellation(item) -> tuple[str, np.ndarray]:
    if item.qam is not None:
        return f"QAM-{item.qam}", square_qam(item.qam)
    cf = ConstellationFile.from_text(item.text, source=item.source)
    return cf.label, cf.points


def _evaluate_job(job):
    spec, label, points, point = job
    rows = []
    for receiver in spec.evaluation.receivers:
        stats = trainer.evaluate(
            spec.channel_at(point),
            spec.evaluation.runs,
            spec.evaluation.symbols_per_run,
            trainer.stream(spec.seed, TEST_STREAM),
            receiver,
            constellation=points,
        )
        rows.append(
            (label, point, receiver, stats.mean, stats.max, stats.p25, spec.evaluation.runs,
             spec.evaluation.symbols_per_run, spec.seed)
        )
    return rows


def run_evaluate(req: EvaluateRequest) -> RunResponse:
    spec = req.spec
    if "decoder" in spec.evaluation.receivers:
        raise ConfigError("constellation files carry no decoder; evaluate them with the gaussian receiver")
    loaded = [_load_constellation(item) for item in req.constellations]
    jobs = [(spec, label, pts, p) for label, pts in loaded for p in spec.operating_points]
    rows = [row for chunk in _fan_out(_evaluate_job, jobs, spec.workers) for row in chunk]
    manifest = {
        "name": spec.name,
        "seed": spec.seed,
        "spec": spec.model_dump(),
        "constellations": [
            {"label": label, "points": [[float(z.real), float(z.imag)] for z in pts]} for label, pts in loaded
        ],
        "versions": versions(),
        "csv_schema_version": CSV_SCHEMA_VERSION,
    }
    return RunResponse(
        artifacts=[
            Artifact(filename=f"{spec.name}_evaluate.csv", content=to_csv(EVALUATE_COLUMNS, rows)),
            Artifact(filename=f"{spec.name}_evaluate_manifest.json", content=to_json(manifest)),
        ]
    )


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------


def _grid_job(job):
    spec, point = job
    tag = point_tag(spec.sweep_parameter, point)
    stem = f"{spec.name}_{tag}"
    g = spec.grid
    try:
        res = trainer.grid_search(spec.train_config(point, "ckf"), g.q, g.r, g.test_runs, g.test_symbols)
    except ShapingError as exc:
        return [], [], error_info(exc)
    rows = [
        (c.q, c.r, c.status, c.final_loss, c.validation_mi, c.test_mi, c.iterations,
         int(c.q == res.best.q and c.r == res.best.r))
        for c in res.cells
    ]
    table = Artifact(filename=f"{stem}_grid.csv", content=to_csv(GRID_COLUMNS, rows))
    extra = {"grid": {"q": list(g.q), "r": list(g.r), "selected": {"q": res.best.q, "r": res.best.r}}}
    arts = [table] + training_artifacts(spec, point, res.report, stem, extra)
    return arts, [_summary(point, stem, res.report)], None


def run_grid_search(req: GridSearchRequest) -> RunResponse:
    spec = req.spec
    points = spec.operating_points
    for p in points:
        spec.train_config(p, "ckf")
    return _collect(RunResponse(), _fan_out(_grid_job, [(spec, p) for p in points], spec.workers))


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------


def _compare_job(job):
    spec, point = job
    tag = point_tag(spec.sweep_parameter, point)
    channel = spec.channel_at(point)
    ev = spec.evaluation
    rows, arts, summaries = [], [], []
    try:
        for series in spec.compare.series:
            stem = f"{spec.name}_{tag}_{series}"
            weights = const = None
            if series == "qam":
                const = square_qam(spec.train.M)
            else:
                if series == "ae-ckf" and spec.compare.grid_search:
                    g = spec.grid
                    res = trainer.grid_search(spec.train_config(point, "ckf"), g.q, g.r, g.test_runs, g.test_symbols)
                    report = res.report
                else:
                    opt = "ckf" if series == "ae-ckf" else "backprop"
                    report = trainer.train(spec.train_config(point, opt))
                weights = report.final_weights
                arts += training_artifacts(spec, point, report, stem)
                summaries.append(_summary(point, stem, report))
            for receiver in ev.receivers:
                if receiver == "decoder" and weights is None:
                    continue
                stats = trainer.evaluate(
                    channel,
                    ev.runs,
                    ev.symbols_per_run,
                    trainer.stream(spec.seed, TEST_STREAM),
                    receiver,
                    weights=weights,
                    constellation=const,
                    M=spec.train.M,
                )
                rows.append((series, point, receiver, stats.mean, stats.max, stats.p25))
    except ShapingError as exc:
        return rows, arts, summaries, error_info(exc)
    return rows, arts, summaries, None


def run_compare(req: CompareRequest) -> RunResponse:
    spec = req.spec
    series = spec.compare.series
    if "ae-bp" in series and not spec.channel_at(spec.operating_points[0]).differentiable:
        raise UnsupportedChannelError(
            f"the AE-BP series needs a differentiable channel; {spec.channel.kind} is not"
        )
    if "qam" in series:
        square_qam(spec.train.M)
    for p in spec.operating_points:
        spec.train_config(p, "ckf")
    outcomes = _fan_out(_compare_job, [(spec, p) for p in spec.operating_points], spec.workers)
    resp = RunResponse()
    rows = []
    for r, arts, summaries, err in outcomes:
        rows += r
        resp.artifacts += arts
        resp.points += summaries
        if err is not None:
            resp.error = err
            break
    manifest = {
        "name": spec.name,
        "seed": spec.seed,
        "spec": spec.model_dump(),
        "versions": versions(),
        "csv_schema_version": CSV_SCHEMA_VERSION,
    }
    resp.artifacts += [
        Artifact(filename=f"{spec.name}_compare.csv", content=to_csv(COMPARE_COLUMNS, rows)),
        Artifact(filename=f"{spec.name}_compare_manifest.json", content=to_json(manifest)),
    ]
    return resp


# --------------------------------------------------------------------------
# export-qam
# --------------------------------------------------------------------------


def run_export_qam(req: ExportQamRequest) -> RunResponse:
    try:
        points = square_qam(req.M)
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    cf = ConstellationFile(points, {"label": f"QAM-{req.M}", "generator": "square-qam"})
    return RunResponse(artifacts=[Artifact(filename=f"qam{req.M}.json", content=cf.to_text())])
