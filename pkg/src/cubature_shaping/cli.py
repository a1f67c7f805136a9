"""Command-line entry point.

Every subcommand builds a request model from a YAML experiment file plus flag
overrides, runs it (in-process, or on a remote service with ``--server``) and
writes the returned artifacts into the output directory.

Exit codes: 0 success, 1 configuration error, 2 numerical breakdown,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import yaml
from pydantic import ValidationError

from . import __version__, runner
from .constellations import ConstellationFile
from .errors import ConfigError, ShapingError
from .schemas import (
    CompareRequest,
    ConstellationInput,
    ErrorInfo,
    EvaluateRequest,
    ExperimentSpec,
    ExportQamRequest,
    GridSearchRequest,
    RunResponse,
    TrainRequest,
)

OUTPUT_DIR_ENV = "CKF_SHAPING_OUTPUT_DIR"

log = logging.getLogger("cubature_shaping")


class CliError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


# --------------------------------------------------------------------------
# spec loading
# --------------------------------------------------------------------------


def _line_of(node, loc) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along ``loc``."""
    line = None
    for part in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            node = next((v for k, v in node.value if k.value == str(part)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            node = None
    if node is not None:
        line = node.start_mark.line + 1
    return line


def _describe(exc: ValidationError, source: str, root=None) -> str:
    lines = []
    for err in exc.errors():
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p in ("awgn", "nlpn", "pn_bps")))
        where = ".".join(str(p) for p in loc) or "<root>"
        line = _line_of(root, loc) if root is not None else None
        prefix = f"{source}:{line}" if line else source
        lines.append(f"{prefix}: {where}: {err['msg']}")
    return "\n".join(lines)


def load_spec_data(path: Optional[str]):
    if path is None:
        return {}, None
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror or exc}", 3) from None
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else path
        raise CliError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}", 1) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise CliError(f"{path}: top level must be a mapping", 1)
    return data, root


def apply_overrides(data: dict, args) -> dict:
    data = dict(data)
    channel = dict(data.get("channel") or {})
    kind = channel.get("kind", "awgn")

    def need(kinds, flag):
        if kind not in kinds:
            raise CliError(f"{flag} does not apply to the {kind} channel", 1)

    if getattr(args, "snr_db", None):
        need(("awgn", "pn_bps"), "--snr-db")
        channel["snr_db"] = args.snr_db[0]
        data["sweep"] = {"values": list(args.snr_db)}
    if getattr(args, "launch_dbm", None):
        need(("nlpn",), "--launch-dbm")
        channel["launch_power_dbm"] = args.launch_dbm[0]
        data["sweep"] = {"values": list(args.launch_dbm)}
    if getattr(args, "num_spans", None) is not None:
        need(("nlpn",), "--num-spans")
        channel["num_spans"] = args.num_spans
    if getattr(args, "window_size", None) is not None:
        need(("pn_bps",), "--window-size")
        channel["window_size"] = args.window_size
    if getattr(args, "test_phases", None) is not None:
        need(("pn_bps",), "--test-phases")
        channel["num_test_phases"] = args.test_phases
    if channel:
        channel.setdefault("kind", kind)
        data["channel"] = channel
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        data["workers"] = args.workers
    if getattr(args, "max_iterations", None) is not None:
        data["train"] = {**(data.get("train") or {}), "max_iterations": args.max_iterations}
    evaluation = dict(data.get("evaluation") or {})
    if getattr(args, "runs", None) is not None:
        evaluation["runs"] = args.runs
    if getattr(args, "symbols", None) is not None:
        evaluation["symbols_per_run"] = args.symbols
    if evaluation:
        data["evaluation"] = evaluation
    return data


def build_spec(args) -> ExperimentSpec:
    path = getattr(args, "spec", None)
    data, root = load_spec_data(path)
    data = apply_overrides(data, args)
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as exc:
        raise CliError(_describe(exc, path or "<flags>", root), 1) from None


def output_dir(args, spec: Optional[ExperimentSpec]) -> Path:
    if getattr(args, "output_dir", None):
        return Path(args.output_dir)
    if os.environ.get(OUTPUT_DIR_ENV):
        return Path(os.environ[OUTPUT_DIR_ENV])
    if spec is not None and spec.output_dir:
        return Path(spec.output_dir)
    return Path("runs") / (spec.name if spec is not None else "export")


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

LOCAL = {
    "train": runner.run_train,
    "evaluate": runner.run_evaluate,
    "grid-search": runner.run_grid_search,
    "compare": runner.run_compare,
    "export-qam": runner.run_export_qam,
}


def execute(endpoint: str, request, server: Optional[str]) -> RunResponse:
    if server is None:
        try:
            return LOCAL[endpoint](request)
        except ShapingError as exc:
            raise CliError(str(exc), exc.exit_code) from None
        except OSError as exc:
            raise CliError(str(exc), 3) from None
    import httpx

    url = server.rstrip("/") + "/" + endpoint
    try:
        r = httpx.post(
            url,
            content=request.model_dump_json(),
            headers={"content-type": "application/json"},
            timeout=None,
        )
    except httpx.HTTPError as exc:
        raise CliError(f"{url}: {exc}", 3) from None
    if r.status_code == 200:
        return RunResponse.model_validate_json(r.text)
    try:
        info = ErrorInfo.model_validate_json(r.text)
    except ValidationError:
        raise CliError(f"{url}: HTTP {r.status_code}: {r.text[:200]}", 3) from None
    raise CliError(info.message, info.exit_code)


def write_artifacts(resp: RunResponse, out: Path) -> list[Path]:
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for art in resp.artifacts:
            path = out / art.filename
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(art.content)
            written.append(path)
    except OSError as exc:
        raise CliError(f"{out}: {exc.strerror or exc}", 3) from None
    return written


def _finish(resp: RunResponse, out: Path) -> int:
    for path in write_artifacts(resp, out):
        print(path)
    if resp.error is not None:
        print(f"error: {resp.error.error_type}: {resp.error.message}", file=sys.stderr)
        return resp.error.exit_code
    return 0


def cmd_train(args) -> int:
    spec = build_spec(args)
    return _finish(execute("train", TrainRequest(spec=spec), args.server), output_dir(args, spec))


def cmd_grid_search(args) -> int:
    spec = build_spec(args)
    return _finish(execute("grid-search", GridSearchRequest(spec=spec), args.server), output_dir(args, spec))


def cmd_compare(args) -> int:
    spec = build_spec(args)
    return _finish(execute("compare", CompareRequest(spec=spec), args.server), output_dir(args, spec))


def cmd_evaluate(args) -> int:
    spec = build_spec(args)
    items = []
    for path in args.constellations:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(f"{path}: {exc.strerror or exc}", 3) from None
        try:
            ConstellationFile.from_text(text, source=path)
        except ShapingError as exc:
            raise CliError(str(exc), exc.exit_code) from None
        items.append(ConstellationInput(text=text, source=path))
    items += [ConstellationInput(qam=M) for M in args.qam or ()]
    if not items:
        raise CliError("nothing to evaluate: give constellation files or --qam M", 1)
    req = EvaluateRequest(spec=spec, constellations=items)
    return _finish(execute("evaluate", req, args.server), output_dir(args, spec))


def cmd_export_qam(args) -> int:
    resp = execute("export-qam", ExportQamRequest(M=args.M), args.server)
    return _finish(resp, output_dir(args, None))


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("cubature_shaping.service:app", host=args.host, port=args.port, log_level="info")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, spec_required: bool = True):
    if spec_required:
        p.add_argument("spec", help="experiment YAML file")
    else:
        p.add_argument("--spec", help="experiment YAML file (channel, sweep, protocol)")
    p.add_argument("--snr-db", type=float, nargs="+", metavar="DB", help="SNR operating point(s)")
    p.add_argument("--launch-dbm", type=float, nargs="+", metavar="DBM", help="launch power operating point(s)")
    p.add_argument("--num-spans", type=int)
    p.add_argument("--window-size", type=int, help="BPS window length")
    p.add_argument("--test-phases", type=int, help="number of BPS test phases")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--runs", type=int, help="test runs per operating point")
    p.add_argument("--symbols", type=int, help="symbols per test run")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--output-dir", help=f"output directory (env {OUTPUT_DIR_ENV})")
    p.add_argument("--server", help="forward the request to a running service at this URL")


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (argparse would exit with 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cubature-shaping", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one autoencoder per operating point")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Monte-Carlo MI of constellation files")
    p.add_argument("constellations", nargs="*", help="constellation files")
    p.add_argument("--qam", type=int, action="append", metavar="M", help="add built-in square QAM-M")
    _common(p, spec_required=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid-search", help="grid search of the CKF q and r")
    _common(p)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("compare", help="AE-CKF / AE-BP / QAM series as one CSV")
    _common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-qam", help="write a square QAM constellation file")
    p.add_argument("M", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--server")
    p.set_defaults(func=cmd_export_qam)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
