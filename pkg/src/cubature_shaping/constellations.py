"""Reference constellations and the text file format used to exchange them."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConstellationFileError, InputError

FILE_FORMAT = "cubature-shaping/constellation"
FILE_VERSION = 1
POWER_TOL = 1e-9


def square_qam(M: int) -> np.ndarray:
    """Square QAM with unit average power, points ordered row by row."""
    side = math.isqrt(M)
    if M < 4 or side * side != M or side & (side - 1):
        raise InputError(f"square QAM needs M to be a power of 4, got {M}")
    levels = 2.0 * np.arange(side) - (side - 1)
    re, im = np.meshgrid(levels, levels[::-1])
    points = (re + 1j * im).reshape(-1)
    return points / math.sqrt(np.mean(np.abs(points) ** 2))


@dataclass
class ConstellationFile:
    points: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def label(self) -> str:
        return str(self.metadata.get("label", f"M{self.M}"))

    def to_text(self) -> str:
        doc = {
            "format": FILE_FORMAT,
            "version": FILE_VERSION,
            "M": self.M,
            "points": [[float(p.real), float(p.imag)] for p in np.asarray(self.points)],
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ConstellationFile":
        try:
            doc = json.loads(text)
            if not isinstance(doc, dict):
                raise ValueError("top level is not an object")
            if doc.get("format") != FILE_FORMAT:
                raise ValueError(f"unexpected format tag {doc.get('format')!r}")
            pts = np.array([complex(re, im) for re, im in doc["points"]])
            M = int(doc["M"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConstellationFileError(f"{source}: malformed constellation file ({exc})") from exc
        if M != len(pts):
            raise ConstellationFileError(f"{source}: M={M} but {len(pts)} points listed")
        power = float(np.mean(np.abs(pts) ** 2)) if len(pts) else 0.0
        if abs(power - 1.0) > POWER_TOL:
            raise ConstellationFileError(
                f"{source}: average power {power!r} is not 1 within {POWER_TOL}"
            )
        return cls(points=pts, metadata=doc.get("metadata", {}))


def write_constellation(path, cf: ConstellationFile) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cf.to_text())


def read_constellation(path) -> ConstellationFile:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConstellationFileError(f"{path}: {exc.strerror or exc}") from exc
    return ConstellationFile.from_text(text, source=os.fspath(path))
