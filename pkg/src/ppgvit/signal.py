"""PPG windows and the 1D primitives the image transforms are built from."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError, InvalidInputError

TARGET_NAMES = ("sbp", "dbp", "hr", "rr", "spo2", "sodium", "potassium", "lactate")


@dataclass
class PpgRecord:
    """One labeled PPG window.

    The canonical experimental framing is 1200 samples at 40 Hz (30 s), but
    any positive rate and non-empty length are accepted. Label names are an
    open vocabulary; :data:`TARGET_NAMES` lists the ones with known units.
    """

    id: str
    fs: float
    samples: np.ndarray
    labels: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not (self.fs > 0 and math.isfinite(self.fs)):
            raise InvalidInputError(f"record {self.id!r}: fs must be positive, got {self.fs}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInputError(f"record {self.id!r}: samples must be a non-empty 1D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError(f"record {self.id!r}: samples contain non-finite values")
        self.labels = {str(k): float(v) for k, v in self.labels.items()}

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs

    def to_json(self) -> str:
        # repr-based float formatting in json round-trips finite doubles exactly
        return json.dumps(
            {"id": self.id, "fs": self.fs, "samples": self.samples.tolist(), "labels": self.labels}
        )

    @classmethod
    def from_json(cls, line: str) -> "PpgRecord":
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("record line is not an object")
        missing = {"id", "fs", "samples"} - obj.keys()
        if missing:
            raise ValueError(f"missing field(s) {sorted(missing)}")
        return cls(
            id=str(obj["id"]),
            fs=float(obj["fs"]),
            samples=np.asarray(obj["samples"], dtype=np.float64),
            labels=dict(obj.get("labels", {})),
        )


def _check_sequence(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("expected a non-empty 1D sequence")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("sequence contains non-finite values")
    return v


def zscore(v, eps_std: float = 1e-8) -> np.ndarray:
    """Standardize with the population (1/N) standard deviation.

    Inputs whose std is below ``eps_std`` map to all zeros instead of raising,
    so a flat window turns into a blank image rather than a crash.
    Works on arrays of any shape (statistics over all elements).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("cannot z-score an empty sequence")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("cannot z-score non-finite values")
    mu = v.mean()
    centered = v - mu
    sd = math.sqrt(np.mean(centered * centered))
    if sd < eps_std:
        return np.zeros_like(v)
    return centered / sd


def discrete_diff(v, order: int = 1) -> np.ndarray:
    """First (slope) or second (curvature) backward difference."""
    if order not in (1, 2):
        raise InvalidInputError(f"order must be 1 or 2, got {order}")
    v = _check_sequence(v)
    if v.size <= order:
        raise InvalidInputError(f"need more than {order} samples for an order-{order} difference")
    d = v[1:] - v[:-1]
    if order == 2:
        d = d[1:] - d[:-1]
    return d


def downsample(v, target_len: int) -> np.ndarray:
    """Linear-interpolation resampling onto ``target_len`` evenly spaced points.

    The new grid spans ``[0, len(v) - 1]`` so both endpoints are kept exactly.
    Upsampling is refused.
    """
    v = _check_sequence(v)
    if target_len < 2:
        raise InvalidInputError("target_len must be at least 2")
    if target_len > v.size:
        raise InvalidInputError(f"target_len {target_len} exceeds sequence length {v.size}")
    if target_len == v.size:
        return v.copy()
    pos = np.linspace(0.0, v.size - 1, target_len)
    return np.interp(pos, np.arange(v.size, dtype=np.float64), v)


def iter_jsonl(path) -> Iterator[PpgRecord]:
    """Yield records from a newline-delimited JSON file, blank lines skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield PpgRecord.from_json(line)
            except (ValueError, TypeError, InvalidInputError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc


def read_jsonl(path) -> list[PpgRecord]:
    return list(iter_jsonl(path))


def write_jsonl(records: Iterable[PpgRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
    return path
