"""Length-aware mapping length: ``m(l) = L / (1 + exp(-(a l + b)))``.

``a`` and ``b`` are fitted from a handful of (input length, best mapping
length) observations by linearising with the logit transform,
``logit(m / L) = a l + b``, and solving ordinary least squares.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigParseError, DomainError, InsufficientDataError, RankError
from .pe_map import MappingConfig


@dataclass(frozen=True)
class SigmoidParams:
    L: float
    a: float
    b: float
    residual: float = 0.0
    points_used: int = 0

    def __post_init__(self):
        if not self.L > 0:
            raise DomainError(f"curve ceiling L must be positive, got {self.L}")

    def __call__(self, l):
        """Continuous curve value (no rounding, no clamping)."""
        return self.L * expit(self.a * np.asarray(l, dtype=np.float64) + self.b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SigmoidParams:
        return cls(
            float(data["L"]),
            float(data["a"]),
            float(data["b"]),
            float(data.get("residual", 0.0)),
            int(data.get("points_used", 0)),
        )


@dataclass(frozen=True)
class ObservationPoint:
    input_length: float
    optimal_mapping_length: float


def default_ceiling(n: int) -> int:
    """Cap mapping lengths at three quarters of the pretraining window."""
    if n < 4:
        raise DomainError(f"pretraining window must be >= 4, got {n}")
    return (3 * n) // 4


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def mapping_length(l: int, p: SigmoidParams) -> int:
    """Integer mapping length for input length ``l``, clamped to ``[1, l]``."""
    value = _round_half_away(float(p(l)))
    return max(1, min(value, l))


def fit_sigmoid(points, L: float) -> SigmoidParams:
    points = list(points)
    if len(points) < 2:
        raise InsufficientDataError(f"need at least 2 observation points, got {len(points)}")
    ls = np.array([p.input_length for p in points], dtype=np.float64)
    ms = np.array([p.optimal_mapping_length for p in points], dtype=np.float64)
    if np.any(ms <= 0) or np.any(ms >= L):
        raise DomainError(f"observed mapping lengths must lie strictly inside (0, L={L})")
    if np.ptp(ls) == 0:
        raise RankError("all observations share one input length; slope is unidentifiable")

    # Centre the lengths so the 2x2 normal equations stay well conditioned
    # for inputs in the tens of thousands.
    y = logit(ms / L)
    l_mean = ls.mean()
    dl = ls - l_mean
    a = float(np.dot(dl, y - y.mean()) / np.dot(dl, dl))
    b = float(y.mean() - a * l_mean)

    fitted = L * expit(a * ls + b)
    residual = float(np.sqrt(np.mean((fitted - ms) ** 2)))
    return SigmoidParams(float(L), a, b, residual, len(points))


def config_for_length(
    l: int, n: int, params: SigmoidParams, s1: int, s2: int
) -> MappingConfig:
    """Mapping config for an input of length ``l``.

    Inputs that fit in the pretraining window, or whose fitted mapping length
    reaches ``l``, get the identity mapping.
    """
    m = l if l <= n else mapping_length(l, params)
    return MappingConfig(l, m, s1, s2, n)


def read_points_csv(path) -> list[ObservationPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = {"input_length", "optimal_mapping_length"}
        if reader.fieldnames is None or not cols <= set(reader.fieldnames):
            raise ConfigParseError(f"{path}: CSV needs columns {sorted(cols)}")
        try:
            return [
                ObservationPoint(float(r["input_length"]), float(r["optimal_mapping_length"]))
                for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise ConfigParseError(f"{path}: bad numeric cell: {exc}") from None


def write_points_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input_length", "optimal_mapping_length"])
        for p in points:
            w.writerow([repr(p.input_length), repr(p.optimal_mapping_length)])


def save_params(p: SigmoidParams, path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), sort_keys=True, indent=2) + "\n")


def load_params(path) -> SigmoidParams:
    try:
        return SigmoidParams.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigParseError(f"{path}: cannot read sigmoid params: {exc}") from None
