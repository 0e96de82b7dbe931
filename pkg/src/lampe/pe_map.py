"""Relative-position remapping: the three-region LaMPE matrix and baselines.

A mapping is described by :class:`MappingConfig` ``(l, m, s1, s2)``. For a
causal pair ``(i, j)`` with offset ``d = i - j`` the pair falls in

* the head region when ``d <= s1`` (raw offsets kept),
* the middle region when ``s1 < d < l - s2`` (offsets squeezed linearly),
* the tail region when ``d >= l - s2`` (offsets shifted by ``m - l``).

Two matrix constructors are provided. :func:`build_pe_matrix` evaluates the
closed-form offset mapping directly; :func:`build_index_pe_matrix` takes the
difference of per-token query and key positions, which is what the rotary
attention actually sees. The two agree everywhere except in the middle region
where they may differ by one because ``floor(x) - floor(y)`` is not
``floor(x - y)``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    ConfigParseError,
    DomainError,
    MatrixFormatError,
    PreconditionError,
)

HEAD = "head"
MIDDLE = "middle"
TAIL = "tail"
REGIONS = (HEAD, MIDDLE, TAIL)

BINARY_MAGIC = b"LPE1"
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class MiddleTransform:
    """Affine map ``x -> slope * x + offset`` used by the middle region."""

    slope: Fraction
    offset: Fraction

    @classmethod
    def from_config(cls, cfg: MappingConfig) -> MiddleTransform:
        den = cfg.l - cfg.s1 - cfg.s2
        return cls(
            Fraction(cfg.m - cfg.s1 - cfg.s2, den),
            Fraction((cfg.l - cfg.m) * cfg.s1, den),
        )

    def query(self, i: int) -> int:
        return _floor(self.slope * i + self.offset)

    def key(self, j: int) -> int:
        return _floor(self.slope * j)


def _floor(x: Fraction) -> int:
    return x.numerator // x.denominator


@dataclass(frozen=True)
class MappingConfig:
    """Parameters of one remapping instance.

    ``n`` is the pretraining window; it is carried for bookkeeping only and
    plays no role in the mapping itself.

    Configs whose middle region would be empty (``l <= s1 + s2 + 1``) or whose
    middle slope would be non-positive (``m <= s1 + s2``) are rejected, except
    for the identity case ``m == l``.
    """

    l: int
    m: int
    s1: int
    s2: int
    n: int | None = None

    def __post_init__(self):
        for name in ("l", "m", "s1", "s2"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.n is not None:
            object.__setattr__(self, "n", int(self.n))
        l, m, s1, s2 = self.l, self.m, self.s1, self.s2
        if l < 1:
            raise ConfigError(f"l must be >= 1, got {l}")
        if not 1 <= m <= l:
            raise ConfigError(f"m must lie in [1, l={l}], got {m}")
        if s1 < 0 or s2 < 0:
            raise ConfigError(f"s1 and s2 must be non-negative, got {s1}, {s2}")
        if s1 + s2 >= l:
            raise ConfigError(f"s1 + s2 = {s1 + s2} must be < l = {l}")
        if m < l:
            if l <= s1 + s2 + 1:
                raise ConfigError(
                    f"middle region is empty: l = {l} <= s1 + s2 + 1 = {s1 + s2 + 1}"
                )
            if m <= s1 + s2:
                raise ConfigError(f"m = {m} must exceed s1 + s2 = {s1 + s2}")

    @property
    def is_identity(self) -> bool:
        return self.m == self.l

    @property
    def transform(self) -> MiddleTransform:
        return MiddleTransform.from_config(self)

    def region(self, i: int, j: int) -> str:
        return region_of(i - j, self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> MappingConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        missing = {"l", "m", "s1", "s2"} - data.keys()
        if missing:
            raise ConfigError(f"config is missing keys: {sorted(missing)}")
        return cls(data["l"], data["m"], data["s1"], data["s2"], data.get("n"))


@dataclass(frozen=True)
class SelfExtendConfig:
    """Fixed-group baseline: ``w`` exact neighbours, then groups of ``G``."""

    w: int
    G: int
    n: int

    def __post_init__(self):
        if self.G < 1:
            raise ConfigError(f"group size G must be >= 1, got {self.G}")
        if not 0 <= self.w < self.n:
            raise ConfigError(f"need 0 <= w < n, got w={self.w}, n={self.n}")

    @property
    def extended_window(self) -> int:
        return (self.n - self.w) * self.G + self.w


@dataclass(frozen=True, eq=False)
class RelPositionMatrix:
    """Lower-triangular integer matrix of remapped relative positions.

    ``entries`` is a dense ``(l, l)`` int64 array; only ``j <= i`` is
    meaningful and the strict upper triangle is kept at zero. ``m``, ``s1``
    and ``s2`` describe the mapping that produced it and are written into the
    binary header.
    """

    entries: np.ndarray
    m: int
    s1: int = 0
    s2: int = 0

    @property
    def l(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, ij):
        i, j = ij
        if not 0 <= j <= i < self.l:
            raise PreconditionError(f"({i}, {j}) is not a causal pair for l = {self.l}")
        return int(self.entries[i, j])

    def __eq__(self, other):
        if not isinstance(other, RelPositionMatrix):
            return NotImplemented
        return self.l == other.l and np.array_equal(
            self.lower_triangle(), other.lower_triangle()
        )

    def lower_triangle(self) -> np.ndarray:
        """Row-major packed causal entries, length ``l (l + 1) / 2``."""
        return self.entries[np.tril_indices(self.l)]

    @classmethod
    def from_lower_triangle(cls, l, values, m, s1=0, s2=0) -> RelPositionMatrix:
        values = np.asarray(values, dtype=np.int64)
        if values.shape != (l * (l + 1) // 2,):
            raise MatrixFormatError(
                f"expected {l * (l + 1) // 2} lower-triangular entries, got {values.size}"
            )
        entries = np.zeros((l, l), dtype=np.int64)
        entries[np.tril_indices(l)] = values
        return cls(entries, m, s1, s2)


def standard_causal_matrix(l: int) -> RelPositionMatrix:
    i, j = np.indices((l, l), dtype=np.int64)
    return RelPositionMatrix(np.where(j <= i, i - j, 0), m=l)


# ---------------------------------------------------------------------------
# scalar mappings
# ---------------------------------------------------------------------------


def _check_pair(i, j, l):
    if not 0 <= j <= i < l:
        raise PreconditionError(f"({i}, {j}) is not a causal pair for l = {l}")


def region_of(d: int, cfg: MappingConfig) -> str:
    if d <= cfg.s1:
        return HEAD
    if d < cfg.l - cfg.s2:
        return MIDDLE
    return TAIL


def lampe_pe(i: int, j: int, cfg: MappingConfig) -> int:
    """Remapped relative position of ``(i, j)`` from the closed-form rule."""
    _check_pair(i, j, cfg.l)
    d = i - j
    region = region_of(d, cfg)
    if region == HEAD:
        return d
    if region == MIDDLE:
        return _floor(cfg.transform.slope * (d - cfg.s1)) + cfg.s1
    return cfg.m - cfg.l + d


def offset_curve(cfg: MappingConfig) -> np.ndarray:
    """``lampe_pe`` as a function of the offset alone, for offsets ``0..l-1``."""
    d = np.arange(cfg.l, dtype=np.int64)
    num, den = cfg.m - cfg.s1 - cfg.s2, cfg.l - cfg.s1 - cfg.s2
    middle = (num * (d - cfg.s1)) // den + cfg.s1
    return np.where(d <= cfg.s1, d, np.where(d < cfg.l - cfg.s2, middle, cfg.m - cfg.l + d))


def adaptive_group_pe(i: int, j: int, l: int, m: int) -> int:
    """Uniform compression ``floor(m (i - j) / l)`` without head or tail."""
    if not 1 <= m <= l:
        raise PreconditionError(f"need 1 <= m <= l, got m={m}, l={l}")
    _check_pair(i, j, l)
    return (m * (i - j)) // l


def query_position(i: int, region: str, cfg: MappingConfig) -> int:
    if not 0 <= i < cfg.l:
        raise PreconditionError(f"query index {i} outside [0, {cfg.l})")
    if region == HEAD:
        return i
    if region == MIDDLE:
        return cfg.transform.query(i)
    if region == TAIL:
        if i < cfg.l - cfg.s2:
            raise DomainError(
                f"tail query position needs i >= l - s2 = {cfg.l - cfg.s2}, got {i}"
            )
        return cfg.m - cfg.l + i
    raise ValueError(f"unknown region {region!r}")


def key_position(j: int, region: str, cfg: MappingConfig) -> int:
    if not 0 <= j < cfg.l:
        raise PreconditionError(f"key index {j} outside [0, {cfg.l})")
    if region == MIDDLE:
        return cfg.transform.key(j)
    if region in (HEAD, TAIL):
        return j
    raise ValueError(f"unknown region {region!r}")


def self_extend_pe(i: int, j: int, cfg: SelfExtendConfig) -> int:
    """Grouped offset: exact up to ``w``, then one step per ``G`` tokens."""
    if not 0 <= j <= i:
        raise PreconditionError(f"({i}, {j}) is not a causal pair")
    d = i - j
    if d <= cfg.w:
        return d
    return cfg.w + (d - cfg.w) // cfg.G


# ---------------------------------------------------------------------------
# vectorised position vectors (used by the attention passes)
# ---------------------------------------------------------------------------


def query_positions(region: str, cfg: MappingConfig) -> np.ndarray:
    """Query positions for all ``i`` in ``[0, l)`` under ``region``'s rule.

    The tail rule is applied to every index here; values for ``i < l - s2``
    are negative and must never be paired with a key.
    """
    i = np.arange(cfg.l, dtype=np.int64)
    if region == HEAD:
        return i
    if region == MIDDLE:
        den = cfg.l - cfg.s1 - cfg.s2
        return ((cfg.m - cfg.s1 - cfg.s2) * i + (cfg.l - cfg.m) * cfg.s1) // den
    if region == TAIL:
        return cfg.m - cfg.l + i
    raise ValueError(f"unknown region {region!r}")


def key_positions(region: str, cfg: MappingConfig) -> np.ndarray:
    j = np.arange(cfg.l, dtype=np.int64)
    if region == MIDDLE:
        return ((cfg.m - cfg.s1 - cfg.s2) * j) // (cfg.l - cfg.s1 - cfg.s2)
    if region in (HEAD, TAIL):
        return j
    raise ValueError(f"unknown region {region!r}")


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------


def build_pe_matrix(cfg: MappingConfig) -> RelPositionMatrix:
    out = np.zeros((cfg.l, cfg.l), dtype=np.int64)
    kernels.fill_formula(cfg.l, cfg.m, cfg.s1, cfg.s2, out)
    return RelPositionMatrix(out, cfg.m, cfg.s1, cfg.s2)


def build_index_pe_matrix(cfg: MappingConfig) -> RelPositionMatrix:
    out = np.zeros((cfg.l, cfg.l), dtype=np.int64)
    kernels.fill_index(cfg.l, cfg.m, cfg.s1, cfg.s2, out)
    return RelPositionMatrix(out, cfg.m, cfg.s1, cfg.s2)


def build_self_extend_matrix(l: int, cfg: SelfExtendConfig) -> RelPositionMatrix:
    i, j = np.indices((l, l), dtype=np.int64)
    d = i - j
    grouped = np.where(d <= cfg.w, d, cfg.w + (d - cfg.w) // cfg.G)
    return RelPositionMatrix(np.where(d >= 0, grouped, 0), m=cfg.n)


class MonotonicityReport(NamedTuple):
    ok: bool
    violation: tuple[int, int, int] | None = None

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violation": list(self.violation) if self.violation else None}


def _report(hit) -> MonotonicityReport:
    i, j = int(hit[0]), int(hit[1])
    if i < 0:
        return MonotonicityReport(True)
    return MonotonicityReport(False, (i, j, j + 1))


def verify_monotonicity(pe: RelPositionMatrix) -> MonotonicityReport:
    """Check ``pe[i][j1] >= pe[i][j2]`` for every ``j1 < j2 <= i``.

    On failure the first offending row-major triple ``(i, j, j + 1)`` is
    reported; a violation anywhere implies one between neighbours.
    """
    entries = np.ascontiguousarray(pe.entries, dtype=np.int64)
    return _report(kernels.first_violation(entries))


def verify_config_monotonicity(cfg: MappingConfig) -> MonotonicityReport:
    """Same check as ``verify_monotonicity(build_index_pe_matrix(cfg))`` in O(l) memory."""
    return _report(kernels.stream_index_violation(cfg.l, cfg.m, cfg.s1, cfg.s2))


@dataclass(frozen=True)
class RegionPartition:
    """Causal pairs split into the three regions, as ``(rows, cols)`` arrays."""

    l: int
    head: tuple[np.ndarray, np.ndarray]
    middle: tuple[np.ndarray, np.ndarray]
    tail: tuple[np.ndarray, np.ndarray]

    def counts(self) -> dict[str, int]:
        return {name: int(getattr(self, name)[0].size) for name in REGIONS}

    def mask(self, region: str) -> np.ndarray:
        m = np.zeros((self.l, self.l), dtype=bool)
        m[getattr(self, region)] = True
        return m

    def offsets(self, region: str) -> list[int]:
        rows, cols = getattr(self, region)
        return sorted(set((rows - cols).tolist()))


def region_predicate(region: str, cfg: MappingConfig):
    """Vectorised ``(i, j) -> bool`` membership test for causal pairs of ``region``."""
    s1, tail_start = cfg.s1, cfg.l - cfg.s2
    if region == HEAD:
        return lambda i, j: (i - j >= 0) & (i - j <= s1)
    if region == MIDDLE:
        return lambda i, j: (i - j > s1) & (i - j < tail_start)
    if region == TAIL:
        return lambda i, j: (i - j >= tail_start) & (j <= i)
    raise ValueError(f"unknown region {region!r}")


def region_masks(cfg: MappingConfig) -> dict[str, np.ndarray]:
    i, j = np.indices((cfg.l, cfg.l))
    return {name: region_predicate(name, cfg)(i, j) for name in REGIONS}


def region_partition(cfg: MappingConfig) -> RegionPartition:
    masks = region_masks(cfg)
    parts = {name: np.nonzero(masks[name]) for name in REGIONS}
    overlap = (masks[HEAD].astype(int) + masks[MIDDLE] + masks[TAIL]) > 1
    if overlap.any():  # pragma: no cover - guaranteed by the case conditions
        raise AssertionError("region masks overlap")
    return RegionPartition(cfg.l, **parts)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_csv(pe: RelPositionMatrix, path) -> None:
    rows, cols = np.tril_indices(pe.l)
    vals = pe.entries[rows, cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        w.writerows(zip(rows.tolist(), cols.tolist(), vals.tolist()))


def read_csv(path, m: int | None = None) -> RelPositionMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "j", "value"]:
            raise MatrixFormatError(f"unexpected CSV header {header!r}")
        try:
            triples = [tuple(int(x) for x in row) for row in reader if row]
        except ValueError as exc:
            raise MatrixFormatError(f"non-integer CSV cell: {exc}") from None
    if not triples:
        raise MatrixFormatError("matrix CSV has no entries")
    l = max(t[0] for t in triples) + 1
    if len(triples) != l * (l + 1) // 2:
        raise MatrixFormatError(f"expected {l * (l + 1) // 2} entries for l = {l}")
    entries = np.zeros((l, l), dtype=np.int64)
    seen = np.zeros((l, l), dtype=bool)
    for i, j, v in triples:
        if not 0 <= j <= i < l:
            raise MatrixFormatError(f"({i}, {j}) is not a causal pair")
        entries[i, j] = v
        seen[i, j] = True
    if not seen[np.tril_indices(l)].all():
        raise MatrixFormatError("matrix CSV has duplicate or missing pairs")
    if m is None:
        m = int(entries.max()) + 1
    return RelPositionMatrix(entries, m)


def to_bytes(pe: RelPositionMatrix) -> bytes:
    header = _HEADER.pack(BINARY_MAGIC, pe.l, pe.m, pe.s1, pe.s2)
    return header + pe.lower_triangle().astype("<i8").tobytes()


def from_bytes(blob: bytes) -> RelPositionMatrix:
    if len(blob) < _HEADER.size:
        raise MatrixFormatError("binary matrix shorter than its header")
    magic, l, m, s1, s2 = _HEADER.unpack_from(blob)
    if magic != BINARY_MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}")
    values = np.frombuffer(blob, dtype="<i8", offset=_HEADER.size)
    return RelPositionMatrix.from_lower_triangle(l, values, m, s1, s2)


def write_binary(pe: RelPositionMatrix, path) -> None:
    Path(path).write_bytes(to_bytes(pe))


def read_binary(path) -> RelPositionMatrix:
    return from_bytes(Path(path).read_bytes())


def read_matrix(path) -> RelPositionMatrix:
    """Load either export format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_binary(path) if head == BINARY_MAGIC else read_csv(path)


def load_config(path) -> MappingConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: invalid JSON: {exc}") from exc
    return MappingConfig.from_dict(data)


def save_config(cfg: MappingConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# invariant audit
# ---------------------------------------------------------------------------


AUDIT_FAILURES = {1: "monotonicity", 2: "range", 3: "floor_discrepancy"}


def exhaustive_audit(l: int) -> dict:
    """Check monotonicity, range and floor discrepancy for every compressing config of length ``l``.

    Covers every ``(m, s1, s2)`` with ``s1 + s2 + 1 <= m <= l`` and
    ``s1 + s2 <= l - 2``.
    """
    count, m, s1, s2, code = (int(x) for x in kernels.exhaustive_audit(l))
    failure = None
    if code:
        failure = {"config": {"l": l, "m": m, "s1": s1, "s2": s2}, "check": AUDIT_FAILURES[code]}
    return {"l": l, "configs": count, "ok": code == 0, "failure": failure}


def self_extend_curve(length: int, cfg: SelfExtendConfig) -> np.ndarray:
    """``self_extend_pe`` for offsets ``0..length-1``."""
    d = np.arange(length, dtype=np.int64)
    return np.where(d <= cfg.w, d, cfg.w + (d - cfg.w) // cfg.G)


def check_transform_identities(cfg: MappingConfig) -> bool:
    """Exact ``slope*s1 + offset == s1`` and ``slope*(l-s2) + offset == m-s2``."""
    t = cfg.transform
    return (
        0 < t.slope <= 1
        and t.slope * cfg.s1 + t.offset == cfg.s1
        and t.slope * (cfg.l - cfg.s2) + t.offset == cfg.m - cfg.s2
    )


def _range_counterexample(pe: RelPositionMatrix, m: int):
    tri = np.tri(pe.l, dtype=bool)
    bad = tri & ((pe.entries < 0) | (pe.entries > m - 1))
    bad |= np.eye(pe.l, dtype=bool) & (pe.entries != 0)
    hits = np.argwhere(bad)
    return None if hits.size == 0 else [int(x) for x in hits[0]]


def _boundary_counterexample(pe: RelPositionMatrix, cfg: MappingConfig):
    e = pe.entries
    for i in range(cfg.s1 + 1, cfg.l):
        j = i - cfg.s1
        if e[i, j - 1] < e[i, j]:
            return [i, j - 1, j]
    tail_start = cfg.l - cfg.s2
    rows = range(max(tail_start, 1), cfg.l) if cfg.s2 else range(0)
    for i in rows:
        j = i - tail_start
        if e[i, j] < e[i, j + 1]:
            return [i, j, j + 1]
    return None


def audit_config(cfg: MappingConfig) -> dict:
    """Run every structural check on both matrix constructors for ``cfg``.

    Returns a JSON-ready dict with one boolean per check, an overall ``ok``
    and the first counterexample found (or ``None``).
    """
    formula = build_pe_matrix(cfg)
    index = build_index_pe_matrix(cfg)
    part = region_partition(cfg)
    tri = np.tri(cfg.l, dtype=bool)
    checks, first = {}, None

    def record(name, ok, example=None):
        nonlocal first
        checks[name] = bool(ok)
        if not ok and first is None:
            first = {"check": name, "at": example}

    mono = verify_monotonicity(index)
    record("monotonicity", mono.ok, list(mono.violation) if mono.violation else None)
    mono_f = verify_monotonicity(formula)
    record("monotonicity_formula", mono_f.ok, list(mono_f.violation) if mono_f.violation else None)

    bad = _range_counterexample(index, cfg.m) or _range_counterexample(formula, cfg.m)
    corner_ok = cfg.s2 == 0 or (index[cfg.l - 1, 0] == cfg.m - 1 == formula[cfg.l - 1, 0])
    record("range", bad is None and corner_ok, bad or [cfg.l - 1, 0])

    chain = _boundary_counterexample(index, cfg)
    record("boundary", chain is None, chain)

    counts = part.counts()
    cover = part.mask(HEAD).astype(int) + part.mask(MIDDLE) + part.mask(TAIL)
    record(
        "partition",
        sum(counts.values()) == cfg.l * (cfg.l + 1) // 2
        and np.all(cover[tri] == 1)
        and np.all(cover[~tri] == 0),
    )

    gap = np.abs(formula.entries - index.entries)
    outside = gap.astype(bool) & ~part.mask(MIDDLE)
    worst = np.argwhere((gap > 1) | outside)
    record("floor_discrepancy", worst.size == 0, worst[0].tolist() if worst.size else None)

    record("transform_identities", check_transform_identities(cfg))

    if cfg.is_identity:
        causal = standard_causal_matrix(cfg.l)
        record("identity", formula == causal and index == causal)

    return {
        "config": cfg.to_dict(),
        "region_pairs": counts,
        "checks": checks,
        "ok": all(checks.values()),
        "counterexample": first,
    }
