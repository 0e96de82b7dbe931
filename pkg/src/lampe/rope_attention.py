"""Rotary attention reference: basis, rotations, and brute-force oracles.

Rotations act on interleaved pairs ``(x[2t], x[2t + 1])`` with angle
``p * theta_t`` where ``theta_t = base ** (-2 t / D)``. Relative positions in
a :class:`~lampe.pe_map.RelPositionMatrix` are non-negative distances
``i - j``; the logit for pair ``(i, j)`` therefore rotates the key by
``-pe[i][j]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import PreconditionError, ShapeError
from .pe_map import RelPositionMatrix


@dataclass(frozen=True, eq=False)
class RotaryBasis:
    head_dim: int
    base: float = 10000.0
    angles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ShapeError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"rotary base must exceed 1, got {self.base}")
        t = np.arange(self.head_dim // 2, dtype=np.float64)
        object.__setattr__(self, "angles", self.base ** (-2.0 * t / self.head_dim))


def apply_rotation(x, p, basis: RotaryBasis) -> np.ndarray:
    """Rotate the last axis of ``x`` by position(s) ``p``.

    ``p`` broadcasts against ``x.shape[:-1]``; negative positions rotate the
    other way.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.head_dim:
        raise ShapeError(f"vector dim {x.shape[-1]} != basis dim {basis.head_dim}")
    phi = np.asarray(p, dtype=np.float64)[..., None] * basis.angles
    c, s = np.cos(phi), np.sin(phi)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, phi.shape[:-1] + (basis.head_dim,)))
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def relative_logit(q, k, rel: int, basis: RotaryBasis, scale: float) -> float:
    """``scale * <q, R(rel) k>``, the logit between a query and a key ``rel`` steps ahead."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (basis.head_dim,):
        raise ShapeError(f"query shape {q.shape} != ({basis.head_dim},)")
    return float(scale * np.dot(q, apply_rotation(k, rel, basis)))


@dataclass(frozen=True, eq=False)
class AttentionBatch:
    """Post-projection queries, keys and values for ``H`` heads.

    ``q`` and ``k`` are ``(H, l, D)``; ``v`` is ``(H, l, Dv)`` where ``Dv``
    usually equals ``D`` but may differ (e.g. one-hot probes).
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 3:
                raise ShapeError(f"{name} must be 3-D (H, l, D), got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.q.shape != self.k.shape:
            raise ShapeError(f"q {self.q.shape} and k {self.k.shape} differ")
        if self.v.shape[:2] != self.q.shape[:2]:
            raise ShapeError(f"v {self.v.shape} does not match q {self.q.shape}")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / np.sqrt(self.head_dim))

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def seq_len(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]

    def with_values(self, v) -> AttentionBatch:
        return AttentionBatch(self.q, self.k, v, self.scale)


def random_batch(seed: int, heads: int, seq_len: int, head_dim: int, value_dim=None):
    """Standard-normal batch from a seeded PCG64 stream (seed is any u64)."""
    rng = np.random.default_rng(np.uint64(seed))
    value_dim = head_dim if value_dim is None else value_dim
    q = rng.standard_normal((heads, seq_len, head_dim))
    k = rng.standard_normal((heads, seq_len, head_dim))
    v = rng.standard_normal((heads, seq_len, value_dim))
    return AttentionBatch(q, k, v)


@dataclass(frozen=True, eq=False)
class PartialAttention:
    """Attention restricted to a key subset, with per-row log-sum-exp.

    ``rows`` are the global query indices covered and ``cols`` the global key
    indices considered; ``visited[r, c]`` says whether pair
    ``(rows[r], cols[c])`` entered the softmax. Rows that visited nothing
    carry zero output and ``lse = -inf``.
    """

    rows: np.ndarray
    output: np.ndarray
    lse: np.ndarray
    cols: np.ndarray | None = None
    visited: np.ndarray | None = None

    def take(self, rows) -> PartialAttention:
        """Restrict to the given global query rows (must be covered)."""
        rows = np.asarray(rows, dtype=np.int64)
        pos = np.searchsorted(self.rows, rows)
        if rows.size and (
            pos.max(initial=0) >= self.rows.size or not np.array_equal(self.rows[pos], rows)
        ):
            raise ShapeError("requested rows are not covered by this partial")
        visited = None if self.visited is None else self.visited[pos]
        return PartialAttention(rows, self.output[:, pos], self.lse[:, pos], self.cols, visited)

    def visited_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.visited is None:
            raise ValueError("this partial does not record visited pairs")
        r, c = np.nonzero(self.visited)
        return self.rows[r], self.cols[c]

    @classmethod
    def empty(cls, rows, heads: int, value_dim: int) -> PartialAttention:
        rows = np.asarray(rows, dtype=np.int64)
        return cls(
            rows,
            np.zeros((heads, rows.size, value_dim)),
            np.full((heads, rows.size), -np.inf),
            np.empty(0, dtype=np.int64),
            np.zeros((rows.size, 0), dtype=bool),
        )


def dense_oracle_attention(batch: AttentionBatch, pe: RelPositionMatrix, basis: RotaryBasis):
    """Brute-force causal attention with one rotation per (query, key) pair.

    Returns ``(output, lse)`` of shapes ``(H, l, Dv)`` and ``(H, l)``.
    """
    if pe.l != batch.seq_len:
        raise ShapeError(f"pe has l = {pe.l} but batch has seq_len = {batch.seq_len}")
    if basis.head_dim != batch.head_dim:
        raise ShapeError(f"basis dim {basis.head_dim} != batch head_dim {batch.head_dim}")
    pe_entries = np.ascontiguousarray(pe.entries, dtype=np.int64)
    return kernels.dense_relative_attention(
        batch.q, batch.k, batch.v, pe_entries, basis.angles, float(batch.scale)
    )


def causal_rope_attention(batch: AttentionBatch, basis: RotaryBasis):
    """Textbook causal RoPE attention: rotate by absolute position, mask, softmax."""
    l = batch.seq_len
    pos = np.arange(l)
    qr = apply_rotation(batch.q, pos[None, :], basis)
    kr = apply_rotation(batch.k, pos[None, :], basis)
    logits = np.einsum("hid,hjd->hij", qr, kr) * batch.scale
    logits = np.where(np.tri(l, dtype=bool), logits, -np.inf)
    lse = logsumexp(logits, axis=-1)
    weights = np.exp(logits - lse[..., None])
    return weights @ batch.v, lse


def _as_mask(pair_filter, rows, cols):
    if callable(pair_filter):
        mask = np.asarray(pair_filter(rows[:, None], cols[None, :]), dtype=bool)
        return np.broadcast_to(mask, (rows.size, cols.size))
    mask = np.asarray(pair_filter, dtype=bool)
    return mask[np.ix_(rows, cols)]


def windowed_partial_attention(
    batch: AttentionBatch,
    q_positions,
    k_positions,
    pair_filter,
    basis: RotaryBasis,
    rows=None,
    cols=None,
) -> PartialAttention:
    """Causal attention over the pairs selected by ``pair_filter``.

    ``pair_filter`` is either a callable ``(i, j) -> bool array`` evaluated
    on broadcast index grids or a boolean ``(l, l)`` mask. Queries are rotated
    by ``q_positions[i]`` and keys by ``k_positions[j]``. ``rows`` / ``cols``
    restrict which query and key indices are materialized at all.
    """
    l = batch.seq_len
    q_positions = np.asarray(q_positions, dtype=np.int64)
    k_positions = np.asarray(k_positions, dtype=np.int64)
    if q_positions.shape != (l,) or k_positions.shape != (l,):
        raise ShapeError(f"position vectors must have length {l}")
    rows = np.arange(l) if rows is None else np.asarray(rows, dtype=np.int64)
    cols = np.arange(l) if cols is None else np.asarray(cols, dtype=np.int64)
    mask = _as_mask(pair_filter, rows, cols) & (cols[None, :] <= rows[:, None])
    mask = np.ascontiguousarray(mask)

    qr = apply_rotation(batch.q[:, rows], q_positions[rows][None, :], basis)
    kr = apply_rotation(batch.k[:, cols], k_positions[cols][None, :], basis)
    v = np.ascontiguousarray(batch.v[:, cols])
    out, lse = kernels.masked_attention(
        np.ascontiguousarray(qr), np.ascontiguousarray(kr), v, mask, float(batch.scale)
    )
    return PartialAttention(rows, out, lse, cols, mask)


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def save_tensor(arr, path) -> None:
    """Write raw little-endian float64 plus a ``.json`` sidecar with the shape."""
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 3:
        raise ShapeError(f"expected an (H, l, D) tensor, got shape {arr.shape}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())
    H, l, D = arr.shape
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"H": H, "l": l, "D": D}, sort_keys=True) + "\n")


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    shape = json.loads(path.with_name(path.name + ".json").read_text())
    H, l, D = (int(shape[key]) for key in ("H", "l", "D"))
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    if data.size != H * l * D:
        raise PreconditionError(f"{path}: {data.size} values, sidecar says {H}x{l}x{D}")
    return data.reshape(H, l, D).astype(np.float64)
