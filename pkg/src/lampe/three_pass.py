"""Three-pass LaMPE attention merged by log-sum-exp gating.

Each region of causal pairs (head, middle, tail) is attended separately with
its own query/key positions, producing an output and a per-row lse. Rows are
then recombined:

* rows ``[0, s1)`` only ever see head pairs,
* rows ``[s1, l - s2)`` combine head and middle,
* rows ``[l - s2, l)`` combine head, middle and tail.

The merge is exact: a softmax over a disjoint union of key sets equals the
lse-weighted average of the softmaxes over each part.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .pe_map import (
    HEAD,
    MIDDLE,
    REGIONS,
    TAIL,
    MappingConfig,
    build_index_pe_matrix,
    key_positions,
    query_positions,
    region_partition,
    region_predicate,
    verify_monotonicity,
)
from .rope_attention import (
    AttentionBatch,
    PartialAttention,
    RotaryBasis,
    dense_oracle_attention,
    windowed_partial_attention,
)


@dataclass(frozen=True, eq=False)
class PassSpec:
    rows: np.ndarray
    cols: np.ndarray
    q_positions: np.ndarray
    k_positions: np.ndarray
    predicate: object


@dataclass(frozen=True, eq=False)
class PassPlan:
    """Row/key extents, positions and pair predicates for the three passes."""

    cfg: MappingConfig
    basis: RotaryBasis
    passes: dict

    @classmethod
    def from_config(cls, cfg: MappingConfig, basis: RotaryBasis) -> PassPlan:
        l, s1, s2 = cfg.l, cfg.s1, cfg.s2
        idx = np.arange(l, dtype=np.int64)
        passes = {
            HEAD: PassSpec(idx, idx, idx, idx, region_predicate(HEAD, cfg)),
            MIDDLE: PassSpec(
                idx[s1:],
                idx[: l - s1],
                query_positions(MIDDLE, cfg),
                key_positions(MIDDLE, cfg),
                region_predicate(MIDDLE, cfg),
            ),
            TAIL: PassSpec(
                idx[l - s2 :],
                idx[:s2],
                query_positions(TAIL, cfg),
                key_positions(TAIL, cfg),
                region_predicate(TAIL, cfg),
            ),
        }
        return cls(cfg, basis, passes)

    @property
    def head_rows(self):
        return self.passes[HEAD].rows

    @property
    def mid_rows(self):
        return self.passes[MIDDLE].rows

    @property
    def tail_rows(self):
        return self.passes[TAIL].rows

    def pair_mask(self, region: str) -> np.ndarray:
        """Global ``(l, l)`` mask of pairs this plan sends to ``region``'s pass."""
        spec = self.passes[region]
        mask = np.zeros((self.cfg.l, self.cfg.l), dtype=bool)
        rows, cols = spec.rows[:, None], spec.cols[None, :]
        mask[np.ix_(spec.rows, spec.cols)] = spec.predicate(rows, cols) & (cols <= rows)
        return mask

    def check_against_partition(self) -> bool:
        part = region_partition(self.cfg)
        return all(np.array_equal(self.pair_mask(r), part.mask(r)) for r in REGIONS)


def _run(batch: AttentionBatch, plan: PassPlan, region: str) -> PartialAttention:
    if batch.seq_len != plan.cfg.l:
        raise ShapeError(f"batch seq_len {batch.seq_len} != config l {plan.cfg.l}")
    spec = plan.passes[region]
    if spec.rows.size == 0:
        return PartialAttention.empty(spec.rows, batch.heads, batch.v.shape[2])
    return windowed_partial_attention(
        batch,
        spec.q_positions,
        spec.k_positions,
        spec.predicate,
        plan.basis,
        rows=spec.rows,
        cols=spec.cols,
    )


def run_head_pass(batch: AttentionBatch, plan: PassPlan) -> PartialAttention:
    """Sliding-window attention over offsets ``0..s1`` with raw positions."""
    return _run(batch, plan, HEAD)


def run_middle_pass(batch: AttentionBatch, plan: PassPlan) -> PartialAttention:
    """Compressed-position attention over offsets strictly between ``s1`` and ``l - s2``."""
    return _run(batch, plan, MIDDLE)


def run_tail_pass(batch: AttentionBatch, plan: PassPlan) -> PartialAttention:
    """Last ``s2`` queries against the first ``s2`` keys, query shifted by ``m - l``."""
    return _run(batch, plan, TAIL)


def _check_rows(*parts):
    first = parts[0].rows
    for p in parts[1:]:
        if not np.array_equal(first, p.rows):
            raise ShapeError("partials cover different query rows")


def merge_two(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    """Combine two partials over disjoint key sets for the same rows."""
    _check_rows(a, b)
    both_empty = np.isneginf(a.lse) & np.isneginf(b.lse)
    with np.errstate(invalid="ignore"):
        gate_a = np.where(both_empty, 0.0, expit(a.lse - b.lse))
        gate_b = np.where(both_empty, 0.0, expit(b.lse - a.lse))
    output = a.output * gate_a[..., None] + b.output * gate_b[..., None]
    lse = np.logaddexp(a.lse, b.lse)
    return PartialAttention(a.rows, output, lse)


def _gate(own, others):
    # 1 / (1 + sum_s exp(lse_s - lse_own)); an empty limb gets weight 0
    with np.errstate(over="ignore", invalid="ignore"):
        denom = 1.0
        for other in others:
            denom = denom + np.where(np.isneginf(other), 0.0, np.exp(other - own))
        return np.where(np.isneginf(own), 0.0, 1.0 / denom)


def three_way_gates(lse_a, lse_b, lse_c):
    """Per-row merge weights of three partials, in reciprocal-sum form."""
    return (
        _gate(lse_a, (lse_b, lse_c)),
        _gate(lse_b, (lse_a, lse_c)),
        _gate(lse_c, (lse_a, lse_b)),
    )


def normalized_weights(lse_a, lse_b, lse_c):
    """The same weights as ``exp(lse_r) / sum_s exp(lse_s)`` via a shifted softmax."""
    stacked = np.stack([lse_a, lse_b, lse_c])
    top = stacked.max(axis=0)
    top = np.where(np.isneginf(top), 0.0, top)
    w = np.exp(stacked - top)
    total = w.sum(axis=0)
    return tuple(np.where(total > 0, w / np.where(total > 0, total, 1.0), 0.0))


def merge_three(a: PartialAttention, b: PartialAttention, c: PartialAttention) -> PartialAttention:
    _check_rows(a, b, c)
    ga, gb, gc = three_way_gates(a.lse, b.lse, c.lse)
    output = a.output * ga[..., None] + b.output * gb[..., None] + c.output * gc[..., None]
    lse = np.logaddexp(np.logaddexp(a.lse, b.lse), c.lse)
    return PartialAttention(a.rows, output, lse)


@dataclass(frozen=True, eq=False)
class MergedAttention:
    output: np.ndarray
    lse: np.ndarray
    provenance: tuple
    partials: dict

    def rows_fed_by(self, region: str) -> np.ndarray:
        return np.array([i for i, src in enumerate(self.provenance) if region in src])


def lampe_attention(
    batch: AttentionBatch, cfg: MappingConfig, basis: RotaryBasis, timings=None
) -> MergedAttention:
    """Full LaMPE attention via three passes and lse merging.

    If ``timings`` is a dict it receives wall-clock milliseconds per pass.
    """
    plan = PassPlan.from_config(cfg, basis)
    parts = {}
    for region, run in ((HEAD, run_head_pass), (MIDDLE, run_middle_pass), (TAIL, run_tail_pass)):
        t0 = time.perf_counter()
        parts[region] = run(batch, plan)
        if timings is not None:
            timings[region] = (time.perf_counter() - t0) * 1e3

    l, s1, s2 = cfg.l, cfg.s1, cfg.s2
    head, mid, tail = parts[HEAD], parts[MIDDLE], parts[TAIL]
    output = np.empty((batch.heads, l, batch.v.shape[2]))
    lse = np.empty((batch.heads, l))

    head_only = np.arange(0, s1)
    output[:, head_only] = head.output[:, head_only]
    lse[:, head_only] = head.lse[:, head_only]

    two = np.arange(s1, l - s2)
    merged = merge_two(head.take(two), mid.take(two))
    output[:, two], lse[:, two] = merged.output, merged.lse

    three = np.arange(l - s2, l)
    if three.size:
        merged = merge_three(mid.take(three), tail, head.take(three))
        output[:, three], lse[:, three] = merged.output, merged.lse

    provenance = tuple(
        (HEAD,) if i < s1 else (HEAD, MIDDLE) if i < l - s2 else (HEAD, MIDDLE, TAIL)
        for i in range(l)
    )
    return MergedAttention(output, lse, provenance, parts)


def pass_coverage(merged: MergedAttention, l: int) -> np.ndarray:
    """How many passes visited each ``(i, j)``; 1 on the causal triangle means a clean split."""
    counts = np.zeros((l, l), dtype=np.int64)
    for part in merged.partials.values():
        if part.visited is not None and part.visited.size:
            rows, cols = part.visited_pairs()
            np.add.at(counts, (rows, cols), 1)
    return counts


def verification_report(
    batch: AttentionBatch, cfg: MappingConfig, basis: RotaryBasis, timings: bool = False
) -> dict:
    """Compare three-pass attention with the dense oracle and audit the split."""
    per_pass = {} if timings else None
    merged = lampe_attention(batch, cfg, basis, timings=per_pass)
    pe = build_index_pe_matrix(cfg)
    ref, _ = dense_oracle_attention(batch, pe, basis)
    coverage = pass_coverage(merged, cfg.l)
    causal = np.tri(cfg.l, dtype=bool)
    counts = {
        region: int(part.visited.sum()) if part.visited is not None else 0
        for region, part in merged.partials.items()
    }
    return {
        "config": cfg.to_dict(),
        "max_abs_error_vs_oracle": float(np.max(np.abs(merged.output - ref))),
        "pass_pair_counts": counts,
        "disjointness_ok": bool(np.all(coverage[causal] == 1) and np.all(coverage[~causal] == 0)),
        "monotonicity_ok": verify_monotonicity(pe).ok,
        "runtime_ms_per_pass": per_pass,
    }
