"""Hot inner loops, each in a numba flavour and a pure-numpy flavour.

The public wrappers at the bottom dispatch on :data:`lampe._backend.BACKEND`.
Both flavours are importable directly (``*_loop`` / ``*_numpy``) so tests can
check them against each other and the benchmark can time them side by side.

Position kernels work on plain integers: the middle-region slope is carried
as ``num / den`` with ``num = m - s1 - s2`` and ``den = l - s1 - s2`` and the
query offset as ``off / den`` with ``off = (l - m) * s1``. Every floor is an
integer ``//`` so no float rounding can flip an entry.
"""

import numpy as np

from ._backend import USE_NUMBA, njit

NO_VIOLATION = (-1, -1)


# ---------------------------------------------------------------------------
# relative-position matrices
# ---------------------------------------------------------------------------


@njit
def _formula_value(d, l, m, s1, s2, num, den):
    if d <= s1:
        return d
    if d < l - s2:
        return (num * (d - s1)) // den + s1
    return m - l + d


@njit
def fill_formula_loop(l, m, s1, s2, out):
    num = m - s1 - s2
    den = l - s1 - s2
    for i in range(l):
        for j in range(i + 1):
            out[i, j] = _formula_value(i - j, l, m, s1, s2, num, den)
    return out


@njit
def _middle_positions(l, m, s1, s2, qmid, kmid):
    num = m - s1 - s2
    den = l - s1 - s2
    off = (l - m) * s1
    for t in range(l):
        qmid[t] = (num * t + off) // den
        kmid[t] = (num * t) // den


@njit
def _index_row(i, l, m, s1, s2, qmid, kmid, row):
    # j ascending crosses tail, then middle, then head
    tail_end = min(i - (l - s2), i)  # last tail column, may be negative
    head_start = max(i - s1, 0)
    shift = m - l + i
    for j in range(0, tail_end + 1):
        row[j] = shift - j
    q = qmid[i]
    for j in range(max(tail_end + 1, 0), head_start):
        row[j] = q - kmid[j]
    for j in range(head_start, i + 1):
        row[j] = i - j


@njit
def fill_index_loop(l, m, s1, s2, out):
    qmid = np.empty(l, dtype=np.int64)
    kmid = np.empty(l, dtype=np.int64)
    _middle_positions(l, m, s1, s2, qmid, kmid)
    for i in range(l):
        _index_row(i, l, m, s1, s2, qmid, kmid, out[i])
    return out


@njit
def first_violation_loop(entries):
    l = entries.shape[0]
    for i in range(l):
        for j in range(i):
            if entries[i, j] < entries[i, j + 1]:
                return i, j
    return -1, -1


@njit
def stream_index_violation_loop(l, m, s1, s2):
    """Row-by-row monotonicity scan of the index matrix without materializing it."""
    qmid = np.empty(l, dtype=np.int64)
    kmid = np.empty(l, dtype=np.int64)
    row = np.empty(l, dtype=np.int64)
    _middle_positions(l, m, s1, s2, qmid, kmid)
    for i in range(1, l):
        _index_row(i, l, m, s1, s2, qmid, kmid, row)
        bad = False
        for j in range(i):
            bad |= row[j] < row[j + 1]
        if bad:
            for j in range(i):
                if row[j] < row[j + 1]:
                    return i, j
    return -1, -1


@njit
def _audit_one(l, m, s1, s2, qmid, kmid, curve):
    # 0 ok, 1 monotonicity, 2 range, 3 floor discrepancy
    num = m - s1 - s2
    den = l - s1 - s2
    off = (l - m) * s1
    tail_start = l - s2
    for t in range(l):
        qmid[t] = (num * t + off) // den
        kmid[t] = (num * t) // den
        curve[t] = _formula_value(t, l, m, s1, s2, num, den)
    for i in range(l):
        prev = 0
        # walk j from the diagonal outwards so values must not decrease
        for d in range(i + 1):
            j = i - d
            if d <= s1:
                v = d
            elif d < tail_start:
                v = qmid[i] - kmid[j]
            else:
                v = m - l + d
            if v < prev:
                return 1
            prev = v
            if v > m - 1:
                return 2
            gap = curve[d] - v
            if gap > 1 or gap < -1 or (gap != 0 and (d <= s1 or d >= tail_start)):
                return 3
    return 0


@njit
def exhaustive_audit_loop(l):
    """Audit every compressing config of length ``l``; return (count, m, s1, s2, code).

    ``code`` is 0 when all configs pass, otherwise the first failure's code.
    """
    qmid = np.empty(l, dtype=np.int64)
    kmid = np.empty(l, dtype=np.int64)
    curve = np.empty(l, dtype=np.int64)
    count = 0
    for s1 in range(l - 1):
        for s2 in range(l - 1 - s1):
            for m in range(s1 + s2 + 1, l + 1):
                count += 1
                code = _audit_one(l, m, s1, s2, qmid, kmid, curve)
                if code != 0:
                    return count, m, s1, s2, code
    return count, -1, -1, -1, 0


def _offsets(l):
    idx = np.arange(l, dtype=np.int64)
    return idx[:, None], idx[None, :]


def fill_formula_numpy(l, m, s1, s2, out):
    num = m - s1 - s2
    den = l - s1 - s2
    d = np.arange(l, dtype=np.int64)
    per_offset = np.where(
        d <= s1, d, np.where(d < l - s2, (num * (d - s1)) // den + s1, m - l + d)
    )
    i, j = _offsets(l)
    causal = j <= i
    out[...] = np.where(causal, per_offset[np.clip(i - j, 0, None)], 0)
    return out


def _index_rows_numpy(i, j, l, m, s1, s2):
    num = m - s1 - s2
    den = l - s1 - s2
    off = (l - m) * s1
    d = i - j
    mid = (num * i + off) // den - (num * j) // den
    return np.where(d <= s1, d, np.where(d < l - s2, mid, m - l + d))


def fill_index_numpy(l, m, s1, s2, out):
    i, j = _offsets(l)
    out[...] = np.where(j <= i, _index_rows_numpy(i, j, l, m, s1, s2), 0)
    return out


def _first_true(mask, l):
    # mask[i, j] flags entries[i, j] < entries[i, j + 1] restricted to j < i
    hits = np.flatnonzero(mask)
    if hits.size == 0:
        return NO_VIOLATION
    flat = int(hits[0])
    return flat // (l - 1), flat % (l - 1)


def first_violation_numpy(entries):
    l = entries.shape[0]
    if l < 2:
        return NO_VIOLATION
    i, j = _offsets(l)
    rise = entries[:, :-1] < entries[:, 1:]
    rise &= j[:, :-1] < i
    return _first_true(rise, l)


def stream_index_violation_numpy(l, m, s1, s2):
    for i in range(1, l):
        j = np.arange(i + 1, dtype=np.int64)
        row = _index_rows_numpy(np.int64(i), j, l, m, s1, s2)
        bad = np.flatnonzero(row[:-1] < row[1:])
        if bad.size:
            return i, int(bad[0])
    return NO_VIOLATION


def exhaustive_audit_numpy(l):
    count = 0
    for s1 in range(l - 1):
        for s2 in range(l - 1 - s1):
            for m in range(s1 + s2 + 1, l + 1):
                count += 1
                out = np.zeros((l, l), dtype=np.int64)
                index = fill_index_numpy(l, m, s1, s2, out)
                formula = fill_formula_numpy(l, m, s1, s2, np.zeros_like(out))
                i, j = _offsets(l)
                tri = j <= i
                if first_violation_numpy(index) != NO_VIOLATION:
                    return count, m, s1, s2, 1
                if np.any(tri & ((index < 0) | (index > m - 1))) or np.diag(index).any():
                    return count, m, s1, s2, 2
                gap = formula - index
                edge = tri & (((i - j) <= s1) | ((i - j) >= l - s2))
                if np.abs(gap).max() > 1 or np.any(edge & (gap != 0)):
                    return count, m, s1, s2, 3
    return count, -1, -1, -1, 0


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@njit
def dense_relative_attention_loop(q, k, v, pe, theta, scale):
    """Causal attention where pair (i, j) rotates k_j by ``-pe[i, j]`` steps."""
    H, l, D = q.shape
    Dv = v.shape[2]
    half = D // 2
    out = np.zeros((H, l, Dv))
    lse = np.empty((H, l))
    logits = np.empty(l)
    for h in range(H):
        for i in range(l):
            mx = -np.inf
            for j in range(i + 1):
                rel = -pe[i, j]
                acc = 0.0
                for t in range(half):
                    phi = rel * theta[t]
                    c = np.cos(phi)
                    s = np.sin(phi)
                    k0 = k[h, j, 2 * t]
                    k1 = k[h, j, 2 * t + 1]
                    acc += q[h, i, 2 * t] * (k0 * c - k1 * s)
                    acc += q[h, i, 2 * t + 1] * (k0 * s + k1 * c)
                logits[j] = acc * scale
                if logits[j] > mx:
                    mx = logits[j]
            total = 0.0
            for j in range(i + 1):
                w = np.exp(logits[j] - mx)
                total += w
                for e in range(Dv):
                    out[h, i, e] += w * v[h, j, e]
            for e in range(Dv):
                out[h, i, e] /= total
            lse[h, i] = mx + np.log(total)
    return out, lse


def dense_relative_attention_numpy(q, k, v, pe, theta, scale):
    H, l, D = q.shape
    i, j = _offsets(l)
    causal = j <= i
    rel = np.where(causal, -pe, 0).astype(np.float64)
    phi = rel[:, :, None] * theta[None, None, :]
    c, s = np.cos(phi), np.sin(phi)
    out = np.empty((H, l, v.shape[2]))
    lse = np.empty((H, l))
    for h in range(H):
        q0, q1 = q[h, :, 0::2], q[h, :, 1::2]
        k0, k1 = k[h, :, 0::2], k[h, :, 1::2]
        # k rotated per pair: (l, l, D/2) for each component
        rk0 = k0[None, :, :] * c - k1[None, :, :] * s
        rk1 = k0[None, :, :] * s + k1[None, :, :] * c
        logits = (np.einsum("it,ijt->ij", q0, rk0) + np.einsum("it,ijt->ij", q1, rk1)) * scale
        logits = np.where(causal, logits, -np.inf)
        mx = logits.max(axis=1, keepdims=True)
        w = np.exp(logits - mx)
        total = w.sum(axis=1, keepdims=True)
        out[h] = (w @ v[h]) / total
        lse[h] = (mx + np.log(total))[:, 0]
    return out, lse


@njit
def masked_attention_loop(qr, kr, v, mask, scale):
    """Softmax attention of pre-rotated queries/keys over ``mask`` pairs.

    Rows with no visited key get zero output and ``-inf`` lse.
    """
    H, R, D = qr.shape
    C = kr.shape[1]
    Dv = v.shape[2]
    out = np.zeros((H, R, Dv))
    lse = np.full((H, R), -np.inf)
    logits = np.empty(C)
    for h in range(H):
        for r in range(R):
            mx = -np.inf
            for c in range(C):
                if mask[r, c]:
                    acc = 0.0
                    for t in range(D):
                        acc += qr[h, r, t] * kr[h, c, t]
                    logits[c] = acc * scale
                    if logits[c] > mx:
                        mx = logits[c]
            if mx == -np.inf:
                continue
            total = 0.0
            for c in range(C):
                if mask[r, c]:
                    w = np.exp(logits[c] - mx)
                    total += w
                    for e in range(Dv):
                        out[h, r, e] += w * v[h, c, e]
            for e in range(Dv):
                out[h, r, e] /= total
            lse[h, r] = mx + np.log(total)
    return out, lse


def masked_attention_numpy(qr, kr, v, mask, scale):
    H, R, _ = qr.shape
    out = np.zeros((H, R, v.shape[2]))
    lse = np.full((H, R), -np.inf)
    live = mask.any(axis=1)
    if not live.any():
        return out, lse
    for h in range(H):
        logits = np.where(mask, (qr[h] @ kr[h].T) * scale, -np.inf)[live]
        mx = logits.max(axis=1, keepdims=True)
        w = np.exp(logits - mx)
        total = w.sum(axis=1, keepdims=True)
        out[h, live] = (w @ v[h]) / total
        lse[h, live] = (mx + np.log(total))[:, 0]
    return out, lse


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    fill_formula = fill_formula_loop
    fill_index = fill_index_loop
    first_violation = first_violation_loop
    stream_index_violation = stream_index_violation_loop
    exhaustive_audit = exhaustive_audit_loop
    dense_relative_attention = dense_relative_attention_loop
    masked_attention = masked_attention_loop
else:
    fill_formula = fill_formula_numpy
    fill_index = fill_index_numpy
    first_violation = first_violation_numpy
    stream_index_violation = stream_index_violation_numpy
    exhaustive_audit = exhaustive_audit_numpy
    dense_relative_attention = dense_relative_attention_numpy
    masked_attention = masked_attention_numpy
