"""Batched codebook fitting across channels (internal fast path).

Runs the same per-channel algorithm as quantizer.fit_centroids_sorted —
quantile-seeded Lloyd, coarse-DP-seeded Lloyd, best of both, split/merge
refinement — vectorized over a block of channels that share one bit
width.  Every arithmetic step gathers the same scalars in the same order
as the per-channel code, so results are bitwise identical; rows that hit
a degenerate situation (too few distinct values, an empty cluster, a
short coarse seed, or an accepted refinement move) fall back to the
scalar path, which remains authoritative.

Rows may have different logical lengths (element outliers are excluded
from refits); each row is padded with its own last value and the padding
is never read.
"""

from __future__ import annotations

import numpy as np

from .quantizer import (
    COARSE_SEED_SEGMENTS,
    _seg_sse_sorted,
    _split_merge_refine,
    fit_centroids_sorted,
)


def _bisect_rows(rows: np.ndarray, limits: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Per-row searchsorted(side='left'): first index with row[idx] >= key."""
    n = rows.shape[1]
    lo = np.zeros(keys.shape, dtype=np.int64)
    hi = np.broadcast_to(limits[:, None], keys.shape).astype(np.int64).copy()
    for _ in range(int(np.ceil(np.log2(n + 1))) + 1):
        open_ = lo < hi
        if not open_.any():
            break
        mid = (lo + hi) >> 1
        vals = np.take_along_axis(rows, np.minimum(mid, n - 1), axis=1)
        right = open_ & (vals < keys)
        lo = np.where(right, mid + 1, lo)
        hi = np.where(open_ & ~right, mid, hi)
    return lo


def _row_quantiles(rows: np.ndarray, lengths: np.ndarray, k: int) -> np.ndarray:
    """np.quantile(row[:len], (j+0.5)/k) per row, bit-for-bit."""
    t = (np.arange(k) + 0.5) / k
    virtual = t[None, :] * (lengths[:, None] - 1).astype(np.float64)
    below = np.floor(virtual).astype(np.int64)
    above = np.minimum(below + 1, lengths[:, None] - 1)
    gamma = virtual - below
    a = np.take_along_axis(rows, below, axis=1)
    b = np.take_along_axis(rows, above, axis=1)
    # numpy's lerp switches form at t >= 0.5 to keep the result exact
    diff = b - a
    out = a + diff * gamma
    flip = gamma >= 0.5
    out[flip] = (b - diff * (1 - gamma))[flip]
    return out


def _batch_cuts(rows, lengths, centroids):
    """Exact nearest-centroid cuts per row (ties to the lower index).

    Mirrors quantizer._corrected_cuts: midpoint bisect, then the scalar
    correction loop on the rare slots where midpoint rounding misplaces a
    point.
    """
    mids = (centroids[:, 1:] + centroids[:, :-1]) / 2.0
    cuts = _bisect_rows(rows, lengths, mids)
    n = rows.shape[1]
    left = centroids[:, :-1]
    right = centroids[:, 1:]
    below = np.take_along_axis(rows, np.maximum(cuts - 1, 0), axis=1)
    at = np.take_along_axis(rows, np.minimum(cuts, n - 1), axis=1)
    bad = (cuts > 0) & (np.abs(below - left) > np.abs(below - right))
    bad |= (cuts < lengths[:, None]) & (np.abs(at - left) <= np.abs(at - right))
    for row, j in np.argwhere(bad):
        lo, hi = centroids[row, j], centroids[row, j + 1]
        b = int(cuts[row, j])
        end = int(lengths[row])
        vals = rows[row]
        while b < end and abs(vals[b] - lo) <= abs(vals[b] - hi):
            b += 1
        while b > 0 and abs(vals[b - 1] - lo) > abs(vals[b - 1] - hi):
            b -= 1
        cuts[row, j] = b
    return np.maximum.accumulate(cuts, axis=1)


def _edges(cuts, lengths):
    zero = np.zeros((cuts.shape[0], 1), dtype=np.int64)
    return np.concatenate([zero, cuts, lengths[:, None]], axis=1)


def _lloyd_batch(rows, lengths, centroids, max_iter, move_tol, csum):
    """Frozen-row Lloyd sweeps; returns (centroids, needs_scalar mask).

    Each active row takes exactly the update sequence of the scalar loop
    and freezes once its largest centroid move drops under its tolerance.
    Rows that develop an empty cluster are flagged for the scalar path,
    which owns the repair logic.
    """
    active = np.ones(rows.shape[0], dtype=bool)
    needs_scalar = np.zeros(rows.shape[0], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        cuts = _batch_cuts(rows, lengths, centroids)
        counts = np.diff(_edges(cuts, lengths), axis=1)
        empty = (counts == 0).any(axis=1)
        needs_scalar |= active & empty
        active &= ~empty
        sums = np.diff(
            np.take_along_axis(csum, _edges(cuts, lengths), axis=1), axis=1
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            proposed = sums / counts
        new_centroids = np.where(counts > 0, proposed, centroids)
        move = np.max(np.abs(new_centroids - centroids), axis=1)
        centroids = np.where(active[:, None], new_centroids, centroids)
        active &= move >= move_tol
    return centroids, needs_scalar


def _seg_stats(edges, csum, csq):
    counts = np.diff(edges, axis=1).astype(np.float64)
    sums = np.diff(np.take_along_axis(csum, edges, axis=1), axis=1)
    sqs = np.diff(np.take_along_axis(csq, edges, axis=1), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sses = sqs - sums * sums / counts
    sses = np.where(counts > 0, np.maximum(sses, 0.0), 0.0)
    return counts, sums, sqs, sses


def _batch_sse(rows, lengths, centroids, csum, csq):
    cuts = _batch_cuts(rows, lengths, centroids)
    return _seg_stats(_edges(cuts, lengths), csum, csq)[3].sum(axis=1)


def _max_split_gain(rows, lengths, csum, csq, sub_edges):
    """Largest optimal 2-way split gain over the sub_edges segments.

    One vectorized pass: every internal position of every segment yields
    parent SSE minus two-child SSE; padding and boundary slots mask out.
    """
    c_rows, n = rows.shape
    seg_count = sub_edges.shape[1] - 1
    pos = np.arange(1, n + 1)[None, :]
    seg = np.zeros((c_rows, n), dtype=np.int64)
    for j in range(1, seg_count):
        seg += pos > sub_edges[:, j : j + 1]
    lo = np.take_along_axis(sub_edges, seg, axis=1)
    hi = np.take_along_axis(sub_edges, np.minimum(seg + 1, seg_count), axis=1)
    valid = (pos > lo) & (pos < hi)
    csum_lo = np.take_along_axis(csum, lo, axis=1)
    csum_hi = np.take_along_axis(csum, hi, axis=1)
    csq_lo = np.take_along_axis(csq, lo, axis=1)
    csq_hi = np.take_along_axis(csq, hi, axis=1)
    left = csum[:, 1 : n + 1] - csum_lo
    right = csum_hi - csum[:, 1 : n + 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        child = (csq_hi - csq_lo) - left * left / (pos - lo) - right * right / (hi - pos)
        parent = (csq_hi - csq_lo) - (csum_hi - csum_lo) ** 2 / (hi - lo)
    gain = np.where(valid, parent - child, -np.inf)
    return np.max(gain, axis=1, initial=-np.inf)


def _refine_candidates(rows, lengths, centroids, csum, csq):
    """Conservative filter: rows where a split/merge move might help.

    Bounds the scalar search's best net gain by (max split or boundary
    re-cut gain) minus (min merge cost); rows at or below the acceptance
    threshold are provably stalled and keep their batched result.
    """
    cuts = _batch_cuts(rows, lengths, centroids)
    edges = _edges(cuts, lengths)
    counts, sums, sqs, sses = _seg_stats(edges, csum, csq)
    total = sses.sum(axis=1)

    pair_n = counts[:, :-1] + counts[:, 1:]
    pair_sum = sums[:, :-1] + sums[:, 1:]
    pair_sq = sqs[:, :-1] + sqs[:, 1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        merge = pair_sq - pair_sum * pair_sum / pair_n - sses[:, :-1] - sses[:, 1:]
    merge = np.where(pair_n > 0, np.maximum(merge, 0.0), np.inf)
    min_merge = np.min(merge, axis=1)

    best_gain = _max_split_gain(rows, lengths, csum, csq, edges)
    length_col = lengths[:, None].astype(np.int64)
    zero_col = np.zeros_like(length_col)
    for parity in (0, 1):  # adjacent-pair unions, split into disjoint halves
        sub = edges[:, parity::2]
        if parity:
            sub = np.concatenate([zero_col, sub], axis=1)
        if not np.array_equal(sub[:, -1], lengths):
            sub = np.concatenate([sub, length_col], axis=1)
        best_gain = np.maximum(
            best_gain, _max_split_gain(rows, lengths, csum, csq, sub)
        )
    return best_gain - min_merge > 1e-12 * (1.0 + total)


def _dp_seed_batch(rows, lengths, k, csum, csq):
    """Coarse-DP seeds per row; mirrors quantizer._coarse_dp_seed.

    Only valid when every row length is at least COARSE_SEED_SEGMENTS so
    the micro-grid size matches the scalar per-row choice.  Returns the
    seeds and an ok-mask (rows whose optimal coarse segmentation left an
    empty segment produce short seeds, which the scalar algorithm skips).
    """
    c_rows = rows.shape[0]
    m = COARSE_SEED_SEGMENTS
    bounds = np.round(np.arange(m + 1)[None, :] * (lengths[:, None] / m)).astype(
        np.int64
    )
    pc = bounds.astype(np.float64)
    ps = np.take_along_axis(csum, bounds, axis=1)
    pq = np.take_along_axis(csq, bounds, axis=1)
    counts = pc[:, None, :] - pc[:, :, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        seg_sum = ps[:, None, :] - ps[:, :, None]
        cost = (pq[:, None, :] - pq[:, :, None]) - seg_sum * seg_sum / counts
    cost = np.where(counts > 0, np.maximum(cost, 0.0), np.inf)

    best = cost[:, 0, :].copy()
    back = np.zeros((k, c_rows, m + 1), dtype=np.int64)
    row_idx = np.arange(c_rows)[:, None]
    col_idx = np.arange(m + 1)[None, :]
    for level in range(1, k):
        totals = best[:, :, None] + cost
        back[level] = np.argmin(totals, axis=1)
        best = totals[row_idx, back[level], col_idx]

    splits = np.empty((c_rows, k + 1), dtype=np.int64)
    splits[:, k] = m
    rows_flat = np.arange(c_rows)
    for level in range(k - 1, 0, -1):
        splits[:, level] = back[level][rows_flat, splits[:, level + 1]]
    splits[:, 0] = 0

    seg_cnt = np.diff(np.take_along_axis(pc, splits, axis=1), axis=1)
    seg_sum = np.diff(np.take_along_axis(ps, splits, axis=1), axis=1)
    ok = (seg_cnt > 0).all(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        seeds = np.where(seg_cnt > 0, seg_sum / seg_cnt, 0.0)
    return seeds, ok


def fit_centroids_block(rows, lengths, k, max_iter, tol):
    """Fit every row of a block; returns a list of per-row centroid arrays.

    `rows` is (C, n) float64, each row sorted ascending over its first
    `lengths[c]` slots and padded with its last value.  Results are
    bitwise equal to fit_centroids_sorted on each row.
    """
    c_rows, n = rows.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    results: list = [None] * c_rows

    row_idx = np.arange(c_rows)
    if n < 2:
        n_distinct = np.ones(c_rows, dtype=np.int64)
    else:
        n_distinct = np.where(
            lengths > 1,
            (np.diff(rows, axis=1) > 0).cumsum(axis=1)[
                row_idx, np.maximum(lengths - 2, 0)
            ]
            + 1,
            1,
        )
    ranges = rows[row_idx, lengths - 1] - rows[:, 0]
    to_scalar = (n_distinct <= k) | (lengths < max(COARSE_SEED_SEGMENTS, 2))

    batch = np.flatnonzero(~to_scalar)
    if batch.size:
        sub = rows[batch]
        sub_len = lengths[batch]
        move_tol = tol * ranges[batch]
        csum = np.concatenate(
            [np.zeros((batch.size, 1)), np.cumsum(sub, axis=1)], axis=1
        )
        csq = np.concatenate(
            [np.zeros((batch.size, 1)), np.cumsum(sub * sub, axis=1)], axis=1
        )

        primary, bad = _lloyd_batch(
            sub, sub_len, _row_quantiles(sub, sub_len, k), max_iter, move_tol, csum
        )
        seeds, seed_ok = _dp_seed_batch(sub, sub_len, k, csum, csq)
        alt, bad_alt = _lloyd_batch(sub, sub_len, seeds, max_iter, move_tol, csum)
        bad |= seed_ok & bad_alt  # scalar path would repair and compare

        centroids = primary
        compare = ~bad & seed_ok
        if compare.any():
            sse_p = _batch_sse(sub, sub_len, primary, csum, csq)
            sse_a = _batch_sse(sub, sub_len, alt, csum, csq)
            take_alt = compare & (sse_a < sse_p)
            centroids = np.where(take_alt[:, None], alt, primary)

        settled = ~bad
        improvable = np.zeros(batch.size, dtype=bool)
        if settled.any():
            improvable[settled] = _refine_candidates(
                sub[settled], sub_len[settled], centroids[settled],
                csum[settled], csq[settled],
            )
        for i in np.flatnonzero(settled & improvable):
            end = int(sub_len[i])
            centroids[i] = _split_merge_refine(
                sub[i, :end], centroids[i], max_iter, float(move_tol[i]),
                csum[i, : end + 1], csq[i, : end + 1], None,
            )
        for pos, i in enumerate(batch):
            if not bad[pos]:
                results[i] = centroids[pos]

    for i in range(c_rows):
        if results[i] is None:
            end = int(lengths[i])
            results[i] = fit_centroids_sorted(rows[i, :end], k, "lloyd", max_iter, tol)
    return results


def assign_block(rows_sorted, orders, codebooks, real_k):
    """Nearest-centroid assignment for a block against padded codebooks.

    `rows_sorted` is (C, n) fully sorted data with `orders` the stable
    argsort that produced it; `codebooks` is (C, K) float64 with entries
    beyond `real_k[c]` being padding duplicates (never selected).  Rows
    whose real centroids are not strictly increasing (fp16 collisions)
    are returned as None and must use the scalar path.
    """
    c_rows, n = rows_sorted.shape
    k_slots = codebooks.shape[1]
    limits = np.full(c_rows, n, dtype=np.int64)

    slot = np.arange(k_slots)[None, :]
    real = slot < real_k[:, None]
    diffs = np.diff(codebooks, axis=1)
    collided = (diffs <= 0) & real[:, 1:]
    usable = ~collided.any(axis=1)

    # padding slots get a sentinel so far above the data that the midpoint
    # with any real centroid clears the data range, pinning their cuts to n
    magnitude = np.maximum(
        np.maximum(np.abs(rows_sorted[:, :1]), np.abs(rows_sorted[:, -1:])),
        np.abs(codebooks).max(axis=1, keepdims=True),
    )
    keys = np.where(real, codebooks, 3.0 * magnitude + 1.0)
    cuts = _batch_cuts(rows_sorted, limits, keys)
    counts = np.diff(_edges(cuts, limits), axis=1)
    assign_sorted = np.repeat(
        np.tile(np.arange(k_slots), c_rows), counts.reshape(-1)
    ).reshape(c_rows, n)

    # distance repair for sub-ulp centroid gaps (quantizer._assign_sorted)
    ins = _bisect_rows(keys, real_k, rows_sorted)
    lo = np.maximum(ins - 1, 0)
    hi = np.minimum(ins, (real_k - 1)[:, None])
    d_lo = np.abs(rows_sorted - np.take_along_axis(keys, lo, axis=1))
    d_hi = np.abs(rows_sorted - np.take_along_axis(keys, hi, axis=1))
    best = np.where(d_lo <= d_hi, lo, hi)
    d_best = np.minimum(d_lo, d_hi)
    d_cur = np.abs(rows_sorted - np.take_along_axis(keys, assign_sorted, axis=1))
    assign_sorted = np.where(d_cur > d_best, best, assign_sorted)

    out = np.empty((c_rows, n), dtype=np.uint8)
    np.put_along_axis(out, orders, assign_sorted.astype(np.uint8), axis=1)
    return out, usable
