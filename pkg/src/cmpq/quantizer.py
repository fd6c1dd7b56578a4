"""Per-channel codebook quantization.

Non-uniform codebooks are fitted with Lloyd's algorithm on 1-D data
(deterministic quantile seeding, no RNG anywhere), with an exact
dynamic-programming solver as an independent optimum oracle.  A grouped
round-to-nearest uniform quantizer is provided as the baseline.

All clustering math runs in float64; float16 appears only when codebooks
are committed to storage (see pipeline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptData, DomainError, NumericError, OracleCapError

DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-6
ORACLE_SIZE_CAP = 4096
ORACLE_K_CAP = 16


@dataclass(eq=False)
class ChannelCodebook:
    """Ascending centroid values for one channel; K <= 2**bits entries."""

    centroids: np.ndarray

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def _as_channel(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise DomainError("channel is empty")
    if not np.all(np.isfinite(w)):
        raise NumericError("channel contains non-finite values")
    return w


def channel_sse(w: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    """Sum of squared distances for a given assignment.

    Shared by the Lloyd and exact paths so that identical partitions
    produce bitwise-identical SSE values.
    """
    diff = np.asarray(w, dtype=np.float64) - np.asarray(centroids, dtype=np.float64)[assignments]
    return float(np.dot(diff, diff))


def quantize_channel(w, cb: ChannelCodebook) -> np.ndarray:
    """Nearest-centroid index for every weight; ties go to the lower index."""
    w = _as_channel(w)
    c = np.asarray(cb.centroids, dtype=np.float64)
    if c.size == 0:
        raise DomainError("codebook is empty")
    # argmin returns the first minimum, which is the lower (smaller) centroid.
    return np.abs(w[:, None] - c[None, :]).argmin(axis=1)


def dequantize_channel(indices, cb: ChannelCodebook) -> np.ndarray:
    """Centroid lookup; inverse of quantize_channel up to codebook spacing."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= cb.k):
        raise CorruptData(f"index out of range for codebook of size {cb.k}")
    return np.asarray(cb.centroids, dtype=np.float64)[idx]


# ---------------------------------------------------------------------------
# sorted-space machinery shared by Lloyd, the DP oracle, and assignment
# ---------------------------------------------------------------------------


def _corrected_cuts(sorted_w: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Cut positions so slice j of sorted_w is exactly centroid j's cluster.

    Starts from the midpoints, then nudges each cut so every point obeys
    the nearest-centroid rule under float distances with ties to the
    lower index — midpoints alone can misplace a point by one slot when
    (c1 + c2) / 2 rounds.  Centroids must be nondecreasing; an exact
    duplicate collapses everything into its first slot and leaves the
    rest empty, which callers must tolerate (Lloyd repairs it).
    """
    mids = (centroids[1:] + centroids[:-1]) / 2.0
    cuts = np.searchsorted(sorted_w, mids, side="left")
    n = sorted_w.size
    for j in range(cuts.shape[0]):
        lo, hi = centroids[j], centroids[j + 1]
        b = int(cuts[j])
        # belongs-left predicate is monotone in the point value
        while b < n and abs(sorted_w[b] - lo) <= abs(sorted_w[b] - hi):
            b += 1
        while b > 0 and abs(sorted_w[b - 1] - lo) > abs(sorted_w[b - 1] - hi):
            b -= 1
        cuts[j] = b
    return np.maximum.accumulate(cuts)


def _assign_sorted(sorted_w: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest indices for presorted data; equals quantize_channel's rule.

    Duplicate centroid values collapse to their first occurrence, which is
    what argmin's first-minimum tie rule picks.  A final repair pass pins
    every point to a minimal rounded distance: when two centroids sit
    closer than one ulp of the distances involved, rounded-distance ties
    can push an interval cut past a point that a farther-away centroid
    owns outright, and only the distances themselves can adjudicate.
    """
    unique, first = np.unique(centroids, return_index=True)
    cuts = _corrected_cuts(sorted_w, unique)
    counts = np.diff(np.concatenate([[0], cuts, [sorted_w.size]]))
    assign = np.repeat(np.arange(unique.size), counts)
    if unique.size > 1:
        ins = np.searchsorted(unique, sorted_w)
        lo = np.maximum(ins - 1, 0)
        hi = np.minimum(ins, unique.size - 1)
        d_lo = np.abs(sorted_w - unique[lo])
        d_hi = np.abs(sorted_w - unique[hi])
        best = np.where(d_lo <= d_hi, lo, hi)
        d_best = np.minimum(d_lo, d_hi)
        bad = np.abs(sorted_w - unique[assign]) > d_best
        if bad.any():
            assign[bad] = best[bad]
    return first[assign]


def nearest_assign(w, centroids) -> np.ndarray:
    """Exact nearest-centroid assignment in O(n log n), original order.

    Same result as quantize_channel without the (n, k) distance matrix;
    `centroids` must be sorted nondecreasing.
    """
    w = np.asarray(w, dtype=np.float64)
    order = np.argsort(w, kind="stable")
    assign = np.empty(w.size, dtype=np.int64)
    assign[order] = _assign_sorted(w[order], np.asarray(centroids, dtype=np.float64))
    return assign


def _split_worst_cluster(
    sorted_w: np.ndarray, cuts: np.ndarray, centroids: np.ndarray
) -> np.ndarray:
    """Replace one empty cluster by splitting the highest-SSE cluster.

    The worst cluster's sorted members are cut at the median position and
    the two halves' means become centroids; the first empty cluster is
    dropped.  A positive-SSE cluster always exists here because the data
    has more distinct values than there are centroids.
    """
    k = centroids.shape[0]
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [sorted_w.size]])
    sses = np.zeros(k)
    for j in range(k):
        seg = sorted_w[starts[j] : ends[j]]
        if seg.size:
            mean = seg.mean()
            sses[j] = float(np.dot(seg - mean, seg - mean))
    worst = int(np.argmax(sses))
    seg = sorted_w[starts[worst] : ends[worst]]
    half = seg.size // 2
    empty = int(np.flatnonzero(ends - starts == 0)[0])
    out = centroids.copy()
    out[empty] = seg[:half].mean()
    out[worst] = seg[half:].mean()
    out.sort()
    return out


def _lloyd_iterate(
    sorted_w: np.ndarray,
    centroids: np.ndarray,
    max_iter: int,
    move_tol: float,
    csum: np.ndarray,
    sse_trace: list | None,
) -> np.ndarray:
    """Plain Lloyd sweeps from the given centroids until they settle."""
    k = centroids.shape[0]
    for _ in range(max_iter):
        # duplicate centroids make every later cluster empty (ties go to
        # the lower index), which the repair branch below then resolves
        cuts = _corrected_cuts(sorted_w, centroids)
        edges = np.concatenate([[0], cuts, [sorted_w.size]])
        counts = np.diff(edges)
        if np.any(counts == 0):
            centroids = _split_worst_cluster(sorted_w, cuts, centroids)
            continue
        if sse_trace is not None:
            assign = np.repeat(np.arange(k), counts)
            sse_trace.append(channel_sse(sorted_w, centroids, assign))
        new_centroids = np.diff(csum[edges]) / counts
        move = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        if move < move_tol:
            break
    return centroids


def _segment_edges(sorted_w: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    cuts = _corrected_cuts(sorted_w, centroids)
    return np.concatenate([[0], cuts, [sorted_w.size]])


def _seg_sse_sorted(sorted_w, centroids, csum, csq) -> float:
    """Objective from segment prefix sums (cheap; matches the batch path)."""
    edges = _segment_edges(sorted_w, centroids)
    counts = np.diff(edges).astype(np.float64)
    sums = np.diff(csum[edges])
    sqs = np.diff(csq[edges])
    with np.errstate(invalid="ignore", divide="ignore"):
        sses = sqs - sums * sums / counts
    return float(np.where(counts > 0, np.maximum(sses, 0.0), 0.0).sum())


def _best_split(lo: int, hi: int, csum, csq) -> tuple[float, int]:
    """Optimal internal 2-way cut of slice [lo, hi): (SSE gain, position).

    Scans every internal cut with prefix sums, so the result is the true
    1-D optimum for the slice.  Slices under 2 points have gain 0.
    """
    if hi - lo < 2:
        return 0.0, -1
    pos = np.arange(lo + 1, hi)
    left_sum = csum[pos] - csum[lo]
    right_sum = csum[hi] - csum[pos]
    total_sq = csq[hi] - csq[lo]
    total_sum = csum[hi] - csum[lo]
    parent = total_sq - total_sum * total_sum / (hi - lo)
    child = total_sq - left_sum**2 / (pos - lo) - right_sum**2 / (hi - pos)
    best = int(np.argmin(child))
    return max(parent - child[best], 0.0), int(pos[best])


def _split_merge_refine(
    sorted_w: np.ndarray,
    centroids: np.ndarray,
    max_iter: int,
    move_tol: float,
    csum: np.ndarray,
    csq: np.ndarray,
    sse_trace: list | None,
) -> np.ndarray:
    """Deterministic split/merge moves on the converged Lloyd solution.

    Lloyd's fixed points in 1-D fail in two ways: a region holds the
    wrong number of centroids, or a boundary between neighbors settles in
    the worse of two local cuts.  Both are one move here: merge an
    adjacent pair, then optimally split either the merged union (a pure
    boundary re-cut) or any other cluster.  A move is taken only when it
    strictly lowers the objective; Lloyd then re-converges from the new
    centroids and the search repeats.
    """
    k = centroids.shape[0]
    for _ in range(4 * k + 8):
        edges = _segment_edges(sorted_w, centroids)
        counts = np.diff(edges)
        if np.any(counts == 0):
            return centroids  # leave degenerate layouts to the repair path
        sums = np.diff(csum[edges])
        sqs = np.diff(csq[edges])
        sses = np.maximum(sqs - sums * sums / counts, 0.0)

        pair_n = counts[:-1] + counts[1:]
        pair_sum = sums[:-1] + sums[1:]
        pair_sq = sqs[:-1] + sqs[1:]
        merge_cost = np.maximum(
            pair_sq - pair_sum * pair_sum / pair_n - sses[:-1] - sses[1:], 0.0
        )
        splits = [
            _best_split(int(edges[s]), int(edges[s + 1]), csum, csq) for s in range(k)
        ]
        union_splits = [
            _best_split(int(edges[j]), int(edges[j + 2]), csum, csq)
            for j in range(k - 1)
        ]

        best_net = 0.0
        best_move = None
        for j in range(k - 1):
            gain, cut = union_splits[j]
            if cut >= 0 and gain - merge_cost[j] > best_net:
                best_net = gain - merge_cost[j]
                best_move = (j, j, cut)
            for s in range(k):
                if s in (j, j + 1):
                    continue
                gain, cut = splits[s]
                if cut >= 0 and gain - merge_cost[j] > best_net:
                    best_net = gain - merge_cost[j]
                    best_move = (j, s, cut)
        if best_move is None or best_net <= 1e-12 * (1.0 + float(sses.sum())):
            return centroids

        j, s, cut = best_move
        new_centroids = []
        for seg in range(k):
            lo, hi = int(edges[seg]), int(edges[seg + 1])
            if seg == j + 1:
                continue  # absorbed into segment j below
            if seg == j:
                hi = int(edges[seg + 2])
                if s == j:  # boundary re-cut of the union
                    new_centroids.append((csum[cut] - csum[lo]) / (cut - lo))
                    new_centroids.append((csum[hi] - csum[cut]) / (hi - cut))
                else:
                    new_centroids.append((csum[hi] - csum[lo]) / (hi - lo))
            elif seg == s:
                new_centroids.append((csum[cut] - csum[lo]) / (cut - lo))
                new_centroids.append((csum[hi] - csum[cut]) / (hi - cut))
            else:
                new_centroids.append(sums[seg] / counts[seg])
        centroids = np.sort(np.array(new_centroids))
        centroids = _lloyd_iterate(
            sorted_w, centroids, max_iter, move_tol, csum, sse_trace
        )
    return centroids


COARSE_SEED_SEGMENTS = 64


def _coarse_dp_seed(
    sorted_w: np.ndarray, k: int, csum: np.ndarray, csq: np.ndarray
) -> np.ndarray:
    """Alternative deterministic seed from a compressed segmentation.

    The sorted data is grouped into equal-count micro-segments and the
    optimal k-segmentation of those weighted points is solved exactly;
    segment means seed a Lloyd run.  Quantile seeding spreads centroids by
    equal mass, which systematically starves distribution tails and can
    strand Lloyd in poor fixed points; this seed recovers the right
    centroid allocation at micro-segment granularity for a few hundred
    microseconds.
    """
    n = sorted_w.size
    m = min(n, COARSE_SEED_SEGMENTS)
    bounds = np.round(np.arange(m + 1) * (n / m)).astype(np.int64)
    pc = bounds.astype(np.float64)
    ps = csum[bounds]
    pq = csq[bounds]
    idx = np.arange(m + 1)
    counts = pc[None, :] - pc[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        seg_sum = ps[None, :] - ps[:, None]
        cost = (pq[None, :] - pq[:, None]) - seg_sum * seg_sum / counts
    cost[counts <= 0] = np.inf
    np.maximum(cost, 0.0, out=cost, where=counts > 0)

    best = cost[0].copy()
    back = np.zeros((k, m + 1), dtype=np.int64)
    for level in range(1, k):
        totals = best[:, None] + cost
        back[level] = np.argmin(totals, axis=0)
        best = totals[back[level], idx]
    splits = [m]
    for level in range(k - 1, 0, -1):
        splits.append(int(back[level, splits[-1]]))
    splits.append(0)
    splits.reverse()
    return np.array(
        [
            (ps[b] - ps[a]) / (pc[b] - pc[a])
            for a, b in zip(splits[:-1], splits[1:])
            if pc[b] > pc[a]
        ]
    )


def _lloyd_sorted(
    sorted_w: np.ndarray,
    k: int,
    max_iter: int,
    tol: float,
    sse_trace: list | None = None,
) -> np.ndarray:
    """Best of two deterministically seeded Lloyd runs, then refinement.

    The primary run follows the documented quantile seeding and feeds the
    SSE trace; the secondary run starts from the coarse-DP seed.  The
    better converged solution is kept and polished by split/merge moves.
    """
    move_tol = tol * float(sorted_w[-1] - sorted_w[0])
    csum = np.concatenate([[0.0], np.cumsum(sorted_w)])
    csq = np.concatenate([[0.0], np.cumsum(sorted_w * sorted_w)])

    centroids = _lloyd_iterate(
        sorted_w,
        np.quantile(sorted_w, (np.arange(k) + 0.5) / k),
        max_iter,
        move_tol,
        csum,
        sse_trace,
    )
    if k > 1:
        seed = _coarse_dp_seed(sorted_w, k, csum, csq)
        if seed.shape[0] == k:
            alt = _lloyd_iterate(sorted_w, seed, max_iter, move_tol, csum, None)
            if _seg_sse_sorted(sorted_w, alt, csum, csq) < _seg_sse_sorted(
                sorted_w, centroids, csum, csq
            ):
                centroids = alt
        centroids = _split_merge_refine(
            sorted_w, centroids, max_iter, move_tol, csum, csq, sse_trace
        )
    return centroids


def _dp_sorted(sorted_w: np.ndarray, k: int) -> np.ndarray:
    """Optimal centroids for presorted data by segment dynamic programming.

    Optimal 1-D clusters are contiguous in sorted order, so the problem is
    a segmentation: cost of any segment comes from prefix sums, and the
    DP scans all split points.  O(k n^2) time, usable as an oracle.
    """
    n = sorted_w.size
    p1 = np.concatenate([[0.0], np.cumsum(sorted_w)])
    p2 = np.concatenate([[0.0], np.cumsum(sorted_w * sorted_w)])
    j = np.arange(n + 1)
    counts = j[None, :] - j[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        seg_sum = p1[None, :] - p1[:, None]
        cost = (p2[None, :] - p2[:, None]) - seg_sum * seg_sum / counts
    cost[counts <= 0] = np.inf
    np.maximum(cost, 0.0, out=cost, where=counts > 0)  # clamp float noise

    best = cost[0].copy()  # one cluster covering [0, i)
    back = np.zeros((k, n + 1), dtype=np.int64)
    for level in range(1, k):
        totals = best[:, None] + cost
        back[level] = np.argmin(totals, axis=0)
        best = totals[back[level], j]

    splits = [n]
    for level in range(k - 1, 0, -1):
        splits.append(int(back[level, splits[-1]]))
    splits.append(0)
    splits.reverse()
    # prefix-sum means, the same arithmetic as the Lloyd update, so equal
    # partitions yield bitwise-equal centroids
    return np.array(
        [(p1[b] - p1[a]) / (b - a) for a, b in zip(splits[:-1], splits[1:]) if b > a]
    )


def fit_centroids_sorted(
    sorted_w: np.ndarray,
    k: int,
    method: str = "lloyd",
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    sse_trace: list | None = None,
) -> np.ndarray:
    """Fit a codebook on presorted float64 data (no validation).

    Returns ascending float64 centroids, fewer than k when the data has
    at most k distinct values (the fit is then exact).
    """
    distinct = np.unique(sorted_w)
    if distinct.shape[0] <= k:
        return distinct
    if method == "exact":
        if sorted_w.size > ORACLE_SIZE_CAP:
            raise OracleCapError(
                f"oracle capped at {ORACLE_SIZE_CAP} points, got {sorted_w.size}"
            )
        if k > ORACLE_K_CAP:
            raise OracleCapError(f"oracle capped at k={ORACLE_K_CAP}, got {k}")
        return _dp_sorted(sorted_w, k)
    return _lloyd_sorted(sorted_w, k, max_iter, tol, sse_trace)


def kmeans_channel(
    w,
    k: int,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    sse_trace: list | None = None,
) -> tuple[ChannelCodebook, np.ndarray]:
    """Lloyd's algorithm on one channel, fully deterministic.

    The primary run seeds centroid j at the ((j + 0.5) / k)-quantile of
    the data; a second run seeds from a coarse optimal segmentation, and
    the better fixed point wins before split/merge refinement (quantile
    seeding alone strands Lloyd in poor optima on heavy-tailed channels).
    Each run stops when the largest centroid move drops below ``tol``
    times the value range, or after ``max_iter`` sweeps; empty clusters
    are repaired by splitting the highest-SSE cluster at its median.  If
    the channel has at most k distinct values the codebook is just those
    values and the fit is exact.

    When ``sse_trace`` is a list, the objective after every assignment
    step of the primary descent is appended to it (diagnostics; the
    sequence never increases).
    """
    w = _as_channel(w)
    if k < 1:
        raise DomainError(f"k must be positive, got {k}")
    order = np.argsort(w, kind="stable")
    sorted_w = w[order]
    centroids = fit_centroids_sorted(sorted_w, k, "lloyd", max_iter, tol, sse_trace)
    assign = np.empty(w.size, dtype=np.int64)
    assign[order] = _assign_sorted(sorted_w, centroids)
    return ChannelCodebook(centroids=centroids), assign


def kmeans_exact_1d(w, k: int) -> tuple[ChannelCodebook, float]:
    """Globally optimal 1-D k-means by dynamic programming (test oracle)."""
    w = _as_channel(w)
    if k < 1:
        raise DomainError(f"k must be positive, got {k}")
    sorted_w = np.sort(w)
    centroids = fit_centroids_sorted(sorted_w, k, "exact")
    sse = channel_sse(sorted_w, centroids, _assign_sorted(sorted_w, centroids))
    return ChannelCodebook(centroids=centroids), sse


# ---------------------------------------------------------------------------
# uniform round-to-nearest baseline
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class UniformQuantParams:
    """Grid parameters for one round-to-nearest group."""

    delta: float
    w_min: float
    n_bits: int
    group_size: int
    variant: str


def _uniform_levels(n_bits: int, variant: str) -> int:
    # "paper": (max-min)/(2^(N-1)-1) — half the code space stays unused;
    # "conventional": (max-min)/(2^N-1) — the full range of N-bit codes.
    if variant == "paper":
        return (1 << (n_bits - 1)) - 1
    if variant == "conventional":
        return (1 << n_bits) - 1
    raise DomainError(f"unknown denominator variant {variant!r}")


def uniform_quantize(
    w_group,
    n_bits: int,
    denominator_variant: str = "paper",
) -> tuple[UniformQuantParams, np.ndarray]:
    """Round-to-nearest quantization of one group onto an even grid."""
    w = _as_channel(w_group)
    if n_bits not in (2, 3, 4):
        raise DomainError(f"uniform path supports 2-4 bits, got {n_bits}")
    top = _uniform_levels(n_bits, denominator_variant)
    w_min = float(w.min())
    w_max = float(w.max())
    if w_max == w_min:
        params = UniformQuantParams(0.0, w_min, n_bits, w.size, denominator_variant)
        return params, np.zeros(w.size, dtype=np.int64)
    delta = (w_max - w_min) / top
    idx = np.clip(np.rint((w - w_min) / delta), 0, top).astype(np.int64)
    params = UniformQuantParams(delta, w_min, n_bits, w.size, denominator_variant)
    return params, idx


def uniform_dequantize(params: UniformQuantParams, indices) -> np.ndarray:
    return params.w_min + np.asarray(indices, dtype=np.float64) * params.delta
