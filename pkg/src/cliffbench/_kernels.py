"""Hot similarity kernels over packed fingerprint matrices.

Three operations dominate runtime: the thresholded all-pairs
similarity join, per-molecule top-K neighbor search against the
training set, and nearest-training-similarity maxima. Each exists in
two interchangeable implementations:

* numba-compiled kernels (default when numba imports cleanly), and
* pure-numpy fallbacks, selected by setting CLIFFBENCH_NO_NUMBA=1
  before import.

Both backends perform the same integer popcount arithmetic and the
same int64 / int64 float division, so their outputs are bit-identical;
the test suite asserts this. Parallel kernels write only row-private
output slices, which keeps results independent of thread count and
scheduling.

The pair join builds an inverted index from bit position to the rows
containing it, gathers candidate partners from the postings of each
row's set bits (candidates share at least one bit, so a popcount-ratio
screen plus exact intersection counting follows), and never touches
the quadratic number of disjoint pairs. A non-positive threshold falls
back to a dense scan because disjoint pairs then qualify too.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "CLIFFBENCH_NO_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_ENV_FLAG, "").strip() in ("", "0")


NUMBA_ENABLED = False
if _numba_requested():
    try:
        import numba
        from numba import njit, prange

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - exercised only without numba
        NUMBA_ENABLED = False


def set_threads(n: int) -> None:
    """Pin the worker thread count; no-op on the numpy backend."""
    if NUMBA_ENABLED and n > 0:
        numba.set_num_threads(n)


# ---------------------------------------------------------------------------
# Shared index construction (numpy on both backends)
# ---------------------------------------------------------------------------


def _row_bits_csr(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CSR of set-bit positions per row: (indptr, ascending bit ids)."""
    n, w = words.shape
    counts = np.bitwise_count(words).sum(axis=1).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    idx = np.empty(indptr[-1], dtype=np.int64)
    # Unpack in blocks to bound the boolean scratch matrix.
    block = max(1, (1 << 22) // max(1, w * 64))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        flat = np.unpackbits(
            words[lo:hi].astype("<u8").view(np.uint8), axis=1, bitorder="little"
        )
        rows, bits = np.nonzero(flat)
        order = np.lexsort((bits, rows))
        idx[indptr[lo] : indptr[hi]] = bits[order]
    return indptr, idx


def _postings_csr(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CSR posting lists: bit id -> ascending row ids containing it."""
    n, w = words.shape
    nbits = w * 64
    rb_indptr, rb_idx = _row_bits_csr(words)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(rb_indptr))
    order = np.lexsort((rows, rb_idx))
    post_idx = rows[order]
    post_counts = np.bincount(rb_idx, minlength=nbits).astype(np.int64)
    post_indptr = np.zeros(nbits + 1, dtype=np.int64)
    np.cumsum(post_counts, out=post_indptr[1:])
    return post_indptr, post_idx


# ---------------------------------------------------------------------------
# numpy fallback implementations
# ---------------------------------------------------------------------------


def _pair_join_numpy(words: np.ndarray, pops: np.ndarray, tau: float):
    n = words.shape[0]
    out_i: list[np.ndarray] = []
    out_j: list[np.ndarray] = []
    out_s: list[np.ndarray] = []
    if tau <= 0.0:
        for i in range(n - 1):
            inter = np.bitwise_count(words[i + 1 :] & words[i]).sum(axis=1).astype(np.int64)
            union = pops[i] + pops[i + 1 :] - inter
            sim = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
            j = np.arange(i + 1, n, dtype=np.int64)
            out_i.append(np.full(j.size, i, dtype=np.int64))
            out_j.append(j)
            out_s.append(sim)
    else:
        post_indptr, post_idx = _postings_csr(words)
        rb_indptr, rb_idx = _row_bits_csr(words)
        for i in range(n - 1):
            cand_parts = []
            for b in rb_idx[rb_indptr[i] : rb_indptr[i + 1]]:
                lo, hi = post_indptr[b], post_indptr[b + 1]
                seg = post_idx[lo:hi]
                pos = np.searchsorted(seg, i, side="right")
                cand_parts.append(seg[pos:])
            if not cand_parts:
                continue
            cand = np.concatenate(cand_parts)
            if cand.size == 0:
                continue
            j, inter = np.unique(cand, return_counts=True)
            inter = inter.astype(np.int64)
            union = pops[i] + pops[j] - inter
            sim = inter / union
            keep = sim >= tau
            out_i.append(np.full(int(keep.sum()), i, dtype=np.int64))
            out_j.append(j[keep])
            out_s.append(sim[keep])
    if not out_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.float64)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_s)


def _topk_numpy(q_words, q_pops, r_words, r_pops, tau, k, self_map):
    nq = q_words.shape[0]
    counts = np.zeros(nq, dtype=np.int64)
    idx_rows = []
    sim_rows = []
    for q in range(nq):
        inter = np.bitwise_count(r_words & q_words[q]).sum(axis=1).astype(np.int64)
        union = q_pops[q] + r_pops - inter
        sim = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        mask = sim >= tau
        if self_map[q] >= 0:
            mask[self_map[q]] = False
        cand = np.flatnonzero(mask)
        order = np.lexsort((cand, -sim[cand]))[:k]
        chosen = cand[order]
        counts[q] = chosen.size
        idx_rows.append(chosen.astype(np.int64))
        sim_rows.append(sim[chosen])
    indptr = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    if nq == 0:
        return indptr, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    return indptr, np.concatenate(idx_rows), np.concatenate(sim_rows)


def _max_sim_numpy(q_words, q_pops, r_words, r_pops, self_map):
    nq = q_words.shape[0]
    out = np.zeros(nq, dtype=np.float64)
    for q in range(nq):
        inter = np.bitwise_count(r_words & q_words[q]).sum(axis=1).astype(np.int64)
        union = q_pops[q] + r_pops - inter
        sim = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        if self_map[q] >= 0:
            sim[self_map[q]] = -1.0
        out[q] = sim.max() if sim.size else 0.0
        if out[q] < 0.0:
            out[q] = 0.0
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    _M1 = np.uint64(0x5555555555555555)
    _M2 = np.uint64(0x3333333333333333)
    _M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
    _H01 = np.uint64(0x0101010101010101)
    _S1 = np.uint64(1)
    _S2 = np.uint64(2)
    _S4 = np.uint64(4)
    _S56 = np.uint64(56)

    @njit(cache=True, inline="always")
    def _popcount64(x):
        x = x - ((x >> _S1) & _M1)
        x = (x & _M2) + ((x >> _S2) & _M2)
        x = (x + (x >> _S4)) & _M4
        return (x * _H01) >> _S56

    @njit(cache=True, inline="always")
    def _intersection(a, b, w):
        total = np.int64(0)
        for t in range(w):
            total += np.int64(_popcount64(a[t] & b[t]))
        return total

    @njit(cache=True)
    def _row_join(
        i, words, pops, post_indptr, post_idx, rb_indptr, rb_idx, tau,
        write, out_j, out_s, base,
    ):
        total = 0
        for t in range(rb_indptr[i], rb_indptr[i + 1]):
            b = rb_idx[t]
            lo, hi = post_indptr[b], post_indptr[b + 1]
            pos = np.searchsorted(post_idx[lo:hi], i, side="right") + lo
            total += hi - pos
        buf = np.empty(total, np.int64)
        fill = 0
        for t in range(rb_indptr[i], rb_indptr[i + 1]):
            b = rb_idx[t]
            lo, hi = post_indptr[b], post_indptr[b + 1]
            pos = np.searchsorted(post_idx[lo:hi], i, side="right") + lo
            for u in range(pos, hi):
                buf[fill] = post_idx[u]
                fill += 1
        buf.sort()
        count = 0
        t = 0
        while t < total:
            j = buf[t]
            m = np.int64(1)
            t += 1
            while t < total and buf[t] == j:
                m += 1
                t += 1
            pi, pj = pops[i], pops[j]
            small = min(pi, pj)
            big = max(pi, pj)
            if small / big < tau:
                continue
            sim = m / (pi + pj - m)
            if sim >= tau:
                if write:
                    out_j[base + count] = j
                    out_s[base + count] = sim
                count += 1
        return count

    @njit(cache=True, parallel=True)
    def _join_counts(words, pops, post_indptr, post_idx, rb_indptr, rb_idx, tau):
        n = words.shape[0]
        counts = np.zeros(n, np.int64)
        dummy_j = np.zeros(1, np.int64)
        dummy_s = np.zeros(1, np.float64)
        for i in prange(n):
            counts[i] = _row_join(
                i, words, pops, post_indptr, post_idx, rb_indptr, rb_idx, tau,
                False, dummy_j, dummy_s, 0,
            )
        return counts

    @njit(cache=True, parallel=True)
    def _join_fill(
        words, pops, post_indptr, post_idx, rb_indptr, rb_idx, tau, starts, out_j, out_s
    ):
        n = words.shape[0]
        for i in prange(n):
            _row_join(
                i, words, pops, post_indptr, post_idx, rb_indptr, rb_idx, tau,
                True, out_j, out_s, starts[i],
            )

    @njit(cache=True, parallel=True)
    def _join_dense(words, pops, starts, out_j, out_s):
        n, w = words.shape
        for i in prange(n):
            base = starts[i]
            fill = 0
            for j in range(i + 1, n):
                m = _intersection(words[i], words[j], w)
                union = pops[i] + pops[j] - m
                sim = m / union if union > 0 else 0.0
                out_j[base + fill] = j
                out_s[base + fill] = sim
                fill += 1

    @njit(cache=True, parallel=True)
    def _topk_nb(q_words, q_pops, r_words, r_pops, tau, k, self_map, out_j, out_s, counts):
        nq, w = q_words.shape
        nr = r_words.shape[0]
        for q in prange(nq):
            best_j = np.full(k, np.int64(-1))
            best_s = np.full(k, -1.0)
            used = 0
            for j in range(nr):
                if j == self_map[q]:
                    continue
                pq, pj = q_pops[q], r_pops[j]
                if pq == 0 and pj == 0:
                    sim = 0.0
                else:
                    small = min(pq, pj)
                    big = max(pq, pj)
                    if big > 0 and small / big < tau:
                        continue
                    m = _intersection(q_words[q], r_words[j], w)
                    union = pq + pj - m
                    sim = m / union if union > 0 else 0.0
                if sim < tau:
                    continue
                # Insert keeping (sim desc, index asc) order.
                if used == k and (
                    sim < best_s[used - 1]
                    or (sim == best_s[used - 1] and j > best_j[used - 1])
                ):
                    continue
                pos = used if used < k else k - 1
                while pos > 0 and (
                    sim > best_s[pos - 1]
                    or (sim == best_s[pos - 1] and j < best_j[pos - 1])
                ):
                    if pos < k:
                        best_s[pos] = best_s[pos - 1]
                        best_j[pos] = best_j[pos - 1]
                    pos -= 1
                if pos < k:
                    best_s[pos] = sim
                    best_j[pos] = j
                if used < k:
                    used += 1
            counts[q] = used
            for t in range(used):
                out_j[q * k + t] = best_j[t]
                out_s[q * k + t] = best_s[t]

    @njit(cache=True, parallel=True)
    def _max_sim_nb(q_words, q_pops, r_words, r_pops, self_map, out):
        nq, w = q_words.shape
        nr = r_words.shape[0]
        for q in prange(nq):
            best = 0.0
            for j in range(nr):
                if j == self_map[q]:
                    continue
                m = _intersection(q_words[q], r_words[j], w)
                union = q_pops[q] + r_pops[j] - m
                sim = m / union if union > 0 else 0.0
                if sim > best:
                    best = sim
            out[q] = best


# ---------------------------------------------------------------------------
# Public dispatchers
# ---------------------------------------------------------------------------


def _check_matrix(words: np.ndarray, pops: np.ndarray) -> None:
    if words.ndim != 2 or words.dtype != np.uint64:
        raise ValueError("words must be a 2-D uint64 matrix")
    if pops.shape != (words.shape[0],):
        raise ValueError("pops length must match the number of rows")


def pair_join(words: np.ndarray, pops: np.ndarray, tau: float):
    """All row pairs (i < j) with Tanimoto >= tau, ordered by (i, j).

    Returns (i, j, sim) arrays. tau <= 0 enumerates every pair,
    including bit-disjoint ones (their similarity is 0).
    """
    _check_matrix(words, pops)
    n = words.shape[0]
    if n < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.float64)
    if not NUMBA_ENABLED:
        return _pair_join_numpy(words, pops, float(tau))
    if tau <= 0.0:
        counts = np.arange(n - 1, -1, -1, dtype=np.int64)
        starts = np.zeros(n, dtype=np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        total = int(counts.sum())
        out_j = np.empty(total, dtype=np.int64)
        out_s = np.empty(total, dtype=np.float64)
        _join_dense(words, pops, starts, out_j, out_s)
        out_i = np.repeat(np.arange(n, dtype=np.int64), counts)
        return out_i, out_j, out_s
    post_indptr, post_idx = _postings_csr(words)
    rb_indptr, rb_idx = _row_bits_csr(words)
    counts = _join_counts(words, pops, post_indptr, post_idx, rb_indptr, rb_idx, float(tau))
    starts = np.zeros(n, dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    total = int(counts.sum())
    out_j = np.empty(total, dtype=np.int64)
    out_s = np.empty(total, dtype=np.float64)
    _join_fill(
        words, pops, post_indptr, post_idx, rb_indptr, rb_idx, float(tau),
        starts, out_j, out_s,
    )
    out_i = np.repeat(np.arange(n, dtype=np.int64), counts)
    return out_i, out_j, out_s


def topk_neighbors(q_words, q_pops, r_words, r_pops, tau: float, k: int, self_map):
    """Per query, the k most similar reference rows with sim >= tau.

    Ties broken toward the smaller reference index. self_map[q] names
    a reference row to skip (the query itself), -1 for none. Returns
    (indptr, ref index, sim) in CSR layout; each query's neighbors are
    sorted by similarity descending then index ascending.
    """
    _check_matrix(q_words, q_pops)
    _check_matrix(r_words, r_pops)
    if q_words.shape[1] != r_words.shape[1]:
        raise ValueError("query and reference word widths differ")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    self_map = np.asarray(self_map, dtype=np.int64)
    nq = q_words.shape[0]
    if nq == 0 or r_words.shape[0] == 0:
        return np.zeros(nq + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    if not NUMBA_ENABLED:
        return _topk_numpy(q_words, q_pops, r_words, r_pops, float(tau), int(k), self_map)
    out_j = np.full(nq * k, -1, dtype=np.int64)
    out_s = np.zeros(nq * k, dtype=np.float64)
    counts = np.zeros(nq, dtype=np.int64)
    _topk_nb(q_words, q_pops, r_words, r_pops, float(tau), int(k), self_map,
             out_j, out_s, counts)
    indptr = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    keep = out_j >= 0
    return indptr, out_j[keep], out_s[keep]


def max_similarity(q_words, q_pops, r_words, r_pops, self_map):
    """Per query, the maximum Tanimoto to any reference row (0 if none)."""
    _check_matrix(q_words, q_pops)
    _check_matrix(r_words, r_pops)
    if q_words.shape[1] != r_words.shape[1]:
        raise ValueError("query and reference word widths differ")
    self_map = np.asarray(self_map, dtype=np.int64)
    nq = q_words.shape[0]
    if nq == 0 or r_words.shape[0] == 0:
        return np.zeros(nq, dtype=np.float64)
    if not NUMBA_ENABLED:
        return _max_sim_numpy(q_words, q_pops, r_words, r_pops, self_map)
    out = np.zeros(nq, dtype=np.float64)
    _max_sim_nb(q_words, q_pops, r_words, r_pops, self_map, out)
    return out


def warmup() -> None:
    """Trigger JIT compilation on tiny inputs so later calls run at full speed."""
    words = np.array([[1], [3], [4]], dtype=np.uint64)
    pops = np.array([1, 2, 1], dtype=np.int64)
    pair_join(words, pops, 0.2)
    pair_join(words, pops, 0.0)
    self_map = np.arange(3, dtype=np.int64)
    topk_neighbors(words, pops, words, pops, 0.1, 2, self_map)
    max_similarity(words, pops, words, pops, self_map)
