"""Similarity-thresholded candidate pairs, gap percentiles, and cliff scores.

Pairs are generated with an inverted-index similarity join (exact,
pruned; see _kernels), ordered canonically by (i, j) under
lexicographic id order. The property-gap percentile r uses midranks
so it is permutation-invariant and deterministic under ties; the
cliff score s^alpha * r^beta then ranks pairs jointly by structural
similarity and gap size, and the raw cliff-candidate set keeps the
top quantile of scores with threshold ties included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import InsufficientDataError


@dataclass(frozen=True)
class CandidatePair:
    """Unordered molecule pair (i < j by id) with similarity and gap fields.

    r (global gap percentile) and c (cliff score) start unset and are
    populated by rank_percentile / score_pairs.
    """

    i: str
    j: str
    s: float
    dy: float
    r: float | None = None
    c: float | None = None

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError(f"pair ids must satisfy i < j, got ({self.i!r}, {self.j!r})")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"similarity {self.s} outside [0,1]")
        if self.dy < 0.0:
            raise ValueError(f"gap {self.dy} negative")
        if self.r is not None and not 0.0 <= self.r <= 1.0:
            raise ValueError(f"percentile {self.r} outside [0,1]")
        if self.c is not None and self.c < 0.0:
            raise ValueError(f"cliff score {self.c} negative")


@dataclass(frozen=True)
class PairGenConfig:
    tau: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    tau_c_quantile: float = 0.02
    per_molecule_cap: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1], got {self.tau}")
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ValueError(f"alpha and beta must be > 0, got {self.alpha}, {self.beta}")
        if not 0.0 < self.tau_c_quantile < 1.0:
            raise ValueError(f"tau_c_quantile must be in (0,1), got {self.tau_c_quantile}")
        if self.per_molecule_cap is not None and self.per_molecule_cap < 1:
            raise ValueError(f"per_molecule_cap must be >= 1, got {self.per_molecule_cap}")


def generate_pairs(dataset, config: PairGenConfig) -> list[CandidatePair]:
    """All unordered pairs with similarity >= config.tau, sorted by (i, j).

    Requires every molecule to carry a fingerprint. With
    per_molecule_cap set, each molecule keeps its cap
    highest-similarity partners (ties by partner id) and a pair
    survives if either endpoint keeps it.
    """
    if len(dataset) < 2:
        raise InsufficientDataError(f"need at least 2 molecules, got {len(dataset)}")
    ids = sorted(dataset.ids)
    index = {mol_id: pos for pos, mol_id in enumerate(dataset.ids)}
    order = [index[mol_id] for mol_id in ids]
    words, pops = dataset.packed(order)
    y = dataset.targets()[order]
    ii, jj, ss = _kernels.pair_join(words, pops, config.tau)
    dy = np.abs(y[ii] - y[jj])
    if config.per_molecule_cap is not None:
        keep = _apply_cap(len(ids), ii, jj, ss, config.per_molecule_cap)
        ii, jj, ss, dy = ii[keep], jj[keep], ss[keep], dy[keep]
    return [
        CandidatePair(ids[int(a)], ids[int(b)], float(s), float(d))
        for a, b, s, d in zip(ii, jj, ss, dy)
    ]


def _apply_cap(n: int, ii, jj, ss, cap: int) -> np.ndarray:
    """Mark pairs kept by at least one endpoint's top-cap partner list."""
    incident: list[list[int]] = [[] for _ in range(n)]
    for p in range(len(ii)):
        incident[ii[p]].append(p)
        incident[jj[p]].append(p)
    keep = np.zeros(len(ii), dtype=bool)
    for v in range(n):
        ranked = sorted(
            incident[v],
            key=lambda p: (-ss[p], jj[p] if ii[p] == v else ii[p]),
        )
        for p in ranked[:cap]:
            keep[p] = True
    return keep


def rank_percentile(pairs: list[CandidatePair]) -> list[CandidatePair]:
    """Populate r = (count of strictly smaller gaps + half the tied count) / total."""
    if not pairs:
        raise InsufficientDataError("cannot rank an empty pair list")
    dy = np.array([p.dy for p in pairs], dtype=np.float64)
    sorted_dy = np.sort(dy)
    lt = np.searchsorted(sorted_dy, dy, side="left")
    le = np.searchsorted(sorted_dy, dy, side="right")
    r = (lt + 0.5 * (le - lt)) / len(pairs)
    return [replace(p, r=float(rv)) for p, rv in zip(pairs, r)]


def cliff_score(s: float, r: float, alpha: float, beta: float) -> float:
    """Joint score s^alpha * r^beta over similarity and gap percentile."""
    if not 0.0 <= s <= 1.0 or not 0.0 <= r <= 1.0:
        raise ValueError(f"s and r must be in [0,1], got s={s} r={r}")
    return (s**alpha) * (r**beta)


def score_pairs(pairs: list[CandidatePair], alpha: float, beta: float) -> list[CandidatePair]:
    """Populate c on every pair; requires r populated."""
    out = []
    for p in pairs:
        if p.r is None:
            raise ValueError(f"pair ({p.i},{p.j}) has no percentile; run rank_percentile first")
        out.append(replace(p, c=cliff_score(p.s, p.r, alpha, beta)))
    return out


def threshold_raw_cliffs(
    pairs: list[CandidatePair], tau_c_quantile: float
) -> tuple[list[CandidatePair], float | None]:
    """Keep the top tau_c_quantile of pairs by cliff score, ties included.

    The threshold is the k-th largest score with k = ceil(quantile *
    count); every pair scoring >= the threshold survives, so ties at
    the boundary are never split. Returns (kept pairs in input order,
    threshold), or ([], None) for empty input.
    """
    if not pairs:
        return [], None
    scores = []
    for p in pairs:
        if p.c is None:
            raise ValueError(f"pair ({p.i},{p.j}) has no cliff score; run score_pairs first")
        scores.append(p.c)
    k = max(1, math.ceil(tau_c_quantile * len(pairs)))
    tau_c = sorted(scores, reverse=True)[k - 1]
    kept = [p for p in pairs if p.c >= tau_c]
    return kept, float(tau_c)


def write_pair_dump(pairs: list[CandidatePair], path: str) -> None:
    """Audit dump, one pair per line: i, j, s, dy, r, c (tab-separated)."""

    def text(v: float | None) -> str:
        return "NA" if v is None else repr(v)

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("i\tj\ts\tdy\tr\tc\n")
        for p in pairs:
            handle.write(f"{p.i}\t{p.j}\t{text(p.s)}\t{text(p.dy)}\t{text(p.r)}\t{text(p.c)}\n")
