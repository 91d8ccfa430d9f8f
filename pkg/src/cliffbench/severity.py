"""Offline per-molecule severity scores and train-exposure grouping.

Every molecule, whatever split it lands in, is scored against the
training set only: its similarity-thresholded training neighbors are
collected, each neighbor contributes a strength similarity * |target
gap|, and the molecule's severity is the average of its top-M
normalized strengths. The normalizer is a fixed percentile of all
strengths' target gaps collected over the training set, so rescaling
the percentile rescales every score by one global constant and never
reorders molecules.

The exposure score is the maximum unnormalized strength; quartile
groups over a molecule set are cut from exposure ranks, with zero
exposure pinned to the special group Q0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateNormalizationError

GROUPS = ("Q0", "Q1", "Q2", "Q3", "Q4")


@dataclass(frozen=True)
class SeverityRecord:
    """Per-molecule severity: normalized score, raw exposure, group label."""

    score: float
    exposure: float
    group: str
    neighbor_count: int


@dataclass(frozen=True)
class SeverityConfig:
    tau: float = 0.3
    k: int = 64
    m: int = 8
    norm_percentile: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1], got {self.tau}")
        if not 1 <= self.m <= self.k:
            raise ValueError(f"need 1 <= m <= k, got m={self.m} k={self.k}")
        if not 0.0 < self.norm_percentile <= 1.0:
            raise ValueError(
                f"norm_percentile must be in (0,1], got {self.norm_percentile}"
            )


def collect_neighbors(
    query_words: np.ndarray,
    query_pops: np.ndarray,
    train_words: np.ndarray,
    train_pops: np.ndarray,
    tau: float,
    k: int,
    self_map: np.ndarray,
) -> list[list[tuple[int, float]]]:
    """Top-k most similar training rows per query, similarity >= tau.

    self_map[q] gives the query's own row inside the training matrix
    (-1 when the query is not a training molecule). Returns, per
    query, (train row index, similarity) sorted by similarity
    descending then index ascending.
    """
    indptr, idx, sim = _kernels.topk_neighbors(
        query_words, query_pops, train_words, train_pops, tau, k, self_map
    )
    out = []
    for q in range(len(indptr) - 1):
        lo, hi = indptr[q], indptr[q + 1]
        out.append([(int(idx[t]), float(sim[t])) for t in range(lo, hi)])
    return out


def compute_q_norm(dy_values, norm_percentile: float) -> float:
    """Empirical percentile (linear interpolation) of collected target gaps.

    Raises DegenerateNormalizationError when every gap is zero, since
    the normalizer would otherwise divide scores by zero.
    """
    values = np.asarray(list(dy_values), dtype=np.float64)
    if values.size == 0:
        raise DegenerateNormalizationError("no collected target gaps to normalize by")
    q = float(np.quantile(values, norm_percentile, method="linear"))
    if q <= 0.0:
        raise DegenerateNormalizationError(
            "all collected target gaps are zero; severity scores are undefined"
        )
    return q


def severity_score(neighbors: list[tuple[float, float]], m: int, q_norm: float) -> float:
    """Average of the top-m neighbor strengths, normalized by q_norm.

    neighbors holds (similarity, target gap) pairs already sorted the
    way collect_neighbors returns them; strength = similarity * gap.
    Fewer than m neighbors average over the available count. No
    neighbors → 0.
    """
    if q_norm <= 0.0:
        raise DegenerateNormalizationError(f"q_norm must be positive, got {q_norm}")
    if not neighbors:
        return 0.0
    strengths = sorted((s * dy for s, dy in neighbors), reverse=True)[:m]
    return float(sum(strengths) / (len(strengths) * q_norm))


def train_exposure_score(neighbors: list[tuple[float, float]]) -> float:
    """Maximum neighbor strength similarity * gap; 0 with no neighbors."""
    if not neighbors:
        return 0.0
    return float(max(s * dy for s, dy in neighbors))


def quartile_groups_by_exposure(ids: list[str], exposures: list[float]) -> dict[str, str]:
    """Cut a molecule set into exposure quartiles Q1..Q4, Q0 for zero exposure.

    Molecules with exposure 0 are pinned to Q0 and excluded from the
    ranking; the rest are ranked ascending by (exposure, id) and cut
    into four equal-size groups, so the highest-exposure quarter is Q4.
    """
    if len(ids) != len(exposures):
        raise ValueError("ids and exposures must have equal length")
    groups = {mol_id: "Q0" for mol_id, d in zip(ids, exposures) if d <= 0.0}
    ranked = sorted((d, mol_id) for mol_id, d in zip(ids, exposures) if d > 0.0)
    n = len(ranked)
    for rank, (_, mol_id) in enumerate(ranked):
        groups[mol_id] = f"Q{min(4, (4 * rank) // n + 1)}"
    return groups


def q_alpha_sensitivity(
    base_scores: dict[str, float],
    collected_dy,
    base_percentile: float,
    sweep: list[float],
) -> list[dict]:
    """Rescaling diagnostics for the normalization percentile.

    For each swept percentile, reports the global scale factor
    (base normalizer / swept normalizer), the Spearman correlation of
    the rescaled scores against the base scores, and the top-decile
    set overlap. Scores change only by the global factor, so the
    correlation is exactly 1 and the overlap exactly 100%.
    """
    base_norm = compute_q_norm(collected_dy, base_percentile)
    ids = sorted(base_scores)
    base = np.array([base_scores[i] for i in ids], dtype=np.float64)
    rows = []
    for alpha in sweep:
        norm = compute_q_norm(collected_dy, alpha)
        factor = base_norm / norm
        swept = base * factor
        rho = _spearman_ties(base, swept)
        overlap = _top_decile_overlap(ids, base, swept)
        rows.append(
            {
                "percentile": float(alpha),
                "scale_factor": float(factor),
                "spearman": rho,
                "top_decile_overlap": overlap,
            }
        )
    return rows


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _spearman_ties(a: np.ndarray, b: np.ndarray) -> float:
    ra, rb = _midranks(a), _midranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = float(np.sqrt((da * da).sum() * (db * db).sum()))
    if denom == 0.0:
        # Constant ranks on both sides (all scores tied): identical orderings.
        return 1.0
    return float((da * db).sum() / denom)


def _top_decile_overlap(ids: list[str], base: np.ndarray, swept: np.ndarray) -> float:
    n = len(ids)
    k = max(1, -(-n // 10))

    def top_set(scores: np.ndarray) -> set[str]:
        order = sorted(range(n), key=lambda t: (-scores[t], ids[t]))
        return {ids[t] for t in order[:k]}

    a, b = top_set(base), top_set(swept)
    return len(a & b) / k
