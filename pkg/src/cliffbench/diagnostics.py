"""Severity-conditioned evaluation and split-shift diagnostics.

Central conventions: anything undefined (empty group, zero
denominator, constant input) is reported as an explicit undefined
marker (None in memory, NA / null on disk), never as a silent 0; all
reductions run in fixed order so reports are byte-deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import InsufficientDataError
from .severity import GROUPS, _midranks


def quartile_mae(errors: np.ndarray, groups: np.ndarray) -> dict[str, float | None]:
    """Mean absolute error per severity group; empty group → None."""
    errors = np.asarray(errors, dtype=np.float64)
    groups = np.asarray(groups)
    if errors.shape != groups.shape:
        raise ValueError("errors and groups must have equal length")
    out: dict[str, float | None] = {}
    for g in GROUPS:
        mask = groups == g
        out[g] = float(errors[mask].mean()) if mask.any() else None
    return out


def group_counts(groups: np.ndarray) -> dict[str, int]:
    groups = np.asarray(groups)
    return {g: int((groups == g).sum()) for g in GROUPS}


def severity_ratio(per_group: dict[str, float | None]) -> float | None:
    """Q4 MAE over Q1 MAE; None when either is missing or Q1 is zero."""
    q1, q4 = per_group.get("Q1"), per_group.get("Q4")
    if q1 is None or q4 is None or q1 == 0.0:
        return None
    return q4 / q1


def pearson(a, b) -> float | None:
    """Product-moment correlation; None for < 3 points or constant input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 3 or a.shape != b.shape:
        return None
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return None
    return float((da * db).sum() / denom)


def spearman(a, b) -> float | None:
    """Rank correlation with midranks for ties; None if undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 3 or a.shape != b.shape:
        return None
    return pearson(_midranks(a), _midranks(b))


@dataclass(frozen=True)
class PairDiagnostics:
    pair_mae: float | None
    pair_err_over_mae: float | None
    pair_sign_agreement: float | None
    n_pairs: int


def pair_diagnostics(preds, targets, words, pops, tau: float) -> PairDiagnostics:
    """Pairwise delta fidelity over similarity-qualified pairs of one split.

    Pairs are all (i, j) with Tanimoto >= tau among the given rows.
    pair_mae averages |predicted delta - true delta|; sign agreement
    counts only pairs whose true targets actually differ.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    ii, jj, _ = _kernels.pair_join(words, pops, tau)
    n_pairs = int(len(ii))
    if n_pairs == 0:
        return PairDiagnostics(None, None, None, 0)
    d_pred = preds[ii] - preds[jj]
    d_true = targets[ii] - targets[jj]
    pair_mae = float(np.abs(d_pred - d_true).mean())
    overall = float(np.abs(preds - targets).mean())
    ratio = pair_mae / overall if overall > 0.0 else None
    moving = d_true != 0.0
    if moving.any():
        agree = np.sign(d_pred[moving]) == np.sign(d_true[moving])
        sign_rate = float(agree.mean())
    else:
        sign_rate = None
    return PairDiagnostics(pair_mae, ratio, sign_rate, n_pairs)


def wasserstein1(values_a, values_b) -> float:
    """1-D W1 via matched empirical quantiles on a common grid.

    The grid has max(|a|, |b|) points spanning probability 0..1 with
    linear interpolation, so equal-size samples reduce to the exact
    mean |sorted_a - sorted_b| matching.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("W1 needs two nonempty samples")
    m = max(a.size, b.size)
    grid = np.linspace(0.0, 1.0, m) if m > 1 else np.array([0.5])
    qa = np.quantile(a, grid, method="linear")
    qb = np.quantile(b, grid, method="linear")
    return float(np.abs(qa - qb).mean())


def wasserstein1_normalized(values_a, values_b) -> float | None:
    """W1 divided by the pooled standard deviation; None when that is zero."""
    pooled = np.concatenate(
        [np.asarray(values_a, dtype=np.float64), np.asarray(values_b, dtype=np.float64)]
    )
    sigma = float(pooled.std())
    if sigma == 0.0:
        return None
    return wasserstein1(values_a, values_b) / sigma


def _silverman_bandwidth(x: np.ndarray) -> float:
    sd = float(x.std(ddof=1))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def kde_overlap(values_a, values_b, grid_points: int = 512) -> float | None:
    """Overlap coefficient of two Gaussian KDEs; None for degenerate samples.

    Silverman bandwidth per sample; the evaluation grid spans both
    ranges plus three bandwidths of margin. Integrates min(f_a, f_b)
    with the trapezoid rule, so identical samples score ~1.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if np.unique(a).size < 2 or np.unique(b).size < 2:
        return None
    ha, hb = _silverman_bandwidth(a), _silverman_bandwidth(b)
    pad = 3.0 * max(ha, hb)
    lo = min(a.min(), b.min()) - pad
    hi = max(a.max(), b.max()) + pad
    grid = np.linspace(lo, hi, grid_points)

    def density(x: np.ndarray, h: float) -> np.ndarray:
        z = (grid[:, None] - x[None, :]) / h
        return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2.0 * math.pi))

    overlap = float(np.trapezoid(np.minimum(density(a, ha), density(b, hb)), grid))
    return min(1.0, max(0.0, overlap))


def nearest_train_similarity(test_words, test_pops, train_words, train_pops) -> dict:
    """Summary of each test molecule's max Tanimoto to the training set."""
    if train_words.shape[0] == 0:
        raise InsufficientDataError("nearest-train similarity needs a nonempty training set")
    if test_words.shape[0] == 0:
        raise InsufficientDataError("nearest-train similarity needs a nonempty test set")
    self_map = np.full(test_words.shape[0], -1, dtype=np.int64)
    best = _kernels.max_similarity(test_words, test_pops, train_words, train_pops, self_map)
    q1, med, q3 = np.percentile(best, [25.0, 50.0, 75.0])
    return {
        "mean": float(best.mean()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "frac_above_half": float((best > 0.5).mean()),
    }


_SPLIT_PAIRS = ("train_vs_val", "train_vs_test", "val_vs_test")


@dataclass
class EvalReport:
    """Full severity-conditioned evaluation of a trained model on test.

    Correlations: pcc is predictions vs targets, spearman_e_s is
    absolute error vs severity score. w1_over_sigma and kde_overlap
    compare target distributions between splits. None means undefined.
    """

    overall_mae: float | None
    per_group_mae: dict = field(default_factory=dict)
    per_group_count: dict = field(default_factory=dict)
    severity_ratio: float | None = None
    pcc: float | None = None
    spearman_e_s: float | None = None
    pair_mae: float | None = None
    pair_err_over_mae: float | None = None
    pair_sign_agreement: float | None = None
    n_pairs: int = 0
    w1_over_sigma: dict = field(default_factory=dict)
    kde_overlap: dict = field(default_factory=dict)
    nearest_train_similarity: dict = field(default_factory=dict)


def emit_report(report, path: str, fmt: str = "json") -> None:
    """Serialize a report deterministically as JSON or a flat key/value table."""
    blob = asdict(report) if not isinstance(report, dict) else report
    if fmt == "json":
        text = json.dumps(blob, sort_keys=True, indent=2) + "\n"
    elif fmt == "tsv":
        lines = []
        for key, value in sorted(_flatten(blob).items()):
            lines.append(f"{key}\t{_cell(value)}")
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def read_report(path: str) -> EvalReport:
    """Read back a JSON report written by emit_report."""
    with open(path, encoding="utf-8") as handle:
        blob = json.load(handle)
    return EvalReport(**blob)


def _flatten(blob: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in blob.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return repr(value)
    return str(value)
