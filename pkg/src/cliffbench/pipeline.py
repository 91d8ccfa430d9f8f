"""End-to-end stage wiring shared by the CLI and the test suite.

run_split: fingerprints -> candidate pairs -> cliff scores -> capped
graph -> constrained partition -> severity table -> artifact.
evaluate / shift_report: model-dependent and model-free diagnostics
over a dataset plus artifact.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels, cliffgraph, diagnostics, pairgen, severity, trainer
from .dataio import Dataset, SplitArtifact, validate_artifact
from .errors import SchemaError
from .fingerprint import tanimoto
from .severity import SeverityConfig, SeverityRecord


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline; stored verbatim in artifact meta."""

    tau: float = 0.3
    alpha: float = 1.0
    beta: float = 1.0
    tau_c_quantile: float = 0.02
    per_molecule_cap: int | None = None
    degree_cap: int = 32
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    k: int = 64
    m: int = 8
    norm_percentile: float = 0.95
    fp_radius: int = 2
    fp_width: int = 2048
    lambda_base: float = 0.1
    gamma: float = 4.0
    s_min: float = 0.25
    s_max: float = 4.0
    ema_alpha: float = 0.7
    epsilon: float = 1e-8
    seed: int = 0

    def pairgen_config(self) -> pairgen.PairGenConfig:
        return pairgen.PairGenConfig(
            self.tau, self.alpha, self.beta, self.tau_c_quantile, self.per_molecule_cap
        )

    def severity_config(self) -> SeverityConfig:
        return SeverityConfig(self.tau, self.k, self.m, self.norm_percentile)

    def controller_config(self) -> trainer.ControllerConfig:
        return trainer.ControllerConfig(
            self.lambda_base, self.gamma, self.s_min, self.s_max, self.ema_alpha, self.epsilon
        )


def _id_sorted_packed(dataset: Dataset, ids: list[str]):
    index = {mol_id: pos for pos, mol_id in enumerate(dataset.ids)}
    order = [index[mol_id] for mol_id in ids]
    words, pops = dataset.packed(order)
    targets = dataset.targets()[order]
    return words, pops, targets


def severity_table(
    dataset: Dataset, label: dict[str, str], config: SeverityConfig
) -> tuple[dict[str, SeverityRecord], float | None]:
    """Severity records for every molecule, scored against the training set.

    Returns (records, q_norm). q_norm is None when no training
    molecule collects any neighbor; scores are then all zero but
    exposures (which need no normalizer) are still real.
    """
    all_ids = sorted(dataset.ids)
    train_ids = [mol_id for mol_id in all_ids if label[mol_id] == "train"]
    if not train_ids:
        raise SchemaError("severity table needs a nonempty training split")
    t_words, t_pops, t_y = _id_sorted_packed(dataset, train_ids)
    q_words, q_pops, q_y = _id_sorted_packed(dataset, all_ids)
    train_pos = {mol_id: row for row, mol_id in enumerate(train_ids)}
    self_map = np.array([train_pos.get(mol_id, -1) for mol_id in all_ids], dtype=np.int64)

    neighbor_lists = severity.collect_neighbors(
        q_words, q_pops, t_words, t_pops, config.tau, config.k, self_map
    )
    pairs_per_mol: list[list[tuple[float, float]]] = []
    collected_train_dy: list[float] = []
    for row, mol_id in enumerate(all_ids):
        entries = [
            (sim, abs(float(q_y[row]) - float(t_y[t_row])))
            for t_row, sim in neighbor_lists[row]
        ]
        pairs_per_mol.append(entries)
        if label[mol_id] == "train":
            collected_train_dy.extend(dy for _, dy in entries)

    q_norm: float | None
    if collected_train_dy:
        q_norm = severity.compute_q_norm(collected_train_dy, config.norm_percentile)
    else:
        q_norm = None

    scores = {}
    exposures = {}
    for mol_id, entries in zip(all_ids, pairs_per_mol):
        exposures[mol_id] = severity.train_exposure_score(entries)
        if q_norm is None:
            scores[mol_id] = 0.0
        else:
            scores[mol_id] = severity.severity_score(entries, config.m, q_norm)

    groups: dict[str, str] = {}
    for split in ("train", "val", "test"):
        members = [mol_id for mol_id in all_ids if label[mol_id] == split]
        groups.update(
            severity.quartile_groups_by_exposure(members, [exposures[m] for m in members])
        )

    records = {
        mol_id: SeverityRecord(
            scores[mol_id],
            exposures[mol_id],
            groups[mol_id],
            len(pairs_per_mol[all_ids.index(mol_id)]),
        )
        for mol_id in all_ids
    }
    return records, q_norm


def run_split(dataset: Dataset, config: RunConfig) -> SplitArtifact:
    """Produce a validated SplitArtifact for a dataset under one config."""
    ds = dataset.with_fingerprints(config.fp_radius, config.fp_width)
    pairs = pairgen.generate_pairs(ds, config.pairgen_config())
    if pairs:
        pairs = pairgen.rank_percentile(pairs)
        pairs = pairgen.score_pairs(pairs, config.alpha, config.beta)
        raw, tau_c = pairgen.threshold_raw_cliffs(pairs, config.tau_c_quantile)
    else:
        raw, tau_c = [], None
    capped = cliffgraph.degree_capped_select(cliffgraph.pairs_to_edges(raw), config.degree_cap)
    graph = cliffgraph.CliffGraph(cliffgraph.assign_pair_quartiles(capped))
    fractions = (config.train_frac, config.val_frac, config.test_frac)
    assignment = cliffgraph.assemble_split(ds, graph, fractions, config.seed)

    records, q_norm = severity_table(ds, assignment.label, config.severity_config())

    counts = {lab: 0 for lab in ("train", "val", "test")}
    for lab in assignment.label.values():
        counts[lab] += 1
    meta = {
        "config": asdict(config),
        "seed": config.seed,
        "coverage": assignment.coverage,
        "counts": counts,
        "tau_c": tau_c,
        "q_norm": q_norm,
        "n_candidate_pairs": len(pairs),
        "n_raw_cliff_pairs": len(raw),
        "graph_nodes": len(graph.nodes),
        "graph_edges": len(graph.edges),
    }
    artifact = SplitArtifact(assignment.label, graph.edges, records, meta)
    validate_artifact(artifact)
    return artifact


def _edge_similarities(dataset: Dataset, edges) -> list[float]:
    return [
        tanimoto(dataset.by_id(i).fingerprint, dataset.by_id(j).fingerprint)
        for i, j, *_ in edges
    ]


def quartile_edge_table(dataset: Dataset, artifact: SplitArtifact) -> dict:
    """Per-quartile edge counts with mean gap and mean similarity."""
    sims = _edge_similarities(dataset, artifact.cliff_edges)
    table: dict[str, dict] = {}
    for q in (1, 2, 3, 4):
        rows = [
            (abs(dataset.by_id(i).target - dataset.by_id(j).target), sims[t], c)
            for t, (i, j, c, eq) in enumerate(artifact.cliff_edges)
            if eq == q
        ]
        if rows:
            table[f"Q{q}"] = {
                "n_edges": len(rows),
                "mean_dy": float(np.mean([r[0] for r in rows])),
                "mean_s": float(np.mean([r[1] for r in rows])),
                "mean_cliff_score": float(np.mean([r[2] for r in rows])),
            }
        else:
            table[f"Q{q}"] = {
                "n_edges": 0, "mean_dy": None, "mean_s": None, "mean_cliff_score": None,
            }
    return table


def _split_targets(dataset: Dataset, artifact: SplitArtifact) -> dict[str, np.ndarray]:
    out = {}
    for split in ("train", "val", "test"):
        ids = sorted(m for m, lab in artifact.assignment.items() if lab == split)
        out[split] = np.array([dataset.by_id(m).target for m in ids], dtype=np.float64)
    return out


def _split_shift(dataset: Dataset, artifact: SplitArtifact) -> tuple[dict, dict]:
    ys = _split_targets(dataset, artifact)
    w1 = {}
    kde = {}
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        key = f"{a}_vs_{b}"
        if ys[a].size and ys[b].size:
            w1[key] = diagnostics.wasserstein1_normalized(ys[a], ys[b])
            kde[key] = diagnostics.kde_overlap(ys[a], ys[b])
        else:
            w1[key] = None
            kde[key] = None
    return w1, kde


def _count_test_test(artifact: SplitArtifact) -> int:
    return sum(
        1
        for i, j, _, _ in artifact.cliff_edges
        if artifact.assignment[i] == "test" and artifact.assignment[j] == "test"
    )


def evaluate(
    dataset: Dataset,
    artifact: SplitArtifact,
    predictor,
    tau: float,
    grouping: str = "exposure",
) -> diagnostics.EvalReport:
    """Severity-conditioned test-set evaluation of a trained predictor.

    grouping selects how test molecules map to Q0..Q4: "exposure"
    (training-neighbor exposure quartiles, the default) or "edge"
    (max quartile of incident train-side cliff edges).
    """
    if grouping not in ("exposure", "edge"):
        raise SchemaError(f"unknown grouping {grouping!r}")
    ds = dataset.with_fingerprints(
        artifact.meta["config"]["fp_radius"], artifact.meta["config"]["fp_width"]
    ) if dataset.width is None else dataset
    test_ids = sorted(m for m, lab in artifact.assignment.items() if lab == "test")
    if not test_ids:
        raise SchemaError("artifact assigns no molecules to test")
    words, pops, targets = _id_sorted_packed(ds, test_ids)
    preds = predictor.predict(trainer.unpack_features(words, ds.width))
    errors = np.abs(preds - targets)

    if grouping == "edge":
        edge_groups = cliffgraph.induce_molecule_severity(
            artifact.assignment, artifact.cliff_edges
        )
        groups = np.array([edge_groups[m] for m in test_ids])
    else:
        missing = [m for m in test_ids if m not in artifact.severity]
        if missing:
            warnings.warn(
                f"{len(missing)} test molecules have no severity record; "
                "reporting them as Q0",
                RuntimeWarning,
                stacklevel=2,
            )
        groups = np.array(
            [
                artifact.severity[m].group if m in artifact.severity else "Q0"
                for m in test_ids
            ]
        )

    per_group = diagnostics.quartile_mae(errors, groups)
    scores = np.array(
        [artifact.severity[m].score if m in artifact.severity else 0.0 for m in test_ids]
    )
    pair = diagnostics.pair_diagnostics(preds, targets, words, pops, tau)

    train_ids = sorted(m for m, lab in artifact.assignment.items() if lab == "train")
    t_words, t_pops, _ = _id_sorted_packed(ds, train_ids)
    w1, kde = _split_shift(ds, artifact)

    return diagnostics.EvalReport(
        overall_mae=float(errors.mean()),
        per_group_mae=per_group,
        per_group_count=diagnostics.group_counts(groups),
        severity_ratio=diagnostics.severity_ratio(per_group),
        pcc=diagnostics.pearson(preds, targets),
        spearman_e_s=diagnostics.spearman(errors, scores),
        pair_mae=pair.pair_mae,
        pair_err_over_mae=pair.pair_err_over_mae,
        pair_sign_agreement=pair.pair_sign_agreement,
        n_pairs=pair.n_pairs,
        w1_over_sigma=w1,
        kde_overlap=kde,
        nearest_train_similarity=diagnostics.nearest_train_similarity(
            words, pops, t_words, t_pops
        ),
    )


def shift_report(dataset: Dataset, artifact: SplitArtifact) -> dict:
    """Model-free split diagnostics: distribution shift, similarity, quartiles."""
    ds = dataset.with_fingerprints(
        artifact.meta["config"]["fp_radius"], artifact.meta["config"]["fp_width"]
    ) if dataset.width is None else dataset
    w1, kde = _split_shift(ds, artifact)
    test_ids = sorted(m for m, lab in artifact.assignment.items() if lab == "test")
    train_ids = sorted(m for m, lab in artifact.assignment.items() if lab == "train")
    out = {
        "counts": artifact.meta["counts"],
        "coverage": artifact.meta["coverage"],
        "test_test_edges": _count_test_test(artifact),
        "graph_nodes": artifact.meta.get("graph_nodes"),
        "graph_edges": artifact.meta.get("graph_edges"),
        "w1_over_sigma": w1,
        "kde_overlap": kde,
        "quartile_edges": quartile_edge_table(ds, artifact),
    }
    if test_ids and train_ids:
        q_words, q_pops, _ = _id_sorted_packed(ds, test_ids)
        t_words, t_pops, _ = _id_sorted_packed(ds, train_ids)
        out["nearest_train_similarity"] = diagnostics.nearest_train_similarity(
            q_words, q_pops, t_words, t_pops
        )
    else:
        out["nearest_train_similarity"] = None
    return out


def write_severity_dump(artifact: SplitArtifact, path: str) -> None:
    """Audit dump: id, severity score, exposure, group per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("id\tscore\texposure\tgroup\tneighbor_count\n")
        for mol_id in sorted(artifact.severity):
            rec = artifact.severity[mol_id]
            handle.write(
                f"{mol_id}\t{rec.score!r}\t{rec.exposure!r}\t{rec.group}\t{rec.neighbor_count}\n"
            )
