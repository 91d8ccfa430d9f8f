"""Cliff graph construction and the constrained train/val/test partition.

Edges are the retained high-cliff-score pairs after degree capping;
nodes are exactly the molecules with at least one retained edge. The
partition enforces one hard constraint, no edge may have both
endpoints in test, while maximizing coverage: the fraction of edges
with exactly one endpoint in test. Bipartite components are solved
exactly by two-coloring; non-bipartite components use a greedy
independent set refined by deterministic add/swap local search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleSplitError, InsufficientDataError, SchemaError

Edge = tuple[str, str, float]
QEdge = tuple[str, str, float, int]

LOCAL_SEARCH_SWEEPS = 20


def pairs_to_edges(pairs) -> list[Edge]:
    """Project scored CandidatePairs onto (i, j, cliff score) edge tuples."""
    out = []
    for p in pairs:
        if p.c is None:
            raise ValueError(f"pair ({p.i},{p.j}) has no cliff score")
        out.append((p.i, p.j, p.c))
    return out


def degree_capped_select(raw_edges: list[Edge], cap: int) -> list[Edge]:
    """Greedy edge retention in descending score order under a degree cap.

    Edges are visited by (-score, i, j); an edge survives only if both
    endpoints still have degree < cap. Hubs therefore keep their
    strongest edges and shed the rest.
    """
    if cap < 1:
        raise ValueError(f"degree cap must be >= 1, got {cap}")
    degree: dict[str, int] = {}
    kept = []
    for i, j, c in sorted(raw_edges, key=lambda e: (-e[2], e[0], e[1])):
        if degree.get(i, 0) < cap and degree.get(j, 0) < cap:
            kept.append((i, j, c))
            degree[i] = degree.get(i, 0) + 1
            degree[j] = degree.get(j, 0) + 1
    kept.sort(key=lambda e: (e[0], e[1]))
    return kept


def assign_pair_quartiles(edges: list[Edge]) -> list[QEdge]:
    """Attach severity quartiles 1..4 by ascending score rank.

    Rank ties share a deterministic (score, i, j) ordering; the
    top-score quarter gets 4. Output preserves input edge order.
    """
    n = len(edges)
    order = sorted(range(n), key=lambda t: (edges[t][2], edges[t][0], edges[t][1]))
    q = [0] * n
    for rank, t in enumerate(order):
        q[t] = min(4, (4 * rank) // n + 1)
    return [(i, j, c, q[t]) for t, (i, j, c) in enumerate(edges)]


class CliffGraph:
    """Retained cliff edges plus adjacency; nodes == union of endpoints."""

    def __init__(self, edges: list[QEdge]):
        seen = set()
        adjacency: dict[str, list[str]] = {}
        for i, j, c, q in edges:
            if not i < j:
                raise ValueError(f"edge ({i},{j}) violates i < j")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i},{j})")
            seen.add((i, j))
            adjacency.setdefault(i, []).append(j)
            adjacency.setdefault(j, []).append(i)
        for lst in adjacency.values():
            lst.sort()
        self.edges: list[QEdge] = sorted(edges, key=lambda e: (e[0], e[1]))
        self.adjacency = adjacency
        self.nodes: list[str] = sorted(adjacency)

    def degree(self, node: str) -> int:
        return len(self.adjacency[node])


def connected_components(graph: CliffGraph) -> list[list[str]]:
    """Components as sorted node lists, ordered by smallest member id."""
    seen: set[str] = set()
    components = []
    for start in graph.nodes:
        if start in seen:
            continue
        comp = []
        stack = [start]
        seen.add(start)
        while stack:
            v = stack.pop()
            comp.append(v)
            for u in graph.adjacency[v]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        components.append(sorted(comp))
    return components


def _two_color(graph: CliffGraph, component: list[str]) -> tuple[list[str], list[str]] | None:
    """BFS two-coloring; None when an odd cycle makes it impossible."""
    color: dict[str, int] = {component[0]: 0}
    queue = [component[0]]
    while queue:
        v = queue.pop(0)
        for u in graph.adjacency[v]:
            if u not in color:
                color[u] = 1 - color[v]
                queue.append(u)
            elif color[u] == color[v]:
                return None
    side0 = sorted(v for v in component if color[v] == 0)
    side1 = sorted(v for v in component if color[v] == 1)
    return side0, side1


def _best_class_subset(graph: CliffGraph, side: list[str], budget: int) -> tuple[list[str], int]:
    chosen = sorted(side, key=lambda v: (-graph.degree(v), v))[: max(0, budget)]
    return sorted(chosen), sum(graph.degree(v) for v in chosen)


def _greedy_independent(graph: CliffGraph, component: list[str], budget: int) -> list[str]:
    chosen: set[str] = set()
    for v in sorted(component, key=lambda u: (-graph.degree(u), u)):
        if len(chosen) >= budget:
            break
        if all(u not in chosen for u in graph.adjacency[v]):
            chosen.add(v)
    return sorted(chosen)


def _local_search(graph: CliffGraph, component: list[str], chosen: set[str], budget: int) -> None:
    """Deterministic add/swap sweeps growing total chosen degree.

    A node outside the set joins if it conflicts with nothing (and the
    budget allows) or replaces its single conflicting neighbor when
    that strictly raises the crossing count. Independence is never
    violated.
    """
    for _ in range(LOCAL_SEARCH_SWEEPS):
        changed = False
        for v in component:
            if v in chosen:
                continue
            conflicts = [u for u in graph.adjacency[v] if u in chosen]
            if not conflicts and len(chosen) < budget:
                chosen.add(v)
                changed = True
            elif len(conflicts) == 1 and graph.degree(v) > graph.degree(conflicts[0]):
                chosen.remove(conflicts[0])
                chosen.add(v)
                changed = True
        if not changed:
            break


def partition_component(
    graph: CliffGraph, component: list[str], test_budget: int, seed: int = 0
) -> tuple[list[str], int]:
    """Pick the component's test side under the hard constraint.

    Bipartite components take (a budget-limited, highest-degree-first
    subset of) one color class, the one crossing more edges, ties
    broken toward the lexicographically smaller node list. Other
    components run greedy independent-set insertion plus local search.
    Returns (sorted test nodes, crossing edge count). The procedure is
    deterministic; seed is accepted for interface stability.
    """
    del seed
    if test_budget <= 0:
        return [], 0
    colors = _two_color(graph, component)
    if colors is not None:
        pick0 = _best_class_subset(graph, colors[0], test_budget)
        pick1 = _best_class_subset(graph, colors[1], test_budget)
        if pick0[1] != pick1[1]:
            return pick0 if pick0[1] > pick1[1] else pick1
        return pick0 if pick0[0] <= pick1[0] else pick1
    chosen = set(_greedy_independent(graph, component, test_budget))
    _local_search(graph, component, chosen, test_budget)
    return sorted(chosen), sum(graph.degree(v) for v in chosen)


def coverage(assignment: dict[str, str], edges) -> float:
    """Fraction of cliff edges with exactly one endpoint labeled test."""
    if not edges:
        raise InsufficientDataError("coverage is undefined for an empty edge list")
    crossing = 0
    for edge in edges:
        i, j = edge[0], edge[1]
        if (assignment[i] == "test") != (assignment[j] == "test"):
            crossing += 1
    return crossing / len(edges)


def induce_molecule_severity(assignment: dict[str, str], edges: list[QEdge]) -> dict[str, str]:
    """Test-molecule groups: max quartile over train-side incident edges.

    Test molecules whose cliff neighbors are all val (or that have no
    edges at all) get Q0; information never flows from other test
    molecules.
    """
    best: dict[str, int] = {
        mol_id: 0 for mol_id, label in assignment.items() if label == "test"
    }
    for i, j, _, q in edges:
        for a, b in ((i, j), (j, i)):
            if assignment[a] == "test" and assignment[b] == "train":
                best[a] = max(best[a], q)
    return {mol_id: f"Q{q}" for mol_id, q in best.items()}


@dataclass
class SplitAssignment:
    """Final labels plus the coverage actually achieved.

    severity_group holds the edge-quartile grouping of test molecules
    (Q0 when no train-side cliff edge touches them).
    """

    label: dict[str, str]
    coverage: float
    severity_group: dict[str, str]


def allocate_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Split n into train/val/test counts by largest remainder, summing exactly n."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    quotas = [n * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(3), key=lambda t: (-(quotas[t] - counts[t]), t))
    for t in order[: n - sum(counts)]:
        counts[t] += 1
    return counts[0], counts[1], counts[2]


def assemble_split(
    dataset, graph: CliffGraph, fractions: tuple[float, float, float], seed: int
) -> SplitAssignment:
    """Assemble the full split around the graph partition.

    Component test sides are accumulated largest-crossing-first until
    the test budget is met, re-solving a component under the remaining
    budget when its full side no longer fits. Molecules outside the
    graph top up test to its target size (seeded uniform draw), the
    rest form the training pool, and validation is a seeded uniform
    sample from that pool. Raises InfeasibleSplitError when the target
    test size cannot be reached without a test-test edge.
    """
    ids = sorted(dataset.ids)
    id_set = set(ids)
    unknown = [v for v in graph.nodes if v not in id_set]
    if unknown:
        raise SchemaError(f"graph node {unknown[0]!r} is not in the dataset")
    _, n_val, n_test = allocate_counts(len(ids), fractions)

    candidates = []
    for comp in connected_components(graph):
        test_side, crossing = partition_component(graph, comp, len(comp))
        candidates.append((crossing, comp[0], comp, test_side))
    candidates.sort(key=lambda t: (-t[0], t[1]))

    test_ids: set[str] = set()
    remaining = n_test
    for _, _, comp, test_side in candidates:
        if remaining <= 0:
            break
        if len(test_side) <= remaining:
            test_ids.update(test_side)
            remaining -= len(test_side)
        else:
            partial, _ = partition_component(graph, comp, remaining)
            test_ids.update(partial)
            remaining -= len(partial)

    rng = np.random.default_rng(seed)
    graph_nodes = set(graph.nodes)
    if remaining > 0:
        pool = [v for v in ids if v not in graph_nodes and v not in test_ids]
        if len(pool) < remaining:
            raise InfeasibleSplitError(
                f"test split needs {remaining} more molecules but only {len(pool)} "
                "remain outside the cliff graph; the hard constraint blocks the rest. "
                "Lower the test fraction or the cliff threshold."
            )
        test_ids.update(rng.choice(np.array(pool, dtype=object), size=remaining, replace=False))

    train_pool = [v for v in ids if v not in test_ids]
    val_ids = set(rng.choice(np.array(train_pool, dtype=object), size=n_val, replace=False))

    label = {}
    for v in ids:
        if v in test_ids:
            label[v] = "test"
        elif v in val_ids:
            label[v] = "val"
        else:
            label[v] = "train"

    cov = coverage(label, graph.edges) if graph.edges else 0.0
    groups = induce_molecule_severity(label, graph.edges)
    return SplitAssignment(label, cov, groups)
