"""Dataset ingestion and persistence of split/severity artifacts.

Input tables are CSV or TSV with a header declaring columns id,
target, and at least one of structure / fingerprint; fingerprints are
lowercase hex, most significant nibble first, width/4 digits. The
split artifact is a single human-inspectable text container with
fixed sections (meta / assignment / edges / severity) whose
serialization is byte-deterministic: keys sorted, floats written with
repr so they round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConflictError,
    CorruptArtifactError,
    DimensionError,
    RowError,
    SchemaError,
)
from .fingerprint import Fingerprint, circular_fingerprint, parse_structure, stack_fingerprints
from .severity import GROUPS, SeverityRecord

LABELS = ("train", "val", "test")

_MAGIC = "cliffbench-artifact v1"


@dataclass(frozen=True)
class MoleculeRecord:
    """One molecule: unique id token, finite target, structure and/or fingerprint."""

    id: str
    target: float
    structure: str | None = None
    fingerprint: Fingerprint | None = None

    def __eq__(self, other):
        if not isinstance(other, MoleculeRecord):
            return NotImplemented
        if (self.id, self.target, self.structure) != (other.id, other.target, other.structure):
            return False
        a, b = self.fingerprint, other.fingerprint
        if (a is None) != (b is None):
            return False
        return a is None or (a.width == b.width and bool(np.array_equal(a.words, b.words)))


def _valid_id(token: str) -> bool:
    return bool(token) and not any(ch.isspace() for ch in token)


class Dataset:
    """Validated, order-preserving collection of MoleculeRecords."""

    def __init__(self, records):
        self.records: tuple[MoleculeRecord, ...] = tuple(records)
        self._index: dict[str, int] = {}
        width = None
        for pos, rec in enumerate(self.records):
            if not _valid_id(rec.id):
                raise SchemaError(f"invalid molecule id {rec.id!r}")
            if rec.id in self._index:
                raise ConflictError(f"duplicate molecule id {rec.id!r}")
            if rec.structure is None and rec.fingerprint is None:
                raise SchemaError(f"molecule {rec.id!r} has neither structure nor fingerprint")
            if not math.isfinite(rec.target):
                raise SchemaError(f"molecule {rec.id!r} has non-finite target")
            if rec.fingerprint is not None:
                if width is None:
                    width = rec.fingerprint.width
                elif rec.fingerprint.width != width:
                    raise DimensionError(
                        f"molecule {rec.id!r} fingerprint width {rec.fingerprint.width} != {width}"
                    )
            self._index[rec.id] = pos
        self.width = width

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.records == other.records

    @property
    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]

    def by_id(self, mol_id: str) -> MoleculeRecord:
        return self.records[self._index[mol_id]]

    def targets(self) -> np.ndarray:
        return np.array([rec.target for rec in self.records], dtype=np.float64)

    def with_fingerprints(self, radius: int = 2, width: int = 2048) -> "Dataset":
        """Fill in missing fingerprints from structures; existing ones are kept.

        When the dataset already carries fingerprints, their width wins
        so every molecule ends up on one common width.
        """
        target_width = self.width if self.width is not None else width
        out = []
        for rec in self.records:
            if rec.fingerprint is not None:
                out.append(rec)
            else:
                fp = circular_fingerprint(parse_structure(rec.structure), radius, target_width)
                out.append(replace(rec, fingerprint=fp))
        return Dataset(out)

    def packed(self, order=None) -> tuple[np.ndarray, np.ndarray]:
        """Fingerprints stacked as (uint64 word matrix, popcount vector).

        order is a sequence of row positions; default is dataset order.
        Every selected record must carry a fingerprint.
        """
        rows = range(len(self.records)) if order is None else order
        fps = []
        for pos in rows:
            fp = self.records[pos].fingerprint
            if fp is None:
                raise SchemaError(
                    f"molecule {self.records[pos].id!r} has no fingerprint; "
                    "call with_fingerprints first"
                )
            fps.append(fp)
        return stack_fingerprints(fps)


def _pick_format(path: str, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "tsv"):
            raise SchemaError(f"unknown table format {fmt!r}")
        return fmt
    ext = os.path.splitext(path)[1].lower()
    if ext == ".csv":
        return "csv"
    if ext in (".tsv", ".tab"):
        return "tsv"
    raise SchemaError(f"cannot infer table format from {path!r}; pass format explicitly")


def load_dataset(path: str, fmt: str | None = None) -> Dataset:
    """Load and validate a molecule table.

    Fail-fast: the first bad row raises RowError with its 1-based line
    number; duplicate ids raise ConflictError; missing required
    columns raise SchemaError. No row is ever silently dropped.
    """
    delimiter = "," if _pick_format(path, fmt) == "csv" else "\t"
    records: list[MoleculeRecord] = []
    seen: dict[str, int] = {}
    width: int | None = None
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        cols = {name.strip().lower(): pos for pos, name in enumerate(header)}
        for required in ("id", "target"):
            if required not in cols:
                raise SchemaError(f"{path}: missing required column {required!r}")
        if "structure" not in cols and "fingerprint" not in cols:
            raise SchemaError(f"{path}: need a structure or fingerprint column")
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} cells, found {len(row)}")

            def cell(name: str) -> str:
                return row[cols[name]].strip() if name in cols else ""

            mol_id = cell("id")
            if not _valid_id(mol_id):
                raise RowError(line, f"invalid id {mol_id!r}")
            if mol_id in seen:
                raise ConflictError(
                    f"line {line}: duplicate id {mol_id!r} (first seen on line {seen[mol_id]})"
                )
            seen[mol_id] = line
            try:
                target = float(cell("target"))
            except ValueError:
                raise RowError(line, f"target {cell('target')!r} is not a number") from None
            if not math.isfinite(target):
                raise RowError(line, f"target {cell('target')!r} is not finite")
            structure = cell("structure") or None
            hex_text = cell("fingerprint")
            fingerprint = None
            if hex_text:
                if width is None:
                    width = 4 * len(hex_text)
                    if width < 8 or width & (width - 1):
                        raise RowError(
                            line, f"fingerprint length {len(hex_text)} is not width/4 "
                            "for a power-of-two width",
                        )
                try:
                    fingerprint = Fingerprint.from_hex(hex_text, width)
                except DimensionError as exc:
                    raise RowError(line, str(exc)) from None
            if structure is None and fingerprint is None:
                raise RowError(line, "row has neither structure nor fingerprint")
            records.append(MoleculeRecord(mol_id, target, structure, fingerprint))
    try:
        return Dataset(records)
    except (SchemaError, DimensionError) as exc:
        raise SchemaError(f"{path}: {exc}") from None


def write_dataset(dataset: Dataset, path: str, fmt: str | None = None) -> None:
    """Write a molecule table that load_dataset reads back identically."""
    delimiter = "," if _pick_format(path, fmt) == "csv" else "\t"
    has_structure = any(rec.structure is not None for rec in dataset)
    has_fp = any(rec.fingerprint is not None for rec in dataset)
    header = ["id"]
    if has_structure:
        header.append("structure")
    if has_fp:
        header.append("fingerprint")
    header.append("target")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        for rec in dataset:
            row = [rec.id]
            if has_structure:
                row.append(rec.structure or "")
            if has_fp:
                row.append(rec.fingerprint.to_hex() if rec.fingerprint else "")
            row.append(repr(rec.target))
            writer.writerow(row)


@dataclass
class SplitArtifact:
    """Everything a split run produces: labels, cliff edges, severity, meta.

    cliff_edges rows are (i, j, cliff score, quartile) with i < j and
    the list sorted by (i, j); meta carries the config snapshot, seed,
    coverage, and per-split counts.
    """

    assignment: dict[str, str]
    cliff_edges: list[tuple[str, str, float, int]]
    severity: dict[str, SeverityRecord]
    meta: dict = field(default_factory=dict)


def _crossing_count(assignment: dict[str, str], edges) -> int:
    crossing = 0
    for i, j, _, _ in edges:
        if (assignment[i] == "test") != (assignment[j] == "test"):
            crossing += 1
    return crossing


def validate_artifact(artifact: SplitArtifact) -> None:
    """Check every structural invariant; raise CorruptArtifactError naming the first failure."""
    for mol_id, label in artifact.assignment.items():
        if not _valid_id(mol_id):
            raise CorruptArtifactError(f"invalid id token {mol_id!r} in assignment")
        if label not in LABELS:
            raise CorruptArtifactError(f"unknown split label {label!r} for id {mol_id!r}")
    prev = None
    seen_edges = set()
    for edge in artifact.cliff_edges:
        i, j, c, q = edge
        if i not in artifact.assignment or j not in artifact.assignment:
            raise CorruptArtifactError(f"edge ({i},{j}) references an unassigned id")
        if not i < j:
            raise CorruptArtifactError(f"edge ({i},{j}) violates i < j id ordering")
        if (i, j) in seen_edges:
            raise CorruptArtifactError(f"duplicate edge ({i},{j})")
        seen_edges.add((i, j))
        if prev is not None and (i, j) < prev:
            raise CorruptArtifactError("edge list is not sorted by (i, j)")
        prev = (i, j)
        if not (math.isfinite(c) and c >= 0.0):
            raise CorruptArtifactError(f"edge ({i},{j}) has invalid cliff score {c!r}")
        if q not in (1, 2, 3, 4):
            raise CorruptArtifactError(f"edge ({i},{j}) has invalid quartile {q!r}")
        if artifact.assignment[i] == "test" and artifact.assignment[j] == "test":
            raise CorruptArtifactError(f"test-test cliff edge ({i},{j})")
    for mol_id, rec in artifact.severity.items():
        if mol_id not in artifact.assignment:
            raise CorruptArtifactError(f"severity entry for unassigned id {mol_id!r}")
        if not (math.isfinite(rec.score) and rec.score >= 0.0):
            raise CorruptArtifactError(f"severity score for {mol_id!r} invalid: {rec.score!r}")
        if not (math.isfinite(rec.exposure) and rec.exposure >= 0.0):
            raise CorruptArtifactError(f"exposure for {mol_id!r} invalid: {rec.exposure!r}")
        if rec.group not in GROUPS:
            raise CorruptArtifactError(f"unknown severity group {rec.group!r} for {mol_id!r}")
        if rec.neighbor_count < 0:
            raise CorruptArtifactError(f"negative neighbor count for {mol_id!r}")
        if rec.neighbor_count == 0 and rec.group != "Q0":
            raise CorruptArtifactError(
                f"{mol_id!r} has no neighbors but group {rec.group}, expected Q0"
            )
    try:
        if json.loads(json.dumps(artifact.meta)) != artifact.meta:
            raise CorruptArtifactError("meta does not survive a JSON round trip")
    except (TypeError, ValueError) as exc:
        raise CorruptArtifactError(f"meta is not JSON-serializable: {exc}") from None
    counts = {label: 0 for label in LABELS}
    for label in artifact.assignment.values():
        counts[label] += 1
    meta_counts = artifact.meta.get("counts")
    if meta_counts != counts:
        raise CorruptArtifactError(
            f"meta counts {meta_counts!r} disagree with recomputed {counts!r}"
        )
    coverage = artifact.meta.get("coverage")
    if artifact.cliff_edges:
        expect = _crossing_count(artifact.assignment, artifact.cliff_edges) / len(
            artifact.cliff_edges
        )
    else:
        expect = 0.0
    if coverage != expect:
        raise CorruptArtifactError(
            f"meta coverage {coverage!r} disagrees with recomputed {expect!r}"
        )


def write_split_artifact(artifact: SplitArtifact, path: str) -> None:
    """Serialize an artifact; byte-deterministic for a fixed artifact."""
    validate_artifact(artifact)
    lines = [_MAGIC, "[meta]", json.dumps(artifact.meta, sort_keys=True), "[assignment]"]
    for mol_id in sorted(artifact.assignment):
        lines.append(f"{mol_id}\t{artifact.assignment[mol_id]}")
    lines.append("[edges]")
    for i, j, c, q in artifact.cliff_edges:
        lines.append(f"{i}\t{j}\t{c!r}\t{q}")
    lines.append("[severity]")
    for mol_id in sorted(artifact.severity):
        rec = artifact.severity[mol_id]
        lines.append(
            f"{mol_id}\t{rec.score!r}\t{rec.exposure!r}\t{rec.group}\t{rec.neighbor_count}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def read_split_artifact(path: str) -> SplitArtifact:
    """Parse and validate an artifact file; read(write(a)) == a."""
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise CorruptArtifactError(f"missing artifact header {_MAGIC!r}")
    sections = ("[meta]", "[assignment]", "[edges]", "[severity]")
    marks = []
    for name in sections:
        if name not in lines:
            raise CorruptArtifactError(f"missing section {name}")
        marks.append(lines.index(name))
    if marks != sorted(marks) or marks[0] != 1:
        raise CorruptArtifactError("sections out of order")

    def body(k: int) -> list[str]:
        end = marks[k + 1] if k + 1 < len(marks) else len(lines)
        return [ln for ln in lines[marks[k] + 1 : end] if ln]

    meta_lines = body(0)
    if len(meta_lines) != 1:
        raise CorruptArtifactError("meta section must hold exactly one JSON line")
    try:
        meta = json.loads(meta_lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError(f"meta is not valid JSON: {exc}") from None

    assignment: dict[str, str] = {}
    for ln in body(1):
        parts = ln.split("\t")
        if len(parts) != 2:
            raise CorruptArtifactError(f"malformed assignment line {ln!r}")
        if parts[0] in assignment:
            raise CorruptArtifactError(f"id {parts[0]!r} assigned twice")
        assignment[parts[0]] = parts[1]

    edges: list[tuple[str, str, float, int]] = []
    for ln in body(2):
        parts = ln.split("\t")
        if len(parts) != 4:
            raise CorruptArtifactError(f"malformed edge line {ln!r}")
        try:
            edges.append((parts[0], parts[1], float(parts[2]), int(parts[3])))
        except ValueError:
            raise CorruptArtifactError(f"malformed edge line {ln!r}") from None

    severity: dict[str, SeverityRecord] = {}
    for ln in body(3):
        parts = ln.split("\t")
        if len(parts) != 5:
            raise CorruptArtifactError(f"malformed severity line {ln!r}")
        if parts[0] in severity:
            raise CorruptArtifactError(f"severity for {parts[0]!r} given twice")
        try:
            severity[parts[0]] = SeverityRecord(
                float(parts[1]), float(parts[2]), parts[3], int(parts[4])
            )
        except ValueError:
            raise CorruptArtifactError(f"malformed severity line {ln!r}") from None

    artifact = SplitArtifact(assignment, edges, severity, meta)
    validate_artifact(artifact)
    return artifact
