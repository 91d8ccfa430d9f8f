"""Minimal molecular-graph parsing, circular hashed fingerprints, and Tanimoto similarity.

The parser accepts a small line-notation subset: organic-set atoms
(B, C, N, O, P, S, F, I, Cl, Br), lowercase aromatic atoms (b, c, n,
o, p, s), bracket atoms with an optional formal charge, single /
double / triple bonds, parenthesised branches, and ring-closure
digits. Anything else is rejected with the byte offset of the
offending token; nothing is silently mis-parsed.

Fingerprints are fixed-width bit vectors stored as little-endian
uint64 words (bit k lives in word k // 64). Hex text encoding is
lowercase with the most significant nibble first.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyStructureError, ParseError

# Bond order codes. Aromatic bonds only arise implicitly between two
# aromatic atoms; explicit aromatic bond tokens are out of scope.
SINGLE = 1
DOUBLE = 2
TRIPLE = 3
AROMATIC = 4

_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = frozenset("BCNOPSFI")
_AROMATIC_ONE = frozenset("bcnops")
_BOND_TOKENS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE}


@dataclass(frozen=True)
class Atom:
    symbol: str
    charge: int = 0
    aromatic: bool = False


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: int


@dataclass(frozen=True)
class MolGraph:
    """Undirected multigraph-free molecular graph.

    Invariants checked on construction: bond endpoints index valid
    atoms, no self-bonds, no duplicate bonds (unordered).
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    def __post_init__(self):
        n = len(self.atoms)
        seen: set[tuple[int, int]] = set()
        for b in self.bonds:
            if not (0 <= b.a < n and 0 <= b.b < n):
                raise ValueError(f"bond ({b.a},{b.b}) references a missing atom")
            if b.a == b.b:
                raise ValueError(f"self-bond on atom {b.a}")
            key = (min(b.a, b.b), max(b.a, b.b))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Adjacency as per-atom lists of (neighbor index, bond order), sorted."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.a].append((b.b, b.order))
            adj[b.b].append((b.a, b.order))
        for lst in adj:
            lst.sort()
        return adj


def _implicit_order(a: Atom, b: Atom) -> int:
    return AROMATIC if (a.aromatic and b.aromatic) else SINGLE


def parse_structure(text: str) -> MolGraph:
    """Parse a line-notation string into a MolGraph.

    Raises ParseError (with byte offset) for empty input, unknown or
    unsupported tokens, unmatched parentheses, unclosed rings,
    dangling bonds, self-bonds, and duplicate bonds.
    """
    if not text:
        raise ParseError(0, "empty structure")

    atoms: list[Atom] = []
    bonds: list[Bond] = []
    bond_keys: set[tuple[int, int]] = set()
    prev = -1
    pending = 0          # explicit bond order awaiting its second atom, 0 if none
    pending_at = -1
    stack: list[tuple[int, int]] = []            # (atom index, '(' offset)
    rings: dict[str, tuple[int, int, int]] = {}  # digit -> (atom, explicit order, offset)

    def add_bond(a: int, b: int, order: int, pos: int) -> None:
        if a == b:
            raise ParseError(pos, "ring closure produced a self-bond")
        key = (min(a, b), max(a, b))
        if key in bond_keys:
            raise ParseError(pos, f"duplicate bond between atoms {key[0]} and {key[1]}")
        bond_keys.add(key)
        bonds.append(Bond(key[0], key[1], order))

    def add_atom(atom: Atom, pos: int) -> None:
        nonlocal prev, pending, pending_at
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev >= 0:
            order = pending if pending else _implicit_order(atoms[prev], atom)
            add_bond(prev, idx, order, pos)
        elif pending:
            raise ParseError(pending_at, "bond symbol with no preceding atom")
        prev = idx
        pending = 0

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if text[i : i + 2] in _ORGANIC_TWO:
            add_atom(Atom(text[i : i + 2]), i)
            i += 2
        elif ch in _ORGANIC_ONE:
            add_atom(Atom(ch), i)
            i += 1
        elif ch in _AROMATIC_ONE:
            add_atom(Atom(ch.upper(), aromatic=True), i)
            i += 1
        elif ch == "[":
            atom, width = _parse_bracket(text, i)
            add_atom(atom, i)
            i += width
        elif ch in _BOND_TOKENS:
            if pending:
                raise ParseError(i, "two bond symbols in a row")
            if prev < 0:
                raise ParseError(i, "bond symbol with no preceding atom")
            pending = _BOND_TOKENS[ch]
            pending_at = i
            i += 1
        elif ch == "(":
            if prev < 0:
                raise ParseError(i, "branch opened before any atom")
            if pending:
                raise ParseError(pending_at, "dangling bond before branch")
            stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not stack:
                raise ParseError(i, "unmatched closing parenthesis")
            if pending:
                raise ParseError(pending_at, "dangling bond before branch close")
            prev, _ = stack.pop()
            i += 1
        elif ch.isdigit():
            if prev < 0:
                raise ParseError(i, "ring-closure digit before any atom")
            if ch in rings:
                other, open_order, open_at = rings.pop(ch)
                if open_order and pending and open_order != pending:
                    raise ParseError(i, f"ring {ch} opened and closed with different bond orders")
                order = open_order or pending or _implicit_order(atoms[other], atoms[prev])
                add_bond(other, prev, order, i)
            else:
                rings[ch] = (prev, pending, i)
            pending = 0
            i += 1
        else:
            raise ParseError(i, f"unknown token {ch!r}")

    if pending:
        raise ParseError(pending_at, "dangling bond at end of input")
    if stack:
        raise ParseError(stack[-1][1], "unmatched opening parenthesis")
    if rings:
        digit = min(rings)
        raise ParseError(rings[digit][2], f"unclosed ring {digit}")
    return MolGraph(tuple(atoms), tuple(bonds))


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    """Parse a bracket atom beginning at text[start] == '['.

    Supported content: an element symbol (uppercase plus optional
    lowercase letter, or a lowercase aromatic letter) followed by an
    optional charge written as repeated +/- signs or a sign with one
    digit. Isotopes, chirality marks, and explicit hydrogen counts
    are rejected rather than guessed at.
    """
    i = start + 1
    n = len(text)
    if i >= n:
        raise ParseError(start, "unterminated bracket atom")
    ch = text[i]
    aromatic = False
    if ch in _AROMATIC_ONE:
        symbol = ch.upper()
        aromatic = True
        i += 1
    elif ch.isupper() and ch.isalpha():
        symbol = ch
        i += 1
        if i < n and text[i].islower() and text[i].isalpha() and text[i] != "h":
            symbol += text[i]
            i += 1
    else:
        raise ParseError(i, f"unsupported bracket content {ch!r}")
    charge = 0
    if i < n and text[i] in "+-":
        sign = 1 if text[i] == "+" else -1
        mark = text[i]
        i += 1
        if i < n and text[i].isdigit():
            charge = sign * int(text[i])
            i += 1
        else:
            charge = sign
            while i < n and text[i] == mark:
                charge += sign
                i += 1
    if i >= n or text[i] != "]":
        raise ParseError(i if i < n else start, "unterminated or unsupported bracket atom")
    return Atom(symbol, charge, aromatic), i - start + 1


def _needs_bracket(atom: Atom) -> bool:
    if atom.charge != 0:
        return True
    if atom.aromatic:
        return atom.symbol.upper() not in {s.upper() for s in _AROMATIC_ONE}
    return atom.symbol not in _ORGANIC_ONE and atom.symbol not in _ORGANIC_TWO


def _atom_text(atom: Atom) -> str:
    sym = atom.symbol.lower() if atom.aromatic else atom.symbol
    if not _needs_bracket(atom):
        return sym
    if atom.charge == 0:
        q = ""
    elif abs(atom.charge) == 1:
        q = "+" if atom.charge > 0 else "-"
    else:
        q = f"{'+' if atom.charge > 0 else '-'}{abs(atom.charge)}"
    return f"[{sym}{q}]"


def _bond_text(order: int, a: Atom, b: Atom) -> str:
    if order == AROMATIC:
        if not (a.aromatic and b.aromatic):
            raise ValueError("aromatic bond between non-aromatic atoms is not writable")
        return ""
    if order == SINGLE:
        return "-" if (a.aromatic and b.aromatic) else ""
    return {DOUBLE: "=", TRIPLE: "#"}[order]


def write_structure(graph: MolGraph) -> str:
    """Render a connected MolGraph back to the supported line notation.

    Atoms are emitted in depth-first preorder from atom 0 with
    neighbors taken in ascending index order, so the output is
    deterministic. Ring-closure digits are pooled and reused once
    closed; more than ten simultaneously open rings is an error.
    """
    if not graph.atoms:
        raise ValueError("cannot render an empty graph")
    adj = graph.neighbors()
    n = len(graph.atoms)

    # Depth-first spanning tree; non-tree edges become ring closures.
    order_of: dict[tuple[int, int], int] = {
        (min(b.a, b.b), max(b.a, b.b)): b.order for b in graph.bonds
    }
    preorder: list[int] = []
    tree: list[list[int]] = [[] for _ in range(n)]
    ring_edges: list[tuple[int, int]] = []
    seen_edges: set[tuple[int, int]] = set()
    visited = [False] * n
    stack = [0]
    visited[0] = True
    while stack:
        u = stack.pop()
        preorder.append(u)
        for v, _ in reversed(adj[u]):
            key = (min(u, v), max(u, v))
            if key in seen_edges:
                continue
            seen_edges.add(key)
            if visited[v]:
                ring_edges.append((u, v))
            else:
                visited[v] = True
                tree[u].append(v)
                stack.append(v)
    if len(preorder) != n:
        raise ValueError("cannot render a disconnected graph")
    for lst in tree:
        lst.sort()

    rank = {a: t for t, a in enumerate(preorder)}
    opens: dict[int, list[tuple[int, int]]] = {}
    closes: dict[int, list[tuple[int, int]]] = {}
    for a, b in ring_edges:
        first, second = (a, b) if rank[a] < rank[b] else (b, a)
        opens.setdefault(first, []).append((rank[second], second))
        closes.setdefault(second, []).append((rank[first], first))

    digit_of: dict[tuple[int, int], str] = {}
    pool = list("9876543210")
    for u in preorder:
        for _, first in sorted(closes.get(u, ())):
            key = (min(u, first), max(u, first))
            pool.append(digit_of[key])
        for _, second in sorted(opens.get(u, ())):
            if not pool:
                raise ValueError("more than ten simultaneously open rings")
            digit_of[(min(u, second), max(u, second))] = pool.pop()

    out: list[str] = []

    def ring_marks(u: int) -> str:
        marks = ""
        for _, first in sorted(closes.get(u, ())):
            marks += digit_of[(min(u, first), max(u, first))]
        for _, second in sorted(opens.get(u, ())):
            key = (min(u, second), max(u, second))
            marks += _bond_text(order_of[key], graph.atoms[u], graph.atoms[second])
            marks += digit_of[key]
        return marks

    def emit(u: int) -> None:
        out.append(_atom_text(graph.atoms[u]))
        out.append(ring_marks(u))
        kids = tree[u]
        for k, v in enumerate(kids):
            key = (min(u, v), max(u, v))
            btxt = _bond_text(order_of[key], graph.atoms[u], graph.atoms[v])
            if k < len(kids) - 1:
                out.append("(" + btxt)
                emit(v)
                out.append(")")
            else:
                out.append(btxt)
                emit(v)

    emit(0)
    return "".join(out)


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width bit vector with a cached popcount.

    words holds the bits as little-endian uint64 lanes: bit k of the
    vector is bit (k % 64) of words[k // 64].
    """

    width: int
    words: np.ndarray = field(repr=False)
    popcount: int

    @staticmethod
    def from_bits(bits, width: int) -> "Fingerprint":
        if width <= 0 or width & (width - 1):
            raise DimensionError(f"width must be a positive power of two, got {width}")
        words = np.zeros(max(1, width // 64), dtype=np.uint64)
        distinct = set()
        for k in bits:
            if not 0 <= k < width:
                raise DimensionError(f"bit index {k} outside width {width}")
            distinct.add(int(k))
        for k in distinct:
            words[k >> 6] |= np.uint64(1) << np.uint64(k & 63)
        return Fingerprint(width, words, len(distinct))

    @staticmethod
    def from_hex(text: str, width: int) -> "Fingerprint":
        if width <= 0 or width & (width - 1) or width % 8:
            raise DimensionError(f"width must be a power of two multiple of 8, got {width}")
        if len(text) != width // 4:
            raise DimensionError(
                f"hex fingerprint has {len(text)} digits, expected {width // 4} for width {width}"
            )
        if text != text.lower():
            raise DimensionError("hex fingerprint must be lowercase")
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise DimensionError(f"invalid hex fingerprint: {exc}") from None
        if len(raw) != width // 8:
            raise DimensionError("hex fingerprint contains non-digit characters")
        le = raw[::-1]
        le += b"\x00" * (-len(le) % 8)
        words = np.frombuffer(le, dtype="<u8").astype(np.uint64)
        pop = int(np.bitwise_count(words).sum())
        return Fingerprint(width, words, pop)

    def to_hex(self) -> str:
        le = self.words.astype("<u8").tobytes()[: self.width // 8]
        return le[::-1].hex()

    def bits(self) -> list[int]:
        """Set bit indices, ascending."""
        out = []
        for w, word in enumerate(self.words):
            word = int(word)
            while word:
                low = word & -word
                out.append(w * 64 + low.bit_length() - 1)
                word ^= low
        return out


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """Tanimoto similarity |a AND b| / |a OR b|; 0.0 when both are all-zero."""
    if a.width != b.width:
        raise DimensionError(f"width mismatch: {a.width} vs {b.width}")
    inter = int(np.bitwise_count(a.words & b.words).sum())
    union = a.popcount + b.popcount - inter
    if union == 0:
        return 0.0
    return inter / union


def _hash64(parts: tuple) -> int:
    digest = hashlib.blake2b(repr(parts).encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def circular_fingerprint(graph: MolGraph, radius: int = 2, width: int = 2048) -> Fingerprint:
    """Hash every atom-centered environment of radius 0..radius to one bit.

    The radius-0 invariant covers (element, charge, aromatic flag,
    degree); each round rehashes (round, own invariant, sorted
    (bond order, neighbor invariant) pairs). An atom stops emitting
    bits once its ball stops growing, so environments that are
    literally the same subgraph do not claim extra bits.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if not graph.atoms:
        raise EmptyStructureError("cannot fingerprint a structure with no atoms")
    adj = graph.neighbors()
    n = len(graph.atoms)
    inv = [
        _hash64(("atom", a.symbol, a.charge, a.aromatic, len(adj[i])))
        for i, a in enumerate(graph.atoms)
    ]
    bits = {h % width for h in inv}
    visited = [{i} for i in range(n)]
    frontier = [{i} for i in range(n)]
    growing = [True] * n
    for r in range(1, radius + 1):
        nxt = [
            _hash64((r, inv[i], tuple(sorted((o, inv[j]) for j, o in adj[i]))))
            for i in range(n)
        ]
        for i in range(n):
            if not growing[i]:
                continue
            reach = {v for u in frontier[i] for v, _ in adj[u]} - visited[i]
            if not reach:
                growing[i] = False
                continue
            visited[i] |= reach
            frontier[i] = reach
            bits.add(nxt[i] % width)
        inv = nxt
    return Fingerprint.from_bits(bits, width)


def stack_fingerprints(fps) -> tuple[np.ndarray, np.ndarray]:
    """Stack fingerprints into (words matrix, popcount vector) for the kernels.

    All fingerprints must share one width.
    """
    fps = list(fps)
    if not fps:
        return np.zeros((0, 1), dtype=np.uint64), np.zeros(0, dtype=np.int64)
    width = fps[0].width
    for f in fps:
        if f.width != width:
            raise DimensionError(f"width mismatch in dataset: {f.width} vs {width}")
    words = np.ascontiguousarray(np.stack([f.words for f in fps]))
    pops = np.array([f.popcount for f in fps], dtype=np.int64)
    return words, pops
