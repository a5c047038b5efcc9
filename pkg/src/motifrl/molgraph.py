"""Atom-level molecular graphs: parsing, validity, rings, descriptors.

Graphs are small (tens of atoms), so everything here is plain Python over
tuples; numpy only appears where a vector is handed to downstream code.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import MalformedRecord, UnbalancedParen, UnclosedRing, UnsupportedToken

ELEMENTS = ("B", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "*")

# "*" is an open polymer stub: any valence is allowed.
ALLOWED_VALENCES: dict[str, tuple[int, ...]] = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "F": (1,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
    "*": (),
}


def max_valence(symbol: str) -> float:
    allowed = ALLOWED_VALENCES[symbol]
    return max(allowed) if allowed else float("inf")


@dataclass(frozen=True)
class MolGraph:
    """Molecular graph with element symbols and typed bonds.

    Bonds are stored as a sorted tuple of ``(i, j, order)`` with ``i < j``;
    the constructor normalizes orientation and rejects self-loops, duplicate
    pairs, out-of-range indices, unknown elements and bad bond orders.
    """

    atoms: tuple[str, ...]
    bonds: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        atoms = tuple(self.atoms)
        n = len(atoms)
        for a in atoms:
            if a not in ALLOWED_VALENCES:
                raise MalformedRecord(f"unknown element {a!r}")
        norm = []
        seen = set()
        for b in self.bonds:
            if len(b) != 3:
                raise MalformedRecord(f"bond {b!r} is not (i, j, order)")
            i, j, o = (int(v) for v in b)
            if i == j:
                raise MalformedRecord(f"self-loop on atom {i}")
            if i > j:
                i, j = j, i
            if i < 0 or j >= n:
                raise MalformedRecord(f"bond ({i}, {j}) out of range for {n} atoms")
            if o not in (1, 2, 3):
                raise MalformedRecord(f"bond order {o} not in {{1,2,3}}")
            if (i, j) in seen:
                raise MalformedRecord(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
            norm.append((i, j, o))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(sorted(norm)))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Adjacency list of ``(neighbor, bond order)`` per atom."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for i, j, o in self.bonds:
            adj[i].append((j, o))
            adj[j].append((i, o))
        return adj

    def used_valence(self) -> list[int]:
        used = [0] * self.n_atoms
        for i, j, o in self.bonds:
            used[i] += o
            used[j] += o
        return used

    def relabel(self, perm: Sequence[int]) -> "MolGraph":
        """Graph with atom ``k`` moved to position ``perm[k]``."""
        atoms = [""] * self.n_atoms
        for k, p in enumerate(perm):
            atoms[p] = self.atoms[k]
        bonds = [(perm[i], perm[j], o) for i, j, o in self.bonds]
        return MolGraph(tuple(atoms), tuple(bonds))

    def subgraph(self, atom_ids: Sequence[int]) -> "MolGraph":
        """Induced subgraph; atom ``atom_ids[k]`` becomes atom ``k``."""
        index = {a: k for k, a in enumerate(atom_ids)}
        bonds = [
            (index[i], index[j], o)
            for i, j, o in self.bonds
            if i in index and j in index
        ]
        return MolGraph(tuple(self.atoms[a] for a in atom_ids), tuple(bonds))


# --------------------------------------------------------------------------
# serialization


def to_record(g: MolGraph) -> dict:
    return {"atoms": list(g.atoms), "bonds": [list(b) for b in g.bonds]}


def to_jsonl(g: MolGraph) -> str:
    """One-line JSON record, atom order preserved."""
    return json.dumps(to_record(g), separators=(", ", ": "))


def from_record(obj) -> MolGraph:
    if not isinstance(obj, dict) or "atoms" not in obj:
        raise MalformedRecord("record must be an object with an 'atoms' list")
    atoms = obj["atoms"]
    bonds = obj.get("bonds", [])
    if not isinstance(atoms, list) or not all(isinstance(a, str) for a in atoms):
        raise MalformedRecord("'atoms' must be a list of element symbols")
    if not isinstance(bonds, list):
        raise MalformedRecord("'bonds' must be a list")
    if not atoms:
        raise MalformedRecord("molecule has no atoms")
    try:
        return MolGraph(tuple(atoms), tuple(tuple(b) for b in bonds))
    except (TypeError, ValueError) as exc:
        raise MalformedRecord(str(exc)) from exc


def parse_molecule(text: str, format: str = "jsonl") -> MolGraph:
    """Parse one record in ``jsonl`` or ``smiles`` (restricted subset) form."""
    if format == "jsonl":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"invalid JSON: {exc}") from exc
        return from_record(obj)
    if format in ("smiles", "smiles-subset"):
        return parse_smiles(text)
    raise ValueError(f"unknown format {format!r}")


_BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3}
_ONE_LETTER = set("BCNOFPSI")


def _tokenize_smiles(text: str) -> list[str]:
    tokens = []
    k = 0
    while k < len(text):
        ch = text[k]
        if text.startswith("Cl", k) or text.startswith("Br", k):
            tokens.append(text[k : k + 2])
            k += 2
            continue
        if ch in _ONE_LETTER or ch == "*" or ch in _BOND_SYMBOLS or ch in "()":
            tokens.append(ch)
        elif ch in "123456789":
            tokens.append(ch)
        else:
            raise UnsupportedToken(f"unsupported character {ch!r} at position {k}")
        k += 1
    return tokens


def parse_smiles(text: str) -> MolGraph:
    """Parse the restricted SMILES subset.

    Supports element tokens B C N O F P S Cl Br I and ``*``, explicit bonds
    ``- = #``, branches and ring-closure digits 1-9.
    """
    text = text.strip()
    if not text:
        raise MalformedRecord("empty SMILES")
    tokens = _tokenize_smiles(text)
    atoms: list[str] = []
    bonds: dict[tuple[int, int], int] = {}
    stack: list[int] = []
    open_rings: dict[str, tuple[int, int | None]] = {}
    prev: int | None = None
    pending: int | None = None

    def add_bond(i: int, j: int, order: int) -> None:
        if i == j:
            raise MalformedRecord("ring closure onto the same atom")
        key = (min(i, j), max(i, j))
        if key in bonds:
            raise MalformedRecord(f"duplicate bond between atoms {key}")
        bonds[key] = order

    for tok in tokens:
        if tok in _BOND_SYMBOLS:
            if pending is not None or prev is None:
                raise MalformedRecord(f"misplaced bond symbol {tok!r}")
            pending = _BOND_SYMBOLS[tok]
        elif tok == "(":
            if prev is None or pending is not None:
                raise UnbalancedParen("branch opened without a preceding atom")
            stack.append(prev)
        elif tok == ")":
            if not stack:
                raise UnbalancedParen("unmatched ')'")
            if pending is not None:
                raise MalformedRecord("bond symbol before ')'")
            prev = stack.pop()
        elif tok.isdigit():
            if prev is None:
                raise MalformedRecord("ring digit before any atom")
            if tok in open_rings:
                other, order = open_rings.pop(tok)
                if order is not None and pending is not None and order != pending:
                    raise MalformedRecord(f"conflicting bond orders on ring {tok}")
                add_bond(other, prev, pending or order or 1)
            else:
                open_rings[tok] = (prev, pending)
            pending = None
        else:
            idx = len(atoms)
            atoms.append(tok)
            if prev is not None:
                add_bond(prev, idx, pending or 1)
            elif pending is not None:
                raise MalformedRecord("bond symbol before the first atom")
            pending = None
            prev = idx
    if pending is not None:
        raise MalformedRecord("dangling bond symbol")
    if stack:
        raise UnbalancedParen("unclosed '('")
    if open_rings:
        raise UnclosedRing(f"unclosed ring digit(s) {sorted(open_rings)}")
    return MolGraph(tuple(atoms), tuple((i, j, o) for (i, j), o in bonds.items()))


# --------------------------------------------------------------------------
# validity


@dataclass(frozen=True)
class ValidityReport:
    is_valid: bool
    is_connected: bool
    violations: tuple[tuple[int, int, tuple[int, ...]], ...]


def connected_components(n: int, edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        comp, stack = [], [s]
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def is_connected(g: MolGraph) -> bool:
    return len(connected_components(g.n_atoms, ((i, j) for i, j, _ in g.bonds))) <= 1


def check_validity(g: MolGraph) -> ValidityReport:
    violations = []
    for a, used in enumerate(g.used_valence()):
        sym = g.atoms[a]
        if used > max_valence(sym):
            violations.append((a, used, ALLOWED_VALENCES[sym]))
    conn = is_connected(g)
    return ValidityReport(not violations and conn, conn, tuple(violations))


# --------------------------------------------------------------------------
# rings and descriptors


def ring_bonds(g: MolGraph) -> list[tuple[int, int, int]]:
    """Bonds lying on at least one cycle (i.e. non-bridges)."""
    out = []
    pairs = [(i, j) for i, j, _ in g.bonds]
    for k, bond in enumerate(g.bonds):
        rest = pairs[:k] + pairs[k + 1 :]
        comps = connected_components(g.n_atoms, rest)
        where = {a: c for c, comp in enumerate(comps) for a in comp}
        if where[bond[0]] == where[bond[1]]:
            out.append(bond)
    return out


def ring_systems(g: MolGraph) -> list[list[int]]:
    """Fused ring systems as sorted atom-index lists, ordered by first atom."""
    rb = ring_bonds(g)
    if not rb:
        return []
    comps = connected_components(g.n_atoms, ((i, j) for i, j, _ in rb))
    ring_atoms = {a for i, j, _ in rb for a in (i, j)}
    return [c for c in comps if c[0] in ring_atoms]


def ring_count(g: MolGraph) -> int:
    comps = connected_components(g.n_atoms, ((i, j) for i, j, _ in g.bonds))
    return len(g.bonds) - g.n_atoms + len(comps)


DESCRIPTOR_NAMES = (
    "atom_count",
    "heteroatom_count",
    "ring_count",
    "single_bonds",
    "double_bonds",
    "triple_bonds",
    "wildcard_count",
    "mean_degree",
)


def descriptors(g: MolGraph) -> np.ndarray:
    """Length-8 descriptor vector, ordered as ``DESCRIPTOR_NAMES``."""
    hist = [0, 0, 0]
    for _, _, o in g.bonds:
        hist[o - 1] += 1
    hetero = sum(1 for a in g.atoms if a not in ("C", "*"))
    wild = sum(1 for a in g.atoms if a == "*")
    mean_deg = 2.0 * len(g.bonds) / g.n_atoms if g.n_atoms else 0.0
    return np.array(
        [g.n_atoms, hetero, ring_count(g), *hist, wild, mean_deg], dtype=np.float64
    )


# --------------------------------------------------------------------------
# canonical form
#
# Colour refinement followed by individualization of the first non-singleton
# cell, keeping the lexicographically smallest serialization over all leaves.
# Exponential only in the size of automorphism orbits, which is fine for the
# graph sizes handled here.


def _refine(g: MolGraph, adj, colors: list) -> list[int]:
    ranks = _rank(colors)
    while True:
        sigs = [
            (ranks[a], tuple(sorted((o, ranks[b]) for b, o in adj[a])))
            for a in range(g.n_atoms)
        ]
        new = _rank(sigs)
        if len(set(new)) == len(set(ranks)):
            return new
        ranks = new


def _rank(keys: list) -> list[int]:
    order = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [order[k] for k in keys]


def _serial(g: MolGraph, ranks: list[int]):
    atoms = tuple(sym for _, sym in sorted(zip(ranks, g.atoms)))
    bonds = tuple(
        sorted(
            (min(ranks[i], ranks[j]), max(ranks[i], ranks[j]), o) for i, j, o in g.bonds
        )
    )
    return atoms, bonds


def canonical_order(g: MolGraph) -> list[int]:
    """Atom indices listed in canonical order (isomorphism-invariant up to automorphism)."""
    if g.n_atoms == 0:
        return []
    adj = g.neighbors()
    init = [(sym, len(adj[a]), tuple(sorted(o for _, o in adj[a]))) for a, sym in enumerate(g.atoms)]
    best: list = [None, None]

    def search(ranks: list[int]) -> None:
        counts: dict[int, list[int]] = {}
        for a, r in enumerate(ranks):
            counts.setdefault(r, []).append(a)
        cells = [counts[r] for r in sorted(counts) if len(counts[r]) > 1]
        if not cells:
            key = _serial(g, ranks)
            if best[0] is None or key < best[0]:
                best[0], best[1] = key, ranks
            return
        for a in cells[0]:
            colors = [(r, 0 if b == a else 1) for b, r in enumerate(ranks)]
            search(_refine(g, adj, colors))

    search(_refine(g, adj, init))
    ranks = best[1]
    return [a for _, a in sorted(zip(ranks, range(g.n_atoms)))]


def canonicalize(g: MolGraph) -> MolGraph:
    order = canonical_order(g)
    perm = [0] * g.n_atoms
    for pos, a in enumerate(order):
        perm[a] = pos
    return g.relabel(perm)


def canonical_key(g: MolGraph) -> str:
    """Canonical serialization; equal strings iff the graphs are isomorphic."""
    return to_jsonl(canonicalize(g))


def isomorphic(g: MolGraph, h: MolGraph) -> bool:
    if g.n_atoms != h.n_atoms or len(g.bonds) != len(h.bonds):
        return False
    return canonical_key(g) == canonical_key(h)


_BOND_CHARS = {1: "", 2: "=", 3: "#"}


def to_smiles(g: MolGraph) -> str:
    """Write a connected graph in the SMILES subset (depth-first, branches in parentheses)."""
    if not is_connected(g):
        raise MalformedRecord("only connected graphs can be written as SMILES")
    adj = g.neighbors()
    order: dict[tuple[int, int], int] = {}
    for i, j, o in g.bonds:
        order[(i, j)] = order[(j, i)] = o
    # spanning tree by DFS; leftover bonds become ring closures
    parent = {0: None}
    children: dict[int, list[int]] = {a: [] for a in range(g.n_atoms)}
    stack = [0]
    visit = []
    while stack:
        a = stack.pop()
        visit.append(a)
        for b, _ in sorted(adj[a], reverse=True):
            if b not in parent:
                parent[b] = a
                children[a].append(b)
                stack.append(b)
    for a in children:
        children[a].sort()
    tree = {(a, p) for a, p in parent.items() if p is not None}
    tree |= {(p, a) for a, p in tree}
    closures = sorted((i, j) for i, j, _ in g.bonds if (i, j) not in tree)
    if len(closures) > 9:
        raise MalformedRecord("more than nine ring closures")
    digits: dict[int, list[tuple[str, int]]] = {a: [] for a in range(g.n_atoms)}
    for d, (i, j) in enumerate(closures, start=1):
        digits[i].append((str(d), order[(i, j)]))
        digits[j].append((str(d), order[(i, j)]))

    def emit(a: int) -> str:
        out = g.atoms[a] + "".join(_BOND_CHARS[o] + d for d, o in digits[a])
        kids = children[a]
        for k, b in enumerate(kids):
            piece = _BOND_CHARS[order[(a, b)]] + emit(b)
            out += piece if k == len(kids) - 1 else f"({piece})"
        return out

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * g.n_atoms + 100))
    try:
        return emit(0)
    finally:
        sys.setrecursionlimit(limit)
