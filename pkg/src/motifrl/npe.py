"""Node-pair-encoding motif vocabulary, tokenization and fixed-slot padding.

A tokenized molecule is a :class:`MotifGraph`: each node is a vocabulary
unit instance covering a disjoint set of atoms, each edge carries the bond
order plus the 1-based attachment position on both endpoint units.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AttachMissing,
    AttachOutOfRange,
    EmptyCorpus,
    MalformedRecord,
    TooManyNodes,
    UnknownElement,
    UnknownUnit,
    VersionMismatch,
    VTooSmall,
)
from .molgraph import (
    MolGraph,
    canonical_key,
    canonical_order,
    check_validity,
    from_record,
    ring_systems,
    to_record,
)

VOCAB_FORMAT_VERSION = 1

# bond channel categories: 0 = no bond, 1..3 = bond order
D_E = 4


@dataclass(frozen=True)
class MotifUnit:
    id: int
    kind: str  # "atom", "ring" or "merge"
    fragment: MolGraph  # atoms listed in the unit's canonical order

    @property
    def arity(self) -> int:
        return self.fragment.n_atoms


MergeKey = tuple[int, int, int, int, int]


@dataclass
class MotifVocab:
    elements: tuple[str, ...]
    units: list[MotifUnit]
    merges: list[MergeKey]
    ring_index: dict[str, int] = field(default_factory=dict)

    @property
    def d_X(self) -> int:
        return len(self.units)

    @property
    def A_max(self) -> int:
        return max(u.arity for u in self.units)

    @property
    def d_P(self) -> int:
        return self.A_max + 1

    def element_id(self, symbol: str) -> int:
        try:
            return self.elements.index(symbol)
        except ValueError:
            raise UnknownElement(f"element {symbol!r} not in vocabulary") from None

    def unit(self, uid: int) -> MotifUnit:
        if not 0 <= uid < len(self.units):
            raise UnknownUnit(f"unit id {uid} outside 0..{len(self.units) - 1}")
        return self.units[uid]

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        rings = [to_record(u.fragment) for u in self.units if u.kind == "ring"]
        return {
            "format_version": VOCAB_FORMAT_VERSION,
            "elements": list(self.elements),
            "ring_units": rings,
            "merges": [list(m) for m in self.merges],
            "d_X": self.d_X,
            "A_max": self.A_max,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, obj: dict) -> "MotifVocab":
        if obj.get("format_version") != VOCAB_FORMAT_VERSION:
            raise VersionMismatch(
                f"vocab format {obj.get('format_version')!r}, expected {VOCAB_FORMAT_VERSION}"
            )
        vocab = _initial_vocab(tuple(obj["elements"]), [from_record(r) for r in obj["ring_units"]])
        for m in obj["merges"]:
            _append_merge(vocab, tuple(int(v) for v in m))
        if vocab.d_X != obj["d_X"] or vocab.A_max != obj["A_max"]:
            raise MalformedRecord("vocab header disagrees with its reconstructed units")
        return vocab

    @classmethod
    def loads(cls, text: str) -> "MotifVocab":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "MotifVocab":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _initial_vocab(elements: tuple[str, ...], ring_fragments: Sequence[MolGraph]) -> MotifVocab:
    units = [MotifUnit(k, "atom", MolGraph((sym,))) for k, sym in enumerate(elements)]
    vocab = MotifVocab(elements, units, [])
    for frag in ring_fragments:
        uid = len(vocab.units)
        vocab.units.append(MotifUnit(uid, "ring", frag))
        vocab.ring_index[canonical_key(frag)] = uid
    return vocab


def _merged_fragment(left: MolGraph, right: MolGraph, order: int, pl: int, pr: int) -> MolGraph:
    nl = left.n_atoms
    bonds = list(left.bonds)
    bonds += [(i + nl, j + nl, o) for i, j, o in right.bonds]
    bonds.append((pl - 1, nl + pr - 1, order))
    return MolGraph(left.atoms + right.atoms, tuple(bonds))


def _append_merge(vocab: MotifVocab, key: MergeKey) -> MotifUnit:
    l, r, order, pl, pr = key
    left, right = vocab.unit(l), vocab.unit(r)
    if not (1 <= pl <= left.arity and 1 <= pr <= right.arity):
        raise AttachOutOfRange(f"merge {key} attaches outside unit arity")
    unit = MotifUnit(len(vocab.units), "merge", _merged_fragment(left.fragment, right.fragment, order, pl, pr))
    vocab.units.append(unit)
    vocab.merges.append(key)
    return unit


# --------------------------------------------------------------------------
# motif graphs


@dataclass(frozen=True)
class MotifGraph:
    nodes: tuple[int, ...]
    # (i, j, bond order, attach_i, attach_j) with i < j
    edges: tuple[tuple[int, int, int, int, int], ...] = ()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


class _Work:
    """Mutable tokenization state for one molecule."""

    def __init__(self, units: list[int], members: list[list[int]], g: MolGraph):
        self.units = units
        self.members = members  # molecule atom ids in unit canonical order
        owner = {}
        for n, atoms in enumerate(members):
            for pos, a in enumerate(atoms):
                owner[a] = (n, pos + 1)
        # edges[(i, j)] = (order, attach_i, attach_j), i < j
        self.edges: dict[tuple[int, int], tuple[int, int, int]] = {}
        for a, b, o in g.bonds:
            (na, pa), (nb, pb) = owner[a], owner[b]
            if na == nb:
                continue
            if na > nb:
                na, nb, pa, pb = nb, na, pb, pa
            self.edges[(na, nb)] = (o, pa, pb)

    def neighbor_sets(self) -> list[set[int]]:
        nbrs: list[set[int]] = [set() for _ in self.units]
        for i, j in self.edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        return nbrs

    def pair_key(self, i: int, j: int) -> tuple[MergeKey, bool]:
        """Orientation-normalized merge key for edge (i, j); flag True if j is the left unit."""
        o, pi, pj = self.edges[(i, j)]
        a = (self.units[i], self.units[j], o, pi, pj)
        b = (self.units[j], self.units[i], o, pj, pi)
        return (a, False) if a <= b else (b, True)

    def mergeable(self, i: int, j: int, nbrs: list[set[int]]) -> bool:
        # a shared neighbour would turn into a double motif edge
        return not (nbrs[i] & nbrs[j])

    def count_pairs(self, counts: Counter, exclude: set) -> None:
        nbrs = self.neighbor_sets()
        for i, j in self.edges:
            if self.mergeable(i, j, nbrs):
                key, _ = self.pair_key(i, j)
                if key not in exclude:
                    counts[key] += 1

    def apply(self, key: MergeKey, new_unit: int, left_arity: int) -> int:
        """Greedy non-overlapping application of one merge rule; returns merge count."""
        used: set[int] = set()
        alive = [True] * len(self.units)
        done = 0
        for i, j in sorted(self.edges):
            if (i, j) not in self.edges or i in used or j in used:
                continue
            k, flipped = self.pair_key(i, j)
            if k != key:
                continue
            if not self.mergeable(i, j, self.neighbor_sets()):
                continue
            left, right = (j, i) if flipped else (i, j)
            self._merge_into(i, j, left, right, new_unit, left_arity)
            alive[j] = False
            used.update((i, j))
            done += 1
        if done:
            self._compact(alive)
        return done

    def _merge_into(self, i, j, left, right, new_unit, nl):
        # new node lives at slot i (the smaller index); j is retired
        shift = {left: 0, right: nl}
        members = self.members[left] + self.members[right]
        del self.edges[(i, j)]
        moved = {}
        for (a, b), (o, pa, pb) in list(self.edges.items()):
            if a in (i, j) or b in (i, j):
                del self.edges[(a, b)]
                if a in (i, j):
                    pa += shift[a]
                    a = i
                if b in (i, j):
                    pb += shift[b]
                    b = i
                if a > b:
                    a, b, pa, pb = b, a, pb, pa
                moved[(a, b)] = (o, pa, pb)
        self.edges.update(moved)
        self.units[i] = new_unit
        self.members[i] = members

    def _compact(self, alive: list[bool]) -> None:
        remap, k = {}, 0
        for n, ok in enumerate(alive):
            if ok:
                remap[n] = k
                k += 1
        self.units = [u for u, ok in zip(self.units, alive) if ok]
        self.members = [m for m, ok in zip(self.members, alive) if ok]
        self.edges = {(remap[a], remap[b]): v for (a, b), v in self.edges.items()}

    def to_motif_graph(self) -> MotifGraph:
        edges = tuple((i, j, o, pi, pj) for (i, j), (o, pi, pj) in sorted(self.edges.items()))
        return MotifGraph(tuple(self.units), edges)


def _initial_work(g: MolGraph, vocab: MotifVocab) -> _Work:
    grouped: dict[int, tuple[int, list[int]]] = {}
    if vocab.ring_index:
        for system in ring_systems(g):
            sub = g.subgraph(system)
            uid = vocab.ring_index.get(canonical_key(sub))
            if uid is not None:
                order = canonical_order(sub)
                grouped[system[0]] = (uid, [system[k] for k in order])
    covered = {a for _, atoms in grouped.values() for a in atoms}
    units, members = [], []
    for a, sym in enumerate(g.atoms):
        if a in grouped:
            uid, atoms = grouped[a]
            units.append(uid)
            members.append(atoms)
        elif a not in covered:
            units.append(vocab.element_id(sym))
            members.append([a])
    return _Work(units, members, g)


def tokenize(g: MolGraph, vocab: MotifVocab) -> MotifGraph:
    """Motif graph of ``g``: ring grouping, then every merge rule in learned order."""
    work = _initial_work(g, vocab)
    n_base = len(vocab.elements) + len(vocab.ring_index)
    for k, key in enumerate(vocab.merges):
        work.apply(key, n_base + k, vocab.units[key[0]].arity)
    return work.to_motif_graph()


def tokenize_with_members(g: MolGraph, vocab: MotifVocab) -> tuple[MotifGraph, list[list[int]]]:
    """Like :func:`tokenize` but also returns the molecule atoms covered by each node."""
    work = _initial_work(g, vocab)
    n_base = len(vocab.elements) + len(vocab.ring_index)
    for k, key in enumerate(vocab.merges):
        work.apply(key, n_base + k, vocab.units[key[0]].arity)
    return work.to_motif_graph(), [list(m) for m in work.members]


def detokenize(mg: MotifGraph, vocab: MotifVocab) -> MolGraph:
    atoms: list[str] = []
    bonds: list[tuple[int, int, int]] = []
    offsets = []
    for uid in mg.nodes:
        frag = vocab.unit(uid).fragment
        off = len(atoms)
        offsets.append(off)
        atoms.extend(frag.atoms)
        bonds.extend((i + off, j + off, o) for i, j, o in frag.bonds)
    for i, j, o, pi, pj in mg.edges:
        ai, aj = vocab.units[mg.nodes[i]].arity, vocab.units[mg.nodes[j]].arity
        if not (1 <= pi <= ai and 1 <= pj <= aj):
            raise AttachOutOfRange(f"edge ({i}, {j}) attaches at ({pi}, {pj}) beyond arity ({ai}, {aj})")
        bonds.append((offsets[i] + pi - 1, offsets[j] + pj - 1, o))
    return MolGraph(tuple(atoms), tuple(bonds))


# --------------------------------------------------------------------------
# vocabulary learning


def _ring_fragments(corpus: Sequence[MolGraph], R: int) -> list[MolGraph]:
    counts: Counter = Counter()
    frags: dict[str, MolGraph] = {}
    for g in corpus:
        for system in ring_systems(g):
            sub = g.subgraph(system)
            key = canonical_key(sub)
            counts[key] += 1
            if key not in frags:
                order = canonical_order(sub)
                frags[key] = sub.subgraph(order)
    ranked = sorted(counts, key=lambda k: (-counts[k], k))
    return [frags[k] for k in ranked[:R]]


def learn_vocab(corpus: Sequence[MolGraph], V: int, R: int = 0) -> MotifVocab:
    """Learn a motif vocabulary of (at most) ``V`` units with up to ``R`` ring units."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("cannot learn a vocabulary from an empty corpus")
    for g in corpus:
        if not check_validity(g).is_valid:
            raise MalformedRecord(f"corpus molecule is not valid: {g}")
    elements = tuple(sorted({a for g in corpus for a in g.atoms} | {"*"}))
    if V < len(elements) + R:
        raise VTooSmall(f"V={V} smaller than {len(elements)} elements + R={R}")
    vocab = _initial_vocab(elements, _ring_fragments(corpus, R) if R > 0 else [])
    works = [_initial_work(g, vocab) for g in corpus]
    merged: set = set()
    while vocab.d_X < V:
        counts: Counter = Counter()
        for w in works:
            w.count_pairs(counts, merged)
        if not counts:
            break
        key = min(counts, key=lambda k: (-counts[k], k))
        if counts[key] < 2:
            break
        unit = _append_merge(vocab, key)
        merged.add(key)
        nl = vocab.units[key[0]].arity
        for w in works:
            w.apply(key, unit.id, nl)
    return vocab


def compression_stats(corpus: Sequence[MolGraph], vocab: MotifVocab) -> tuple[float, float, float, float]:
    """(mean atom nodes, mean motif nodes, compression ratio, reduction %)."""
    if not corpus:
        raise EmptyCorpus("compression statistics need at least one molecule")
    n_atom = float(np.mean([g.n_atoms for g in corpus]))
    n_motif = float(np.mean([tokenize(g, vocab).n_nodes for g in corpus]))
    chi = n_atom / n_motif
    return n_atom, n_motif, chi, 100.0 * (1.0 - n_motif / n_atom)


# --------------------------------------------------------------------------
# padded states


@dataclass
class PaddedState:
    """Fixed-slot state: motif labels X, bond labels E, attachment labels P, mask m."""

    X: np.ndarray  # (N,) int
    E: np.ndarray  # (N, N) int, symmetric, 0 = no bond
    P: np.ndarray  # (N, N) int, directional, 0 = null
    m: np.ndarray  # (N,) int in {0, 1}

    @property
    def n_max(self) -> int:
        return len(self.X)

    @property
    def n_active(self) -> int:
        return int(self.m.sum())

    def copy(self) -> "PaddedState":
        return PaddedState(self.X.copy(), self.E.copy(), self.P.copy(), self.m.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PaddedState):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in ((self.X, other.X), (self.E, other.E), (self.P, other.P), (self.m, other.m))
        )


def pad(mg: MotifGraph, n_max: int) -> PaddedState:
    n = mg.n_nodes
    if n > n_max:
        raise TooManyNodes(f"{n} motif nodes exceed N_max={n_max}")
    X = np.zeros(n_max, dtype=np.int64)
    E = np.zeros((n_max, n_max), dtype=np.int64)
    P = np.zeros((n_max, n_max), dtype=np.int64)
    m = np.zeros(n_max, dtype=np.int64)
    X[:n] = mg.nodes
    m[:n] = 1
    for i, j, o, pi, pj in mg.edges:
        E[i, j] = E[j, i] = o
        P[i, j] = pi
        P[j, i] = pj
    return PaddedState(X, E, P, m)


def unpad(z: PaddedState) -> MotifGraph:
    """Motif graph read off the active slots; edges exist where ``E != 0``."""
    active = np.flatnonzero(z.m)
    n = len(active)
    index = {int(s): k for k, s in enumerate(active)}
    nodes = tuple(int(z.X[s]) for s in active)
    edges = []
    for a in range(n):
        for b in range(a + 1, n):
            i, j = int(active[a]), int(active[b])
            o = int(z.E[i, j])
            if o == 0:
                continue
            pi, pj = int(z.P[i, j]), int(z.P[j, i])
            if pi == 0 or pj == 0:
                raise AttachMissing(f"bond between slots {i} and {j} has a null attachment")
            edges.append((index[i], index[j], o, pi, pj))
    return MotifGraph(nodes, tuple(edges))


def decode(z: PaddedState, vocab: MotifVocab) -> MolGraph:
    """``detokenize(unpad(z))``; raises on inconsistent generated states."""
    return detokenize(unpad(z), vocab)


def encode_corpus(corpus: Iterable[MolGraph], vocab: MotifVocab, n_max: int) -> list[PaddedState]:
    return [pad(tokenize(g, vocab), n_max) for g in corpus]
