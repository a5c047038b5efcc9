"""Programmatic corpora: random SMILES-subset molecules and ring/linker assemblies."""

from __future__ import annotations

import numpy as np

from .molgraph import MolGraph, check_validity, max_valence, parse_smiles, to_smiles

_ELEMENT_WEIGHTS = {
    "C": 0.6,
    "N": 0.12,
    "O": 0.12,
    "F": 0.04,
    "S": 0.04,
    "Cl": 0.03,
    "Br": 0.02,
    "P": 0.02,
    "B": 0.01,
}


def _distance(adj: list[set[int]], a: int, b: int) -> int:
    frontier, seen, d = {a}, {a}, 0
    while frontier:
        if b in frontier:
            return d
        frontier = {y for x in frontier for y in adj[x]} - seen
        seen |= frontier
        d += 1
    return -1


def random_molecule(rng: np.random.Generator, min_atoms: int = 2, max_atoms: int = 12, max_rings: int = 2) -> MolGraph:
    """Random connected valence-valid graph: random tree plus a few ring bonds."""
    symbols = list(_ELEMENT_WEIGHTS)
    weights = np.array(list(_ELEMENT_WEIGHTS.values()))
    weights /= weights.sum()
    n = int(rng.integers(min_atoms, max_atoms + 1))
    atoms = ["C"]
    free = [4]
    bonds: list[tuple[int, int, int]] = []
    adj: list[set[int]] = [set()]
    while len(atoms) < n:
        hosts = [a for a in range(len(atoms)) if free[a] >= 1]
        if not hosts:
            break
        host = hosts[int(rng.integers(len(hosts)))]
        sym = symbols[int(rng.choice(len(symbols), p=weights))]
        cap = int(min(max_valence(sym), 4))
        order = int(rng.choice([1, 2, 3], p=[0.82, 0.15, 0.03]))
        order = max(1, min(order, free[host], cap))
        k = len(atoms)
        atoms.append(sym)
        free.append(cap - order)
        free[host] -= order
        bonds.append((host, k, order))
        adj[host].add(k)
        adj.append({host})
    for _ in range(int(rng.integers(0, max_rings + 1))):
        cand = [
            (i, j)
            for i in range(len(atoms))
            for j in range(i + 1, len(atoms))
            if free[i] >= 1 and free[j] >= 1 and 2 <= _distance(adj, i, j) <= 6
        ]
        if not cand:
            break
        i, j = cand[int(rng.integers(len(cand)))]
        bonds.append((i, j, 1))
        free[i] -= 1
        free[j] -= 1
        adj[i].add(j)
        adj[j].add(i)
    return MolGraph(tuple(atoms), tuple(bonds))


def random_smiles(rng: np.random.Generator, **kwargs) -> str:
    return to_smiles(random_molecule(rng, **kwargs))


def smiles_corpus(n: int, seed: int = 0, **kwargs) -> list[MolGraph]:
    """``n`` molecules written as SMILES-subset strings and parsed back."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        g = parse_smiles(random_smiles(rng, **kwargs))
        if check_validity(g).is_valid:
            out.append(g)
    return out


# --------------------------------------------------------------------------
# ring / linker assemblies

RING_BLOCKS = ("C1CCCCC1", "C1CCCC1", "C1CC1", "C1CCNCC1")
LINKERS = ("", "C", "CC", "O", "N", "CO")
END_GROUPS = ("C", "CC", "O", "N", "F", "Cl", "C(=O)O", "CC(C)C")


class _Builder:
    def __init__(self):
        self.atoms: list[str] = []
        self.bonds: list[tuple[int, int, int]] = []

    def add(self, frag: MolGraph) -> int:
        off = len(self.atoms)
        self.atoms.extend(frag.atoms)
        self.bonds.extend((i + off, j + off, o) for i, j, o in frag.bonds)
        return off

    def link(self, a: int, b: int) -> None:
        self.bonds.append((a, b, 1))

    def graph(self) -> MolGraph:
        return MolGraph(tuple(self.atoms), tuple(self.bonds))


def _frag(smiles: str) -> MolGraph | None:
    return parse_smiles(smiles) if smiles else None


def assembly_molecule(rng: np.random.Generator, max_rings: int = 3) -> MolGraph:
    """End group, then ``k`` (linker, ring) pairs, then an end group; ``k`` uniform in 0..max_rings."""
    b = _Builder()
    k = int(rng.integers(0, max_rings + 1))
    tail = b.add(_frag(END_GROUPS[int(rng.integers(len(END_GROUPS)))]))
    for _ in range(k):
        linker = _frag(LINKERS[int(rng.integers(len(LINKERS)))])
        if linker is not None:
            off = b.add(linker)
            b.link(tail, off)
            tail = off + linker.n_atoms - 1
        ring = _frag(RING_BLOCKS[int(rng.integers(len(RING_BLOCKS)))])
        off = b.add(ring)
        carbons = [a for a, s in enumerate(ring.atoms) if s == "C"]
        entry, exit_ = rng.choice(carbons, size=2, replace=False)
        b.link(tail, off + int(entry))
        tail = off + int(exit_)
    end = _frag(END_GROUPS[int(rng.integers(len(END_GROUPS)))])
    off = b.add(end)
    b.link(tail, off)
    return b.graph()


def assembly_corpus(n: int, seed: int = 0, max_rings: int = 3) -> list[MolGraph]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        g = assembly_molecule(rng, max_rings)
        if check_validity(g).is_valid:
            out.append(g)
    return out
