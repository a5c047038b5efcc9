import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from motifrl.errors import MalformedRecord, UnbalancedParen, UnclosedRing, UnsupportedToken
from motifrl.molgraph import (
    MolGraph,
    canonical_key,
    check_validity,
    descriptors,
    isomorphic,
    parse_molecule,
    parse_smiles,
    ring_count,
    ring_systems,
    to_jsonl,
    to_smiles,
)
from motifrl.synth import random_molecule


def mol(seed, **kw):
    return random_molecule(np.random.default_rng(seed), **kw)


# -- parsing ------------------------------------------------------------------


def test_parse_single_atom():
    assert parse_smiles("C") == MolGraph(("C",), ())


def test_parse_double_bond():
    assert parse_smiles("O=O") == MolGraph(("O", "O"), ((0, 1, 2),))


def test_parse_ring_closure():
    g = parse_smiles("C1CC1")
    assert g.atoms == ("C", "C", "C")
    assert set(g.bonds) == {(0, 1, 1), (1, 2, 1), (0, 2, 1)}


def test_parse_branches_and_two_letter_elements():
    g = parse_smiles("CC(Cl)(Br)C#N")
    assert g.atoms == ("C", "C", "Cl", "Br", "C", "N")
    assert (4, 5, 3) in g.bonds
    assert {(1, 2, 1), (1, 3, 1), (1, 4, 1)} <= set(g.bonds)


@pytest.mark.parametrize("text", ["c1ccccc1", "C[NH4+]", "F/C=C/F", "C@C", "C-"])
def test_parse_rejects_outside_grammar(text):
    with pytest.raises((UnsupportedToken, MalformedRecord)):
        parse_smiles(text)


@pytest.mark.parametrize("text", ["c", "[C]", "C+", "C@"])
def test_unsupported_tokens(text):
    with pytest.raises(UnsupportedToken):
        parse_smiles(text)


def test_unclosed_ring():
    with pytest.raises(UnclosedRing):
        parse_smiles("C1CC")


@pytest.mark.parametrize("text", ["C(C", "CC)C", "(C)C"])
def test_unbalanced_paren(text):
    with pytest.raises(UnbalancedParen):
        parse_smiles(text)


@pytest.mark.parametrize(
    "line",
    ['{"atoms": ["C"], "bonds": [[0, 0, 1]]}', '{"atoms": ["Xx"]}', "[1, 2]", "{not json", '{"atoms": ["C", "C"], "bonds": [[0, 1, 4]]}'],
)
def test_malformed_records(line):
    with pytest.raises(MalformedRecord):
        parse_molecule(line, "jsonl")


def test_jsonl_schema_is_exact():
    g = parse_smiles("CN")
    assert to_jsonl(g) == '{"atoms": ["C", "N"], "bonds": [[0, 1, 1]]}'


@given(st.integers(0, 10**6))
def test_jsonl_roundtrip(seed):
    g = mol(seed)
    assert parse_molecule(to_jsonl(g), "jsonl") == g


@given(st.integers(0, 10**6))
def test_smiles_writer_roundtrip(seed):
    g = mol(seed)
    assert isomorphic(parse_smiles(to_smiles(g)), g)


# -- validity -------------------------------------------------------------------


def test_validity_examples():
    assert check_validity(MolGraph(("C",))).is_valid
    o2 = check_validity(MolGraph(("O", "O"), ((0, 1, 2),)))
    assert o2.is_valid and o2.is_connected


def test_pentavalent_carbon_is_flagged():
    g = MolGraph(("C",) + ("F",) * 5, tuple((0, k, 1) for k in range(1, 6)))
    rep = check_validity(g)
    assert not rep.is_valid
    assert [(v[0], v[1]) for v in rep.violations] == [(0, 5)]


def test_disconnected_is_invalid():
    rep = check_validity(MolGraph(("C", "C")))
    assert not rep.is_connected and not rep.violations and not rep.is_valid


def test_wildcard_has_unbounded_valence():
    g = MolGraph(("*",) + ("C",) * 6, tuple((0, k, 1) for k in range(1, 7)))
    assert check_validity(g).is_valid


def test_multivalent_elements():
    assert check_validity(parse_smiles("O=S(=O)(O)O")).is_valid
    assert check_validity(parse_smiles("OP(=O)(O)O")).is_valid
    assert not check_validity(parse_smiles("C=N(=O)C")).is_valid


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_validity_is_order_independent(seed, pseed):
    g = mol(seed)
    perm = list(np.random.default_rng(pseed).permutation(g.n_atoms))
    h = g.relabel(perm)
    assert check_validity(h).is_valid == check_validity(g).is_valid
    assert canonical_key(h) == canonical_key(g)


# -- rings and descriptors ----------------------------------------------------------


def test_ring_systems_examples():
    assert ring_systems(parse_smiles("CCCC")) == []
    assert [sorted(s) for s in ring_systems(parse_smiles("C1CC1"))] == [[0, 1, 2]]
    fused = MolGraph(("C",) * 4, ((0, 1, 1), (0, 2, 1), (1, 2, 1), (1, 3, 1), (2, 3, 1)))
    assert [sorted(s) for s in ring_systems(fused)] == [[0, 1, 2, 3]]


def test_ring_systems_separate_rings():
    g = parse_smiles("C1CC1CCC1CCC1")
    assert sorted(len(s) for s in ring_systems(g)) == [3, 4]


def test_descriptor_examples():
    np.testing.assert_array_equal(descriptors(MolGraph(("C",))), [1, 0, 0, 0, 0, 0, 0, 0])
    d = descriptors(parse_smiles("C1CC1"))
    assert d[0] == 3 and d[2] == 1 and list(d[3:6]) == [3, 0, 0]
    d = descriptors(parse_smiles("O=O"))
    assert d[1] == 2 and list(d[3:6]) == [0, 1, 0]
    assert descriptors(parse_smiles("*CC*"))[6] == 2
    assert descriptors(parse_smiles("CC"))[7] == 1.0


def _simple_cycles(g):
    """Edge sets of all simple cycles by brute force over vertex sequences."""
    adj = {a: set() for a in range(g.n_atoms)}
    for i, j, _ in g.bonds:
        adj[i].add(j)
        adj[j].add(i)
    cycles = set()

    def walk(start, path):
        for nxt in adj[path[-1]]:
            if nxt == start and len(path) >= 3:
                cycles.add(frozenset(frozenset(e) for e in zip(path, path[1:] + [start])))
            elif nxt > start and nxt not in path:
                walk(start, path + [nxt])

    for s in range(g.n_atoms):
        walk(s, [s])
    return cycles


def _gf2_rank(rows):
    rows = [r for r in rows]
    rank = 0
    bit = 0
    width = max((r.bit_length() for r in rows), default=0)
    while bit < width:
        piv = next((k for k in range(rank, len(rows)) if rows[k] >> bit & 1), None)
        if piv is not None:
            rows[rank], rows[piv] = rows[piv], rows[rank]
            for k in range(len(rows)):
                if k != rank and rows[k] >> bit & 1:
                    rows[k] ^= rows[rank]
            rank += 1
        bit += 1
    return rank


@given(st.integers(0, 10**6))
def test_ring_count_matches_cycle_space_rank(seed):
    g = mol(seed, max_atoms=8, max_rings=3)
    index = {frozenset((i, j)): k for k, (i, j, _) in enumerate(g.bonds)}
    rows = [sum(1 << index[e] for e in cyc) for cyc in _simple_cycles(g)]
    assert ring_count(g) == _gf2_rank(rows) == descriptors(g)[2]


def test_descriptors_are_non_negative_and_fixed_length():
    for seed in range(30):
        d = descriptors(mol(seed))
        assert d.shape == (8,) and np.all(d >= 0)


def test_canonical_key_separates_non_isomorphic():
    keys = {canonical_key(parse_smiles(s)) for s in ["CCO", "COC", "C1CC1", "CC=C", "OCC"]}
    assert len(keys) == 4


def test_canonical_key_under_all_permutations():
    g = parse_smiles("CC(N)C1CC1O")
    ref = canonical_key(g)
    rng = np.random.default_rng(0)
    for perm in itertools.islice(itertools.permutations(range(g.n_atoms)), 0, 5040, 97):
        assert canonical_key(g.relabel(list(perm))) == ref
    assert canonical_key(g.relabel(list(rng.permutation(g.n_atoms)))) == ref
