"""Learn a motif vocabulary on a synthetic corpus and see how much it shortens molecules.

Run with ``python3 demos/motif_compression.py``.
"""

from motifrl.npe import compression_stats, learn_vocab, tokenize
from motifrl.synth import assembly_corpus
from motifrl.theory import compression_bound, decision_counts

corpus = assembly_corpus(1000, seed=0, max_rings=3)

for V in (12, 24, 40):
    vocab = learn_vocab(corpus, V, R=4)
    n_atom, n_motif, chi, reduction = compression_stats(corpus, vocab)
    print(f"V={V:3d}  merges={len(vocab.merges):3d}  atoms/mol={n_atom:5.2f}  motifs/mol={n_motif:5.2f}  chi={chi:4.2f}")

# A single molecule, atom view vs motif view
g = corpus[0]
mg = tokenize(g, vocab)
print("\natoms:", g.n_atoms, "motif nodes:", mg.n_nodes)
for uid in mg.nodes:
    unit = vocab.units[uid]
    print(f"  unit {uid:2d} {unit.kind:6s} arity {unit.arity}")

# Fewer nodes means far fewer categorical decisions per reverse step
counts = decision_counts(round(n_atom), max(1, round(n_motif)))
print(f"\ndecisions per step: atom {counts.L_atom}, motif {counts.L_motif}, ratio {counts.ratio:.3f}")
print(f"upper bound 3/chi^2 at chi={chi:.2f}: {compression_bound(chi):.3f}")
