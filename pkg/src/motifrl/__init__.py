"""Motif-level discrete graph diffusion with KL-regularized RL fine-tuning."""

from .errors import MotifRLError
from .molgraph import MolGraph, check_validity, parse_molecule, parse_smiles, to_smiles
from .npe import MotifVocab, PaddedState, decode, detokenize, learn_vocab, pad, tokenize, unpad

__all__ = [
    "MolGraph",
    "MotifRLError",
    "MotifVocab",
    "PaddedState",
    "check_validity",
    "decode",
    "detokenize",
    "learn_vocab",
    "pad",
    "parse_molecule",
    "parse_smiles",
    "to_smiles",
    "tokenize",
    "unpad",
]

__version__ = "0.1.0"
