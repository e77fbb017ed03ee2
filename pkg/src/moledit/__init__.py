"""Edit-based SMILES pre-training at desk scale.

Pipeline: tokenize SMILES, parse them into heavy-atom graphs, cut the
graphs into fragments and drop some, then train a small transformer
encoder to restore the original SMILES through deletion / placeholder
insertion / token-fill edits supervised by a Levenshtein expert. An MLM
baseline and substructure-probing experiments live alongside.
"""

__version__ = "0.1.0"

import os as _os

# On the small CPUs this targets, thread-pool contention between BLAS and
# the jitted kernels costs more than parallelism buys; single-threaded
# math is faster here and makes runs bit-reproducible regardless of core
# count. Effective only when moledit is imported before numpy/numba.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from moledit.tokenizer import TokenSeq, Vocab, tokenize, detokenize, build_vocab
from moledit.molgraph import MolGraph, parse_smiles, write_smiles

__all__ = [
    "TokenSeq",
    "Vocab",
    "tokenize",
    "detokenize",
    "build_vocab",
    "MolGraph",
    "parse_smiles",
    "write_smiles",
    "__version__",
]
