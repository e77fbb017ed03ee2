"""SMILES tokenizer and vocabulary.

The lexical grammar is fixed and scanned greedily left to right, first
match wins:

  1. bracket atom: '[' up to the next ']' (inclusive)
  2. two-letter halogens 'Br' / 'Cl'
  3. single-letter atoms B C N O S P F I b c n o s p
  4. '%' followed by exactly two digits (extended ring closure)
  5. one of 0-9 ( ) . = # - + \\ / : ~ @ ? > * $

Every other character is a lexical error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
UNK = "[UNK]"
PLACEHOLDER = "[P]"
MASK = "[MASK]"

#: Special tokens in their fixed id order (ids 0..5).
SPECIALS = (PAD, BOS, EOS, UNK, PLACEHOLDER, MASK)

PAD_ID, BOS_ID, EOS_ID, UNK_ID, PLACEHOLDER_ID, MASK_ID = range(6)

_TWO_LETTER = ("Br", "Cl")
_ONE_LETTER = frozenset("BCNOSPFIbcnosp")
_PUNCT = frozenset("0123456789().=#-+\\/:~@?>*$")
_DIGITS = frozenset("0123456789")


class LexError(ValueError):
    """Character not matched by the token grammar."""

    def __init__(self, position: int, message: str | None = None):
        self.position = position
        super().__init__(message or f"illegal character at position {position}")


class UnterminatedBracket(LexError):
    """A '[' with no closing ']'."""

    def __init__(self, position: int):
        super().__init__(position, f"unterminated bracket atom at position {position}")


@dataclass(frozen=True)
class TokenSeq:
    """An ordered token sequence, optionally wrapped in BOS/EOS sentinels."""

    tokens: tuple[str, ...]
    has_bos: bool = False
    has_eos: bool = False

    def __post_init__(self):
        if self.has_bos and (not self.tokens or self.tokens[0] != BOS):
            raise ValueError("has_bos set but first token is not BOS")
        if self.has_eos and (not self.tokens or self.tokens[-1] != EOS):
            raise ValueError("has_eos set but last token is not EOS")

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tokens)

    def core(self) -> tuple[str, ...]:
        """Tokens with sentinels stripped."""
        start = 1 if self.has_bos else 0
        stop = len(self.tokens) - 1 if self.has_eos else len(self.tokens)
        return self.tokens[start:stop]

    def with_sentinels(self) -> "TokenSeq":
        return TokenSeq((BOS,) + self.core() + (EOS,), has_bos=True, has_eos=True)


def tokenize(smiles: str) -> TokenSeq:
    """Split a SMILES string into grammar tokens.

    Raises LexError (with the offending position) on characters outside
    the grammar and UnterminatedBracket if a '[' never closes.
    """
    tokens: list[str] = []
    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i + 1)
            if end < 0:
                raise UnterminatedBracket(i)
            tokens.append(smiles[i : end + 1])
            i = end + 1
        elif smiles[i : i + 2] in _TWO_LETTER:
            tokens.append(smiles[i : i + 2])
            i += 2
        elif ch in _ONE_LETTER:
            tokens.append(ch)
            i += 1
        elif ch == "%":
            if i + 2 >= n or smiles[i + 1] not in _DIGITS or smiles[i + 2] not in _DIGITS:
                raise LexError(i, f"'%' at position {i} must be followed by two digits")
            tokens.append(smiles[i : i + 3])
            i += 3
        elif ch in _PUNCT:
            tokens.append(ch)
            i += 1
        else:
            raise LexError(i)
    return TokenSeq(tuple(tokens))


def detokenize(seq: TokenSeq | Sequence[str]) -> str:
    """Concatenate non-sentinel tokens back into text."""
    if isinstance(seq, TokenSeq):
        return "".join(seq.core())
    return "".join(seq)


@dataclass(frozen=True)
class Vocab:
    """Token/id tables shared by all heads.

    Ids 0..5 are the specials in SPECIALS order; the rest are corpus
    tokens sorted lexicographically, so two vocabularies built from the
    same token set are identical.
    """

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if self.id_to_token[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocab must start with the six special tokens")
        if not self.token_to_id:
            object.__setattr__(
                self, "token_to_id", {t: i for i, t in enumerate(self.id_to_token)}
            )

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]


def read_corpus(lines: Iterable[str]) -> Iterator[str]:
    """Yield SMILES from corpus lines: strip trailing whitespace, skip
    blank lines and '#' comments."""
    for line in lines:
        line = line.rstrip()
        if not line or line.startswith("#"):
            continue
        yield line


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Collect every distinct token in the corpus into a Vocab.

    Lines are tokenized with the fixed grammar; a LexError is re-raised
    with the 1-based line number attached.
    """
    seen: set[str] = set()
    for lineno, smiles in enumerate(read_corpus(corpus), start=1):
        try:
            seen.update(tokenize(smiles).tokens)
        except LexError as err:
            raise LexError(err.position, f"line {lineno}: {err}") from err
    seen.difference_update(SPECIALS)
    return Vocab(SPECIALS + tuple(sorted(seen)))


def encode(seq: TokenSeq | Sequence[str], vocab: Vocab, add_sentinels: bool = False) -> list[int]:
    """Map tokens to ids; unknown tokens fall back to [UNK]."""
    tokens = seq.core() if isinstance(seq, TokenSeq) else tuple(seq)
    ids = [vocab.id_of(t) for t in tokens]
    if add_sentinels:
        return [BOS_ID] + ids + [EOS_ID]
    return ids


def decode(ids: Sequence[int], vocab: Vocab, strip_sentinels: bool = True) -> list[str]:
    """Map ids back to tokens, optionally dropping BOS/EOS."""
    tokens = [vocab.token_of(i) for i in ids]
    if strip_sentinels:
        tokens = [t for t in tokens if t not in (BOS, EOS, PAD)]
    return tokens
