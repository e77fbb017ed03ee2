"""Levenshtein expert supervision and the edit environment.

The operation set is insertion + deletion only (a substitution costs 2),
matching the action space of the editing heads. All expert outputs are
deterministic: alignment ties break leftmost, preferring to match
earlier source positions and then earlier target positions.

Functions here work on plain token sequences; BOS/EOS sentinels, when
present at the ends, are excluded from alignment and never deleted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from moledit.tokenizer import BOS, EOS, PLACEHOLDER, TokenSeq

MAX_INSERT = 255


class OverlongInsertion(ValueError):
    """An insertion slot would need more than MAX_INSERT tokens."""


class ShapeMismatch(ValueError):
    """Edit action shape does not match the sequence it applies to."""


def _core(seq: TokenSeq | Sequence[str]) -> tuple[tuple[str, ...], bool, bool]:
    """Strip sentinels; returns (core tokens, had_bos, had_eos)."""
    if isinstance(seq, TokenSeq):
        return seq.core(), seq.has_bos, seq.has_eos
    tokens = tuple(seq)
    has_bos = bool(tokens) and tokens[0] == BOS
    has_eos = len(tokens) > int(has_bos) and tokens[-1] == EOS
    start = 1 if has_bos else 0
    stop = len(tokens) - 1 if has_eos else len(tokens)
    return tokens[start:stop], has_bos, has_eos


@dataclass(frozen=True)
class EditAlignment:
    """Matched (source, target) index pairs, strictly increasing in both."""

    pairs: tuple[tuple[int, int], ...]
    distance: int


def _lcs_suffix_table(ca: Sequence, cb: Sequence) -> "np.ndarray":
    # Intern tokens as ints so the DP can run as a compiled kernel.
    import numpy as np

    from moledit import _kernels

    ids: dict = {}
    a = np.fromiter((ids.setdefault(t, len(ids)) for t in ca), dtype=np.int64, count=len(ca))
    b = np.fromiter((ids.setdefault(t, len(ids)) for t in cb), dtype=np.int64, count=len(cb))
    return _kernels.lcs_suffix_table(a, b)


def align(a: TokenSeq | Sequence[str], b: TokenSeq | Sequence[str]) -> EditAlignment:
    """Leftmost maximum common subsequence of the two core sequences."""
    ca, _, _ = _core(a)
    cb, _, _ = _core(b)
    table = _lcs_suffix_table(ca, cb)
    pairs: list[tuple[int, int]] = []
    i = j = 0
    while i < len(ca) and j < len(cb):
        if ca[i] == cb[j] and table[i + 1][j + 1] + 1 == table[i][j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif table[i][j + 1] == table[i][j]:
            j += 1
        else:
            i += 1
    distance = len(ca) + len(cb) - 2 * len(pairs)
    return EditAlignment(tuple(pairs), distance)


def edit_distance(a: TokenSeq | Sequence[str], b: TokenSeq | Sequence[str]) -> int:
    """Minimal insert+delete count turning ``a`` into ``b``."""
    return align(a, b).distance


def expert_deletion(y: TokenSeq | Sequence[str], target: TokenSeq | Sequence[str]) -> list[int]:
    """Binary labels over ``y``: 1 for tokens the expert deletes.

    Labels cover the full input including sentinels, which are always 0.
    """
    cy, has_bos, has_eos = _core(y)
    matched = {i for i, _ in align(cy, target).pairs}
    labels = [0 if i in matched else 1 for i in range(len(cy))]
    if has_bos:
        labels.insert(0, 0)
    if has_eos:
        labels.append(0)
    return labels


def expert_insertion_plan(
    kept: TokenSeq | Sequence[str], target: TokenSeq | Sequence[str]
) -> tuple[list[int], list[str]]:
    """Placeholder counts per slot and the fill tokens, in order.

    ``kept`` must be a subsequence of ``target`` (true after expert
    deletion). Slot 0 sits before the first kept token (the BOS anchor);
    slot i counts target tokens strictly between kept token i-1 and kept
    token i; the final slot covers everything after the last kept token.
    """
    ck, _, _ = _core(kept)
    ct, _, _ = _core(target)
    alignment = align(ck, ct)
    if len(alignment.pairs) != len(ck):
        raise ValueError("kept sequence is not a subsequence of the target")
    positions = [j for _, j in alignment.pairs]
    bounds = [-1] + positions + [len(ct)]
    counts: list[int] = []
    fills: list[str] = []
    for slot in range(len(ck) + 1):
        lo, hi = bounds[slot], bounds[slot + 1]
        gap = hi - lo - 1
        if gap > MAX_INSERT:
            raise OverlongInsertion(f"slot {slot} needs {gap} insertions (max {MAX_INSERT})")
        counts.append(gap)
        fills.extend(ct[lo + 1 : hi])
    return counts, fills


def apply_deletion(y: Sequence[str], labels: Sequence[int]) -> list[str]:
    """Remove flagged tokens, preserving order."""
    if len(labels) != len(y):
        raise ShapeMismatch(f"{len(labels)} labels for {len(y)} tokens")
    return [tok for tok, flag in zip(y, labels) if not flag]


def apply_insertion(y: Sequence[str], counts: Sequence[int]) -> list[str]:
    """Insert ``counts[i]`` placeholders after slot i (slot 0 = before y[0])."""
    if len(counts) != len(y) + 1:
        raise ShapeMismatch(f"{len(counts)} slot counts for {len(y)} tokens")
    out: list[str] = [PLACEHOLDER] * counts[0]
    for tok, count in zip(y, counts[1:]):
        out.append(tok)
        out.extend([PLACEHOLDER] * count)
    return out


def fill_placeholders(y: Sequence[str], tokens: Sequence[str]) -> list[str]:
    """Replace placeholders left to right with ``tokens``."""
    n_holes = sum(1 for tok in y if tok == PLACEHOLDER)
    if n_holes != len(tokens):
        raise ShapeMismatch(f"{len(tokens)} fill tokens for {n_holes} placeholders")
    it = iter(tokens)
    return [next(it) if tok == PLACEHOLDER else tok for tok in y]


@dataclass(frozen=True)
class EditPlan:
    """The expert's full answer for one (source, target) pair."""

    deletions: tuple[int, ...]
    insertions: tuple[int, ...]
    fills: tuple[str, ...]
    distance: int

    def edit_count(self) -> int:
        return int(sum(self.deletions)) + int(sum(self.insertions))


def expert_plan(y: TokenSeq | Sequence[str], target: TokenSeq | Sequence[str]) -> EditPlan:
    """Deletion labels, insertion counts and fills that map ``y`` onto
    ``target`` exactly, using edit_distance(y, target) operations."""
    cy, _, _ = _core(y)
    ct, _, _ = _core(target)
    labels = expert_deletion(cy, ct)
    kept = apply_deletion(list(cy), labels)
    counts, fills = expert_insertion_plan(kept, ct)
    return EditPlan(
        tuple(labels), tuple(counts), tuple(fills), edit_distance(cy, ct)
    )


def apply_plan(y: Sequence[str], plan: EditPlan) -> list[str]:
    """Run the environment: delete, insert placeholders, fill."""
    kept = apply_deletion(list(y), plan.deletions)
    with_holes = apply_insertion(kept, plan.insertions)
    return fill_placeholders(with_holes, plan.fills)
