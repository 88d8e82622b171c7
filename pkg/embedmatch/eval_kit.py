"""Word error rate, named-entity error rate and the overlapping-segment check"""

import math
from enum import Enum
from typing import Hashable, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel
from rapidfuzz.distance import Levenshtein

from .embed_core import FloatArray
from .errors import InputError, InternalError


class EditOp(Enum):
    HIT = "hit"
    SUB = "sub"
    DEL = "del"
    INS = "ins"


class AlignedPair(NamedTuple):
    op: EditOp
    ref_index: int | None
    hyp_index: int | None


class ErrorCounts(BaseModel):
    hits: int = 0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0
    contact_words: int = 0
    contact_errors: int = 0

    def add(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            **{name: getattr(self, name) + getattr(other, name) for name in ErrorCounts.model_fields}
        )


class EvalReport(BaseModel):
    wer: float
    neer: float | None
    counts: ErrorCounts
    utterances: int


def align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> list[AlignedPair]:
    """Unit-cost Levenshtein alignment.

    The backtrace starts at the end and prefers, in order, a hit, a
    substitution, a deletion and an insertion, which pushes errors towards the
    start of the sequences.
    """
    m, n = len(ref), len(hyp)
    cost = np.zeros((m + 1, n + 1), dtype=np.int64)
    cost[:, 0] = np.arange(m + 1)
    cost[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            diagonal = cost[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            cost[i, j] = min(diagonal, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    pairs: list[AlignedPair] = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and cost[i, j] == cost[i - 1, j - 1]:
            pairs.append(AlignedPair(EditOp.HIT, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + 1:
            pairs.append(AlignedPair(EditOp.SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            pairs.append(AlignedPair(EditOp.DEL, i - 1, None))
            i -= 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            pairs.append(AlignedPair(EditOp.INS, None, j - 1))
            j -= 1
        else:
            raise InternalError("Alignment backtrace left the cost table")
    pairs.reverse()
    return pairs


def alignment_cost(pairs: Sequence[AlignedPair]) -> int:
    return sum(1 for p in pairs if p.op is not EditOp.HIT)


def count_errors(pairs: Sequence[AlignedPair], is_contact: Sequence[bool] | None = None) -> ErrorCounts:
    counts = {op: 0 for op in EditOp}
    contact_words = contact_errors = 0
    for pair in pairs:
        counts[pair.op] += 1
        if is_contact is not None and pair.ref_index is not None and is_contact[pair.ref_index]:
            contact_words += 1
            if pair.op is not EditOp.HIT:
                contact_errors += 1
    return ErrorCounts(
        hits=counts[EditOp.HIT],
        substitutions=counts[EditOp.SUB],
        insertions=counts[EditOp.INS],
        deletions=counts[EditOp.DEL],
        ref_words=counts[EditOp.HIT] + counts[EditOp.SUB] + counts[EditOp.DEL],
        contact_words=contact_words,
        contact_errors=contact_errors,
    )


def word_error_rate(counts: ErrorCounts) -> float:
    """(S + I + D) / N * 100; an empty reference gives 0 without errors, inf otherwise"""
    errors = counts.substitutions + counts.insertions + counts.deletions
    if counts.ref_words == 0:
        return 0.0 if errors == 0 else math.inf
    return 100.0 * errors / counts.ref_words


def neer(
    alignments: Sequence[Sequence[AlignedPair]], is_contact_masks: Sequence[Sequence[bool]]
) -> float | None:
    """Error rate over reference contact words only; None when there are none.

    Substitutions and deletions of a contact word count; insertions have no
    reference position and are excluded.
    """
    if len(alignments) != len(is_contact_masks):
        raise InputError("One contact mask is needed per alignment")
    words = errors = 0
    for pairs, mask in zip(alignments, is_contact_masks):
        counts = count_errors(pairs, mask)
        words += counts.contact_words
        errors += counts.contact_errors
    if words == 0:
        return None
    return 100.0 * errors / words


def evaluate(
    refs: Sequence[Sequence[str]],
    hyps: Sequence[Sequence[str]],
    is_contact_masks: Sequence[Sequence[bool]],
) -> EvalReport:
    if not len(refs) == len(hyps) == len(is_contact_masks):
        raise InputError("refs, hyps and masks must have the same length")
    total = ErrorCounts()
    alignments = []
    for ref, hyp, mask in zip(refs, hyps, is_contact_masks):
        if len(mask) != len(ref):
            raise InputError("Contact mask must have one entry per reference word")
        pairs = align(ref, hyp)
        if alignment_cost(pairs) != Levenshtein.distance(list(ref), list(hyp)):
            raise InternalError("Alignment cost disagrees with the Levenshtein distance")
        alignments.append(pairs)
        total = total.add(count_errors(pairs, mask))
    return EvalReport(
        wer=word_error_rate(total),
        neer=neer(alignments, is_contact_masks),
        counts=total,
        utterances=len(refs),
    )


def format_report(report: EvalReport) -> str:
    c = report.counts
    neer_text = "n/a" if report.neer is None else f"{report.neer:.2f}"
    rows = [
        ("Utterances", str(report.utterances)),
        ("Reference words", str(c.ref_words)),
        ("Hits", str(c.hits)),
        ("Substitutions", str(c.substitutions)),
        ("Insertions", str(c.insertions)),
        ("Deletions", str(c.deletions)),
        ("WER (%)", f"{report.wer:.2f}"),
        ("Contact words", str(c.contact_words)),
        ("Contact errors", str(c.contact_errors)),
        ("NEER (%)", neer_text),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def high_scoring_words(
    log_posteriors: FloatArray, span: tuple[int, int], threshold: float = -3.0
) -> set[int]:
    """Non-blank columns (1-based) reaching ``threshold`` somewhere inside ``span``"""
    start, end = span
    window = np.asarray(log_posteriors)[start:end, 1:]
    if window.size == 0:
        return set()
    return {int(c) + 1 for c in np.flatnonzero(window.max(axis=0) >= threshold)}


def overlap_check(
    log_posteriors: FloatArray,
    span: tuple[int, int],
    long_column: int,
    short_column: int,
    threshold: float = -3.0,
) -> bool:
    """True when both the long word and its prefix word score high inside the
    long word's segment"""
    found = high_scoring_words(log_posteriors, span, threshold)
    return long_column in found and short_column in found
