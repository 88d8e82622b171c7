"""CTC prefix beam search over word posteriors with class-LM shallow fusion.

The LM is applied when a hypothesis is extended by a new word. Scores are
natural-log: ``log P_ctc(prefix) + lm_scale * ln(10) * log10 P_lm(prefix)``,
with the ``</s>`` term added for final hypotheses. Exact score ties are broken
in favour of the lexicographically smallest prefix.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, final

import numpy as np
from pydantic import BaseModel, Field

from .class_lm import LMState, NGramLM
from .embed_core import CombinationMode, FloatArray
from .errors import ConfigurationError
from .pron_lexicon import PronLexicon

logger = logging.getLogger(__name__)

LN10 = math.log(10.0)


class DecoderConfig(BaseModel):
    beam_width: int = Field(default=16, ge=1)
    top_k_posteriors: int = Field(default=48, ge=1)
    lm_scale: float = Field(default=0.5, ge=0.0)
    blank_divisor: float = Field(default=1.0, ge=1.0)
    combination: CombinationMode = CombinationMode.SUM


@dataclass(slots=True)
class BeamHypothesis:
    prefix: tuple[int, ...]
    p_blank: float
    p_nonblank: float
    lm_state: LMState
    lm_logprob: float  # accumulated log10

    @property
    def acoustic(self) -> float:
        return _log_add(self.p_blank, self.p_nonblank)


class DecodeResult(NamedTuple):
    words: tuple[int, ...]
    score: float


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def apply_blank_heuristic(posteriors: FloatArray, divisor: float) -> FloatArray:
    """Divide the blank column by ``divisor``; other entries untouched, no renormalisation"""
    if divisor < 1.0:
        raise ConfigurationError(f"blank_divisor must be >= 1, got {divisor}")
    adjusted = np.array(posteriors, dtype=np.float64)
    adjusted[..., 0] /= divisor
    return adjusted


def top_k_prune(posteriors: FloatArray, k: int) -> FloatArray:
    """Log scores keeping blank and the top-k words per frame, the rest -inf.

    Ties at the k-th value go to the lower label id.
    """
    posteriors = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    with np.errstate(divide="ignore"):
        log_scores = np.log(posteriors)
    words = posteriors.shape[1] - 1
    if k >= words:
        return log_scores
    pruned = np.full_like(log_scores, -np.inf)
    pruned[:, 0] = log_scores[:, 0]
    # stable sort on the negated scores keeps lower ids first among equal values
    order = np.argsort(-posteriors[:, 1:], axis=1, kind="stable")[:, :k] + 1
    rows = np.arange(posteriors.shape[0])[:, None]
    pruned[rows, order] = log_scores[rows, order]
    return pruned


@final
class DecodeVocab:
    """Per word label: LM token and whether it is a dynamic (class) word"""

    def __init__(self, lexicon: PronLexicon, lm: NGramLM | None, dynamic: Sequence[int]) -> None:
        self.size = len(lexicon.words)
        self.dynamic = frozenset(int(w) for w in dynamic)
        self.contacts_count = max(1, len(self.dynamic))
        if lm is None:
            self.tokens = [-1] * self.size
            return
        self.tokens = []
        for word_id, orth in lexicon.words:
            if word_id in self.dynamic:
                self.tokens.append(-1)
            else:
                self.tokens.append(lm.token_id(orth))


def decode(
    posterior_seq: FloatArray,
    lexicon: PronLexicon,
    lm: NGramLM | None,
    contacts: Sequence[int],
    cfg: DecoderConfig,
) -> DecodeResult:
    """Best word sequence for (T, 1 + n) word posteriors.

    Args:
        posterior_seq: per-frame posteriors, column 0 blank, column i+1 word i
        lexicon: lexicon labelling the columns (static plus dynamic words)
        lm: class LM, or None for acoustic-only decoding
        contacts: word ids of the dynamic words of this utterance
        cfg: decoder settings

    Returns:
        DecodeResult with the word ids and the final fused score
    """
    posteriors = np.asarray(posterior_seq, dtype=np.float64)
    if posteriors.size == 0 or posteriors.shape[0] == 0:
        return DecodeResult((), 0.0)
    if posteriors.shape[1] != len(lexicon.words) + 1:
        raise ConfigurationError(
            f"Posteriors have {posteriors.shape[1] - 1} word columns, lexicon has {len(lexicon.words)}"
        )
    vocab = DecodeVocab(lexicon, lm, contacts)
    log_scores = top_k_prune(apply_blank_heuristic(posteriors, cfg.blank_divisor), cfg.top_k_posteriors)
    scale = cfg.lm_scale * LN10 if lm is not None else 0.0
    lm_cache: dict[tuple[LMState, int], tuple[float, LMState]] = {}

    def extend_lm(state: LMState, word: int) -> tuple[float, LMState]:
        key = (state, word)
        if key not in lm_cache:
            if lm is None:
                lm_cache[key] = (0.0, state)
            else:
                lm_cache[key] = lm.lm_score(
                    state, vocab.tokens[word], word in vocab.dynamic, vocab.contacts_count
                )
        return lm_cache[key]

    start = lm.start_state() if lm is not None else LMState(())
    beam = [BeamHypothesis((), 0.0, -math.inf, start, 0.0)]
    for t in range(log_scores.shape[0]):
        frame = log_scores[t]
        blank = float(frame[0])
        candidates = [(int(c) - 1, float(frame[c])) for c in np.flatnonzero(np.isfinite(frame[1:])) + 1]
        next_beam: dict[tuple[int, ...], BeamHypothesis] = {}

        def get(prefix: tuple[int, ...], state: LMState, lm_logprob: float) -> BeamHypothesis:
            hyp = next_beam.get(prefix)
            if hyp is None:
                hyp = BeamHypothesis(prefix, -math.inf, -math.inf, state, lm_logprob)
                next_beam[prefix] = hyp
            return hyp

        for hyp in beam:
            total = hyp.acoustic
            same = get(hyp.prefix, hyp.lm_state, hyp.lm_logprob)
            same.p_blank = _log_add(same.p_blank, total + blank)
            last = hyp.prefix[-1] if hyp.prefix else -1
            for word, score in candidates:
                if word == last:
                    # repeated label without a blank collapses into the same word
                    same.p_nonblank = _log_add(same.p_nonblank, hyp.p_nonblank + score)
                    source = hyp.p_blank
                else:
                    source = total
                if source == -math.inf:
                    continue
                delta, state = extend_lm(hyp.lm_state, word)
                extended = get((*hyp.prefix, word), state, hyp.lm_logprob + delta)
                extended.p_nonblank = _log_add(extended.p_nonblank, source + score)

        live = [h for h in next_beam.values() if h.acoustic > -math.inf]
        live.sort(key=lambda h: (-(h.acoustic + scale * h.lm_logprob), h.prefix))
        beam = live[: cfg.beam_width]
        if not beam:
            return DecodeResult((), -math.inf)

    def final(h: BeamHypothesis) -> float:
        end = lm.end_score(h.lm_state) if lm is not None else 0.0
        return h.acoustic + scale * (h.lm_logprob + end)

    best = min(beam, key=lambda h: (-final(h), h.prefix))
    return DecodeResult(best.prefix, final(best))
