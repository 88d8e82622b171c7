"""Per-utterance recognition: extend the vocabulary with the utterance's
contacts, score frames against the extended G, collapse prons to words and run
the beam search."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Sequence

import numpy as np

from .class_lm import NGramLM
from .data_api import Contact, DecodeRecord, Utterance
from .decoder import DecoderConfig, decode
from .embed_core import FloatArray, VocabMatrix
from .errors import DataError, EmbedMatchError
from .eval_kit import EvalReport, evaluate, overlap_check
from .pron_lexicon import (
    PronLexicon,
    TextEncoder,
    VocabMode,
    build_G,
    collapse_to_words,
    column_entries,
)
from .synth_corpus import make_ambiguous_pairs
from .toy_model import ModelConfig, ToyModel, TrainingExample, TrainingReport, train

logger = logging.getLogger(__name__)


class UtteranceVocab(NamedTuple):
    """Lexicon and G of one utterance, static part plus its contacts"""

    lexicon: PronLexicon
    G: VocabMatrix
    dynamic_words: list[int]


class Recognizer:
    def __init__(
        self,
        model: ToyModel,
        G: VocabMatrix,
        lexicon: PronLexicon,
        lm: NGramLM | None,
        cfg: DecoderConfig,
    ) -> None:
        self.model = model
        self.G = G
        self.lexicon = lexicon
        self.lm = lm
        self.cfg = cfg
        self.mode = model.cfg.vocab_mode
        self.encoder = TextEncoder(model.cfg.encoder_config(), len(lexicon.inventory))

    def vocab_for(self, contacts: Sequence[Contact]) -> UtteranceVocab:
        """Append the contacts to the lexicon and their embeddings to G"""
        parsed = [(c.orthography, self.lexicon.inventory.parse(c.pron)) for c in contacts]
        lexicon, new_words, new_prons = self.lexicon.extended(parsed)
        entries = column_entries(lexicon, self.mode, self.encoder, word_ids=new_words, pron_ids=new_prons)
        return UtteranceVocab(lexicon, self.G.extend_dynamic(entries), new_words)

    def word_posteriors(self, frames: FloatArray, vocab: UtteranceVocab) -> FloatArray:
        """(T, 1 + words) posteriors, column i + 1 is word id i"""
        posteriors = np.exp(self.model.log_posteriors(frames, vocab.G))
        if self.mode is VocabMode.PRON:
            return collapse_to_words(posteriors, vocab.lexicon, vocab.G.labels)
        out = np.zeros((posteriors.shape[0], len(vocab.lexicon.words) + 1))
        out[:, 0] = posteriors[:, 0]
        out[:, np.asarray(vocab.G.labels, dtype=np.int64) + 1] = posteriors[:, 1:]
        return out

    def recognize(self, utterance: Utterance) -> DecodeRecord:
        try:
            vocab = self.vocab_for(utterance.contacts)
            posteriors = self.word_posteriors(utterance.frame_array, vocab)
            result = decode(posteriors, vocab.lexicon, self.lm, vocab.dynamic_words, self.cfg)
        except EmbedMatchError as e:
            logger.warning("Utterance %s not decoded: %s", utterance.id, e)
            return DecodeRecord(id=utterance.id, error=str(e))
        dynamic = set(vocab.dynamic_words)
        return DecodeRecord(
            id=utterance.id,
            hyp_words=[vocab.lexicon.orth(w) for w in result.words],
            hyp_is_contact=[w in dynamic for w in result.words],
            score=result.score if math.isfinite(result.score) else None,
        )

    def recognize_all(self, utterances: Sequence[Utterance], jobs: int = 1) -> list[DecodeRecord]:
        """Records in input order whatever the number of threads"""
        if jobs <= 1:
            records = [self.recognize(u) for u in utterances]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                records = list(pool.map(self.recognize, utterances))
        failed = sum(1 for r in records if r.error is not None)
        logger.info("Decoded %d utterances, %d failed", len(records), failed)
        return records


def training_examples(utterances: Sequence[Utterance], mode: VocabMode) -> list[TrainingExample]:
    """Pron ids are the targets in pron mode, word ids in orth mode"""
    return [
        TrainingExample(
            u.id,
            u.frame_array,
            tuple(u.ref_prons if mode is VocabMode.PRON else u.ref_words),
        )
        for u in utterances
    ]


def evaluate_records(refs: Sequence[Utterance], records: Sequence[DecodeRecord]) -> EvalReport:
    """Score hypotheses against references by orthography.

    Failed records count as empty hypotheses; every reference needs a record.
    """
    by_id = {r.id: r for r in records}
    unknown = set(by_id) - {u.id for u in refs}
    if unknown:
        raise DataError(f"Hypotheses for unknown utterances: {', '.join(sorted(unknown)[:5])}")
    hyps = []
    for u in refs:
        record = by_id.get(u.id)
        if record is None:
            raise DataError(f"No hypothesis for utterance {u.id}")
        hyps.append(record.hyp_words if record.error is None else [])
    return evaluate([u.ref_orths for u in refs], hyps, [u.is_contact_mask for u in refs])


def subsampled_span(span: tuple[int, int], subsample: int) -> tuple[int, int]:
    """Input frame range -> model output frame range (frames kept are 0, s, 2s, ...)"""
    start, end = span
    return (-(-start // subsample), -(-end // subsample))


def overlap_fraction(
    recognizer: Recognizer, utterances: Sequence[Utterance], threshold: float = -3.0
) -> tuple[int, int]:
    """How many single-word overlap utterances show both the long word and a
    word whose pron is its prefix inside the long word's segment.

    Returns:
        (passed, checked)
    """
    lexicon = recognizer.lexicon
    pairs, _ = make_ambiguous_pairs(lexicon)
    shorts: dict[int, list[int]] = {}
    for pair in pairs:
        shorts.setdefault(pair.long_word, []).append(pair.short_word)
    vocab = recognizer.vocab_for([])
    passed = checked = 0
    for u in utterances:
        if not u.ref_words or u.ref_words[0] not in shorts or not u.word_spans:
            continue
        checked += 1
        with np.errstate(divide="ignore"):
            log_posteriors = np.log(recognizer.word_posteriors(u.frame_array, vocab))
        span = subsampled_span(u.word_spans[0], recognizer.model.cfg.subsample)
        long_column = u.ref_words[0] + 1
        if any(
            overlap_check(log_posteriors, span, long_column, short + 1, threshold)
            for short in shorts[u.ref_words[0]]
        ):
            passed += 1
    logger.info("Overlap check passed for %d of %d utterances", passed, checked)
    return passed, checked


def fit_model(
    lexicon: PronLexicon, utterances: Sequence[Utterance], cfg: ModelConfig, jobs: int = 1
) -> tuple[ToyModel, VocabMatrix, TrainingReport]:
    """Build the frozen G for ``cfg.vocab_mode`` and train a fresh model against it"""
    G = build_G(lexicon, cfg.vocab_mode, cfg.encoder_config())
    model = ToyModel(cfg)
    report = train(model, training_examples(utterances, cfg.vocab_mode), G, cfg, jobs)
    return model, G, report
