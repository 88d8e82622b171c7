"""Synthetic "speech" corpora.

Every phoneme has a fixed random prototype feature vector; an utterance is the
concatenation of the prototypes of its phonemes, each repeated for a random
number of frames, plus Gaussian noise. Sentences come from a random bigram
grammar over the static words in which carrier words ("call", "text", ...) are
followed by the ``$CONTACT`` class; the grammar itself is exported as the ARPA
language model used for decoding.
"""

import logging
import math
from pathlib import Path
from typing import Annotated, Any, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, BeforeValidator, Field, model_validator

from .class_lm import BOS, CLASS_SYMBOL, EOS, LOG10_FLOOR, UNK, NGramLM, dump_arpa
from .data_api import AmbiguousPair, Contact, Utterance, read_jsonl, write_jsonl
from .embed_core import FloatArray
from .errors import GenerationError
from .pron_lexicon import (
    ARPABET,
    PhonemeInventory,
    PronLexicon,
    dump_lexicon,
    load_lexicon,
)

logger = logging.getLogger(__name__)

CARRIER_NAMES = ("call", "text", "email", "message", "ring", "phone")
LM_DISCOUNT = 0.05


def _parse_range(value: Any) -> Any:
    """Accept ``lo..hi``, ``lo,hi``, a single integer or a pair"""
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, str):
        text = value.strip().strip("{}[]()")
        for separator in ("..", ","):
            if separator in text:
                lo, hi = text.split(separator, 1)
                return (int(lo), int(hi))
        return (int(text), int(text))
    return value


IntRange = Annotated[tuple[int, int], BeforeValidator(_parse_range)]


class CorpusSpec(BaseModel):
    phoneme_count: int = Field(default=24, ge=2, le=len(ARPABET))
    feature_dim: int = Field(default=16, ge=1)
    frames_per_phoneme: IntRange = (1, 2)
    noise_sigma: float = Field(default=0.3, ge=0.0)
    vocab_size: int = Field(default=120, ge=1)
    pron_length: IntRange = (2, 4)
    multi_pron_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    homophone_pairs: int = Field(default=4, ge=0)
    prefix_pairs: int = Field(default=15, ge=0)
    carrier_words: int = Field(default=3, ge=0)
    contact_pool_size: int = Field(default=200, ge=0)
    contact_pron_length: IntRange = (3, 5)
    contacts_per_utterance: IntRange = (5, 20)
    utterance_count: int = Field(default=2000, ge=0)
    test_utterance_count: int = Field(default=400, ge=0)
    overlap_utterance_count: int = Field(default=40, ge=0)
    successors_per_word: int = Field(default=6, ge=1)
    max_words: int = Field(default=8, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_ranges(self) -> "CorpusSpec":
        for name, minimum in (
            ("frames_per_phoneme", 1),
            ("pron_length", 1),
            ("contact_pron_length", 1),
            ("contacts_per_utterance", 0),
        ):
            lo, hi = getattr(self, name)
            if lo < minimum or hi < lo:
                raise ValueError(f"{name} must be a non-empty range with lower bound >= {minimum}")
        if self.homophone_pairs + 2 * self.prefix_pairs + self.carrier_words > self.vocab_size:
            raise ValueError("vocab_size is too small for the requested homophones, prefix pairs and carriers")
        return self


class Grammar(NamedTuple):
    """Bigram successor distributions keyed by context token"""

    successors: dict[str, list[tuple[str, float]]]
    carriers: tuple[str, ...]


class SyntheticCorpus(NamedTuple):
    spec: CorpusSpec
    inventory: PhonemeInventory
    prototypes: FloatArray
    lexicon: PronLexicon
    contact_pool: list[tuple[str, tuple[int, ...]]]
    grammar: Grammar
    lm: NGramLM
    train: list[Utterance]
    test: list[Utterance]
    overlap: list[Utterance]


class _Sentence(NamedTuple):
    tokens: list[str]  # orthographies or CLASS_SYMBOL
    contacts: list[int]  # indices into the contact pool


def _pron_capacity(phoneme_count: int, length: tuple[int, int]) -> int:
    return sum(phoneme_count**n for n in range(length[0], length[1] + 1))


class _PronSampler:
    def __init__(self, rng: np.random.Generator, phoneme_count: int) -> None:
        self.rng = rng
        self.phoneme_count = phoneme_count
        self.used: set[tuple[int, ...]] = set()

    def fresh(self, length: tuple[int, int], attempts: int = 10_000) -> tuple[int, ...]:
        for _ in range(attempts):
            size = int(self.rng.integers(length[0], length[1] + 1))
            pron = tuple(int(p) for p in self.rng.integers(0, self.phoneme_count, size))
            if pron not in self.used:
                self.used.add(pron)
                return pron
        raise GenerationError("Could not draw a new distinct pronunciation; enlarge the phoneme inventory")

    def extend(self, base: tuple[int, ...], attempts: int = 1_000) -> tuple[int, ...]:
        """A pron that has ``base`` as a strict prefix"""
        for _ in range(attempts):
            extra = int(self.rng.integers(1, 3))
            pron = base + tuple(int(p) for p in self.rng.integers(0, self.phoneme_count, extra))
            if pron not in self.used:
                self.used.add(pron)
                return pron
        raise GenerationError("Could not extend a pronunciation into a new one")

    def variant(self, base: tuple[int, ...], attempts: int = 1_000) -> tuple[int, ...] | None:
        """``base`` with one phoneme replaced, like /l ih v/ -> /l ay v/"""
        for _ in range(attempts):
            position = int(self.rng.integers(0, len(base)))
            phoneme = int(self.rng.integers(0, self.phoneme_count))
            pron = base[:position] + (phoneme,) + base[position + 1 :]
            if pron not in self.used:
                self.used.add(pron)
                return pron
        return None


def _spell(inventory: PhonemeInventory, pron: Sequence[int]) -> str:
    return "".join(inventory.symbol_of(p).strip("/") for p in pron)


def _unique(name: str, taken: set[str], suffix: str) -> str:
    while name in taken:
        name += suffix
    taken.add(name)
    return name


def build_lexicon(
    spec: CorpusSpec, inventory: PhonemeInventory, sampler: _PronSampler
) -> tuple[PronLexicon, tuple[str, ...]]:
    """Static words: prefix pairs, carriers, multi-pron words and homophones"""
    rng = sampler.rng
    needed = spec.vocab_size - spec.homophone_pairs
    capacity = _pron_capacity(len(inventory), spec.pron_length)
    if needed > capacity:
        raise GenerationError(
            f"vocab_size {spec.vocab_size} exceeds the {capacity} distinct pronunciations available"
        )
    prons: list[list[tuple[int, ...]]] = []
    short_length = (spec.pron_length[0], spec.pron_length[0])
    for _ in range(spec.prefix_pairs):
        short = sampler.fresh(short_length)
        prons.append([short])
        prons.append([sampler.extend(short)])
    while len(prons) < needed:
        prons.append([sampler.fresh(spec.pron_length)])

    plain = list(range(2 * spec.prefix_pairs, needed))
    carriers = plain[: spec.carrier_words]
    others = plain[spec.carrier_words :]
    multi_count = min(len(others), int(round(spec.multi_pron_fraction * needed)))
    for word in others[:multi_count]:
        second = sampler.variant(prons[word][0])
        if second is not None:
            prons[word].append(second)
    single = others[multi_count:] or others
    if spec.homophone_pairs > len(single):
        raise GenerationError("Not enough single-pron words to build the requested homophones")
    homophone_bases = [int(w) for w in rng.choice(single, size=spec.homophone_pairs, replace=False)]

    taken: set[str] = set()
    orths: list[str] = []
    for word, word_prons in enumerate(prons):
        if word in carriers:
            index = carriers.index(word)
            name = CARRIER_NAMES[index] if index < len(CARRIER_NAMES) else f"call{index}"
        else:
            name = _spell(inventory, word_prons[0])
        orths.append(_unique(name, taken, "h"))
    entries = [(orth, pron) for orth, word_prons in zip(orths, prons) for pron in word_prons]
    for base in homophone_bases:
        entries.append((_unique(orths[base] + "e", taken, "e"), prons[base][0]))
    lexicon = PronLexicon.build(inventory, entries)
    return lexicon, tuple(orths[w] for w in carriers)


def build_contact_pool(
    spec: CorpusSpec, inventory: PhonemeInventory, sampler: _PronSampler, taken: set[str]
) -> list[tuple[str, tuple[int, ...]]]:
    capacity = _pron_capacity(len(inventory), spec.contact_pron_length)
    if spec.contact_pool_size > capacity - len(sampler.used):
        raise GenerationError("contact_pool_size exceeds the distinct pronunciations left")
    pool = []
    for _ in range(spec.contact_pool_size):
        pron = sampler.fresh(spec.contact_pron_length)
        pool.append((_unique(_spell(inventory, pron).capitalize(), taken, "a"), pron))
    return pool


def build_grammar(
    lexicon: PronLexicon, carriers: Sequence[str], spec: CorpusSpec, rng: np.random.Generator
) -> Grammar:
    words = [orth for _, orth in lexicon.words]
    plain = [w for w in words if w not in carriers]
    successors: dict[str, list[tuple[str, float]]] = {}

    def spread(mass: float) -> list[tuple[str, float]]:
        pool = plain or words
        chosen = rng.choice(len(pool), size=min(spec.successors_per_word, len(pool)), replace=False)
        weights = rng.dirichlet(np.ones(len(chosen)))
        return [(pool[int(i)], mass * float(w)) for i, w in zip(chosen, weights)]

    start: list[tuple[str, float]] = []
    if carriers:
        start += [(c, 0.6 / len(carriers)) for c in carriers]
        start += spread(0.4)
    else:
        start += spread(1.0)
    successors[BOS] = start
    for word in words:
        if word in carriers:
            successors[word] = [(CLASS_SYMBOL, 0.7), (EOS, 0.1), *spread(0.2)]
        else:
            successors[word] = [(EOS, 0.3), *spread(0.7)]
    successors[CLASS_SYMBOL] = [(EOS, 0.5), *spread(0.5)]
    return Grammar(successors, tuple(carriers))


def grammar_lm(grammar: Grammar, lexicon: PronLexicon, discount: float = LM_DISCOUNT) -> NGramLM:
    """The grammar as a back-off bigram LM.

    Listed bigrams keep ``1 - discount`` of their grammar probability; the rest
    backs off to uniform unigrams with exact back-off weights, so every context
    sums to one.
    """
    vocab = [BOS, EOS, UNK, CLASS_SYMBOL, *(orth for _, orth in lexicon.words)]
    index = {word: i for i, word in enumerate(vocab)}
    predictable = len(vocab) - 1
    unigram = 1.0 / predictable
    probs: dict[tuple[int, ...], float] = {}
    backoffs: dict[tuple[int, ...], float] = {}
    for word in vocab:
        probs[(index[word],)] = LOG10_FLOOR if word == BOS else math.log10(unigram)
    for context, entries in grammar.successors.items():
        merged: dict[str, float] = {}
        for token, p in entries:
            merged[token] = merged.get(token, 0.0) + p
        seen_unigram = unigram * len(merged)
        backoffs[(index[context],)] = math.log10(discount / (1.0 - seen_unigram))
        for token, p in merged.items():
            probs[(index[context], index[token])] = math.log10((1.0 - discount) * p)
    return NGramLM(2, vocab, probs, backoffs)


def _sample_tokens(grammar: Grammar, rng: np.random.Generator, max_words: int, allow_contact: bool) -> list[str]:
    tokens: list[str] = []
    context = BOS
    while len(tokens) < max_words:
        options = [(t, p) for t, p in grammar.successors[context] if allow_contact or t != CLASS_SYMBOL]
        if not tokens:
            options = [(t, p) for t, p in options if t != EOS]
        weights = np.array([p for _, p in options])
        token = options[int(rng.choice(len(options), p=weights / weights.sum()))][0]
        if token == EOS:
            break
        tokens.append(token)
        context = token
    return tokens


def split_contacts(
    sentences: Sequence[list[str]],
    contact_pool: Sequence[tuple[str, tuple[int, ...]]],
    lexicon: PronLexicon,
    contacts_per_utterance: tuple[int, int],
    rng: np.random.Generator,
) -> list[_Sentence]:
    """Give every sentence its own contact list and fill its ``$CONTACT`` slots.

    Sentences with an empty contact list must not contain ``$CONTACT``.
    """
    static_prons = {p.phonemes for p in lexicon.prons}
    static_orths = {orth for _, orth in lexicon.words}
    for orth, pron in contact_pool:
        if pron in static_prons or orth in static_orths:
            raise GenerationError(f"Contact {orth!r} overlaps the static vocabulary")
    result = []
    for tokens in sentences:
        count = min(len(contact_pool), int(rng.integers(contacts_per_utterance[0], contacts_per_utterance[1] + 1)))
        if count == 0 and CLASS_SYMBOL in tokens:
            count = min(1, len(contact_pool))
        contacts = [int(i) for i in rng.choice(len(contact_pool), size=count, replace=False)] if count else []
        filled = []
        for token in tokens:
            if token == CLASS_SYMBOL:
                if not contacts:
                    raise GenerationError("A $CONTACT slot needs a non-empty contact list")
                filled.append(f"{CLASS_SYMBOL}:{contacts[int(rng.integers(0, len(contacts)))]}")
            else:
                filled.append(token)
        result.append(_Sentence(filled, contacts))
    return result


def render_utterance(
    utterance_id: str,
    sentence: _Sentence,
    lexicon: PronLexicon,
    contact_pool: Sequence[tuple[str, tuple[int, ...]]],
    prototypes: FloatArray,
    spec: CorpusSpec,
    rng: np.random.Generator,
) -> Utterance:
    static_words, static_prons = len(lexicon.words), len(lexicon.prons)
    ref_words, ref_prons, ref_orths, mask, spans = [], [], [], [], []
    segments: list[FloatArray] = []
    position = 0
    for token in sentence.tokens:
        if token.startswith(CLASS_SYMBOL + ":"):
            j = int(token.split(":", 1)[1])
            orth, phonemes = contact_pool[j]
            word_id, pron_id, is_contact = static_words + j, static_prons + j, True
        else:
            word_id = lexicon.word_id(token)
            assert word_id is not None
            options = lexicon.word_to_prons[word_id]
            pron_id = options[int(rng.integers(0, len(options)))]
            orth, phonemes, is_contact = token, lexicon.prons[pron_id].phonemes, False
        start = position
        for phoneme in phonemes:
            duration = int(rng.integers(spec.frames_per_phoneme[0], spec.frames_per_phoneme[1] + 1))
            segment = np.repeat(prototypes[phoneme][None, :], duration, axis=0)
            if spec.noise_sigma > 0:
                segment = segment + rng.normal(0.0, spec.noise_sigma, segment.shape)
            segments.append(segment)
            position += duration
        ref_words.append(word_id)
        ref_prons.append(pron_id)
        ref_orths.append(orth)
        mask.append(is_contact)
        spans.append((start, position))
    frames = np.concatenate(segments) if segments else np.zeros((0, spec.feature_dim))
    return Utterance(
        id=utterance_id,
        frames=frames.tolist(),
        ref_words=ref_words,
        ref_prons=ref_prons,
        ref_orths=ref_orths,
        contacts=[
            Contact(orthography=contact_pool[j][0], pron=lexicon.inventory.render(contact_pool[j][1]))
            for j in sentence.contacts
        ],
        is_contact_mask=mask,
        word_spans=spans,
    )


def make_ambiguous_pairs(
    lex: PronLexicon, count: int | None = None
) -> tuple[list[AmbiguousPair], bool]:
    """Word pairs (long, short) where a pron of short is a strict prefix of a pron of long.

    Returns:
        (pairs sorted by word ids, True if ``count`` pairs were found);
        ``count=None`` returns every pair
    """
    prefixes = {p.phonemes: p.id for p in lex.prons}
    pairs: set[AmbiguousPair] = set()
    for pron in lex.prons:
        for cut in range(1, len(pron.phonemes)):
            short_pron = prefixes.get(pron.phonemes[:cut])
            if short_pron is None:
                continue
            for long_word in lex.pron_to_words[pron.id]:
                for short_word in lex.pron_to_words[short_pron]:
                    if long_word != short_word:
                        pairs.add(AmbiguousPair(long_word, short_word))
    found = sorted(pairs)
    if count is None:
        return found, True
    if len(found) < count:
        logger.warning("Only %d of %d ambiguous pairs found", len(found), count)
        return found, False
    return found[:count], True


def nearest_prototype_phonemes(frames: FloatArray, prototypes: FloatArray) -> np.ndarray:
    """Phoneme id of the closest prototype for every frame"""
    frames = np.asarray(frames, dtype=np.float64)
    distances = (
        np.sum(frames**2, axis=1)[:, None]
        - 2.0 * frames @ prototypes.T
        + np.sum(prototypes**2, axis=1)[None, :]
    )
    return np.argmin(distances, axis=1)


def generate(spec: CorpusSpec) -> SyntheticCorpus:
    """Build lexicon, contact pool, grammar, LM and the train/test/overlap sets"""
    rng = np.random.default_rng(spec.seed)
    inventory = PhonemeInventory.arpabet(spec.phoneme_count)
    prototypes = rng.standard_normal((spec.phoneme_count, spec.feature_dim))
    sampler = _PronSampler(rng, spec.phoneme_count)
    lexicon, carriers = build_lexicon(spec, inventory, sampler)
    taken = {orth for _, orth in lexicon.words}
    contact_pool = build_contact_pool(spec, inventory, sampler, taken)
    grammar = build_grammar(lexicon, carriers, spec, rng)
    lm = grammar_lm(grammar, lexicon)

    train_sentences = [
        _Sentence(_sample_tokens(grammar, rng, spec.max_words, allow_contact=False), [])
        for _ in range(spec.utterance_count)
    ]
    allow_contact = bool(contact_pool) and spec.contacts_per_utterance[1] > 0
    test_templates = [
        _sample_tokens(grammar, rng, spec.max_words, allow_contact=allow_contact)
        for _ in range(spec.test_utterance_count)
    ]
    test_sentences = split_contacts(test_templates, contact_pool, lexicon, spec.contacts_per_utterance, rng)

    pairs, _ = make_ambiguous_pairs(lexicon, spec.prefix_pairs)
    overlap_sentences = [
        _Sentence([lexicon.orth(pairs[i % len(pairs)].long_word)], [])
        for i in range(spec.overlap_utterance_count if pairs else 0)
    ]

    def render(prefix: str, sentences: Sequence[_Sentence]) -> list[Utterance]:
        return [
            render_utterance(f"{prefix}-{i:05d}", s, lexicon, contact_pool, prototypes, spec, rng)
            for i, s in enumerate(sentences)
        ]

    corpus = SyntheticCorpus(
        spec=spec,
        inventory=inventory,
        prototypes=prototypes,
        lexicon=lexicon,
        contact_pool=contact_pool,
        grammar=grammar,
        lm=lm,
        train=render("train", train_sentences),
        test=render("test", test_sentences),
        overlap=render("overlap", overlap_sentences),
    )
    logger.info(
        "Generated %d train, %d test, %d overlap utterances over %d words / %d prons",
        len(corpus.train),
        len(corpus.test),
        len(corpus.overlap),
        len(lexicon.words),
        len(lexicon.prons),
    )
    return corpus


class CorpusFiles(NamedTuple):
    """Paths of a corpus directory written by write_corpus"""

    root: Path

    @property
    def phonemes(self) -> Path:
        return self.root / "phonemes.txt"

    @property
    def lexicon(self) -> Path:
        return self.root / "lexicon.tsv"

    @property
    def contacts(self) -> Path:
        return self.root / "contacts.tsv"

    @property
    def prototypes(self) -> Path:
        return self.root / "prototypes.tsv"

    @property
    def lm(self) -> Path:
        return self.root / "lm.arpa"

    def split(self, name: str) -> Path:
        return self.root / f"{name}.jsonl"

    def all(self) -> list[Path]:
        return [
            self.phonemes,
            self.lexicon,
            self.contacts,
            self.prototypes,
            self.lm,
            self.split("train"),
            self.split("test"),
            self.split("overlap"),
        ]


def write_corpus(out_dir: Path, corpus: SyntheticCorpus) -> CorpusFiles:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = CorpusFiles(out_dir)
    files.phonemes.write_text("".join(p.symbol + "\n" for p in corpus.inventory.phonemes), encoding="utf-8")
    dump_lexicon(files.lexicon, corpus.lexicon)
    files.contacts.write_text(
        "".join(f"{orth}\t{corpus.inventory.render(pron)}\n" for orth, pron in corpus.contact_pool),
        encoding="utf-8",
    )
    files.prototypes.write_text(
        "".join("\t".join("%.17g" % v for v in row) + "\n" for row in corpus.prototypes),
        encoding="utf-8",
    )
    files.lm.write_text(dump_arpa(corpus.lm), encoding="utf-8")
    write_jsonl(files.split("train"), corpus.train)
    write_jsonl(files.split("test"), corpus.test)
    write_jsonl(files.split("overlap"), corpus.overlap)
    return files


def read_inventory(files: CorpusFiles) -> PhonemeInventory:
    if not files.phonemes.exists():
        raise GenerationError(f"{files.root} is not a corpus directory (no phonemes.txt)")
    return PhonemeInventory([line for line in files.phonemes.read_text(encoding="utf-8").split() if line])


def read_lexicon(files: CorpusFiles) -> PronLexicon:
    return load_lexicon(files.lexicon, read_inventory(files))


def read_split(files: CorpusFiles, name: str) -> list[Utterance]:
    return read_jsonl(files.split(name), Utterance)
