"""Phonemes, pronunciation lexicon, the toy text encoder g(.) and the pron->word collapse"""

import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, final

import numpy as np
from pydantic import BaseModel, Field

from .embed_core import FloatArray, VocabMatrix
from .errors import ConfigurationError, DataError, InputError, LexiconError, ParseError

logger = logging.getLogger(__name__)

# ARPAbet inventory, the synthetic corpus draws its phonemes from the front of this list
ARPABET = (
    "aa ae ah ao aw ay b ch d dh eh er ey f g hh ih iy jh k l m n ng "
    "ow oy p r s sh t th uh uw v w y z zh"
).split()


class Phoneme(NamedTuple):
    symbol: str
    id: int


class Pron(NamedTuple):
    """One pronunciation r_j: a phoneme id sequence"""

    id: int
    phonemes: tuple[int, ...]


class VocabMode(Enum):
    """Whether G holds one column per word orthography or per pronunciation"""

    ORTH = "orth"
    PRON = "pron"


@final
class PhonemeInventory:
    def __init__(self, symbols: Sequence[str]) -> None:
        if len(set(symbols)) != len(symbols):
            raise ConfigurationError("Phoneme symbols must be unique")
        self.phonemes = tuple(Phoneme(symbol, i) for i, symbol in enumerate(symbols))
        self._ids = {p.symbol: p.id for p in self.phonemes}

    @classmethod
    def arpabet(cls, count: int) -> "PhonemeInventory":
        if not 1 <= count <= len(ARPABET):
            raise ConfigurationError(f"phoneme_count must be in 1..{len(ARPABET)}")
        return cls([f"/{symbol}/" for symbol in ARPABET[:count]])

    def __len__(self) -> int:
        return len(self.phonemes)

    def id_of(self, symbol: str) -> int:
        if not symbol.startswith("/"):
            symbol = f"/{symbol}/"
        try:
            return self._ids[symbol]
        except KeyError:
            raise InputError(f"Unknown phoneme {symbol}") from None

    def symbol_of(self, phoneme_id: int) -> str:
        return self.phonemes[phoneme_id].symbol

    def parse(self, text: str) -> tuple[int, ...]:
        """Parse a space separated phoneme string like ``/l/ /ih/ /v/``"""
        return tuple(self.id_of(symbol) for symbol in text.split())

    def render(self, phonemes: Iterable[int]) -> str:
        return " ".join(self.symbol_of(p) for p in phonemes)


@final
class PronLexicon:
    """Words, their prons (R_i) and the inverse pron -> words multimap.

    Word ids and pron ids are assigned in order of first appearance, so a
    lexicon rebuilt from the same entry order gets the same ids.
    """

    def __init__(
        self,
        inventory: PhonemeInventory,
        words: Sequence[tuple[int, str]],
        prons: Sequence[Pron],
        word_to_prons: dict[int, tuple[int, ...]],
        static_word_count: int | None = None,
        static_pron_count: int | None = None,
    ) -> None:
        self.inventory = inventory
        self.words = tuple(words)
        self.prons = tuple(prons)
        self.word_to_prons = dict(word_to_prons)
        pron_to_words: dict[int, list[int]] = {p.id: [] for p in self.prons}
        for word_id, pron_ids in self.word_to_prons.items():
            if not pron_ids:
                raise LexiconError(f"Word {word_id} has no pronunciation")
            for pron_id in pron_ids:
                pron_to_words[pron_id].append(word_id)
        for pron_id, word_ids in pron_to_words.items():
            if not word_ids:
                raise LexiconError(f"Pron {pron_id} belongs to no word")
        self.pron_to_words = {k: tuple(v) for k, v in pron_to_words.items()}
        self._word_ids = {orth: word_id for word_id, orth in self.words}
        self._pron_ids = {p.phonemes: p.id for p in self.prons}
        self.static_word_count = len(self.words) if static_word_count is None else static_word_count
        self.static_pron_count = len(self.prons) if static_pron_count is None else static_pron_count

    @classmethod
    def build(
        cls,
        inventory: PhonemeInventory,
        entries: Iterable[tuple[str, Sequence[int]]],
    ) -> "PronLexicon":
        """Build a lexicon from (orthography, phoneme ids) pairs.

        Repeated orthographies accumulate prons; repeating a (word, pron) pair
        is an error.
        """
        words: list[tuple[int, str]] = []
        word_ids: dict[str, int] = {}
        prons: list[Pron] = []
        pron_ids: dict[tuple[int, ...], int] = {}
        word_to_prons: dict[int, list[int]] = {}
        for orth, phonemes in entries:
            phonemes = tuple(int(p) for p in phonemes)
            if not phonemes:
                raise LexiconError(f"Empty pronunciation for {orth!r}")
            if any(not 0 <= p < len(inventory) for p in phonemes):
                raise InputError(f"Unknown phoneme id in pronunciation of {orth!r}")
            if orth not in word_ids:
                word_ids[orth] = len(words)
                words.append((word_ids[orth], orth))
                word_to_prons[word_ids[orth]] = []
            if phonemes not in pron_ids:
                pron_ids[phonemes] = len(prons)
                prons.append(Pron(pron_ids[phonemes], phonemes))
            word_id, pron_id = word_ids[orth], pron_ids[phonemes]
            if pron_id in word_to_prons[word_id]:
                raise LexiconError(
                    f"Duplicate pronunciation {inventory.render(phonemes)} for {orth!r}"
                )
            word_to_prons[word_id].append(pron_id)
        return cls(inventory, words, prons, {k: tuple(v) for k, v in word_to_prons.items()})

    def __len__(self) -> int:
        return len(self.words)

    def word_id(self, orth: str) -> int | None:
        return self._word_ids.get(orth)

    def orth(self, word_id: int) -> str:
        return self.words[word_id][1]

    def pron_id(self, phonemes: Sequence[int]) -> int | None:
        return self._pron_ids.get(tuple(phonemes))

    def first_pron(self, word_id: int) -> Pron:
        return self.prons[self.word_to_prons[word_id][0]]

    def entries(self) -> list[tuple[str, tuple[int, ...]]]:
        """(orthography, phonemes) pairs in an order that rebuilds identical ids"""
        return [
            (orth, self.prons[pron_id].phonemes)
            for word_id, orth in self.words
            for pron_id in self.word_to_prons[word_id]
        ]

    def extended(
        self, contacts: Sequence[tuple[str, Sequence[int]]]
    ) -> tuple["PronLexicon", list[int], list[int]]:
        """Append dynamic words after the static ones.

        Returns:
            (extended lexicon, ids of the added words, ids of the added prons)
        """
        if not contacts:
            return self, [], []
        before_words, before_prons = len(self.words), len(self.prons)
        for orth, _ in contacts:
            if orth in self._word_ids:
                raise InputError(f"Dynamic word {orth!r} is already in the vocabulary")
        rebuilt = PronLexicon.build(self.inventory, [*self.entries(), *contacts])
        lexicon = PronLexicon(
            self.inventory,
            rebuilt.words,
            rebuilt.prons,
            rebuilt.word_to_prons,
            static_word_count=self.static_word_count,
            static_pron_count=self.static_pron_count,
        )
        return (
            lexicon,
            list(range(before_words, len(lexicon.words))),
            list(range(before_prons, len(lexicon.prons))),
        )


class TextEncoderConfig(BaseModel):
    dim: int = Field(default=40, ge=1)
    decay: float = Field(default=0.6, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)


@final
class TextEncoder:
    """Toy g(.): sum over positions l of decay**l times a fixed random phoneme vector"""

    def __init__(self, cfg: TextEncoderConfig, phoneme_count: int) -> None:
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.phoneme_vectors = rng.standard_normal((phoneme_count, cfg.dim))
        self.phoneme_vectors.setflags(write=False)

    def encode(self, phonemes: Sequence[int]) -> FloatArray:
        ids = np.asarray(phonemes, dtype=np.int64)
        if ids.size == 0:
            raise InputError("Cannot encode an empty pronunciation")
        if np.any(ids < 0) or np.any(ids >= self.phoneme_vectors.shape[0]):
            raise InputError(f"Unknown phoneme id in {list(phonemes)}")
        weights = self.cfg.decay ** np.arange(ids.size, dtype=np.float64)
        return weights @ self.phoneme_vectors[ids]


def encode_pron(p: Pron, cfg: TextEncoderConfig, phoneme_count: int) -> FloatArray:
    return TextEncoder(cfg, phoneme_count).encode(p.phonemes)


def column_entries(
    lex: PronLexicon,
    mode: VocabMode,
    encoder: TextEncoder,
    word_ids: Iterable[int] | None = None,
    pron_ids: Iterable[int] | None = None,
) -> list[tuple[int, FloatArray]]:
    """(label, embedding) pairs for the selected words or prons"""
    match mode:
        case VocabMode.PRON:
            selected = range(len(lex.prons)) if pron_ids is None else pron_ids
            return [(i, encoder.encode(lex.prons[i].phonemes)) for i in selected]
        case VocabMode.ORTH:
            selected = range(len(lex.words)) if word_ids is None else word_ids
            return [(i, encoder.encode(lex.first_pron(i).phonemes)) for i in selected]


def build_G(lex: PronLexicon, mode: VocabMode, cfg: TextEncoderConfig) -> VocabMatrix:
    """One column per pron (pron mode) or per word using its first pron (orth mode)"""
    if not lex.words:
        raise ConfigurationError("Lexicon is empty")
    encoder = TextEncoder(cfg, len(lex.inventory))
    entries = column_entries(lex, mode, encoder)
    logger.debug("Built G with %d %s columns", len(entries), mode.value)
    return VocabMatrix.from_entries(entries, cfg.dim)


def collapse_to_words(
    pron_posteriors: FloatArray,
    lex: PronLexicon,
    column_labels: Sequence[int] | None = None,
) -> FloatArray:
    """Word posterior = max over the word's pron posteriors, blank unchanged.

    Args:
        pron_posteriors: (T, 1 + m) or (1 + m,) posteriors, column 0 is blank
        lex: lexicon whose prons label the columns
        column_labels: pron id of each non-blank column (default: 0..m-1)

    Returns:
        (T, 1 + n) word scores, not renormalised
    """
    posteriors = np.asarray(pron_posteriors, dtype=np.float64)
    single = posteriors.ndim == 1
    posteriors = np.atleast_2d(posteriors)
    labels = range(len(lex.prons)) if column_labels is None else column_labels
    column_of = {pron_id: i + 1 for i, pron_id in enumerate(labels)}
    out = np.zeros((posteriors.shape[0], len(lex.words) + 1))
    out[:, 0] = posteriors[:, 0]
    for word_id, pron_ids in lex.word_to_prons.items():
        if not pron_ids:
            raise LexiconError(f"Word {word_id} has no pronunciation")
        try:
            columns = [column_of[p] for p in pron_ids]
        except KeyError as e:
            raise LexiconError(f"Pron {e.args[0]} of word {word_id} has no column") from None
        out[:, word_id + 1] = posteriors[:, columns].max(axis=1)
    return out[0] if single else out


def load_lexicon(path: Path, inventory: PhonemeInventory) -> PronLexicon:
    """Read ``<orthography>\\t<phoneme> <phoneme> ...`` lines"""
    if not path.exists():
        raise DataError(f"Lexicon file not found: {path}")
    entries: list[tuple[str, tuple[int, ...]]] = []
    seen: set[tuple[str, tuple[int, ...]]] = set()
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1].strip():
            raise ParseError("expected '<orthography>\\t<phonemes>'", line_number, str(path))
        try:
            phonemes = inventory.parse(fields[1])
        except InputError as e:
            raise ParseError(str(e), line_number, str(path)) from None
        if (fields[0], phonemes) in seen:
            raise ParseError(f"duplicate entry for {fields[0]!r}", line_number, str(path))
        seen.add((fields[0], phonemes))
        entries.append((fields[0], phonemes))
    return PronLexicon.build(inventory, entries)


def dump_lexicon(path: Path, lex: PronLexicon) -> None:
    lines = [f"{orth}\t{lex.inventory.render(phonemes)}" for orth, phonemes in lex.entries()]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
