"""Back-off n-gram language model (ARPA) with a single ``$CONTACT`` class symbol"""

import logging
import math
from pathlib import Path
from typing import NamedTuple, Sequence, final

from .errors import ConfigurationError, DataError, ParseError

logger = logging.getLogger(__name__)

CLASS_SYMBOL = "$CONTACT"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
# ARPA convention for "impossible"
LOG10_FLOOR = -99.0


class LMState(NamedTuple):
    """The last order-1 token ids, after class mapping"""

    history: tuple[int, ...]


@final
class NGramLM:
    """Katz-style back-off model over log10 probabilities.

    ``probs`` and ``backoffs`` are keyed by the full n-gram as a tuple of token
    ids; only n-grams listed with a back-off weight appear in ``backoffs``.
    """

    def __init__(
        self,
        order: int,
        vocab: Sequence[str],
        probs: dict[tuple[int, ...], float],
        backoffs: dict[tuple[int, ...], float],
        class_symbol: str = CLASS_SYMBOL,
    ) -> None:
        if order not in (1, 2, 3):
            raise ConfigurationError(f"Only orders 1..3 are supported, got {order}")
        self.order = order
        self.vocab = tuple(vocab)
        self.index = {word: i for i, word in enumerate(self.vocab)}
        self.probs = dict(probs)
        self.backoffs = dict(backoffs)
        self.class_symbol = class_symbol
        self.class_id = self.index.get(class_symbol)
        self.unk_id = self.index.get(UNK)
        self.bos_id = self.index.get(BOS)
        self.eos_id = self.index.get(EOS)
        if self.class_id is None:
            logger.warning("LM has no %s unigram, dynamic words score as %s", class_symbol, UNK)

    def token_id(self, word: str) -> int:
        """Id of ``word``, or of ``<unk>`` (-1 if the LM has none)"""
        if word == self.class_symbol:
            raise ConfigurationError(f"{self.class_symbol} cannot be used as a vocabulary word")
        found = self.index.get(word)
        if found is not None:
            return found
        return self.unk_id if self.unk_id is not None else -1

    def start_state(self) -> LMState:
        if self.bos_id is None or self.order == 1:
            return LMState(())
        return LMState((self.bos_id,))

    def log10_prob(self, history: tuple[int, ...], token: int) -> float:
        """log10 P(token | history) with back-off"""
        for start in range(len(history) + 1):
            context = history[start:]
            ngram = (*context, token)
            if ngram in self.probs:
                return self.probs[ngram] + sum(
                    self.backoffs.get(history[s:], 0.0) for s in range(start)
                )
        # not even a unigram: fall back to <unk>
        penalty = sum(self.backoffs.get(history[s:], 0.0) for s in range(len(history)))
        if self.unk_id is not None and (self.unk_id,) in self.probs and token != self.unk_id:
            return self.probs[(self.unk_id,)] + penalty
        return LOG10_FLOOR

    def _advance(self, state: LMState, token: int) -> LMState:
        if self.order == 1:
            return LMState(())
        return LMState((*state.history, token)[-(self.order - 1) :])

    def lm_score(
        self, state: LMState, word: int, is_dynamic: bool = False, contacts_count: int = 1
    ) -> tuple[float, LMState]:
        """log10 score of ``word`` after ``state`` and the next state.

        Dynamic words are scored as the class symbol plus a uniform in-class
        penalty of -log10(contacts_count).
        """
        if is_dynamic:
            if contacts_count < 1:
                raise ConfigurationError("A dynamic word needs contacts_count >= 1")
            token = self.class_id if self.class_id is not None else self.token_id(UNK)
            score = self.log10_prob(state.history, token) - math.log10(contacts_count)
        else:
            token = word
            score = self.log10_prob(state.history, token)
        return score, self._advance(state, token)

    def end_score(self, state: LMState) -> float:
        if self.eos_id is None:
            return 0.0
        return self.log10_prob(state.history, self.eos_id)

    def sentence_log10(self, words: Sequence[str], dynamic: Sequence[bool] | None = None, contacts_count: int = 1) -> float:
        """Total log10 probability of a sentence including ``</s>``"""
        state = self.start_state()
        total = 0.0
        for i, word in enumerate(words):
            is_dynamic = bool(dynamic[i]) if dynamic is not None else False
            token = -1 if is_dynamic else self.token_id(word)
            score, state = self.lm_score(state, token, is_dynamic, contacts_count)
            total += score
        return total + self.end_score(state)


def parse_arpa(text: str, source: str | None = None) -> NGramLM:
    """Parse the ``\\data\\`` / ``\\N-grams:`` / ``\\end\\`` subset of ARPA"""
    lines = text.splitlines()
    counts: dict[int, int] = {}
    vocab: list[str] = []
    index: dict[str, int] = {}
    probs: dict[tuple[int, ...], float] = {}
    backoffs: dict[tuple[int, ...], float] = {}
    seen: dict[int, int] = {}
    section: str | None = None
    current = 0
    header_line = 0
    ended = False

    for line_number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise ParseError("content after \\end\\", line_number, source)
        if line == "\\data\\":
            if section is not None:
                raise ParseError("duplicate \\data\\ section", line_number, source)
            section = "data"
            continue
        if section is None:
            # text before \data\ is ignored, as in the ARPA standard
            continue
        if line.startswith("\\") and line.endswith("-grams:"):
            if current and seen.get(current, 0) != counts.get(current):
                raise ParseError(
                    f"\\{current}-grams: lists {seen.get(current, 0)} entries, "
                    f"header declares {counts.get(current)}",
                    header_line,
                    source,
                )
            try:
                current = int(line[1 : -len("-grams:")])
            except ValueError:
                raise ParseError(f"malformed section header {line!r}", line_number, source) from None
            if current not in counts:
                raise ParseError(f"section {line!r} not declared in \\data\\", line_number, source)
            if current != (max(seen) + 1 if seen else 1):
                raise ParseError(f"section {line!r} out of order", line_number, source)
            seen[current] = 0
            header_line = line_number
            section = "grams"
            continue
        if line == "\\end\\":
            if current and seen.get(current, 0) != counts.get(current):
                raise ParseError(
                    f"\\{current}-grams: lists {seen.get(current, 0)} entries, "
                    f"header declares {counts.get(current)}",
                    header_line,
                    source,
                )
            if set(seen) != set(counts):
                raise ParseError("declared n-gram sections are missing", line_number, source)
            ended = True
            continue
        if line.startswith("\\"):
            raise ParseError(f"malformed section header {line!r}", line_number, source)
        if section == "data":
            if not line.startswith("ngram ") or "=" not in line:
                raise ParseError(f"expected 'ngram N=count', got {line!r}", line_number, source)
            try:
                n, count = (int(x) for x in line[len("ngram ") :].split("=", 1))
            except ValueError:
                raise ParseError(f"malformed count line {line!r}", line_number, source) from None
            counts[n] = count
            continue

        fields = line.split()
        if len(fields) not in (current + 1, current + 2):
            raise ParseError(f"expected a {current}-gram entry, got {line!r}", line_number, source)
        try:
            logprob = float(fields[0])
            backoff = float(fields[current + 1]) if len(fields) == current + 2 else None
        except ValueError:
            raise ParseError(f"malformed number in {line!r}", line_number, source) from None
        words = fields[1 : current + 1]
        if current == 1:
            if words[0] in index:
                raise ParseError(f"duplicate unigram {words[0]!r}", line_number, source)
            index[words[0]] = len(vocab)
            vocab.append(words[0])
        try:
            ngram = tuple(index[w] for w in words)
        except KeyError as e:
            raise ParseError(f"word {e.args[0]!r} has no unigram", line_number, source) from None
        probs[ngram] = logprob
        if backoff is not None:
            backoffs[ngram] = backoff
        seen[current] += 1

    if not ended:
        raise ParseError("missing \\end\\", len(lines), source)
    if not counts:
        raise ParseError("missing \\data\\ section", 1, source)
    return NGramLM(max(counts), vocab, probs, backoffs)


def load_arpa(path: Path) -> NGramLM:
    if not path.exists():
        raise DataError(f"LM file not found: {path}")
    return parse_arpa(path.read_text(encoding="utf-8"), str(path))


def dump_arpa(lm: NGramLM) -> str:
    """ARPA text with ``%.6f`` numbers, n-grams in insertion order"""
    by_order: dict[int, list[tuple[int, ...]]] = {n: [] for n in range(1, lm.order + 1)}
    for ngram in lm.probs:
        by_order[len(ngram)].append(ngram)
    out = ["\\data\\"]
    out += [f"ngram {n}={len(by_order[n])}" for n in by_order]
    for n, ngrams in by_order.items():
        out += ["", f"\\{n}-grams:"]
        for ngram in ngrams:
            fields = ["%.6f" % lm.probs[ngram], " ".join(lm.vocab[i] for i in ngram)]
            if ngram in lm.backoffs:
                fields.append("%.6f" % lm.backoffs[ngram])
            out.append("\t".join(fields))
    out += ["", "\\end\\", ""]
    return "\n".join(out)
