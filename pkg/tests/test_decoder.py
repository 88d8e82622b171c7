import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from embedmatch.class_lm import parse_arpa
from embedmatch.ctc_loss import collapse_path
from embedmatch.decoder import (
    LN10,
    DecodeResult,
    DecoderConfig,
    DecodeVocab,
    apply_blank_heuristic,
    decode,
    top_k_prune,
)
from embedmatch.errors import ConfigurationError
from embedmatch.pron_lexicon import PronLexicon

SMALL_ARPA = """\
\\data\\
ngram 1=7
ngram 2=6

\\1-grams:
-99\t<s>\t-0.3
-0.8\t</s>
-0.6\ta\t-0.2
-0.7\tb\t-0.25
-0.9\tc\t-0.1
-0.5\t$CONTACT\t-0.15
-1.5\t<unk>

\\2-grams:
-0.2\t<s> a
-0.4\ta b
-0.3\ta $CONTACT
-0.6\tb c
-0.25\t$CONTACT </s>
-0.5\tc </s>

\\end\\
"""


@pytest.fixture
def lm():
    return parse_arpa(SMALL_ARPA)


@pytest.fixture
def lexicon(inventory):
    static = PronLexicon.build(inventory, [("a", (1, 2)), ("b", (3,)), ("c", (4, 5))])
    extended, _, _ = static.extended([("Marcus", (6, 7, 8))])
    return extended


def exhaustive_best(posteriors, lexicon, lm, contacts, cfg):
    """Score every collapsed prefix by summing all of its CTC paths"""
    log_post = np.log(apply_blank_heuristic(posteriors, cfg.blank_divisor))
    frames, columns = log_post.shape
    per_prefix: dict[tuple[int, ...], list[float]] = {}
    for path in itertools.product(range(columns), repeat=frames):
        total = sum(log_post[t, c] for t, c in enumerate(path))
        words = tuple(c - 1 for c in collapse_path(path))
        per_prefix.setdefault(words, []).append(total)

    vocab = DecodeVocab(lexicon, lm, contacts)
    scale = cfg.lm_scale * LN10 if lm is not None else 0.0
    best: tuple[float, tuple[int, ...]] | None = None
    for words, totals in per_prefix.items():
        lm_total = 0.0
        if lm is not None:
            state = lm.start_state()
            for word in words:
                delta, state = lm.lm_score(state, vocab.tokens[word], word in vocab.dynamic, vocab.contacts_count)
                lm_total += delta
            lm_total += lm.end_score(state)
        score = float(logsumexp(totals)) + scale * lm_total
        if best is None or (-score, words) < (-best[0], best[1]):
            best = (score, words)
    assert best is not None
    return DecodeResult(best[1], best[0])


@pytest.mark.parametrize("frames", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("with_lm", [True, False])
def test_wide_beam_matches_exhaustive_search(rng, lexicon, lm, frames, with_lm):
    cfg = DecoderConfig(beam_width=2000, top_k_posteriors=4, lm_scale=0.7, blank_divisor=1.5)
    for _ in range(3):
        posteriors = rng.dirichlet(np.full(5, 0.6), size=frames)
        expected = exhaustive_best(posteriors, lexicon, lm if with_lm else None, [3], cfg)
        got = decode(posteriors, lexicon, lm if with_lm else None, [3], cfg)
        assert got.words == expected.words
        assert got.score == pytest.approx(expected.score, abs=1e-9)


def test_blank_heuristic_only_touches_blank():
    posteriors = np.array([[0.6, 0.3, 0.1]])
    adjusted = apply_blank_heuristic(posteriors, 3.0)
    np.testing.assert_allclose(adjusted, [[0.2, 0.3, 0.1]])
    assert posteriors[0, 0] == 0.6


def test_blank_divisor_below_one():
    with pytest.raises(ConfigurationError):
        apply_blank_heuristic(np.ones((1, 2)), 0.5)


def test_top_k_ties_go_to_lower_id():
    pruned = top_k_prune(np.array([[0.1, 0.3, 0.3, 0.3]]), 2)
    assert np.isfinite(pruned[0, :3]).all()
    assert pruned[0, 3] == -np.inf


def test_top_k_keeps_everything_when_wide():
    posteriors = np.array([[0.1, 0.5, 0.4]])
    np.testing.assert_allclose(top_k_prune(posteriors, 5), np.log(posteriors))


def test_empty_input(lexicon):
    assert decode(np.zeros((0, 5)), lexicon, None, [], DecoderConfig()) == DecodeResult((), 0.0)


def test_column_mismatch(lexicon):
    with pytest.raises(ConfigurationError):
        decode(np.full((2, 3), 1 / 3), lexicon, None, [], DecoderConfig())


def test_score_ties_prefer_smaller_prefix(lexicon):
    posteriors = np.array([[0.1, 0.4, 0.4, 0.05, 0.05]])
    assert decode(posteriors, lexicon, None, [], DecoderConfig()).words == (0,)


def test_blank_divisor_can_flip_the_result(lexicon):
    posteriors = np.array([[0.5, 0.3, 0.1, 0.05, 0.05]])
    assert decode(posteriors, lexicon, None, [], DecoderConfig()).words == ()
    flipped = decode(posteriors, lexicon, None, [], DecoderConfig(blank_divisor=2.0))
    assert flipped.words == (0,)


def test_zero_lm_scale_equals_no_lm(rng, lexicon, lm):
    posteriors = rng.dirichlet(np.ones(5), size=6)
    cfg = DecoderConfig(lm_scale=0.0, beam_width=8)
    assert decode(posteriors, lexicon, lm, [3], cfg) == decode(posteriors, lexicon, None, [3], cfg)


def test_lm_breaks_an_acoustic_tie(lexicon, lm):
    # a and b are acoustically equal; only "a" is likely as a first word
    posteriors = np.array([[0.02, 0.49, 0.49, 0.0, 0.0]])
    result = decode(posteriors, lexicon, lm, [3], DecoderConfig(lm_scale=1.0))
    assert result.words == (0,)
    expected = math.log(0.49) + LN10 * (-0.2 + -0.2 - 0.8)
    assert result.score == pytest.approx(expected, abs=1e-9)


def test_repeated_word_needs_a_blank(lexicon):
    posteriors = np.array([[0.0, 1.0, 0.0, 0.0, 0.0]] * 2)
    assert decode(posteriors, lexicon, None, [], DecoderConfig()).words == (0,)
    separated = np.array([[0.0, 1.0, 0, 0, 0], [1.0, 0, 0, 0, 0], [0.0, 1.0, 0, 0, 0]])
    assert decode(separated, lexicon, None, [], DecoderConfig()).words == (0, 0)


def test_contacts_share_the_class_probability(inventory, lm):
    static = PronLexicon.build(inventory, [("a", (1, 2)), ("b", (3,)), ("c", (4, 5))])
    lexicon, contacts, _ = static.extended([("Marcus", (6, 7)), ("Lena", (8, 9))])
    vocab = DecodeVocab(lexicon, lm, contacts)
    assert vocab.contacts_count == 2
    assert vocab.tokens[contacts[0]] == -1 and vocab.tokens[contacts[1]] == -1
    posteriors = np.array([[0.0, 1.0, 0, 0, 0, 0], [0.0, 0, 0, 0, 0.5, 0.5]])
    result = decode(posteriors, lexicon, lm, contacts, DecoderConfig(lm_scale=1.0))
    assert result.words == (0, contacts[0])
    expected = math.log(0.5) + LN10 * (-0.2 - 0.3 - math.log10(2) - 0.25)
    assert result.score == pytest.approx(expected, abs=1e-9)


def orths(lexicon, words):
    return [lexicon.orth(w) for w in words]


def test_relabelling_words_relabels_the_output(rng, inventory, lm):
    entries = [("a", (1, 2)), ("b", (3,)), ("c", (4, 5))]
    order = [2, 0, 1]
    original, contacts, _ = PronLexicon.build(inventory, entries).extended([("Marcus", (6, 7, 8))])
    permuted, _, _ = PronLexicon.build(inventory, [entries[i] for i in order]).extended([("Marcus", (6, 7, 8))])
    # column j + 1 of the permuted posteriors is the word permuted.orth(j)
    columns = [0, *(original.word_id(permuted.orth(j)) + 1 for j in range(4))]
    cfg = DecoderConfig(lm_scale=0.7, beam_width=16)
    for _ in range(20):
        posteriors = rng.dirichlet(np.full(5, 0.5), size=8)
        first = decode(posteriors, original, lm, contacts, cfg)
        second = decode(posteriors[:, columns], permuted, lm, contacts, cfg)
        assert orths(original, first.words) == orths(permuted, second.words)
        assert second.score == pytest.approx(first.score, abs=1e-9)


def test_swapping_contact_names_swaps_only_the_names(rng, inventory, lm):
    static = PronLexicon.build(inventory, [("a", (1, 2)), ("b", (3,)), ("c", (4, 5))])
    marcus_first, contacts, _ = static.extended([("Marcus", (6, 7)), ("Lena", (8, 9))])
    lena_first, swapped_contacts, _ = static.extended([("Lena", (6, 7)), ("Marcus", (8, 9))])
    assert contacts == swapped_contacts
    names = {"Marcus": "Lena", "Lena": "Marcus"}
    cfg = DecoderConfig(lm_scale=1.0, beam_width=16)
    for _ in range(20):
        posteriors = rng.dirichlet(np.full(6, 0.5), size=7)
        first = decode(posteriors, marcus_first, lm, contacts, cfg)
        second = decode(posteriors, lena_first, lm, contacts, cfg)
        assert first.words == second.words
        assert first.score == second.score
        expected = [names.get(w, w) for w in orths(marcus_first, first.words)]
        assert orths(lena_first, second.words) == expected


def test_raising_the_blank_divisor_never_drops_words(lexicon):
    # four word frames with one candidate each, every other frame certain blank
    posteriors = np.zeros((10, 5))
    posteriors[:, 0] = 1.0
    for frame, word, p in [(1, 1, 0.45), (3, 2, 0.3), (6, 3, 0.2), (8, 4, 0.1)]:
        posteriors[frame, 0] = 1.0 - p
        posteriors[frame, word] = p
    counts = [
        len(decode(posteriors, lexicon, None, [], DecoderConfig(blank_divisor=d)).words)
        for d in (1.0, 1.5, 3.0, 5.0, 10.0)
    ]
    assert counts == [0, 1, 2, 3, 4]


def test_default_top_k_rarely_changes_the_result(rng, inventory):
    words = [(f"w{i}", (i // 39, i % 39)) for i in range(120)]
    lexicon = PronLexicon.build(inventory, words)
    pruned_cfg = DecoderConfig(beam_width=8)
    full_cfg = DecoderConfig(beam_width=8, top_k_posteriors=len(words))
    same = 0
    for _ in range(100):
        logits = rng.normal(0.0, 1.0, (12, 121))
        logits[:, 0] += 10.0
        for frame in (2, 6, 10):
            logits[frame, 1 + int(rng.integers(0, 120))] += 12.0
        posteriors = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        pruned = decode(posteriors, lexicon, None, [], pruned_cfg)
        full = decode(posteriors, lexicon, None, [], full_cfg)
        same += pruned.words == full.words
    assert same >= 99


NEAR_HOMOPHONE_ARPA = """\
\\data\\
ngram 1=6
ngram 2=5

\\1-grams:
-99\t<s>\t-0.3
-1.0\t</s>
-0.7\tcall\t-1.0
-0.9\tkohl\t-0.5
-0.8\t$CONTACT\t-0.5
-1.5\t<unk>

\\2-grams:
-0.05\t<s> call
-0.05\tcall $CONTACT
-2.0\tcall kohl
-0.05\t$CONTACT </s>
-0.05\tkohl </s>

\\end\\
"""


@pytest.mark.parametrize("lm_scale, expected", [(0.0, ("call", "kohl")), (2.0, ("call", "Cole"))])
def test_contact_beats_a_static_near_homophone_with_a_strong_lm(inventory, lm_scale, expected):
    lm = parse_arpa(NEAR_HOMOPHONE_ARPA)
    static = PronLexicon.build(inventory, [("call", (1, 2)), ("kohl", (3, 4))])
    lexicon, contacts, _ = static.extended([("Cole", (3, 5))])
    posteriors = np.array(
        [
            [0.1, 0.9, 0.0, 0.0],
            [0.9, 0.1, 0.0, 0.0],
            [0.1, 0.0, 0.5, 0.4],
            [0.2, 0.0, 0.45, 0.35],
            [0.9, 0.0, 0.05, 0.05],
            [1.0, 0.0, 0.0, 0.0],
        ]
    )
    cfg = DecoderConfig(lm_scale=lm_scale, beam_width=64)
    result = decode(posteriors, lexicon, lm, contacts, cfg)
    oracle = exhaustive_best(posteriors, lexicon, lm, contacts, cfg)
    assert result.words == oracle.words
    assert result.score == pytest.approx(oracle.score, abs=1e-9)
    assert tuple(orths(lexicon, result.words)) == expected
