import math

import pytest

from embedmatch.class_lm import CLASS_SYMBOL, LMState, dump_arpa, load_arpa, parse_arpa
from embedmatch.errors import ConfigurationError, DataError, ParseError

CALL_ARPA = """\
\\data\\
ngram 1=5
ngram 2=3

\\1-grams:
-1.0\t<s>\t-0.5
-0.5\t</s>
-0.7\tcall\t-0.3
-0.6\t$CONTACT\t-0.2
-1.2\t<unk>

\\2-grams:
-0.3010299957\tcall $CONTACT
-0.2\t<s> call
-0.4\t$CONTACT </s>

\\end\\
"""

TRIGRAM_ARPA = """\
\\data\\
ngram 1=4
ngram 2=2
ngram 3=1

\\1-grams:
-1 <s> -0.1
-0.6 a -0.2
-0.6 b -0.25
-0.6 c

\\2-grams:
-0.3 a b -0.15
-0.4 b c

\\3-grams:
-0.1 <s> a b

\\end\\
"""


@pytest.fixture
def call_lm():
    return parse_arpa(CALL_ARPA)


def test_listed_bigram(call_lm):
    state = call_lm.start_state()
    score, state = call_lm.lm_score(state, call_lm.token_id("call"))
    assert score == pytest.approx(-0.2, abs=1e-9)
    assert state == LMState((call_lm.token_id("call"),))


def test_contact_class_split(call_lm):
    state = LMState((call_lm.token_id("call"),))
    score, next_state = call_lm.lm_score(state, -1, is_dynamic=True, contacts_count=2)
    assert score == pytest.approx(math.log10(0.25), abs=1e-9)
    assert next_state == LMState((call_lm.class_id,))


def test_single_contact_has_no_penalty(call_lm):
    state = LMState((call_lm.token_id("call"),))
    score, _ = call_lm.lm_score(state, -1, is_dynamic=True, contacts_count=1)
    assert score == pytest.approx(math.log10(0.5), abs=1e-9)


def test_dynamic_words_are_interchangeable(call_lm):
    for history in [(), (call_lm.token_id("call"),), (call_lm.bos_id,)]:
        state = LMState(history)
        first = call_lm.lm_score(state, 101, is_dynamic=True, contacts_count=7)
        second = call_lm.lm_score(state, 205, is_dynamic=True, contacts_count=7)
        assert first == second


def test_backoff_to_unigram(call_lm):
    state = LMState((call_lm.token_id("call"),))
    assert call_lm.end_score(state) == pytest.approx(-0.3 - 0.5, abs=1e-9)
    score, _ = call_lm.lm_score(state, call_lm.token_id("call"))
    assert score == pytest.approx(-0.3 - 0.7, abs=1e-9)


def test_unknown_word_scores_as_unk(call_lm):
    token = call_lm.token_id("foo")
    assert token == call_lm.token_id("<unk>")
    score, _ = call_lm.lm_score(LMState((call_lm.token_id("call"),)), token)
    assert score == pytest.approx(-1.2 - 0.3, abs=1e-9)


def test_sentence_score(call_lm):
    total = call_lm.sentence_log10(["call", "Marcus"], dynamic=[False, True], contacts_count=2)
    assert total == pytest.approx(-0.2 + math.log10(0.5) - math.log10(2) - 0.4, abs=1e-9)


def test_class_symbol_is_not_a_word(call_lm):
    with pytest.raises(ConfigurationError):
        call_lm.token_id(CLASS_SYMBOL)


def test_trigram_backoff_chain():
    lm = parse_arpa(TRIGRAM_ARPA)
    a, b, c = (lm.token_id(w) for w in "abc")
    assert lm.log10_prob((a, b), c) == pytest.approx(-0.15 - 0.4, abs=1e-9)
    assert lm.log10_prob((a, b), a) == pytest.approx(-0.15 - 0.25 - 0.6, abs=1e-9)
    assert lm.log10_prob((lm.bos_id, a), b) == pytest.approx(-0.1, abs=1e-9)


def test_minimal_unigram_model():
    lm = parse_arpa("\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3 x\n-0.4 y\n\n\\end\\\n")
    assert lm.order == 1
    assert lm.lm_score(lm.start_state(), lm.token_id("x"))[0] == pytest.approx(-0.3)
    assert lm.lm_score(lm.start_state(), lm.token_id("y"))[0] == pytest.approx(-0.4)


def test_count_mismatch_names_the_section_line():
    broken = CALL_ARPA.replace("ngram 2=3", "ngram 2=4")
    with pytest.raises(ParseError, match="2-grams") as info:
        parse_arpa(broken, "lm.arpa")
    assert info.value.line_number == 12
    assert str(info.value).startswith("lm.arpa:12:")


def test_malformed_header():
    with pytest.raises(ParseError):
        parse_arpa(CALL_ARPA.replace("\\2-grams:", "\\two-grams:"))


def test_missing_end():
    with pytest.raises(ParseError):
        parse_arpa(CALL_ARPA.replace("\\end\\", ""))


def test_dump_load_dump_is_stable(tmp_path, call_lm):
    first = dump_arpa(call_lm)
    path = tmp_path / "lm.arpa"
    path.write_text(first)
    assert dump_arpa(load_arpa(path)) == first


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_arpa(tmp_path / "absent.arpa")
