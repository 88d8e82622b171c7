import numpy as np
import pytest

from embedmatch.pron_lexicon import PhonemeInventory, PronLexicon
from embedmatch.synth_corpus import CorpusSpec


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def inventory() -> PhonemeInventory:
    return PhonemeInventory.arpabet(39)


@pytest.fixture
def live_lexicon(inventory: PhonemeInventory) -> PronLexicon:
    """'live' has two prons, 'stair' and 'stare' share one"""
    p = inventory.parse
    return PronLexicon.build(
        inventory,
        [
            ("live", p("/l/ /ih/ /v/")),
            ("live", p("/l/ /ay/ /v/")),
            ("stair", p("/s/ /t/ /eh/ /r/")),
            ("stare", p("/s/ /t/ /eh/ /r/")),
            ("read", p("/r/ /iy/ /d/")),
        ],
    )


@pytest.fixture(scope="session")
def tiny_spec() -> CorpusSpec:
    return CorpusSpec(
        phoneme_count=8,
        feature_dim=6,
        frames_per_phoneme=(2, 3),
        noise_sigma=0.05,
        vocab_size=16,
        pron_length=(2, 3),
        multi_pron_fraction=0.25,
        homophone_pairs=1,
        prefix_pairs=2,
        carrier_words=2,
        contact_pool_size=10,
        contact_pron_length=(3, 4),
        contacts_per_utterance=(2, 4),
        utterance_count=30,
        test_utterance_count=8,
        overlap_utterance_count=4,
        successors_per_word=3,
        max_words=4,
        seed=3,
    )
