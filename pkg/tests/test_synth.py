import logging

import numpy as np
import pytest

from sbl.encoder import read_features
from sbl.errors import ConfigError
from sbl.lexicon import LexiconEntry
from sbl.synth import (
    LARGE_SIZES,
    DatasetManifest,
    find_ambiguous_pairs,
    generate_dataset,
    generate_language_pair,
    generate_lexicon,
    inventory_for,
    render_features,
)


def test_large_inventory_union():
    a, b = generate_language_pair(0, size_a=LARGE_SIZES[0], size_b=LARGE_SIZES[1], shared=LARGE_SIZES[2])
    assert len(set(a.phonemes) | set(b.phonemes)) == 56
    assert inventory_for((a, b)).n_phonemes == 56
    a, b = generate_language_pair(0, size_a=40, size_b=48, shared=0)
    assert inventory_for((a, b)).n_phonemes == 88


def test_pair_is_deterministic_in_seed():
    assert generate_language_pair(3) == generate_language_pair(3)
    assert generate_language_pair(3) != generate_language_pair(4)


def test_shared_phonemes_look_identical_in_both_languages():
    a, b = generate_language_pair(1, n_visemes=5)
    assert a.shared == b.shared and len(a.shared) == 8
    for s in a.shared:
        assert a.viseme_of[s] == b.viseme_of[s]
    np.testing.assert_array_equal(a.visemes, b.visemes)
    assert len(set(a.viseme_of.values()) | set(b.viseme_of.values())) == 5


@pytest.mark.parametrize(
    "kwargs",
    [dict(shared=20), dict(size_a=0), dict(languages=("A", "A")), dict(word_len=(3, 2)), dict(n_visemes=99)],
)
def test_pair_config_errors(kwargs):
    with pytest.raises(ConfigError):
        generate_language_pair(0, **kwargs)


def test_lexicon_capacity_error():
    a, _ = generate_language_pair(0, size_a=2, size_b=2, shared=1, word_len=(1, 2))
    assert len(generate_lexicon(a, 6, 0)) == 6
    with pytest.raises(ConfigError):
        generate_lexicon(a, 7, 0)


def test_lexicon_words_are_distinct_and_in_range():
    a, _ = generate_language_pair(0)
    words = generate_lexicon(a, 50, 0)
    assert len({w.phonemes for w in words}) == 50
    assert all(2 <= len(w.phonemes) <= 5 and set(w.phonemes) <= set(a.phonemes) for w in words)


def test_noiseless_frames_are_exact_viseme_vectors():
    a, _ = generate_language_pair(2, noise_std=0.0, duration=(2, 2))
    entry = LexiconEntry("w", a.language, a.phonemes[:3])
    frames = render_features(entry, a, np.random.default_rng(0))
    expected = np.repeat(a.visemes[[a.viseme_of[s] for s in entry.phonemes]], 2, axis=0)
    np.testing.assert_array_equal(frames, expected)


def test_ambiguous_pairs_found_exhaustively():
    a, _ = generate_language_pair(0, size_a=4, size_b=4, shared=4, n_visemes=1, word_len=(1, 1))
    words = [LexiconEntry(f"w{i}", a.language, (s,)) for i, s in enumerate(a.phonemes)]
    assert len(find_ambiguous_pairs(words, a)) == 6
    a, _ = generate_language_pair(0, size_a=4, size_b=4, shared=4, word_len=(1, 1))
    assert find_ambiguous_pairs(words, a) == []


def test_split_counts(tmp_path):
    specs = generate_language_pair(0)
    train, test = generate_dataset(specs, 10, 4, 0.75, 0, tmp_path)
    for lang in ("A", "B"):
        assert len(train.only([lang])) == 30 and len(test.only([lang])) == 10
    assert not {r.feature_path for r in train.samples} & {r.feature_path for r in test.samples}
    again = DatasetManifest.read(tmp_path / "train.tsv")
    assert again.samples == train.samples
    assert read_features(tmp_path / train.samples[0].feature_path).shape[1] == 16


def test_empty_test_split_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        _, test = generate_dataset(generate_language_pair(0), 3, 2, 1.0, 0, tmp_path)
    assert len(test) == 0 and "empty" in caplog.text


def test_regeneration_is_byte_identical(tmp_path):
    specs = generate_language_pair(5)
    for d in ("one", "two"):
        generate_dataset(specs, 4, 2, 0.5, 5, tmp_path / d)
    files = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes()
