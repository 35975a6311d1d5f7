import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrlm.data import (UNK, ShiftCorpus, Vocab, batch, build_vocab, synth_pattern_corpus,
                        synth_shift_corpus, topic_symbols)
from scrlm.exceptions import DataError, InputError


def test_vocab_aba():
    v = build_vocab("aba")
    assert v.symbols == [UNK, "a", "b"]
    assert list(v.encode("aba")) == [1, 2, 1]
    assert list(v.encode("abz")) == [1, 2, 0]


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=50))
def test_vocab_round_trip(text):
    v = build_vocab(text)
    if UNK not in text:
        assert v.decode(v.encode(text)) == text
    assert Vocab.from_json(v.to_json()) == v


def test_vocab_errors():
    with pytest.raises(InputError):
        build_vocab("")
    with pytest.raises(DataError):
        Vocab(["a", "b"])
    with pytest.raises(DataError):
        Vocab([UNK, "a", "a"])


def test_pattern_corpus():
    assert synth_pattern_corpus("abc", 7, noise=0.0) == "abcabca"
    assert synth_pattern_corpus("abc", 0) == ""
    assert synth_pattern_corpus("abc", 50, seed=3) == synth_pattern_corpus("abc", 50, seed=3)
    with pytest.raises(InputError):
        synth_pattern_corpus("", 5)


def test_pattern_noise_rate():
    n, p = 100_000, 0.01
    clean = synth_pattern_corpus("abcd", n, noise=0.0)
    noisy = synth_pattern_corpus("abcd", n, seed=11, noise=p)
    flips = sum(a != b for a, b in zip(clean, noisy))
    sd = np.sqrt(n * p * (1 - p))
    lo, hi = n * p - 4 * sd, n * p + 4 * sd
    assert lo <= flips <= hi
    assert set(noisy) <= set("abcd")


def test_shift_corpus_structure(tmp_path):
    c = synth_shift_corpus(3, 30, seed=2, noise=0.0)
    assert c.boundaries == [30, 60, 90] and c.topics == [0, 1, 2, 3]
    assert len(c.text) == 120
    for t, (lo, hi) in zip(c.topics, c.spans):
        assert set(c.text[lo:hi]) == set(topic_symbols(t))
    txt, side = c.save(tmp_path / "c.txt")
    assert side.suffix == ".json"
    back = ShiftCorpus.load(txt)
    assert back == c


def test_shift_corpus_errors():
    with pytest.raises(InputError):
        synth_shift_corpus(-1, 10)
    with pytest.raises(InputError):
        synth_shift_corpus(1, 6, segment_len=4)
    with pytest.raises(InputError):
        topic_symbols(20)
    with pytest.raises(DataError):
        ShiftCorpus("abcd", [3, 2], [0, 1, 2])
    with pytest.raises(DataError):
        ShiftCorpus("abcd", [2], [0])


def test_batch_windows():
    toks = np.arange(50)
    windows = batch(toks, 8, 5, seed=1)
    assert len(windows) == 5
    for x, y in windows:
        assert len(x) == len(y) == 8
        assert np.array_equal(y, x + 1)
    again = batch(toks, 8, 5, seed=1)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(windows, again))
    with pytest.raises(InputError):
        batch(toks[:8], 8, 1)
