import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skiplab.data import (
    Corpus,
    decode,
    make_batches,
    sliding_windows,
    synthetic_corpus,
    tokenize,
    val_batches,
)


def test_tokenize_ascii():
    np.testing.assert_array_equal(tokenize(b"AB"), [65, 66])


def test_tokenize_empty():
    assert tokenize(b"").size == 0


@settings(max_examples=80, deadline=None)
@given(st.binary(max_size=256))
def test_tokenize_decode_bijection(blob):
    assert decode(tokenize(blob)) == blob


def test_decode_rejects_out_of_range():
    with pytest.raises(ValueError):
        decode(np.array([0, 256]))


def test_single_window_corpus():
    S = 8
    corpus = Corpus.from_bytes(bytes(range(S + 1)), val_fraction=0.0)
    batch = next(make_batches(corpus, batch_size=4, seq_len=S, seed=0))
    np.testing.assert_array_equal(batch.inputs, np.tile(np.arange(S), (4, 1)))
    np.testing.assert_array_equal(batch.targets, np.tile(np.arange(1, S + 1), (4, 1)))


def test_batches_deterministic():
    corpus = Corpus.from_bytes(synthetic_corpus(5000, seed=1))
    a = [b.inputs for b in make_batches(corpus, 2, 16, seed=42, steps=5)]
    b = [b.inputs for b in make_batches(corpus, 2, 16, seed=42, steps=5)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_target_alignment():
    corpus = Corpus.from_bytes(synthetic_corpus(4000, seed=2))
    for batch in make_batches(corpus, 3, 12, seed=0, steps=10):
        np.testing.assert_array_equal(batch.targets[:, :-1], batch.inputs[:, 1:])


def test_windows_never_cross_validation_boundary():
    # Train region is all zeros, validation tail all ones: any window
    # touching the tail would surface a 1.
    n = 3000
    corpus = Corpus.from_bytes(b"\x00" * int(n * 0.95) + b"\x01" * (n - int(n * 0.95)))
    assert corpus.val_tokens.min() == 1  # split where expected
    count = 0
    for batch in make_batches(corpus, 10, 20, seed=9, steps=1000):
        count += batch.inputs.shape[0]
        assert batch.inputs.max() == 0
        assert batch.targets.max() == 0
    assert count == 10_000


def test_corpus_too_small():
    corpus = Corpus.from_bytes(b"abc", val_fraction=0.0)
    with pytest.raises(ValueError, match="too small"):
        next(make_batches(corpus, 1, 8, seed=0))


def test_val_batches_cover_tail_sequentially():
    corpus = Corpus.from_bytes(bytes(range(200)) * 10, val_fraction=0.1)
    batches = val_batches(corpus, batch_size=2, seq_len=16)
    assert batches
    first = batches[0]
    np.testing.assert_array_equal(first.inputs[0], corpus.val_tokens[:16])
    np.testing.assert_array_equal(first.targets[0], corpus.val_tokens[1:17])


def test_sliding_windows_arithmetic():
    assert sliding_windows(300, 100, 100) == [0, 100, 200]
    assert sliding_windows(100, 100, 100) == [0]
    assert sliding_windows(250, 100, 50) == [0, 50, 100, 150]


def test_sliding_windows_too_long_gives_empty():
    assert sliding_windows(50, 100, 100) == []


def test_sliding_windows_accepts_sequences():
    assert sliding_windows(np.zeros(120), 100, 10) == [0, 10, 20]


def test_synthetic_corpus_deterministic_and_printable():
    a = synthetic_corpus(2000, seed=5)
    b = synthetic_corpus(2000, seed=5)
    assert a == b
    assert len(a) == 2000
    assert set(a) <= set(range(32, 127))
    assert synthetic_corpus(2000, seed=6) != a
