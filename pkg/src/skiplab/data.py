"""Byte-level corpus handling and deterministic batching.

Tokenization is the identity map byte -> id in [0, 256), so any file is
a corpus and decode inverts exactly. The validation split is the fixed
5% tail; training windows never cross the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

VAL_FRACTION = 0.05
VOCAB_SIZE = 256


def tokenize(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def decode(ids: np.ndarray) -> bytes:
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise ValueError("token id outside byte range")
    return arr.astype(np.uint8).tobytes()


@dataclass
class Batch:
    inputs: np.ndarray   # (B, S) int64
    targets: np.ndarray  # (B, S) int64, inputs shifted by one

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]


class Corpus:
    """A concatenated byte stream with a fixed train/validation split.

    The validation split is the deterministic tail of the stream
    (default 5%, never shuffled)."""

    def __init__(self, tokens: np.ndarray, sources: list[str] | None = None,
                 val_fraction: float = VAL_FRACTION):
        if not 0.0 <= val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.sources = sources or []
        self._split = int(len(self.tokens) * (1.0 - val_fraction))

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>",
                   val_fraction: float = VAL_FRACTION) -> "Corpus":
        return cls(tokenize(data), [source], val_fraction=val_fraction)

    @classmethod
    def from_files(cls, paths, val_fraction: float = VAL_FRACTION) -> "Corpus":
        paths = [Path(p) for p in paths]
        blobs = [p.read_bytes() for p in paths]
        return cls(tokenize(b"".join(blobs)), [str(p) for p in paths], val_fraction=val_fraction)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def train_tokens(self) -> np.ndarray:
        return self.tokens[: self._split]

    @property
    def val_tokens(self) -> np.ndarray:
        return self.tokens[self._split:]


def make_batches(corpus: Corpus, batch_size: int, seq_len: int, seed: int,
                 steps: int | None = None):
    """Deterministic stream of random training windows.

    Each sequence is an independent uniformly drawn window from the
    training region; the target is the window shifted by one byte.
    Windows never touch the validation tail.
    """
    train = corpus.train_tokens
    if len(train) < seq_len + 1:
        raise ValueError(
            f"corpus too small: train region holds {len(train)} tokens, need {seq_len + 1}"
        )
    rng = np.random.default_rng(seed)
    limit = len(train) - seq_len - 1
    produced = 0
    while steps is None or produced < steps:
        starts = rng.integers(0, limit + 1, size=batch_size)
        idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
        window = train[idx]
        yield Batch(inputs=window[:, :-1], targets=window[:, 1:])
        produced += 1


def val_batches(corpus: Corpus, batch_size: int, seq_len: int,
                max_batches: int | None = None) -> list[Batch]:
    """Sequential non-overlapping windows over the validation tail."""
    val = corpus.val_tokens
    n_windows = (len(val) - 1) // seq_len
    if max_batches is not None:
        n_windows = min(n_windows, max_batches * batch_size)
    batches = []
    row = []
    for w in range(n_windows):
        lo = w * seq_len
        row.append(val[lo: lo + seq_len + 1])
        if len(row) == batch_size:
            block = np.stack(row)
            batches.append(Batch(inputs=block[:, :-1], targets=block[:, 1:]))
            row = []
    if row:
        block = np.stack(row)
        batches.append(Batch(inputs=block[:, :-1], targets=block[:, 1:]))
    return batches


def sliding_windows(length, window: int, stride: int) -> list[int]:
    """Start indices of full windows: 0, stride, 2*stride, ..."""
    if hasattr(length, "__len__"):
        length = len(length)
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    if window > length:
        return []
    return list(range(0, length - window + 1, stride))


# -- synthetic corpus --------------------------------------------------

_PUNCT = [b". ", b". ", b", ", b"? ", b"! "]


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like filler with strong bigram structure.

    A seeded vocabulary of short words, each with a few preferred
    successors, sampled into sentences. Gives a byte model plenty of
    learnable structure without shipping a real corpus.
    """
    rng = np.random.default_rng(seed)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    n_words = 96
    words = []
    seen = set()
    while len(words) < n_words:
        n = rng.integers(2, 8)
        w = "".join(rng.choice(letters, size=n))
        if w not in seen:
            seen.add(w)
            words.append(w.encode())
    # Zipf-ish unigram weights and a sparse successor preference table.
    ranks = np.arange(1, n_words + 1)
    base_p = (1.0 / ranks) / (1.0 / ranks).sum()
    succ = rng.integers(0, n_words, size=(n_words, 4))
    out = bytearray()
    word = int(rng.integers(0, n_words))
    sentence_left = int(rng.integers(4, 13))
    while len(out) < n_bytes:
        out += words[word]
        sentence_left -= 1
        if sentence_left == 0:
            out += _PUNCT[int(rng.integers(0, len(_PUNCT)))]
            sentence_left = int(rng.integers(4, 13))
            word = int(rng.choice(n_words, p=base_p))
        else:
            out += b" "
            if rng.random() < 0.8:
                word = int(succ[word][int(rng.integers(0, 4))])
            else:
                word = int(rng.choice(n_words, p=base_p))
    return bytes(out[:n_bytes])
