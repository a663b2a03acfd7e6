"""Byte-level tokenization, corpora, deterministic batching, synthetic streams.

Tokenization is the identity map byte -> id in [0, 256); the LM head vocab is
padded to a power of two (256 already is one). Corpora hold raw bytes with a
train/validation boundary near the end; batch sampling is a pure function of
(split, seed, step) so interrupted runs resume on the same batch stream and
no window ever crosses the boundary.

Synthetic generators produce streams where cross-token state plausibly pays:
- group-sum streams: groups of digit values followed by a query marker and
  the group's (optionally position-weighted, optionally running) sum mod base
- repeated-copy streams: a delimited segment followed by its exact copy
- word-salad filler: english-like text for smoke-level language modeling
"""

from __future__ import annotations

import numpy as np

BYTE_VOCAB = 256


def byte_tokenize(data: bytes) -> np.ndarray:
    """Identity byte -> token id."""
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= BYTE_VOCAB):
        raise ValueError("token id outside byte range")
    return ids.astype(np.uint8).tobytes()


def padded_vocab(n: int = BYTE_VOCAB) -> int:
    """Smallest power of two >= n."""
    return 1 << max(n - 1, 1).bit_length() if n & (n - 1) else max(n, 1)


class Corpus:
    """Raw bytes plus a train/validation split at a fixed boundary.

    The final `val_fraction` of bytes is the validation span; training and
    validation windows are sampled strictly inside their spans.
    """

    def __init__(self, data: bytes, val_fraction: float = 0.1):
        if not 0.0 < val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        self.tokens = byte_tokenize(data)
        self.boundary = len(self.tokens) - int(len(self.tokens) * val_fraction)

    def span(self, split: str) -> np.ndarray:
        if split == "train":
            return self.tokens[: self.boundary]
        if split == "val":
            return self.tokens[self.boundary :]
        raise ValueError(f"unknown split {split!r}")

    def batch(self, split: str, seq_len: int, batch_size: int, seed: int, step: int):
        """Deterministic shuffled windows; targets are inputs shifted by one."""
        pool = self.span(split)
        if len(pool) <= seq_len:
            raise ValueError(f"{split} split has {len(pool)} tokens, need > {seq_len}")
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(0 if split == "train" else 1, step))
        rng = np.random.default_rng(ss)
        starts = rng.integers(0, len(pool) - seq_len, size=batch_size)
        tokens = np.stack([pool[s : s + seq_len] for s in starts])
        targets = np.stack([pool[s + 1 : s + seq_len + 1] for s in starts])
        return tokens, targets

    def batches(self, split: str, seq_len: int, batch_size: int, seed: int, count: int):
        for step in range(count):
            yield self.batch(split, seq_len, batch_size, seed, step)


# -- synthetic streams ---------------------------------------------------------


def gen_group_sum(n_bytes: int, seed: int = 0, base: int = 8, min_len: int = 2,
                  max_len: int = 8, weighted: bool = False, running: bool = False) -> bytes:
    """Digit groups with queried sums, e.g. ``524=3 61=7 ...``.

    Each group holds uniform digits in [0, base); after ``=`` the stream
    carries (sum of the group) mod base, position-weighted when `weighted`
    (sum of (i+1)*digit), accumulated across groups when `running`. Predicting
    the answer byte requires state over at least the whole previous group.
    """
    if not 2 <= base <= 10:
        raise ValueError("base must be in [2, 10]")
    rng = np.random.default_rng(seed)
    out = bytearray()
    total = 0
    while len(out) < n_bytes:
        width = int(rng.integers(min_len, max_len + 1))
        digits = rng.integers(0, base, size=width)
        acc = int(sum((i + 1) * d for i, d in enumerate(digits)) if weighted else digits.sum())
        total = (total + acc) % base
        answer = total if running else acc % base
        out += bytes(48 + d for d in digits)
        out.append(ord("="))
        out.append(48 + answer)
        out.append(ord(" "))
    return bytes(out[:n_bytes])


def gen_repeated_copy(n_bytes: int, seed: int = 0, min_len: int = 4, max_len: int = 12,
                      alphabet: bytes = b"abcdefghijklmnop") -> bytes:
    """Segments repeated verbatim after a separator: ``segment|segment.``"""
    rng = np.random.default_rng(seed)
    out = bytearray()
    while len(out) < n_bytes:
        width = int(rng.integers(min_len, max_len + 1))
        seg = bytes(alphabet[i] for i in rng.integers(0, len(alphabet), size=width))
        out += seg + b"|" + seg + b"."
    return bytes(out[:n_bytes])


_WORDS = (
    "the a of to and in that it was for on with as at by from this be are or "
    "an but not they we you she he has had have will would there what when "
    "where how all some many few more most other same new old good small "
    "large long short high low early late light dark open closed stone road "
    "river hill field house door window garden water fire wind rain snow "
    "summer winter morning evening night day year time hand eye voice word "
    "letter book page story song bird tree leaf grass horse dog cat fish "
    "bread salt milk iron gold silver glass paper cloth thread needle wheel "
    "boat bridge market town city village king queen child friend brother "
    "sister mother father walk run stand sit sleep wake speak listen read "
    "write count make break carry bring take give keep lose find look see "
    "hear feel think know remember forget begin end turn move stay leave"
).split()


def gen_word_salad(n_bytes: int, seed: int = 0) -> bytes:
    """Seeded english-like filler text (uniform words, sentence shaping)."""
    rng = np.random.default_rng(seed)
    out = []
    size = 0
    sentence = []
    while size < n_bytes:
        sentence.append(_WORDS[int(rng.integers(0, len(_WORDS)))])
        if len(sentence) >= int(rng.integers(5, 13)):
            text = " ".join(sentence).capitalize() + ". "
            out.append(text)
            size += len(text)
            sentence = []
    return "".join(out).encode("ascii")[:n_bytes]


GENERATORS = {
    "counter": lambda n, seed, **kw: gen_group_sum(n, seed, running=True, **kw),
    "group_sum": gen_group_sum,
    "copy": gen_repeated_copy,
    "words": gen_word_salad,
}


def load_corpus(kind: str, path: str = "", n_bytes: int = 1 << 18, seed: int = 0,
                val_fraction: float = 0.1, **task_args) -> Corpus:
    """Corpus from a raw file (`kind='file'`) or a named synthetic generator."""
    if kind == "file":
        if not path:
            raise ValueError("file corpus needs a path")
        with open(path, "rb") as fh:
            return Corpus(fh.read(), val_fraction)
    if kind not in GENERATORS:
        raise ValueError(f"unknown corpus kind {kind!r}; expected file or one of {sorted(GENERATORS)}")
    return Corpus(GENERATORS[kind](n_bytes, seed, **task_args), val_fraction)
