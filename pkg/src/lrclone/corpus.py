# src/lrclone/corpus.py
"""
Token corpora: the on-disk token file, synthetic generators and packing.

Token file layout (all integers little-endian):

    magic "LRCT" | version u32 | vocab u32 | doc count u64
    per document: length u64, then `length` u32 token ids

The last id of every vocabulary (vocab - 1) is reserved as the document
separator used by packing; generators never emit it inside a document.
"""

from __future__ import annotations

import struct
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np

from .enums import CorpusKind
from .errors import FormatError, InputError
from .utils import write_atomic

TOKEN_FILE_VERSION = 1


@dataclass(slots=True)
class TokenCorpus:
    documents: list[np.ndarray]
    vocab_size: int
    source: str = ""

    @property
    def separator(self) -> int:
        return self.vocab_size - 1

    @property
    def total_tokens(self) -> int:
        return sum(int(d.size) for d in self.documents)

    def validate(self) -> None:
        if not self.documents or all(d.size == 0 for d in self.documents):
            raise InputError("corpus needs at least one nonempty document")
        for i, doc in enumerate(self.documents):
            if doc.size and (int(doc.min()) < 0 or int(doc.max()) >= self.vocab_size):
                raise InputError(f"document {i} has ids outside vocabulary of size {self.vocab_size}")

    def human_summary(self) -> str:
        return f"{len(self.documents)} documents, {self.total_tokens} tokens, vocab {self.vocab_size} ({self.source})"


class TokenFile:
    header: ClassVar[struct.Struct] = struct.Struct("<4sIIQ")
    doc_length: ClassVar[struct.Struct] = struct.Struct("<Q")
    magic: ClassVar[bytes] = b"LRCT"


def write_token_file(corpus: TokenCorpus, path: Path) -> None:
    corpus.validate()
    parts = [TokenFile.header.pack(TokenFile.magic, TOKEN_FILE_VERSION, corpus.vocab_size, len(corpus.documents))]
    for doc in corpus.documents:
        parts.append(TokenFile.doc_length.pack(int(doc.size)))
        parts.append(np.asarray(doc, dtype="<u4").tobytes())
    write_atomic(path, b"".join(parts))


def load_token_file(path: Path) -> TokenCorpus:
    """
    Parse and validate a token file.

    Raises:
        FormatError: bad magic or version, truncation, trailing bytes, an id
            outside the declared vocabulary, or an empty document list; the
            message carries the byte offset of the problem.
    """
    buf = Path(path).read_bytes()
    if len(buf) < TokenFile.header.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)", offset=len(buf))
    magic, version, vocab, n_docs = TokenFile.header.unpack_from(buf, 0)
    if magic != TokenFile.magic:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TokenFile.magic!r}", offset=0)
    if version != TOKEN_FILE_VERSION:
        raise FormatError(f"{path}: unsupported token file version {version}", offset=4)
    if vocab < 2:
        raise FormatError(f"{path}: vocabulary size {vocab} too small", offset=8)
    if n_docs == 0:
        raise FormatError(f"{path}: empty document list", offset=12)

    offset = TokenFile.header.size
    docs: list[np.ndarray] = []
    for i in range(n_docs):
        if offset + TokenFile.doc_length.size > len(buf):
            raise FormatError(f"{path}: truncated before length of document {i}", offset=offset)
        (length,) = TokenFile.doc_length.unpack_from(buf, offset)
        offset += TokenFile.doc_length.size
        nbytes = 4 * length
        if offset + nbytes > len(buf):
            raise FormatError(f"{path}: document {i} declares {length} tokens past end of file", offset=offset)
        ids = np.frombuffer(buf, dtype="<u4", count=length, offset=offset).astype(np.int64)
        bad = np.flatnonzero(ids >= vocab)
        if bad.size:
            at = offset + 4 * int(bad[0])
            raise FormatError(f"{path}: token id {int(ids[bad[0]])} >= vocab {vocab} in document {i}", offset=at)
        docs.append(ids)
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes", offset=offset)

    corpus = TokenCorpus(documents=docs, vocab_size=vocab, source=str(path))
    if corpus.total_tokens == 0:
        raise FormatError(f"{path}: every document is empty", offset=TokenFile.header.size)
    return corpus


# synthetic corpora


@dataclass(slots=True)
class MarkovChain:
    """
    Order-2 chain over ids [0, n): state (a, b) moves to c with
    probability (1 - mix)·weights[a·n + b, j] for c = successors[a·n + b, j],
    plus `mix`/n uniform smoothing so the chain is ergodic.
    """

    n: int
    successors: np.ndarray
    weights: np.ndarray
    mix: float = 0.05
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._cdf = np.cumsum(self.weights, axis=1)
        self._cdf[:, -1] = 1.0


def markov_chain(vocab_size: int, seed: int, branching: int = 4, mix: float = 0.05) -> MarkovChain:
    n = vocab_size - 1
    if n < 2:
        raise InputError(f"markov corpus needs vocab >= 3, got {vocab_size}")
    rng = np.random.default_rng([seed, 0x4D41524B])
    k = min(branching, n)
    # repeated successors simply merge their weights
    successors = rng.integers(0, n, size=(n * n, k))
    weights = rng.dirichlet(np.full(k, 0.5), size=n * n)
    return MarkovChain(n=n, successors=successors, weights=weights, mix=mix)


def markov_stationary(chain: MarkovChain) -> np.ndarray:
    """Stationary unigram distribution of the chain (length n, separator excluded)."""
    n = chain.n
    return _markov_stationary_pairs(chain).reshape(n, n).sum(axis=0)


def _markov_stationary_pairs(chain: MarkovChain) -> np.ndarray:
    """Power iteration on pair states."""
    n = chain.n
    pi = np.full(n * n, 1.0 / (n * n))
    b_of_state = np.arange(n * n) % n
    nxt = b_of_state[:, None] * n + chain.successors
    for _ in range(10_000):
        sparse = np.bincount(nxt.ravel(), weights=(pi[:, None] * chain.weights).ravel(), minlength=n * n)
        uniform = np.repeat(np.bincount(b_of_state, weights=pi, minlength=n) / n, n)
        new = (1.0 - chain.mix) * sparse + chain.mix * uniform
        if np.abs(new - pi).sum() < 1e-13:
            return new
        pi = new
    return pi


def _doc_lengths(rng: np.random.Generator, size: int, lo: int = 32, hi: int = 256) -> list[int]:
    lengths: list[int] = []
    remaining = size
    while remaining > 0:
        n = min(int(rng.integers(lo, hi + 1)), remaining)
        lengths.append(n)
        remaining -= n
    return lengths


def _gen_markov(size: int, vocab: int, rng: np.random.Generator, seed: int) -> list[np.ndarray]:
    chain = markov_chain(vocab, seed)
    n = chain.n
    pairs = _markov_stationary_pairs(chain)
    pairs = pairs / pairs.sum()
    docs = []
    for length in _doc_lengths(rng, size):
        start = int(rng.choice(n * n, p=pairs))
        a, b = divmod(start, n)
        u_mix, u_pick = rng.random(length), rng.random(length)
        uniform = rng.integers(0, n, size=length)
        out = np.empty(length, dtype=np.int64)
        for t in range(length):
            if u_mix[t] < chain.mix:
                c = int(uniform[t])
            else:
                s = a * n + b
                c = int(chain.successors[s, int(np.searchsorted(chain._cdf[s], u_pick[t], side="right"))])
            out[t] = c
            a, b = b, c
        docs.append(out)
    return docs


ARITH_SYMBOLS = {"+": 10, "=": 11, ";": 12}


def _gen_arith(size: int, vocab: int, rng: np.random.Generator) -> list[np.ndarray]:
    if vocab < 14:
        raise InputError(f"arith corpus needs vocab >= 14, got {vocab}")
    docs = []
    for length in _doc_lengths(rng, size):
        toks: list[int] = []
        while len(toks) < length:
            x, y = (int(v) for v in rng.integers(0, 1000, size=2))
            problem = f"{x}+{y}={x + y};"
            toks.extend(ARITH_SYMBOLS[ch] if ch in ARITH_SYMBOLS else int(ch) for ch in problem)
        docs.append(np.asarray(toks[:length], dtype=np.int64))
    return docs


def _gen_copy(size: int, vocab: int, rng: np.random.Generator) -> list[np.ndarray]:
    if vocab < 4:
        raise InputError(f"copy corpus needs vocab >= 4, got {vocab}")
    delim = vocab - 2
    docs = []
    for length in _doc_lengths(rng, size, lo=9, hi=129):
        half = (length - 1) // 2
        seg = rng.integers(0, delim, size=half)
        doc = np.concatenate([seg, [delim], seg, rng.integers(0, delim, size=length - 1 - 2 * half)])
        docs.append(doc.astype(np.int64))
    return docs


def gen_synthetic_corpus(kind: CorpusKind | str, size: int, vocab: int, seed: int) -> TokenCorpus:
    """
    Deterministic synthetic corpus of exactly `size` tokens.

    markov: order-2 chain with sparse random successors.
    arith: "x+y=z;" problems over digit tokens 0-9 and symbols 10-12.
    copy: a random segment, a delimiter (vocab - 2), the same segment again.
    """
    try:
        kind = CorpusKind(kind)
    except ValueError:
        valid = ", ".join(k.value for k in CorpusKind)
        raise InputError(f"unknown corpus kind {kind!r}; choose from {valid}") from None
    if size <= 0:
        raise InputError(f"corpus size must be > 0, got {size}")
    rng = np.random.default_rng(seed)
    if kind is CorpusKind.markov:
        docs = _gen_markov(size, vocab, rng, seed)
    elif kind is CorpusKind.arith:
        docs = _gen_arith(size, vocab, rng)
    else:
        docs = _gen_copy(size, vocab, rng)
    return TokenCorpus(documents=docs, vocab_size=vocab, source=f"synthetic:{kind.value}:seed={seed}")


# packing


def _packed_stream(corpus: TokenCorpus, rng: np.random.Generator) -> np.ndarray:
    order = rng.permutation(len(corpus.documents))
    sep = np.asarray([corpus.separator], dtype=np.int64)
    pieces: list[np.ndarray] = []
    for i in order:
        pieces.append(np.asarray(corpus.documents[i], dtype=np.int64))
        pieces.append(sep)
    return np.concatenate(pieces)


def pack_batches(corpus: TokenCorpus, seq_len: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """
    Shuffle documents, join them with the separator and cut batch_size × seq_len
    matrices; the partial tail is dropped.

    Raises:
        InputError: seq_len < 2 or the corpus is shorter than one batch.
    """
    if seq_len < 2:
        raise InputError(f"seq_len must be >= 2, got {seq_len}")
    stream = _packed_stream(corpus, np.random.default_rng(seed))
    chunk = seq_len * batch_size
    n = stream.size // chunk
    if n == 0:
        raise InputError(f"corpus of {stream.size} packed tokens is shorter than one batch of {chunk}")
    for i in range(n):
        yield stream[i * chunk : (i + 1) * chunk].reshape(batch_size, seq_len)


class BatchStream:
    """
    Endless batch iterator: epoch e packs with seed (seed, e).

    `cursor` counts batches handed out; `seek(n)` resumes exactly there.
    """

    def __init__(self, corpus: TokenCorpus, seq_len: int, batch_size: int, seed: int) -> None:
        if seq_len < 2:
            raise InputError(f"seq_len must be >= 2, got {seq_len}")
        corpus.validate()
        self.corpus = corpus
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.chunk = seq_len * batch_size
        packed = corpus.total_tokens + len(corpus.documents)
        self.batches_per_epoch = packed // self.chunk
        if self.batches_per_epoch == 0:
            raise InputError(f"corpus of {packed} packed tokens is shorter than one batch of {self.chunk}")
        self.cursor = 0
        self._epoch = -1
        self._stream: np.ndarray | None = None

    def _load_epoch(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch or self._stream is None:
            self._stream = _packed_stream(self.corpus, np.random.default_rng([self.seed, epoch]))
            self._epoch = epoch
        return self._stream

    @property
    def epoch(self) -> int:
        return self.cursor // self.batches_per_epoch

    def seek(self, cursor: int) -> None:
        if cursor < 0:
            raise InputError(f"cursor must be >= 0, got {cursor}")
        self.cursor = cursor

    def __iter__(self) -> BatchStream:
        return self

    def __next__(self) -> np.ndarray:
        epoch, idx = divmod(self.cursor, self.batches_per_epoch)
        stream = self._load_epoch(epoch)
        self.cursor += 1
        return stream[idx * self.chunk : (idx + 1) * self.chunk].reshape(self.batch_size, self.seq_len).copy()


def boundary_mask(tokens: np.ndarray, separator: int) -> np.ndarray:
    """0 at positions holding the separator, whose next-token target starts another document."""
    return (np.asarray(tokens) != separator).astype(np.float64)
