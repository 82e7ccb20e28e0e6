"""Synthetic corpora, character tokenizer, shard plans and deterministic batch streams.

Corpora are pre-tokenized and held in memory. Every shard is a list of
non-overlapping blocks of ``seq_len + 1`` tokens; a batch row is one block
split into shifted inputs and targets. Trailing tokens that do not fill a
whole block are dropped.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from fedlm.errors import ConfigError, IntegrityError, UnknownClientError
from fedlm.model import Batch

ALPHABET = " \nabcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
VOCAB_SIZE = len(ALPHABET)
_CHAR_TO_ID = {c: i for i, c in enumerate(ALPHABET)}

SPACE, NEWLINE = 0, 1
LOWER = np.arange(2, 28)
UPPER = np.arange(28, 54)
DIGITS = np.arange(54, 64)

_STREAM_TAG = 0x5EED
_IID_TAG = 0x11D


def encode(text: str) -> np.ndarray:
    try:
        return np.fromiter((_CHAR_TO_ID[c] for c in text), dtype=np.int64, count=len(text))
    except KeyError as exc:
        raise ConfigError(f"character {exc.args[0]!r} is outside the 64-symbol alphabet") from None


def decode(ids: Sequence[int]) -> str:
    return "".join(ALPHABET[int(i)] for i in ids)


@dataclass(frozen=True)
class Style:
    """Parameters of one synthetic text family."""

    lexicon_size: int
    mean_word_len: float
    zipf: float
    follow_prob: float  # chance the next word comes from the previous word's successor list
    mean_sentence_words: float
    lower_w: float
    upper_w: float
    digit_w: float
    capitalize: str  # "sentence", "words" or "none"
    letter_skew: float  # exponent shaping the letter distribution (0 = uniform)
    letter_offset: int  # rotates which letters are frequent


STYLES: dict[str, Style] = {
    # dense technical text: long lowercase words, many numbers, no capitals
    "arxiv": Style(300, 7.0, 1.05, 0.55, 14, 1.0, 0.0, 0.35, "none", 1.2, 17),
    # short common words, sentence-case, a few numbers
    "web": Style(500, 3.5, 1.2, 0.45, 10, 1.0, 0.0, 0.05, "sentence", 1.6, 0),
    # encyclopedic: capitalized names and years
    "wiki": Style(400, 5.5, 1.1, 0.5, 12, 0.6, 0.4, 0.15, "words", 0.8, 8),
    # prose: lowercase narrative with strong word-order regularities
    "prose": Style(250, 4.0, 1.3, 0.7, 16, 1.0, 0.0, 0.0, "sentence", 2.0, 4),
}


def _style_seed(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _letter_weights(style: Style) -> np.ndarray:
    ranks = (np.arange(26) + style.letter_offset) % 26 + 1
    w = ranks.astype(np.float64) ** (-style.letter_skew)
    return w / w.sum()


def _build_lexicon(name: str, style: Style) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Style-fixed vocabulary of words, unigram weights and successor lists."""
    rng = np.random.default_rng(_style_seed(name))
    letters = _letter_weights(style)
    kinds = np.array([style.lower_w, style.upper_w, style.digit_w])
    kinds = kinds / kinds.sum()
    words = []
    for _ in range(style.lexicon_size):
        n = 1 + rng.poisson(style.mean_word_len - 1)
        kind = rng.choice(3, p=kinds)
        if kind == 2:
            word = rng.choice(DIGITS, size=min(n, 4))
        else:
            word = LOWER[rng.choice(26, size=n, p=letters)]
            if kind == 1:
                word = word.copy()
                word[0] = UPPER[word[0] - LOWER[0]]
        words.append(word.astype(np.int64))
    ranks = np.arange(1, style.lexicon_size + 1, dtype=np.float64)
    unigram = ranks ** (-style.zipf)
    unigram /= unigram.sum()
    successors = rng.choice(style.lexicon_size, size=(style.lexicon_size, 4), p=unigram)
    return words, unigram, successors


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    source_label: str
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        toks = np.asarray(self.tokens)
        if toks.size and (toks.min() < 0 or toks.max() >= self.vocab_size):
            raise ConfigError(f"corpus tokens must lie in [0, {self.vocab_size})")

    def __len__(self) -> int:
        return int(self.tokens.size)


def generate_corpus(style: str, length: int, seed: int, seq_len: int = 32) -> Corpus:
    """Deterministic synthetic text of ``length`` tokens in the given style."""
    if style not in STYLES:
        raise ConfigError(f"unknown style {style!r}; known: {sorted(STYLES)}")
    if length < seq_len + 1:
        raise ConfigError(f"corpus length {length} is shorter than one sequence ({seq_len + 1})")
    spec = STYLES[style]
    words, unigram, successors = _build_lexicon(style, spec)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _style_seed(style)]))
    cdf = np.cumsum(unigram)

    out: list[np.ndarray] = []
    total = 0
    prev = -1
    sentence_left = 0
    start_of_sentence = True
    while total < length:
        if sentence_left == 0:
            sentence_left = 1 + rng.poisson(spec.mean_sentence_words - 1)
            start_of_sentence = True
            prev = -1
        if prev >= 0 and rng.random() < spec.follow_prob:
            idx = int(successors[prev, rng.integers(4)])
        else:
            idx = int(min(np.searchsorted(cdf, rng.random()), spec.lexicon_size - 1))
        word = words[idx]
        if start_of_sentence and spec.capitalize == "sentence" and word[0] in LOWER:
            word = word.copy()
            word[0] += UPPER[0] - LOWER[0]
        sentence_left -= 1
        sep = NEWLINE if sentence_left == 0 else SPACE
        piece = np.append(word, sep)
        out.append(piece)
        total += piece.size
        prev = idx
        start_of_sentence = False
    tokens = np.concatenate(out)[:length]
    return Corpus(tokens=tokens.astype(np.int64), source_label=style)


def unigram_distribution(corpus: Corpus) -> np.ndarray:
    counts = np.bincount(corpus.tokens, minlength=corpus.vocab_size).astype(np.float64)
    return counts / counts.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


# (corpus index, start, stop): one block per range
Range = tuple[int, int, int]


@dataclass(frozen=True)
class ShardPlan:
    corpora: tuple[Corpus, ...]
    block_len: int
    assignments: dict[int, tuple[Range, ...]]
    policy: str

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.assignments)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def ranges(self, client_id: int) -> tuple[Range, ...]:
        try:
            return self.assignments[client_id]
        except KeyError:
            raise UnknownClientError(f"client {client_id} is not in the shard plan") from None

    def blocks(self, client_id: int) -> np.ndarray:
        """``[n_blocks, block_len]`` token windows held by a client."""
        ranges = self.ranges(client_id)
        if not ranges:
            return np.zeros((0, self.block_len), dtype=np.int64)
        return np.stack([self.corpora[c].tokens[s:e] for c, s, e in ranges])

    def n_tokens(self, client_id: int) -> int:
        return sum(e - s for _, s, e in self.ranges(client_id))

    def labels(self, client_id: int) -> set[str]:
        return {self.corpora[c].source_label for c, _, _ in self.ranges(client_id)}


def _blocks_of(corpus_index: int, corpus: Corpus, block_len: int) -> list[Range]:
    n = len(corpus) // block_len
    return [(corpus_index, i * block_len, (i + 1) * block_len) for i in range(n)]


def partition_iid(corpus: Corpus, n_shards: int, seed: int, seq_len: int = 32) -> ShardPlan:
    """Shuffle ``seq_len + 1`` blocks and deal them into equal shards (sizes differ by <= 1 block)."""
    if n_shards < 1:
        raise ConfigError("n_shards must be >= 1")
    block_len = seq_len + 1
    blocks = _blocks_of(0, corpus, block_len)
    if len(blocks) < n_shards:
        raise ConfigError(
            f"{len(corpus)} tokens give {len(blocks)} sequences, fewer than {n_shards} shards"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _IID_TAG]))
    order = rng.permutation(len(blocks))
    parts = np.array_split(order, n_shards)
    assignments = {
        k: tuple(blocks[i] for i in sorted(int(j) for j in part)) for k, part in enumerate(parts)
    }
    return ShardPlan((corpus,), block_len, assignments, "iid")


def partition_by_source(
    corpora: Sequence[Corpus], clients_per_source: int, seq_len: int = 32
) -> ShardPlan:
    """Each source is cut into ``clients_per_source`` contiguous shards; no client mixes sources."""
    if not corpora:
        raise ConfigError("partition_by_source needs at least one corpus")
    if clients_per_source < 1:
        raise ConfigError("clients_per_source must be >= 1")
    block_len = seq_len + 1
    assignments: dict[int, tuple[Range, ...]] = {}
    for ci, corpus in enumerate(corpora):
        blocks = _blocks_of(ci, corpus, block_len)
        if len(blocks) < clients_per_source:
            raise ConfigError(f"source {corpus.source_label!r} is too short to split")
        for j, part in enumerate(np.array_split(np.arange(len(blocks)), clients_per_source)):
            assignments[ci * clients_per_source + j] = tuple(blocks[int(i)] for i in part)
    return ShardPlan(tuple(corpora), block_len, assignments, "by_source")


def split_client(plan: ShardPlan, client_id: int, n_parts: int, seed: int) -> ShardPlan:
    """IID sub-partition of one client's blocks, e.g. across the nodes of a sub-federation."""
    if n_parts < 1:
        raise ConfigError("n_parts must be >= 1")
    ranges = plan.ranges(client_id)
    if len(ranges) < n_parts:
        raise ConfigError(f"client {client_id} holds fewer blocks than {n_parts} parts")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(client_id), _IID_TAG]))
    order = rng.permutation(len(ranges))
    parts = np.array_split(order, n_parts)
    assignments = {i: tuple(ranges[int(j)] for j in sorted(part)) for i, part in enumerate(parts)}
    return ShardPlan(plan.corpora, plan.block_len, assignments, f"{plan.policy}/split")


@dataclass(frozen=True)
class StreamCursor:
    """Position in a client stream: completed epochs and blocks consumed in the current one."""

    epoch: int = 0
    offset: int = 0

    def to_list(self) -> list[int]:
        return [self.epoch, self.offset]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> StreamCursor:
        epoch, offset = values
        return cls(int(epoch), int(offset))


class BatchStream:
    """Endless iterator of batches over one client's shard.

    Each epoch visits every block exactly once in an order drawn from
    ``(seed, client_id, epoch)``; a batch that crosses the epoch boundary
    continues into the next epoch's order.
    """

    def __init__(
        self,
        plan: ShardPlan,
        client_id: int,
        batch_size: int,
        seq_len: int,
        seed: int,
        cursor: StreamCursor | None = None,
    ):
        if seq_len + 1 != plan.block_len:
            raise ConfigError(f"seq_len {seq_len} does not match plan blocks of {plan.block_len}")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self._blocks = plan.blocks(client_id)
        if len(self._blocks) == 0:
            raise ConfigError(f"client {client_id} has an empty shard")
        self.client_id = client_id
        self.batch_size = batch_size
        self.seed = int(seed)
        cursor = cursor or StreamCursor()
        self._epoch = cursor.epoch
        self._offset = cursor.offset
        self._order = self._permutation(self._epoch)

    def _permutation(self, epoch: int) -> np.ndarray:
        ss = np.random.SeedSequence([self.seed, int(self.client_id), int(epoch), _STREAM_TAG])
        return np.random.default_rng(ss).permutation(len(self._blocks))

    @property
    def cursor(self) -> StreamCursor:
        return StreamCursor(self._epoch, self._offset)

    @property
    def blocks_per_epoch(self) -> int:
        return len(self._blocks)

    def next_indices(self) -> np.ndarray:
        picked = np.empty(self.batch_size, dtype=np.int64)
        for i in range(self.batch_size):
            if self._offset == len(self._order):
                self._epoch += 1
                self._offset = 0
                self._order = self._permutation(self._epoch)
            picked[i] = self._order[self._offset]
            self._offset += 1
        return picked

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        return Batch.from_windows(self._blocks[self.next_indices()])


def stream_batches(
    plan: ShardPlan,
    client_id: int,
    batch_size: int,
    seq_len: int,
    seed: int,
    cursor: StreamCursor | None = None,
) -> BatchStream:
    return BatchStream(plan, client_id, batch_size, seq_len, seed, cursor)


def heldout_batches(corpus: Corpus, n_sequences: int, seq_len: int, batch_size: int = 16) -> list[Batch]:
    """The first ``n_sequences`` blocks of ``corpus`` as a fixed evaluation set."""
    block_len = seq_len + 1
    n = min(n_sequences, len(corpus) // block_len)
    if n < 1:
        raise ConfigError("held-out corpus is shorter than one sequence")
    windows = corpus.tokens[: n * block_len].reshape(n, block_len)
    return [Batch.from_windows(windows[i : i + batch_size]) for i in range(0, n, batch_size)]


# Binary corpus file: "PHDS", u32 version, u32 vocab_size, u32 length, then u16 LE token ids.
_CORPUS_MAGIC = b"PHDS"
_CORPUS_VERSION = 1
_CORPUS_HEADER = struct.Struct("<4sIII")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    if corpus.vocab_size > 1 << 16:
        raise ConfigError("vocabulary too large for 16-bit token ids")
    header = _CORPUS_HEADER.pack(_CORPUS_MAGIC, _CORPUS_VERSION, corpus.vocab_size, len(corpus))
    Path(path).write_bytes(header + corpus.tokens.astype("<u2").tobytes())


def load_corpus(path: str | Path, source_label: str | None = None) -> Corpus:
    raw = Path(path).read_bytes()
    if len(raw) < _CORPUS_HEADER.size:
        raise IntegrityError(f"{path}: truncated corpus header")
    magic, version, vocab, length = _CORPUS_HEADER.unpack_from(raw)
    if magic != _CORPUS_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != _CORPUS_VERSION:
        raise IntegrityError(f"{path}: unsupported corpus version {version}")
    body = raw[_CORPUS_HEADER.size :]
    if len(body) != 2 * length:
        raise IntegrityError(f"{path}: expected {length} tokens, found {len(body) // 2}")
    tokens = np.frombuffer(body, dtype="<u2").astype(np.int64)
    return Corpus(tokens, source_label or Path(path).stem, vocab)
