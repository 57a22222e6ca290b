"""Corpus ingestion, vocabulary management, batching, synthetic data.

Corpora are UTF-8 text, one sentence per line, tokens separated by
whitespace.  The vocabulary reserves id 0 for the unknown token and
persists as a plain-text sidecar (one token per line, line number =
id), so grammar files and vocabularies travel as a pair.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grammar import SimpleGrammar, sample_tree

logger = logging.getLogger(__name__)

UNK = "<unk>"

_DIGITS = re.compile(r"\d")


class DataError(Exception):
    """Unusable corpus, vocabulary, or batching request."""


def normalize_token(token: str, lowercase: bool = False,
                    normalize_digits: bool = False) -> str:
    if lowercase:
        token = token.lower()
    if normalize_digits:
        token = _DIGITS.sub("0", token)
    return token


@dataclass
class Vocabulary:
    """Dense token/id bijection with id 0 reserved for ``<unk>``."""

    tokens: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK:
            raise DataError(f"vocabulary must reserve id 0 for {UNK!r}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, tokens) -> list[int]:
        unk = 0
        return [self.index.get(tok, unk) for tok in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError(f"empty vocabulary file {path}")
        return Vocabulary(lines)


def _read_token_lines(path: str | Path, lowercase: bool,
                      normalize_digits: bool) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = [normalize_token(t, lowercase, normalize_digits)
                    for t in line.split()]
            out.append(toks)
    return out


def build_vocab(corpus_path: str | Path, max_size: int | None = None,
                min_freq: int | None = None, lowercase: bool = False,
                normalize_digits: bool = False) -> Vocabulary:
    """Count tokens and keep the most frequent ones.

    ``max_size`` caps the number of non-unk entries; ``min_freq`` drops
    rare tokens first.  Frequency ties resolve by first occurrence in
    the file, so the result is deterministic.
    """
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    pos = 0
    for toks in _read_token_lines(corpus_path, lowercase, normalize_digits):
        for tok in toks:
            counts[tok] = counts.get(tok, 0) + 1
            if tok not in first_seen:
                first_seen[tok] = pos
                pos += 1
    if not counts:
        raise DataError(f"no tokens found in {corpus_path}")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    if min_freq is not None:
        ranked = [t for t in ranked if counts[t] >= min_freq]
    if max_size is not None:
        ranked = ranked[:max_size]
    kept = [t for t in ranked if t != UNK]
    vocab = Vocabulary([UNK] + kept)
    vocab.counts = {t: counts[t] for t in kept}
    return vocab


@dataclass
class Corpus:
    """Sentences as id arrays, with their original token strings."""

    sentences: list[np.ndarray]
    texts: list[list[str]]
    n_filtered: int = 0

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def load_corpus(path: str | Path, vocab: Vocabulary, lowercase: bool = False,
                normalize_digits: bool = False) -> Corpus:
    """Map a text file to id sequences; drop lines shorter than 2 tokens."""
    sentences: list[np.ndarray] = []
    texts: list[list[str]] = []
    filtered = 0
    for toks in _read_token_lines(path, lowercase, normalize_digits):
        if len(toks) < 2:
            if toks:
                filtered += 1
            continue
        sentences.append(np.asarray(vocab.encode(toks), dtype=np.int64))
        texts.append(toks)
    if filtered:
        logger.warning("dropped %d sentences shorter than 2 tokens from %s",
                       filtered, path)
    return Corpus(sentences, texts, filtered)


@dataclass(frozen=True)
class Batch:
    """Equal-length sentences trained together."""

    indices: tuple[int, ...]
    tokens: np.ndarray  # (batch, length)


def batch_by_length(corpus: Corpus, max_tokens_per_batch: int) -> list[Batch]:
    """Group equal-length sentences into batches under a token budget.

    The grouping is canonical: within a length group sentences are
    ordered by token content (corpus position breaking ties), so any
    permutation of the corpus yields the same batches.
    """
    by_length: dict[int, list[int]] = {}
    for idx, sent in enumerate(corpus.sentences):
        l = len(sent)
        if l > max_tokens_per_batch:
            raise DataError(
                f"sentence {idx} has {l} tokens, over the batch cap "
                f"{max_tokens_per_batch}")
        by_length.setdefault(l, []).append(idx)
    batches: list[Batch] = []
    for l in sorted(by_length):
        group = sorted(by_length[l],
                       key=lambda i: (corpus.sentences[i].tolist(), i))
        per_batch = max(max_tokens_per_batch // l, 1)
        for start in range(0, len(group), per_batch):
            chunk = group[start:start + per_batch]
            tokens = np.stack([corpus.sentences[i] for i in chunk])
            batches.append(Batch(tuple(chunk), tokens))
    return batches


def generate_synthetic(g: SimpleGrammar, n: int, seed: int = 0
                       ) -> tuple[Corpus, list[str]]:
    """Sample sentences with their trees; tokens are spelled ``w{id}``.

    Returns the corpus in the grammar's own id space together with one
    bracketed line per sentence.  Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    sentences: list[np.ndarray] = []
    texts: list[list[str]] = []
    treebank: list[str] = []
    for _ in range(n):
        tokens, tree = sample_tree(g, rng)
        toks = np.asarray(tokens, dtype=np.int64)
        words = [f"w{t}" for t in toks]
        sentences.append(toks)
        texts.append(words)
        treebank.append(tree.to_bracketed(words))
    return Corpus(sentences, texts), treebank


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for words in corpus.texts:
            fh.write(" ".join(words) + "\n")


def write_treebank(lines: list[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
