"""Tree decoding and bracketing evaluation.

Provides the two standard decoders over a trained grammar (best single
derivation, and best tree under the span posteriors), PTB-style
treebank ingestion, and sentence-level unlabeled F1 with the usual
trivial-span and punctuation conventions.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .grammar import SimpleGrammar
from .inside import ENGINES, MarginalTable, NEG_INF, inside_backward
from .trees import (ParseTree, TreeError, left_branching_spans, parse_bracketed,
                    right_branching_spans)

logger = logging.getLogger(__name__)

Span = tuple[int, int]


class ParseError(Exception):
    """Decoding failure or malformed evaluation input."""


def viterbi_decode(g: SimpleGrammar, tokens) -> ParseTree:
    """Highest-probability derivation, computed like the inside pass.

    Runs the same independent-children recursion in (max, +) log space:
    per width, each span keeps its best left-projected and
    right-projected child score per parent, and the merge maximizes
    over split points.  Ties prefer the smallest split point, then the
    smallest symbol index, making output deterministic.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    l = toks.size
    n_nt, n_sym = g.dims.n_nt, g.dims.n_sym
    if l < 2:
        raise ParseError(f"need at least 2 tokens to parse, got {l}")
    if toks.min() < 0 or toks.max() >= g.dims.vocab_size:
        raise ParseError("token id out of vocabulary range")

    vo: list = [None] * (l + 1)
    va: list = [None] * l
    vb: list = [None] * l
    splits: list = [None] * (l + 1)
    vo[1] = np.full((l, n_sym), NEG_INF)
    vo[1][:, n_nt:] = g.log_emit[:, toks].T
    for w in range(1, l + 1):
        n = l - w + 1
        if w >= 2:
            t = np.empty((w - 1, n, n_nt))
            for m in range(1, w):
                np.add(va[m][:n], vb[w - m][m:m + n], out=t[m - 1])
            vo[w] = np.full((n, n_sym), NEG_INF)
            # first occurrence of the max = smallest split point
            splits[w] = t.argmax(axis=0) + 1
            vo[w][:, :n_nt] = t.max(axis=0)
        if w < l:
            # va[w][i, A] = max_s L[A, s] + vo[w][i, s], likewise for R
            scores = g.log_left[None, :, :] + vo[w][:, None, :]
            va[w] = scores.max(axis=2)
            scores = g.log_right[None, :, :] + vo[w][:, None, :]
            vb[w] = scores.max(axis=2)

    root_scores = g.log_root + vo[l][0, :n_nt]
    root_sym = int(root_scores.argmax())
    if not np.isfinite(root_scores[root_sym]):
        raise ParseError("sentence has no parse with positive probability")

    spans: set[Span] = set()
    labels: dict[Span, str] = {}
    leaf_labels = [""] * l
    stack = [(0, l, root_sym)]
    while stack:
        i, j, sym = stack.pop()
        if j - i == 1:
            leaf_labels[i] = f"PT{sym - n_nt}"
            continue
        spans.add((i, j))
        labels[(i, j)] = f"NT{sym}"
        w = j - i
        k = int(splits[w][i, sym])
        left_sym = int((g.log_left[sym] + vo[k][i]).argmax())
        right_sym = int((g.log_right[sym] + vo[w - k][i + k]).argmax())
        stack.append((i, i + k, left_sym))
        stack.append((i + k, j, right_sym))
    return ParseTree(l, frozenset(spans), labels, tuple(leaf_labels))


def mbr_decode(marg: MarginalTable) -> ParseTree:
    """Tree maximizing the total posterior mass of its internal spans.

    CKY over the span marginals; ties prefer the smallest split point.
    """
    l = marg.length
    if l < 2:
        raise ParseError(f"need at least 2 tokens to decode, got {l}")
    score = {}
    best_split = {}
    for i in range(l):
        score[(i, i + 1)] = 0.0
    for w in range(2, l + 1):
        for i in range(l - w + 1):
            j = i + w
            best_k, best = i + 1, -np.inf
            for k in range(i + 1, j):
                s = score[(i, k)] + score[(k, j)]
                if s > best:
                    best_k, best = k, s
            score[(i, j)] = marg.span(i, j) + best
            best_split[(i, j)] = best_k

    spans: set[Span] = set()
    stack = [(0, l)]
    while stack:
        i, j = stack.pop()
        if j - i == 1:
            continue
        spans.add((i, j))
        k = best_split[(i, j)]
        stack.append((i, k))
        stack.append((k, j))
    return ParseTree(l, frozenset(spans))


def tree_log_prob(g: SimpleGrammar, tokens, tree: ParseTree) -> float:
    """Log probability of one labeled derivation under the grammar."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size != tree.length:
        raise ParseError(f"{toks.size} tokens for a {tree.length}-leaf tree")
    if tree.labels is None or tree.leaf_labels is None:
        raise ParseError("tree must carry symbol labels to be scored")
    n_nt = g.dims.n_nt

    def sym_of(i: int, j: int) -> int:
        if j - i == 1:
            return n_nt + int(tree.leaf_labels[i][2:])
        return int(tree.labels[(i, j)][2:])

    total = g.log_root[sym_of(0, tree.length)]
    for (i, j) in tree.spans:
        k = tree.split_of(i, j)
        parent = sym_of(i, j)
        total += g.log_left[parent, sym_of(i, k)]
        total += g.log_right[parent, sym_of(k, j)]
    for i, tok in enumerate(toks):
        if tree._covered(i, i + 1):
            pt = sym_of(i, i + 1) - n_nt
            total += g.log_emit[pt, tok]
    return float(total)


def _filter_trivial(spans, length: int) -> frozenset[Span]:
    return frozenset((i, j) for (i, j) in spans
                     if j - i >= 2 and not (i == 0 and j == length))


def sentence_f1(pred, gold, length: int) -> float:
    """Unlabeled span F1 with trivial spans removed from both sides.

    The whole-sentence span and width-1 spans never count.  Two empty
    filtered sets score 1.0; exactly one empty set scores 0.0.
    """
    p = _filter_trivial(pred, length)
    g = _filter_trivial(gold, length)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    hits = len(p & g)
    precision = hits / len(p)
    recall = hits / len(g)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def load_punct_tags(path: str | Path | None = None) -> frozenset[str]:
    """Tag set treated as punctuation; one tag per line, '#' comments."""
    if path is None:
        text = (resources.files("flashpcfg") / "punct_tags.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    tags = set()
    for line in text.splitlines():
        line = line.strip()
        # a bare "#" is the pound-sign tag, not a comment
        if not line or (line.startswith("#") and line != "#"):
            continue
        tags.add(line)
    return frozenset(tags)


@dataclass(frozen=True)
class GoldAnnotation:
    """One reference tree: its tokens, tags, spans, punctuation mask."""

    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    spans: frozenset[Span]
    punct_mask: tuple[bool, ...]


def read_bracketed_trees(path: str | Path,
                         punct_tags: frozenset[str] | None = None
                         ) -> list[GoldAnnotation]:
    """Read one bracketed tree per line into gold annotations.

    Empty lines are skipped (a single warning reports how many); a
    malformed tree raises an error naming its line number.
    """
    if punct_tags is None:
        punct_tags = load_punct_tags()
    out: list[GoldAnnotation] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                skipped += 1
                continue
            try:
                node = parse_bracketed(line)
            except TreeError as exc:
                raise ParseError(f"{path}, line {lineno}: {exc}") from exc
            tokens = tuple(node.leaves())
            tags = tuple(node.leaf_tags())
            mask = tuple(tag in punct_tags for tag in tags)
            out.append(GoldAnnotation(tokens, tags,
                                      frozenset(node.constituent_spans()), mask))
    if skipped:
        logger.warning("skipped %d empty lines in %s", skipped, path)
    return out


def strip_punctuation(ann: GoldAnnotation) -> tuple[list[str], frozenset[Span]]:
    """Drop punctuation tokens and re-index the gold spans over the rest."""
    kept = [t for t, p in zip(ann.tokens, ann.punct_mask) if not p]
    # position map: new index of each old boundary
    remap = [0]
    for p in ann.punct_mask:
        remap.append(remap[-1] + (0 if p else 1))
    spans = set()
    for (i, j) in ann.spans:
        ni, nj = remap[i], remap[j]
        if nj - ni >= 1:
            spans.add((ni, nj))
    return kept, frozenset(spans)


@dataclass
class F1Result:
    """Corpus evaluation outcome: the mean and its per-sentence rows."""

    mean_f1: float
    rows: list[tuple[int, int, float]]
    skipped: int


def corpus_f1(g: SimpleGrammar, treebank: list[GoldAnnotation], encode,
              decoder="mbr", engine: str = "flash",
              ) -> F1Result:
    """Mean sentence-level F1 of a decoder against gold trees.

    Punctuation is removed from both sides first: the model parses the
    stripped token sequence and gold spans are re-indexed to match.
    Sentences shorter than two tokens after stripping are skipped and
    counted.  ``encode`` maps a token-string list to vocabulary ids.
    ``decoder`` is one of "viterbi", "mbr", "right-branching",
    "left-branching", or a callable ``(token_ids, gold_spans) -> spans``.
    """
    if not treebank:
        raise ParseError("empty treebank")
    if engine not in ENGINES:
        raise ParseError(f"unknown engine {engine!r}")
    rows: list[tuple[int, int, float]] = []
    skipped = 0
    for idx, ann in enumerate(treebank):
        kept, gold_spans = strip_punctuation(ann)
        l = len(kept)
        if l < 2:
            skipped += 1
            continue
        try:
            ids = np.asarray(encode(kept), dtype=np.int64)
            if decoder == "viterbi":
                pred = viterbi_decode(g, ids).spans
            elif decoder == "mbr":
                chart = ENGINES[engine](g, ids)
                _, marg = inside_backward(g, ids, chart)
                pred = mbr_decode(marg).spans
            elif decoder == "right-branching":
                pred = right_branching_spans(l)
            elif decoder == "left-branching":
                pred = left_branching_spans(l)
            elif callable(decoder):
                pred = decoder(ids, gold_spans)
            else:
                raise ParseError(f"unknown decoder {decoder!r}")
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(f"sentence {idx}: {exc}") from exc
        rows.append((idx, l, sentence_f1(pred, gold_spans, l)))
    if not rows:
        raise ParseError("no sentence was long enough to evaluate")
    mean = sum(r[2] for r in rows) / len(rows)
    return F1Result(mean, rows, skipped)


def format_f1_report(result: F1Result, decoder: str) -> str:
    lines = [
        f"decoder:          {decoder}",
        f"sentences scored: {len(result.rows)}",
        f"sentences skipped:{result.skipped:>5}",
        f"mean sentence F1: {result.mean_f1:.4f}",
    ]
    return "\n".join(lines)


def write_f1_csv(result: F1Result, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sentence_id", "length", "f1"])
        for sid, length, f1 in result.rows:
            writer.writerow([sid, length, f"{f1:.6f}"])
