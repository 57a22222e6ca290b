"""Binary parse trees, bracketed s-expression I/O, and span arithmetic.

A :class:`ParseTree` is stored as its span set: a binary tree over ``l``
leaves is uniquely determined by the set of its internal-node spans, all of
which have width >= 2 and include the root span ``(0, l)``.  Gold trees read
from treebank files may be non-binary and are kept as :class:`TreeNode`
structures until their spans are extracted.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class TreeError(Exception):
    """Malformed tree structure or unparseable bracketed input."""


@dataclass(frozen=True)
class TreeNode:
    """A node of an n-ary constituency tree.

    Terminal nodes carry ``token`` and have no children; internal nodes
    carry a label and one or more children.
    """

    label: str | None
    children: tuple["TreeNode", ...] = ()
    token: str | None = None

    def is_terminal(self) -> bool:
        return self.token is not None

    def is_preterminal(self) -> bool:
        return len(self.children) == 1 and self.children[0].is_terminal()

    def leaves(self) -> list[str]:
        if self.is_terminal():
            return [self.token]
        out: list[str] = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def leaf_tags(self) -> list[str]:
        """Preterminal label for each leaf, in order."""
        if self.is_terminal():
            return [""]
        if self.is_preterminal():
            return [self.label or ""]
        out: list[str] = []
        for c in self.children:
            out.extend(c.leaf_tags())
        return out

    def constituent_spans(self) -> set[tuple[int, int]]:
        """Spans of all non-preterminal internal nodes, root included."""
        spans: set[tuple[int, int]] = set()

        def walk(node: TreeNode, start: int) -> int:
            if node.is_terminal():
                return start + 1
            pos = start
            for c in node.children:
                pos = walk(c, pos)
            if not node.is_preterminal():
                spans.add((start, pos))
            return pos

        walk(self, 0)
        return spans


def _tokenize_sexpr(text: str) -> list[str]:
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in "()":
            out.append(ch)
            i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append(text[i:j])
            i = j
    return out


def parse_bracketed(line: str) -> TreeNode:
    """Parse one PTB-style bracketed tree, e.g. ``(S (NP (D the)) (V ran))``.

    Escaped bracket tokens ``-LRB-``/``-RRB-`` pass through as ordinary
    terminals.  Raises :class:`TreeError` on unbalanced or malformed input.
    """
    toks = _tokenize_sexpr(line)
    if not toks:
        raise TreeError("empty tree")
    pos = 0

    def parse_node() -> TreeNode:
        nonlocal pos
        if toks[pos] != "(":
            raise TreeError(f"expected '(' at token {pos}")
        pos += 1
        if pos >= len(toks) or toks[pos] in "()":
            raise TreeError("missing node label")
        label = toks[pos]
        pos += 1
        children: list[TreeNode] = []
        words: list[str] = []
        while pos < len(toks) and toks[pos] != ")":
            if toks[pos] == "(":
                children.append(parse_node())
            else:
                words.append(toks[pos])
                pos += 1
        if pos >= len(toks):
            raise TreeError("unbalanced parentheses: missing ')'")
        pos += 1  # consume ')'
        if children and words:
            raise TreeError(f"mixed terminals and children under {label!r}")
        if words:
            if len(words) > 1:
                # flatten multi-word preterminals into sibling terminals
                kids = tuple(TreeNode(label=None, token=w) for w in words)
                return TreeNode(label=label, children=kids)
            return TreeNode(label=label, children=(TreeNode(label=None, token=words[0]),))
        if not children:
            raise TreeError(f"empty constituent {label!r}")
        return TreeNode(label=label, children=tuple(children))

    root = parse_node()
    if pos != len(toks):
        raise TreeError("unbalanced parentheses: trailing input")
    if not root.leaves():
        raise TreeError("tree has no leaves")
    return root


@dataclass(frozen=True)
class ParseTree:
    """A binary constituency tree over leaves ``0..length-1``.

    ``spans`` holds the internal-node spans (all width >= 2, root included);
    ``labels`` optionally maps spans to symbol names and ``leaf_labels``
    optionally carries one preterminal name per leaf.
    """

    length: int
    spans: frozenset[tuple[int, int]]
    labels: dict[tuple[int, int], str] | None = field(default=None, compare=False)
    leaf_labels: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.length < 2:
            raise TreeError(f"binary tree needs >= 2 leaves, got {self.length}")
        if (0, self.length) not in self.spans:
            raise TreeError("root span missing")
        if len(self.spans) != self.length - 1:
            raise TreeError(
                f"binary tree over {self.length} leaves has {self.length - 1} "
                f"internal nodes, got {len(self.spans)} spans"
            )
        for (i, j) in self.spans:
            if not (0 <= i and i + 2 <= j <= self.length):
                raise TreeError(f"span {(i, j)} out of bounds or width < 2")
        # spans must nest: no crossing brackets
        sp = sorted(self.spans)
        for x in range(len(sp)):
            i1, j1 = sp[x]
            for i2, j2 in sp[x + 1:]:
                if i1 < i2 < j1 < j2:
                    raise TreeError(f"crossing spans {(i1, j1)} and {(i2, j2)}")

    def _covered(self, i: int, j: int) -> bool:
        return j - i == 1 or (i, j) in self.spans

    def split_of(self, i: int, j: int) -> int:
        """The split point of internal span ``(i, j)``."""
        for k in range(i + 1, j):
            if self._covered(i, k) and self._covered(k, j):
                return k
        raise TreeError(f"span {(i, j)} has no valid split")

    def to_bracketed(self, tokens: list[str] | None = None) -> str:
        """Render as a one-line bracketed tree; unlabeled nodes get ``X``."""
        toks = tokens if tokens is not None else [f"w{i}" for i in range(self.length)]
        if len(toks) != self.length:
            raise TreeError(f"{len(toks)} tokens for a {self.length}-leaf tree")

        def render(i: int, j: int) -> str:
            if j - i == 1:
                tag = self.leaf_labels[i] if self.leaf_labels else "X"
                return f"({tag} {toks[i]})"
            lab = (self.labels or {}).get((i, j), "X")
            k = self.split_of(i, j)
            return f"({lab} {render(i, k)} {render(k, j)})"

        return render(0, self.length)


def right_branching_spans(length: int) -> frozenset[tuple[int, int]]:
    """Span set of the fully right-branching binary tree."""
    return frozenset((i, length) for i in range(0, length - 1))


def left_branching_spans(length: int) -> frozenset[tuple[int, int]]:
    """Span set of the fully left-branching binary tree."""
    return frozenset((0, j) for j in range(2, length + 1))
