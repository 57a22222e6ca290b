"""Grammar representations: simple PCFGs with independent left/right child
distributions, the low-rank tensor baseline, validation, random fixtures,
ancestral sampling, and binary serialization.

A simple PCFG factors each binary rule ``A -> B C`` into a left-child choice
``p(B | A)`` and an independent right-child choice ``p(C | A)``.  All
probabilities are stored in natural-log space as float64.  Symbols are
indexed ``0..n_nt-1`` for nonterminals and ``n_nt..n_sym-1`` for
preterminals; only nonterminals parent binary rules and only preterminals
emit words.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .trees import ParseTree

NEG_INF = float("-inf")

GRAMMAR_MAGIC = b"SPCFG"
GRAMMAR_VERSION = 1


class GrammarError(Exception):
    """Structurally invalid grammar (shapes, flags, dims)."""


class GrammarFileError(GrammarError):
    """Unreadable or corrupt grammar file."""


@dataclass(frozen=True)
class GrammarDims:
    """Symbol and vocabulary counts.  All counts must be >= 1."""

    n_nt: int
    n_pt: int
    vocab_size: int

    def __post_init__(self):
        for name in ("n_nt", "n_pt", "vocab_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise GrammarError(f"{name} must be a positive integer, got {v!r}")

    @property
    def n_sym(self) -> int:
        return self.n_nt + self.n_pt


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass
class SimpleGrammar:
    """A simple PCFG in log space.

    ``log_left[A, B]`` is the log-probability that parent ``A`` generates
    left child ``B`` (B over all symbols); ``log_right`` is the analogous
    right-child table.  ``log_root[A]`` covers the start rule and
    ``log_emit[T, w]`` the emission of word ``w`` by preterminal
    ``n_nt + T``.  When ``tied`` is set, ``log_left`` and ``log_right``
    are the same array object.

    Instances are immutable (arrays are marked read-only) and safe to share
    across worker threads.
    """

    dims: GrammarDims
    log_root: np.ndarray
    log_left: np.ndarray
    log_right: np.ndarray
    log_emit: np.ndarray
    tied: bool = False

    def __post_init__(self):
        self.log_root = _freeze(self.log_root)
        self.log_left = _freeze(self.log_left)
        if self.tied:
            self.log_right = self.log_left
        else:
            self.log_right = _freeze(self.log_right)
        self.log_emit = _freeze(self.log_emit)
        _check_shapes(self)


def _check_shapes(g: SimpleGrammar) -> None:
    d = g.dims
    expected = {
        "log_root": (d.n_nt,),
        "log_left": (d.n_nt, d.n_sym),
        "log_right": (d.n_nt, d.n_sym),
        "log_emit": (d.n_pt, d.vocab_size),
    }
    for name, shape in expected.items():
        got = getattr(g, name).shape
        if got != shape:
            raise GrammarError(f"{name} has shape {got}, expected {shape}")
    if g.tied and g.log_left is not g.log_right:
        raise GrammarError("tied grammar must share left/right storage")


@dataclass
class ValidationReport:
    """Rows whose log-mass deviates from 0 beyond tolerance."""

    issues: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self) -> str:
        if self.ok:
            return "OK"
        lines = [f"{table} row {row}: log-mass deviates by {dev:.3e}"
                 for table, row, dev in self.issues]
        return "\n".join(lines)


def _logsumexp_rows(log_table: np.ndarray) -> np.ndarray:
    m = np.max(log_table, axis=-1)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(log_table - safe_m[..., None]).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return safe_m + np.log(s)


def validate_grammar(g: SimpleGrammar, tol: float = 1e-9) -> ValidationReport:
    """Check that every distribution row carries total probability one.

    Shape or tied-flag inconsistencies raise :class:`GrammarError`; rows
    whose log-mass deviates from 0 by more than ``tol`` are listed in the
    returned report.  An empty report means the grammar is valid.
    """
    _check_shapes(g)
    report = ValidationReport()

    def check(name: str, table: np.ndarray) -> None:
        devs = np.abs(_logsumexp_rows(table))
        for row in np.nonzero(~(devs <= tol))[0]:
            report.issues.append((name, int(row), float(devs[row])))

    check("root", g.log_root[None, :])
    check("left", g.log_left)
    if not g.tied:
        check("right", g.log_right)
    check("emit", g.log_emit)
    return report


def _log_dirichlet_rows(rng: np.random.Generator, rows: int, cols: int,
                        concentration: float) -> np.ndarray:
    # Gamma-based Dirichlet sampling (numpy draws per-component Gammas and
    # normalizes); exact zeros from underflow become -inf log-probs.
    p = rng.dirichlet(np.full(cols, concentration), size=rows)
    with np.errstate(divide="ignore"):
        return np.log(p)


def random_grammar(dims: GrammarDims, seed: int, concentration: float = 1.0,
                   tied: bool = False) -> SimpleGrammar:
    """Draw each distribution row from a symmetric Dirichlet."""
    if concentration <= 0:
        raise GrammarError(f"concentration must be > 0, got {concentration}")
    rng = np.random.default_rng(seed)
    log_root = _log_dirichlet_rows(rng, 1, dims.n_nt, concentration)[0]
    log_left = _log_dirichlet_rows(rng, dims.n_nt, dims.n_sym, concentration)
    log_right = (log_left if tied else
                 _log_dirichlet_rows(rng, dims.n_nt, dims.n_sym, concentration))
    log_emit = _log_dirichlet_rows(rng, dims.n_pt, dims.vocab_size, concentration)
    return SimpleGrammar(dims, log_root, log_left, log_right, log_emit, tied=tied)


# ---------------------------------------------------------------------------
# Low-rank baseline
# ---------------------------------------------------------------------------

@dataclass
class LowRankGrammar:
    """PCFG whose binary-rule tensor factors through a rank variable.

    ``p(A -> B C) = sum_r U[A, r] * V[B, r] * W[C, r]`` with ``U`` rows and
    ``V``/``W`` columns each summing to one, which makes every parent's rule
    distribution automatically normalized.
    """

    dims: GrammarDims
    rank: int
    U: np.ndarray            # (n_nt, rank), rows sum to 1
    V: np.ndarray            # (n_sym, rank), columns sum to 1
    W: np.ndarray            # (n_sym, rank), columns sum to 1
    log_root: np.ndarray
    log_emit: np.ndarray

    def __post_init__(self):
        if self.rank < 1:
            raise GrammarError(f"rank must be >= 1, got {self.rank}")
        d = self.dims
        expected = {
            "U": (d.n_nt, self.rank),
            "V": (d.n_sym, self.rank),
            "W": (d.n_sym, self.rank),
            "log_root": (d.n_nt,),
            "log_emit": (d.n_pt, d.vocab_size),
        }
        for name, shape in expected.items():
            arr = _freeze(getattr(self, name))
            if arr.shape != shape:
                raise GrammarError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    def rule_tensor(self) -> np.ndarray:
        """Dense ``(n_nt, n_sym, n_sym)`` rule-probability tensor."""
        return np.einsum("ar,br,cr->abc", self.U, self.V, self.W)


def random_lowrank(dims: GrammarDims, rank: int, seed: int,
                   concentration: float = 1.0) -> LowRankGrammar:
    """Random low-rank grammar: Dirichlet U rows and V/W columns."""
    if concentration <= 0:
        raise GrammarError(f"concentration must be > 0, got {concentration}")
    rng = np.random.default_rng(seed)
    U = np.exp(_log_dirichlet_rows(rng, dims.n_nt, rank, concentration))
    V = np.exp(_log_dirichlet_rows(rng, rank, dims.n_sym, concentration)).T
    W = np.exp(_log_dirichlet_rows(rng, rank, dims.n_sym, concentration)).T
    log_root = _log_dirichlet_rows(rng, 1, dims.n_nt, concentration)[0]
    log_emit = _log_dirichlet_rows(rng, dims.n_pt, dims.vocab_size, concentration)
    return LowRankGrammar(dims, rank, U, V, W, log_root, log_emit)


def lowrank_rule_prob(lr: LowRankGrammar, a: int, b: int, c: int) -> float:
    """Probability of the binary rule ``a -> b c`` under the factorization."""
    if not 0 <= a < lr.dims.n_nt:
        raise GrammarError(f"binary-rule parent must be a nonterminal, got {a}")
    if not (0 <= b < lr.dims.n_sym and 0 <= c < lr.dims.n_sym):
        raise GrammarError(f"child symbol out of range: {(b, c)}")
    return float(np.dot(lr.U[a], lr.V[b] * lr.W[c]))


def lowrank_to_simple(lr: LowRankGrammar) -> SimpleGrammar:
    """Re-express a low-rank grammar as an equivalent simple PCFG.

    The rank values become the nonterminals of the new grammar.  A rank
    symbol ``r`` reaches rank symbol ``r'`` as a left child with probability
    ``sum_B V[B, r] * U[B, r']`` (marginalizing the original nonterminal B)
    and reaches preterminal ``T`` directly with probability ``V[T, r]``;
    the right table uses ``W``.  The new root mixes the old root into rank
    space via ``U``.  Sentence likelihoods are preserved exactly.
    """
    d = lr.dims
    new_dims = GrammarDims(n_nt=lr.rank, n_pt=d.n_pt, vocab_size=d.vocab_size)
    root_p = np.exp(lr.log_root)
    new_root = root_p @ lr.U                       # (rank,)
    V_nt, V_pt = lr.V[:d.n_nt], lr.V[d.n_nt:]
    W_nt, W_pt = lr.W[:d.n_nt], lr.W[d.n_nt:]
    left = np.concatenate([V_nt.T @ lr.U, V_pt.T], axis=1)    # (rank, rank + n_pt)
    right = np.concatenate([W_nt.T @ lr.U, W_pt.T], axis=1)
    with np.errstate(divide="ignore"):
        return SimpleGrammar(new_dims, np.log(new_root), np.log(left),
                             np.log(right), lr.log_emit.copy())


# ---------------------------------------------------------------------------
# Ancestral sampling
# ---------------------------------------------------------------------------

class SamplingError(GrammarError):
    """Retry budget exhausted; the grammar branches too aggressively."""


def sample_tree(g: SimpleGrammar, seed: int | np.random.Generator,
                max_nodes: int = 1000,
                max_retries: int = 100) -> tuple[list[int], ParseTree]:
    """Sample one ``(token ids, tree)`` pair by ancestral sampling.

    The root symbol is drawn from the root distribution; every nonterminal
    draws its left and right children independently from its two child
    distributions; preterminals emit one word.  Partial derivations
    exceeding ``max_nodes`` tree nodes are rejected and resampled, up to
    ``max_retries`` attempts.
    """
    if max_nodes < 3:
        raise GrammarError(f"max_nodes must be >= 3, got {max_nodes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_nt, n_sym = g.dims.n_nt, g.dims.n_sym
    root_p = np.exp(g.log_root)
    left_p = np.exp(g.log_left)
    right_p = np.exp(g.log_right)
    emit_p = np.exp(g.log_emit)

    for _ in range(max_retries):
        root = {"sym": int(rng.choice(n_nt, p=root_p))}
        count = 1
        stack = [root]
        ok = True
        while stack:
            node = stack.pop()
            s = node["sym"]
            if s < n_nt:
                b = int(rng.choice(n_sym, p=left_p[s]))
                c = int(rng.choice(n_sym, p=right_p[s]))
                kids = ({"sym": b}, {"sym": c})
                node["kids"] = kids
                count += 2
                if count > max_nodes:
                    ok = False
                    break
                stack.append(kids[1])
                stack.append(kids[0])
            else:
                node["word"] = int(rng.choice(g.dims.vocab_size, p=emit_p[s - n_nt]))
        if ok:
            return _finish_sample(root, n_nt)
    raise SamplingError(
        f"no derivation within {max_nodes} nodes after {max_retries} attempts; "
        "grammar is supercritical or max_nodes too small")


def _finish_sample(root: dict, n_nt: int) -> tuple[list[int], ParseTree]:
    tokens: list[int] = []
    leaf_labels: list[str] = []
    spans: dict[tuple[int, int], str] = {}
    stack: list[tuple[dict, bool, int]] = [(root, False, 0)]
    starts: list[int] = []
    while stack:
        node, done, _ = stack.pop()
        if "word" in node:
            leaf_labels.append(f"PT{node['sym'] - n_nt}")
            tokens.append(node["word"])
            continue
        if not done:
            starts.append(len(tokens))
            stack.append((node, True, 0))
            stack.append((node["kids"][1], False, 0))
            stack.append((node["kids"][0], False, 0))
        else:
            start = starts.pop()
            spans[(start, len(tokens))] = f"NT{node['sym']}"
    tree = ParseTree(length=len(tokens), spans=frozenset(spans),
                     labels=spans, leaf_labels=tuple(leaf_labels))
    return tokens, tree


# ---------------------------------------------------------------------------
# Gradients carrier
# ---------------------------------------------------------------------------

@dataclass
class GrammarGrad:
    """Gradients of a (summed) sentence log-likelihood w.r.t. every
    log-probability entry of a :class:`SimpleGrammar`.

    Left and right tables keep separate gradients even for tied grammars;
    callers of tied parameterizations add them.
    """

    d_root: np.ndarray
    d_left: np.ndarray
    d_right: np.ndarray
    d_emit: np.ndarray

    @classmethod
    def zeros(cls, dims: GrammarDims) -> "GrammarGrad":
        return cls(
            d_root=np.zeros(dims.n_nt),
            d_left=np.zeros((dims.n_nt, dims.n_sym)),
            d_right=np.zeros((dims.n_nt, dims.n_sym)),
            d_emit=np.zeros((dims.n_pt, dims.vocab_size)),
        )

    def add_(self, other: "GrammarGrad") -> "GrammarGrad":
        self.d_root += other.d_root
        self.d_left += other.d_left
        self.d_right += other.d_right
        self.d_emit += other.d_emit
        return self

    def scale_(self, c: float) -> "GrammarGrad":
        self.d_root *= c
        self.d_left *= c
        self.d_right *= c
        self.d_emit *= c
        return self


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, error: type[Exception] = GrammarFileError):
        self.data = data
        self.pos = 0
        self.error = error

    def take(self, n: int, fieldname: str) -> bytes:
        if self.pos + n > len(self.data):
            raise self.error(f"truncated while reading {fieldname}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self, fieldname: str) -> int:
        return struct.unpack("<Q", self.take(8, fieldname))[0]

    def f64_array(self, shape: tuple[int, ...], fieldname: str) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(8 * n, fieldname)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def done(self, what: str) -> None:
        if self.pos != len(self.data):
            raise self.error(
                f"{len(self.data) - self.pos} trailing bytes after {what}")


def save_grammar(g: SimpleGrammar, path: str | Path) -> None:
    """Write the little-endian binary grammar container.

    Layout: magic ``SPCFG``, version byte, flags byte (bit 0 = tied),
    ``n_nt``/``n_pt``/``vocab_size`` as u64, then the root, left,
    right (omitted when tied), and emission tables as raw row-major f64.
    """
    d = g.dims
    flags = 1 if g.tied else 0
    parts = [GRAMMAR_MAGIC, bytes([GRAMMAR_VERSION, flags]),
             struct.pack("<QQQ", d.n_nt, d.n_pt, d.vocab_size),
             g.log_root.astype("<f8").tobytes(),
             g.log_left.astype("<f8").tobytes()]
    if not g.tied:
        parts.append(g.log_right.astype("<f8").tobytes())
    parts.append(g.log_emit.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_grammar(path: str | Path) -> SimpleGrammar:
    """Read a grammar written by :func:`save_grammar`; round-trip is
    bit-exact.  Corrupt input raises :class:`GrammarFileError` naming the
    offending field."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise GrammarFileError(f"cannot read grammar file: {e}") from e
    r = _Reader(data)
    magic = r.take(len(GRAMMAR_MAGIC), "magic")
    if magic != GRAMMAR_MAGIC:
        raise GrammarFileError(f"bad magic {magic!r}, expected {GRAMMAR_MAGIC!r}")
    version = r.take(1, "version")[0]
    if version != GRAMMAR_VERSION:
        raise GrammarFileError(f"unsupported version {version}")
    flags = r.take(1, "flags")[0]
    if flags & ~1:
        raise GrammarFileError(f"unknown flag bits 0x{flags:02x}")
    tied = bool(flags & 1)
    n_nt = r.u64("n_nt")
    n_pt = r.u64("n_pt")
    vocab_size = r.u64("vocab_size")
    try:
        dims = GrammarDims(n_nt, n_pt, vocab_size)
    except GrammarError as e:
        raise GrammarFileError(str(e)) from e
    if n_nt * (n_nt + n_pt) > 1 << 32:
        raise GrammarFileError(f"implausible table size for dims {dims}")
    log_root = r.f64_array((n_nt,), "root table")
    log_left = r.f64_array((n_nt, dims.n_sym), "left table")
    log_right = log_left if tied else r.f64_array((n_nt, dims.n_sym), "right table")
    log_emit = r.f64_array((n_pt, vocab_size), "emission table")
    r.done("emission table")
    return SimpleGrammar(dims, log_root, log_left, log_right, log_emit, tied=tied)
