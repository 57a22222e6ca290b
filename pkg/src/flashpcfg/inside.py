"""Inside-algorithm engines for simple PCFGs.

Three forward engines share one chart layout and differ in how they
compute it: a readable per-element logsumexp baseline, a matrix-product
variant using the scalar-max shift, and a fused engine that preallocates
scratch, merges split points online with a running max, and projects both
child tables in a single stacked matrix product.  The backward pass
recomputes softmax weights from the chart instead of storing them in the
forward pass.  A brute-force enumeration over tree shapes serves as an
engine-independent oracle.

Chart layout: per span one vector over all symbols.  Width-1 spans carry
emission scores in the preterminal slots and -inf in the nonterminal
slots; wider spans carry nonterminal scores and -inf in the preterminal
slots.  This lets both child projections consume span vectors uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grammar import GrammarGrad, SimpleGrammar

NEG_INF = float("-inf")



class InsideError(Exception):
    """Invalid input to an inside computation."""


class AllocMeter:
    """Arena-style accounting of engine buffer allocations.

    Engines request every buffer through :meth:`alloc` and return scratch
    through :meth:`release`.  Chart arrays (the o/a/b output, identical
    across variants) are flagged ``retained`` and tracked separately;
    ``peak_transient_bytes`` is the high-water mark of live working
    memory, the quantity the engine variants actually differ in.  This
    measures the algorithm's own buffers, deliberately excluding
    interpreter overhead, so comparisons are deterministic across runs.
    """

    def __init__(self):
        self.transient_bytes = 0
        self.peak_transient_bytes = 0
        self.retained_bytes = 0

    def alloc(self, shape, dtype=np.float64, retained: bool = False) -> np.ndarray:
        arr = np.empty(shape, dtype=dtype)
        if retained:
            self.retained_bytes += arr.nbytes
        else:
            self.transient_bytes += arr.nbytes
            if self.transient_bytes > self.peak_transient_bytes:
                self.peak_transient_bytes = self.transient_bytes
        return arr

    def release(self, arr: np.ndarray) -> None:
        self.transient_bytes -= arr.nbytes


@dataclass
class InsideChart:
    """Per-width chart arrays and the sentence log-likelihood.

    ``o[w]`` has one row per start position of a width-``w`` span and one
    column per symbol (log inside scores).  ``a[w]`` and ``b[w]`` hold the
    left- and right-projected vectors over nonterminals for widths
    ``1..l-1``.  Lists are indexed by width; slot 0 is unused padding.
    """

    length: int
    o: list
    a: list
    b: list
    log_z: float

    def beta(self, i: int, j: int) -> np.ndarray:
        """Log inside vector for the span (i, j)."""
        return self.o[j - i][i]


def dump_chart(chart: InsideChart, out) -> None:
    """Debug dump: one line "i j symbol logbeta" per finite chart entry."""
    for w in range(1, chart.length + 1):
        arr = chart.o[w]
        for i in range(arr.shape[0]):
            for s in np.nonzero(np.isfinite(arr[i]))[0]:
                out.write(f"{i} {i + w} {int(s)} {arr[i, s]:.17g}\n")


def log_einsum_exp(log_weights: np.ndarray, o: np.ndarray) -> np.ndarray:
    """Stable log(exp(log_weights) @ exp(o)) via a scalar max shift.

    Shifting by the scalar ``max(o)`` turns the log-space contraction into
    one real matrix-vector product.  Rows of ``log_weights`` with zero
    mass return -inf; an all--inf ``o`` yields an all--inf result.
    """
    log_weights = np.asarray(log_weights, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    shift = np.max(o) if o.size else NEG_INF
    if not np.isfinite(shift):
        return np.full(log_weights.shape[0], NEG_INF)
    y = np.exp(log_weights) @ np.exp(o - shift)
    with np.errstate(divide="ignore"):
        return shift + np.log(y)


def _prepare(g: SimpleGrammar, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size < 2:
        raise InsideError(f"need a token sequence of length >= 2, got shape {toks.shape}")
    bad = (toks < 0) | (toks >= g.dims.vocab_size)
    if bad.any():
        raise InsideError(
            f"unknown token id {int(toks[bad][0])} (vocab size {g.dims.vocab_size})")
    return toks


def _root_log_z(g: SimpleGrammar, o_top: np.ndarray) -> float:
    scores = g.log_root + o_top[0, :g.dims.n_nt]
    m = scores.max()
    if not np.isfinite(m):
        return NEG_INF
    return float(m + np.log(np.exp(scores - m).sum()))


def _lse_reduce(t: np.ndarray, axis: int, meter: AllocMeter, out: np.ndarray) -> None:
    # textbook logsumexp reduction, shaped like scipy's: exp(t - max)
    # materializes the shifted values and then their exponentials as two
    # separate full-size temporaries, exactly what the fused engine avoids
    m = t.max(axis=axis)
    safe = np.where(np.isfinite(m), m, 0.0)
    d = meter.alloc(t.shape)
    np.subtract(t, np.expand_dims(safe, axis), out=d)
    e = meter.alloc(t.shape)
    np.exp(d, out=e)
    meter.release(d)
    s = e.sum(axis=axis)
    meter.release(e)
    with np.errstate(divide="ignore"):
        np.log(s, out=s)
    np.add(safe, s, out=out)


def inside_reference(g: SimpleGrammar, tokens,
                     meter: AllocMeter | None = None) -> InsideChart:
    """Readable span-parallel engine using per-element logsumexp.

    Projections materialize the full (spans x parents x children) addend
    tensor and reduce it elementwise; the split merge stacks every
    split's contribution before reducing per symbol; every reduction
    materializes its shifted exponentials.  Serves as the correctness
    baseline and as the "logsumexp" benchmark variant.
    """
    toks = _prepare(g, tokens)
    l = toks.size
    n_nt, n_sym = g.dims.n_nt, g.dims.n_sym
    meter = meter if meter is not None else AllocMeter()

    o: list = [None] * (l + 1)
    a: list = [None] * l
    b: list = [None] * l
    o[1] = meter.alloc((l, n_sym), retained=True)
    o[1][:, :n_nt] = NEG_INF
    o[1][:, n_nt:] = g.log_emit[:, toks].T

    for w in range(1, l + 1):
        n = l - w + 1
        if w >= 2:
            t = meter.alloc((w - 1, n, n_nt))
            for m in range(1, w):
                np.add(a[m][:n], b[w - m][m:m + n], out=t[m - 1])
            o[w] = meter.alloc((n, n_sym), retained=True)
            o[w][:, n_nt:] = NEG_INF
            _lse_reduce(t, 0, meter, out=o[w][:, :n_nt])
            meter.release(t)
        if w < l:
            for table, dest in ((g.log_left, "a"), (g.log_right, "b")):
                t = meter.alloc((n, n_nt, n_sym))
                np.add(table[None, :, :], o[w][:, None, :], out=t)
                proj = meter.alloc((n, n_nt), retained=True)
                _lse_reduce(t, -1, meter, out=proj)
                meter.release(t)
                (a if dest == "a" else b)[w] = proj

    return InsideChart(l, o, a, b, _root_log_z(g, o[l]))


def _stacked_child_weights(g: SimpleGrammar, meter: AllocMeter) -> np.ndarray:
    # exp of [L|R] stacked, pre-transposed so one matmul projects both.
    n_nt, n_sym = g.dims.n_nt, g.dims.n_sym
    w_t = meter.alloc((n_sym, 2 * n_nt))
    np.exp(g.log_left.T, out=w_t[:, :n_nt])
    np.exp(g.log_right.T, out=w_t[:, n_nt:])
    return w_t


def _project_stacked(o_w, w_t, a_w, b_w, exp_buf, proj_buf, n_nt):
    # a|b = shift + log([L|R] exp(o - shift)) with a per-span scalar shift.
    shift = o_w.max(axis=1)
    safe = np.where(np.isfinite(shift), shift, 0.0)
    np.subtract(o_w, safe[:, None], out=exp_buf)
    np.exp(exp_buf, out=exp_buf)
    np.matmul(exp_buf, w_t, out=proj_buf)
    with np.errstate(divide="ignore"):
        np.log(proj_buf, out=proj_buf)
    np.add(proj_buf[:, :n_nt], safe[:, None], out=a_w)
    np.add(proj_buf[:, n_nt:], safe[:, None], out=b_w)


def inside_logeinsumexp(g: SimpleGrammar, tokens,
                        meter: AllocMeter | None = None) -> InsideChart:
    """Matrix-product projections without fusion.

    Uses the same stacked [L|R] product as the fused engine, but each
    width allocates fresh buffers, intermediates (shifted exponentials,
    the log of the product) are materialized rather than written in
    place, and the split merge still stacks every split contribution
    before reducing.  The "logeinsumexp" benchmark variant.
    """
    toks = _prepare(g, tokens)
    l = toks.size
    n_nt, n_sym = g.dims.n_nt, g.dims.n_sym
    meter = meter if meter is not None else AllocMeter()

    o: list = [None] * (l + 1)
    a: list = [None] * l
    b: list = [None] * l
    o[1] = meter.alloc((l, n_sym), retained=True)
    o[1][:, :n_nt] = NEG_INF
    o[1][:, n_nt:] = g.log_emit[:, toks].T
    w_t = _stacked_child_weights(g, meter)

    for w in range(1, l + 1):
        n = l - w + 1
        if w >= 2:
            t = meter.alloc((w - 1, n, n_nt))
            for m in range(1, w):
                np.add(a[m][:n], b[w - m][m:m + n], out=t[m - 1])
            o[w] = meter.alloc((n, n_sym), retained=True)
            o[w][:, n_nt:] = NEG_INF
            _lse_reduce(t, 0, meter, out=o[w][:, :n_nt])
            meter.release(t)
        if w < l:
            shift = o[w].max(axis=1)
            safe = np.where(np.isfinite(shift), shift, 0.0)
            d = meter.alloc((n, n_sym))
            np.subtract(o[w], safe[:, None], out=d)
            e = meter.alloc((n, n_sym))
            np.exp(d, out=e)
            meter.release(d)
            p = meter.alloc((n, 2 * n_nt))
            np.matmul(e, w_t, out=p)
            q = meter.alloc((n, 2 * n_nt))
            with np.errstate(divide="ignore"):
                np.log(p, out=q)
            a[w] = meter.alloc((n, n_nt), retained=True)
            b[w] = meter.alloc((n, n_nt), retained=True)
            np.add(q[:, :n_nt], safe[:, None], out=a[w])
            np.add(q[:, n_nt:], safe[:, None], out=b[w])
            meter.release(q)
            meter.release(p)
            meter.release(e)

    meter.release(w_t)
    return InsideChart(l, o, a, b, _root_log_z(g, o[l]))


def inside_flash(g: SimpleGrammar, tokens,
                 meter: AllocMeter | None = None) -> InsideChart:
    """Fused engine: destructive in-place merge plus one stacked projection.

    Per width, all start positions are processed at once.  The split
    contributions a + b stream into a preallocated arena and are reduced
    there in place (max, shift, exp, accumulate all overwrite the same
    memory), so the stack never outlives the width iteration that filled
    it and no shifted exponentials or softmax weights are materialized
    into fresh buffers anywhere.  The two child projections run as a
    single matrix product against the stacked [L|R] table, also into
    scratch allocated once and reused in place.  Only o, a, b are
    retained, which is exactly what the backward pass recomputes from.
    """
    toks = _prepare(g, tokens)
    l = toks.size
    n_nt, n_sym = g.dims.n_nt, g.dims.n_sym
    meter = meter if meter is not None else AllocMeter()

    o: list = [None] * (l + 1)
    a: list = [None] * l
    b: list = [None] * l
    o[1] = meter.alloc((l, n_sym), retained=True)
    o[1][:, :n_nt] = NEG_INF
    o[1][:, n_nt:] = g.log_emit[:, toks].T
    w_t = _stacked_child_weights(g, meter)

    # one scratch stack, sized up front and reused in place by every
    # width: split contributions are reduced destructively inside their
    # own width iteration (nothing from the stack survives into the next
    # width, and no softmax weights are ever stored), so working memory
    # never scales with the total split count across widths
    stack_rows = max((w - 1) * (l - w + 1) for w in range(2, l + 1))
    stack_buf = meter.alloc(stack_rows * n_nt)
    exp_buf = meter.alloc((l, n_sym))
    proj_buf = meter.alloc((l, 2 * n_nt))
    max_buf = meter.alloc((max(l - 1, 1), n_nt))
    sum_buf = meter.alloc((max(l - 1, 1), n_nt))

    for w in range(1, l + 1):
        n = l - w + 1
        if w >= 2:
            t = stack_buf[:(w - 1) * n * n_nt].reshape(w - 1, n, n_nt)
            # split m of span (i, i+w) pairs a[m][i] with b[w-m][i+m]
            for m in range(1, w):
                np.add(a[m][:n], b[w - m][m:m + n], out=t[m - 1])
            o[w] = meter.alloc((n, n_sym), retained=True)
            o[w][:, n_nt:] = NEG_INF
            shift, acc = max_buf[:n], sum_buf[:n]
            np.maximum.reduce(t, axis=0, out=shift)
            # all-(-inf) entries subtract a zero shift so they stay -inf
            safe = np.where(np.isfinite(shift), shift, 0.0)
            np.subtract(t, safe, out=t)
            np.exp(t, out=t)
            np.add.reduce(t, axis=0, out=acc)
            with np.errstate(divide="ignore"):
                np.log(acc, out=acc)
            np.add(acc, shift, out=acc)
            o[w][:, :n_nt] = acc
        if w < l:
            a[w] = meter.alloc((n, n_nt), retained=True)
            b[w] = meter.alloc((n, n_nt), retained=True)
            _project_stacked(o[w], w_t, a[w], b[w], exp_buf[:n], proj_buf[:n], n_nt)

    for buf in (sum_buf, max_buf, proj_buf, exp_buf, stack_buf, w_t):
        meter.release(buf)
    return InsideChart(l, o, a, b, _root_log_z(g, o[l]))


ENGINES: dict[str, Callable[..., InsideChart]] = {
    "reference": inside_reference,
    "logsumexp": inside_reference,
    "logeinsumexp": inside_logeinsumexp,
    "flash": inside_flash,
}


# ---------------------------------------------------------------------------
# Backward pass and marginals
# ---------------------------------------------------------------------------

@dataclass
class MarginalTable:
    """Posterior probability of each width >= 2 span being a constituent.

    ``mu[w][i]`` is the posterior for span (i, i+w); ``mu_sym[w][i, A]``
    additionally splits it by nonterminal.  Lists are width-indexed with
    unused slots below width 2.
    """

    length: int
    mu: list
    mu_sym: list | None = None

    def span(self, i: int, j: int) -> float:
        return float(self.mu[j - i][i])

    def total(self) -> float:
        return float(sum(arr.sum() for arr in self.mu[2:]))


def inside_backward(g: SimpleGrammar, tokens,
                    chart: InsideChart) -> tuple[GrammarGrad, MarginalTable]:
    """Analytic gradients and span marginals by a reverse width sweep.

    Split-point softmax weights exp(a + b - o) and child softmax weights
    exp(rule + o - a) are recomputed from the chart; nothing beyond o, a,
    b is read.  Returns d log_z / d entry for every log-probability table
    entry, treating entries as unconstrained (project onto the simplex
    tangent for constrained use), plus the marginal table.
    """
    toks = _prepare(g, tokens)
    l = toks.size
    if chart.length != l:
        raise InsideError(f"chart length {chart.length} != sentence length {l}")
    n_nt = g.dims.n_nt
    if not np.array_equal(chart.o[1][:, n_nt:], g.log_emit[:, toks].T):
        raise InsideError("chart was not produced from this grammar and sentence")
    if not np.isfinite(chart.log_z):
        raise InsideError("zero-probability sentence; gradients undefined")

    grad = GrammarGrad.zeros(g.dims)
    go = [None] + [np.zeros((l - w + 1, g.dims.n_sym)) for w in range(1, l + 1)]
    ga = [None] + [np.zeros((l - w + 1, n_nt)) for w in range(1, l)]
    gb = [None] + [np.zeros((l - w + 1, n_nt)) for w in range(1, l)]

    # every derivation uses the root rule exactly once, so the root
    # posterior both seeds the sweep and is the root-table gradient
    post = np.exp(g.log_root + chart.o[l][0, :n_nt] - chart.log_z)
    go[l][0, :n_nt] = post
    grad.d_root += post

    for w in range(l, 1, -1):
        n = l - w + 1
        gout = go[w][:, :n_nt]
        o_w = chart.o[w][:, :n_nt]
        for m in range(1, w):
            with np.errstate(invalid="ignore"):
                t = chart.a[m][:n] + chart.b[w - m][m:m + n] - o_w
            np.copyto(t, NEG_INF, where=np.isnan(t))
            np.exp(t, out=t)
            t *= gout
            ga[m][:n] += t
            gb[w - m][m:m + n] += t
        _projection_backward(g, chart, w - 1, ga, gb, go, grad)

    pt_grad = go[1][:, n_nt:]
    acc = np.zeros((g.dims.vocab_size, g.dims.n_pt))
    np.add.at(acc, toks, pt_grad)
    grad.d_emit += acc.T

    mu = [None, None] + [None] * (l - 1)
    mu_sym = list(mu)
    for w in range(2, l + 1):
        mu_sym[w] = go[w][:, :n_nt].copy()
        mu[w] = mu_sym[w].sum(axis=1)
    return grad, MarginalTable(l, mu, mu_sym)


def _projection_backward(g, chart, m, ga, gb, go, grad):
    # a[m] = logsumexp_B(L[A,B] + o[m][:,B]) and likewise for b; the
    # softmax weight exp(L + o - a) is bounded in [0,1] so only the
    # -inf - -inf corner needs guarding.
    o_m = chart.o[m]
    pairs = ((g.log_left, ga[m], chart.a[m], grad.d_left),
             (g.log_right, gb[m], chart.b[m], grad.d_right))
    for table, gproj, proj, d_table in pairs:
        with np.errstate(invalid="ignore"):
            t = table[None, :, :] + o_m[:, None, :] - proj[:, :, None]
        np.copyto(t, NEG_INF, where=np.isnan(t))
        np.exp(t, out=t)
        t *= gproj[:, :, None]
        d_table += t.sum(axis=0)
        go[m] += t.sum(axis=1)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def _tree_shapes(i: int, j: int):
    if j - i == 1:
        yield i
        return
    for k in range(i + 1, j):
        for left in _tree_shapes(i, k):
            for right in _tree_shapes(k, j):
                yield (left, right)


def _score_shape(shape, rules, emit_p, toks, n_nt):
    n_sym = rules.shape[1]
    v = np.zeros(n_sym)
    if isinstance(shape, tuple):
        lv = _score_shape(shape[0], rules, emit_p, toks, n_nt)
        rv = _score_shape(shape[1], rules, emit_p, toks, n_nt)
        v[:n_nt] = np.einsum("abc,b,c->a", rules, lv, rv)
    else:
        v[n_nt:] = emit_p[:, toks[shape]]
    return v


def _dense_tables(g: SimpleGrammar):
    rules = np.exp(g.log_left)[:, :, None] * np.exp(g.log_right)[:, None, :]
    return np.exp(g.log_root), rules, np.exp(g.log_emit)


def brute_force_logprob(g: SimpleGrammar, tokens) -> float:
    """Exact log p(tokens) by explicit enumeration of binary tree shapes.

    Each of the Catalan(l-1) shapes is scored bottom-up against the dense
    rule tensor, summing over all symbol assignments.  No part of the
    chart recursion or the left/right factorization shortcut is reused,
    which is what makes this an independent oracle.  Guarded to l <= 8
    and n_sym <= 8.
    """
    toks = _prepare(g, tokens)
    l = toks.size
    if l > 8 or g.dims.n_sym > 8:
        raise InsideError(
            f"brute force limited to l <= 8, n_sym <= 8; got l={l}, n_sym={g.dims.n_sym}")
    root_p, rules, emit_p = _dense_tables(g)
    total = 0.0
    for shape in _tree_shapes(0, l):
        total += root_p @ _score_shape(shape, rules, emit_p, toks, g.dims.n_nt)[:g.dims.n_nt]
    with np.errstate(divide="ignore"):
        return float(np.log(total))


def _score_shape_all(shape, leaf, rules, n_nt):
    # like _score_shape but with a leading axis enumerating token choices;
    # flat index order matches itertools.product(range(vocab), repeat=width)
    if not isinstance(shape, tuple):
        return leaf
    lv = _score_shape_all(shape[0], leaf, rules, n_nt)
    rv = _score_shape_all(shape[1], leaf, rules, n_nt)
    out = np.zeros((lv.shape[0] * rv.shape[0], rules.shape[1]))
    out[:, :n_nt] = np.einsum("ub,abc,vc->uva", lv, rules, rv).reshape(-1, n_nt)
    return out


def _all_strings_core(root_p, rules, emit_p, vocab, length) -> np.ndarray:
    n_nt = rules.shape[0]
    n_sym = rules.shape[1]
    if length < 2:
        raise InsideError(f"need length >= 2, got {length}")
    if vocab ** length * n_sym > 2_000_000:
        raise InsideError("all-strings enumeration too large")
    leaf = np.zeros((vocab, n_sym))
    leaf[:, n_nt:] = emit_p.T
    total = np.zeros(vocab ** length)
    for shape in _tree_shapes(0, length):
        total += _score_shape_all(shape, leaf, rules, n_nt)[:, :n_nt] @ root_p
    with np.errstate(divide="ignore"):
        return np.log(total)


def brute_force_all_strings(g: SimpleGrammar, length: int) -> np.ndarray:
    """Log p for every token string of a given length, in one array.

    Index order matches ``itertools.product(range(vocab), repeat=length)``.
    Same shape enumeration as :func:`brute_force_logprob` with the token
    choice vectorized, so summing exp of the result measures total string
    mass at that length.
    """
    root_p, rules, emit_p = _dense_tables(g)
    return _all_strings_core(root_p, rules, emit_p, g.dims.vocab_size, length)


def brute_force_all_strings_lowrank(lr, length: int) -> np.ndarray:
    """All-strings oracle scored directly against the rank-factored rule
    tensor, bypassing any conversion to a simple PCFG."""
    rules = lr.rule_tensor()
    return _all_strings_core(np.exp(lr.log_root), rules, np.exp(lr.log_emit),
                             lr.dims.vocab_size, length)


# ---------------------------------------------------------------------------
# Corpus-level likelihood
# ---------------------------------------------------------------------------

def corpus_log_likelihood(g: SimpleGrammar, sentences,
                          engine: str = "flash") -> tuple[list[float], float]:
    """Per-sentence log-likelihoods and per-token perplexity.

    Perplexity is exp(-sum log_z / total tokens); the per-sentence values
    do not depend on ordering or batching.
    """
    if engine not in ENGINES:
        raise InsideError(f"unknown engine {engine!r}; choose from {sorted(ENGINES)}")
    run = ENGINES[engine]
    sentences = list(sentences)
    if not sentences:
        raise InsideError("empty corpus")
    log_likes: list[float] = []
    n_tokens = 0
    for idx, sent in enumerate(sentences):
        try:
            chart = run(g, sent)
        except InsideError as e:
            raise InsideError(f"sentence {idx}: {e}") from e
        log_likes.append(chart.log_z)
        n_tokens += len(sent)
    ppl = float(np.exp(-np.sum(log_likes) / n_tokens))
    return log_likes, ppl
