"""Analytic gradients and span marginals against finite differences."""

import math

import numpy as np
import pytest

from conftest import fd_grammar_grad, make_g1, projected_grad, random_instance
from flashpcfg.grammar import GrammarDims, random_grammar
from flashpcfg.inside import (
    InsideError,
    inside_backward,
    inside_flash,
    inside_reference,
)

# Finite differences lose all relative accuracy where the true gradient is
# ~0, so every comparison pairs the relative tolerance with a small floor.
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def check_fd(g, tokens):
    chart = inside_flash(g, tokens)
    grad, _ = inside_backward(g, tokens, chart)
    tables = {
        "root": (grad.d_root, g.log_root, None),
        "left": (grad.d_left, g.log_left, g.dims.n_nt),
        "right": (grad.d_right, g.log_right, g.dims.n_nt),
        "emit": (grad.d_emit, g.log_emit, g.dims.n_pt),
    }
    for name, (grad_t, log_t, n_rows) in tables.items():
        rows = [None] if n_rows is None else range(n_rows)
        for row in rows:
            cols = log_t.shape[-1]
            for col in range(cols):
                want = fd_grammar_grad(g, tokens, name, row or 0, col)
                got = projected_grad(grad_t, log_t, row, col)
                assert got == pytest.approx(want, rel=FD_RTOL, abs=FD_ATOL), (
                    f"{name}[{row},{col}]")


class TestFiniteDifferences:
    def test_g1(self, g1):
        check_fd(g1, np.zeros(3, dtype=np.int64))

    def test_random_medium(self):
        g = random_grammar(GrammarDims(3, 3, 4), seed=14)
        rng = np.random.default_rng(7)
        check_fd(g, rng.integers(0, 4, size=5).astype(np.int64))

    @pytest.mark.parametrize("seed", range(6))
    def test_random_small_instances(self, seed):
        rng = np.random.default_rng(100 + seed)
        g, tokens = random_instance(rng, max_nt=2, max_pt=2, max_vocab=3,
                                    max_len=5)
        check_fd(g, tokens)


class TestGradientIdentities:
    @pytest.mark.parametrize("seed", range(8))
    def test_root_grad_sums_to_one(self, seed):
        rng = np.random.default_rng(200 + seed)
        g, tokens = random_instance(rng)
        grad, _ = inside_backward(g, tokens, inside_flash(g, tokens))
        assert grad.d_root.sum() == pytest.approx(1.0, abs=1e-9)

    def test_gradients_finite_everywhere_reachable(self):
        g = random_grammar(GrammarDims(3, 3, 4), seed=3)
        tokens = np.array([0, 1, 2, 3, 0, 1], dtype=np.int64)
        grad, _ = inside_backward(g, tokens, inside_flash(g, tokens))
        for t in (grad.d_root, grad.d_left, grad.d_right, grad.d_emit):
            assert np.isfinite(t).all()

    def test_works_from_reference_chart_too(self, g1):
        tokens = np.zeros(4, dtype=np.int64)
        ga, _ = inside_backward(g1, tokens, inside_reference(g1, tokens))
        gb, _ = inside_backward(g1, tokens, inside_flash(g1, tokens))
        np.testing.assert_allclose(ga.d_left, gb.d_left, atol=1e-12)


class TestMarginals:
    def test_g1_xxx_split_posteriors(self, g1):
        tokens = np.zeros(3, dtype=np.int64)
        _, marg = inside_backward(g1, tokens, inside_flash(g1, tokens))
        assert marg.span(0, 2) == pytest.approx(0.5, abs=1e-12)
        assert marg.span(1, 3) == pytest.approx(0.5, abs=1e-12)
        assert marg.span(0, 3) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_identities_on_random_instances(self, seed):
        rng = np.random.default_rng(300 + seed)
        g, tokens = random_instance(rng, max_len=8)
        l = len(tokens)
        _, marg = inside_backward(g, tokens, inside_flash(g, tokens))
        total = sum(marg.span(i, i + w)
                    for w in range(2, l + 1) for i in range(l - w + 1))
        assert total == pytest.approx(l - 1, abs=1e-6)
        assert marg.span(0, l) == pytest.approx(1.0, abs=1e-9)
        for w in range(2, l + 1):
            for i in range(l - w + 1):
                assert -1e-9 <= marg.span(i, i + w) <= 1.0 + 1e-9

    def test_brute_force_posterior_cross_check(self):
        # posterior of each span = mass of trees containing it / total
        from flashpcfg.inside import brute_force_logprob
        from flashpcfg.trees import ParseTree

        g = random_grammar(GrammarDims(2, 2, 3), seed=23)
        tokens = np.array([0, 2, 1, 0], dtype=np.int64)
        _, marg = inside_backward(g, tokens, inside_flash(g, tokens))

        def _shapes_with_probs(g, tokens):
            from flashpcfg.inside import _dense_tables, _score_shape, _tree_shapes
            root_p, rules, emit_p = _dense_tables(g)
            for shape in _tree_shapes(0, 4):
                spans = frozenset(_spans_of(shape))
                vec = _score_shape(shape, rules, emit_p, tokens, g.dims.n_nt)
                yield spans, float(root_p @ vec[:g.dims.n_nt])

        def _spans_of(shape):
            if not isinstance(shape, tuple):
                return []
            lo, hi = _extent(shape)
            out = [(lo, hi)]
            out += _spans_of(shape[0]) + _spans_of(shape[1])
            return out

        def _extent(shape):
            if not isinstance(shape, tuple):
                return shape, shape + 1
            return _extent(shape[0])[0], _extent(shape[1])[1]

        z = math.exp(brute_force_logprob(g, tokens))
        shapes = list(_shapes_with_probs(g, tokens))
        for i, j in [(0, 2), (1, 3), (2, 4), (0, 3), (1, 4)]:
            mass = sum(p for spans, p in shapes if (i, j) in spans)
            assert marg.span(i, j) == pytest.approx(mass / z, abs=1e-10)


class TestErrorHandling:
    def test_chart_sentence_mismatch(self, g1):
        chart = inside_flash(g1, np.zeros(3, dtype=np.int64))
        with pytest.raises(InsideError):
            inside_backward(g1, np.zeros(4, dtype=np.int64), chart)
