"""Parameterizations: init, forward validity, manual gradients, Adam."""

import numpy as np
import pytest

from flashpcfg.grammar import GrammarDims, GrammarGrad, validate_grammar
from flashpcfg.inside import inside_backward, inside_flash
from flashpcfg.neuralparam import (
    AdamState,
    DirectLogits,
    ParamError,
    adam_step,
    backward_direct,
    backward_params,
    forward_grammar,
    forward_grammar_direct,
    init_direct,
    init_params,
)

DIMS = GrammarDims(2, 2, 3)


class TestInit:
    def test_deterministic(self):
        a = init_params(DIMS, d=8, seed=5)
        b = init_params(DIMS, d=8, seed=5)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])

    def test_seeds_differ(self):
        a = init_params(DIMS, d=8, seed=0)
        b = init_params(DIMS, d=8, seed=1)
        assert not np.array_equal(a.tensors["w_sym"], b.tensors["w_sym"])

    def test_default_dimension(self):
        p = init_params(DIMS)
        assert p.d == 512
        assert p.tensors["f1.w1"].shape == (512, 512)
        assert p.w_sym.shape == (1 + DIMS.n_nt + DIMS.n_pt, 512)

    def test_xavier_scale(self):
        p = init_params(DIMS, d=512, seed=0)
        w = p.tensors["f1.w1"]
        expected = np.sqrt(2.0 / (512 + 512))
        assert abs(w.std() - expected) / expected < 0.2
        assert abs(w.mean()) < 0.01

    def test_biases_start_at_zero(self):
        p = init_params(DIMS, d=8, seed=0)
        for name, t in p.tensors.items():
            if ".b" in name:
                assert not t.any(), name

    def test_tensor_count(self):
        assert len(init_params(DIMS, d=4).tensors) == 25

    def test_tiny_dimension_rejected(self):
        with pytest.raises(ParamError):
            init_params(DIMS, d=1)


class TestForward:
    @pytest.mark.parametrize("seed", range(100))
    def test_always_a_valid_grammar(self, seed):
        g = forward_grammar(init_params(DIMS, d=8, seed=seed))
        assert validate_grammar(g, tol=1e-6).ok

    def test_tied_shares_the_row_storage(self):
        g = forward_grammar(init_params(DIMS, d=8, seed=0), tied=True)
        assert g.tied
        assert g.log_right is g.log_left

    def test_untied_rows_differ(self):
        g = forward_grammar(init_params(DIMS, d=8, seed=0))
        assert not np.array_equal(g.log_left, g.log_right)

    def test_inside_on_fresh_parameters(self):
        g = forward_grammar(init_params(DIMS, d=8, seed=1))
        chart = inside_flash(g, np.array([0, 1], dtype=np.int64))
        assert np.isfinite(chart.log_z)

    def test_deterministic_forward(self):
        a = forward_grammar(init_params(DIMS, d=8, seed=2))
        b = forward_grammar(init_params(DIMS, d=8, seed=2))
        np.testing.assert_array_equal(a.log_left, b.log_left)


def weighted_table_loss(dims, seed=0):
    """Fixed random weights making loss = sum_t <W_t, log table t>."""
    rng = np.random.default_rng(seed)
    return GrammarGrad(
        rng.normal(size=dims.n_nt),
        rng.normal(size=(dims.n_nt, dims.n_sym)),
        rng.normal(size=(dims.n_nt, dims.n_sym)),
        rng.normal(size=(dims.n_pt, dims.vocab_size)))


def table_loss_value(g, w: GrammarGrad) -> float:
    return float((w.d_root * g.log_root).sum() + (w.d_left * g.log_left).sum()
                 + (w.d_right * g.log_right).sum() + (w.d_emit * g.log_emit).sum())


class TestBackwardParams:
    def fd_all_coordinates(self, tied):
        p = init_params(DIMS, d=4, seed=3)
        w = weighted_table_loss(DIMS, seed=9)
        grad = backward_params(p, w, tied=tied)
        step = 1e-6
        for name, tensor in p.tensors.items():
            flat = tensor.reshape(-1)
            gflat = grad.tensors[name].reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                hi = table_loss_value(forward_grammar(p, tied=tied), w)
                flat[i] = keep - step
                lo = table_loss_value(forward_grammar(p, tied=tied), w)
                flat[i] = keep
                want = (hi - lo) / (2 * step)
                assert gflat[i] == pytest.approx(want, rel=1e-4, abs=1e-7), (
                    f"{name}[{i}] tied={tied}")

    def test_finite_differences_every_tensor(self):
        self.fd_all_coordinates(tied=False)

    def test_finite_differences_tied(self):
        self.fd_all_coordinates(tied=True)

    def test_tied_leaves_right_head_untouched(self):
        p = init_params(DIMS, d=4, seed=3)
        grad = backward_params(p, weighted_table_loss(DIMS), tied=True)
        assert not grad.tensors["f4.w"].any()
        assert not grad.tensors["f4.b"].any()

    def test_zero_upstream_gives_zero_grads(self):
        p = init_params(DIMS, d=4, seed=0)
        grad = backward_params(p, GrammarGrad.zeros(DIMS))
        for name, t in grad.tensors.items():
            assert not t.any(), name

    def test_shape_mismatch_rejected(self):
        p = init_params(DIMS, d=4, seed=0)
        with pytest.raises(ParamError):
            backward_params(p, GrammarGrad.zeros(GrammarDims(3, 2, 3)))

    def test_end_to_end_sentence_gradient(self):
        # loss = -log p(sentence); chain chart gradients through the network
        p = init_params(GrammarDims(2, 2, 3), d=6, seed=4)
        tokens = np.array([0, 2, 1, 0], dtype=np.int64)

        def loss():
            g = forward_grammar(p)
            return -inside_flash(g, tokens).log_z

        g = forward_grammar(p)
        ggrad, _ = inside_backward(g, tokens, inside_flash(g, tokens))
        ggrad.scale_(-1.0)
        pgrad = backward_params(p, ggrad)
        rng = np.random.default_rng(0)
        step = 1e-6
        for name in p.tensors:
            flat = p.tensors[name].reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                keep = flat[i]
                flat[i] = keep + step
                hi = loss()
                flat[i] = keep - step
                lo = loss()
                flat[i] = keep
                want = (hi - lo) / (2 * step)
                got = pgrad.tensors[name].reshape(-1)[i]
                assert got == pytest.approx(want, rel=1e-3, abs=1e-7), name


class TestAdam:
    def test_zero_gradient_is_a_fixed_point(self):
        x = {"a": np.array([1.0, -2.0])}
        state = AdamState.zeros(x)
        adam_step(x, {"a": np.zeros(2)}, state)
        np.testing.assert_array_equal(x["a"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_moves_by_lr_in_sign_direction(self):
        # bias correction makes step one exactly lr * g / (|g| + eps)
        x = {"a": np.array([1.0])}
        adam_step(x, {"a": np.array([3.0])}, AdamState.zeros(x), lr=0.002)
        assert x["a"][0] == pytest.approx(1.0 - 0.002, rel=1e-6)

    def test_two_steps_match_hand_trace(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.99, 1e-8
        g1v, g2v = 2.0, -1.0
        x = {"a": np.array([0.5])}
        state = AdamState.zeros(x)
        adam_step(x, {"a": np.array([g1v])}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
        adam_step(x, {"a": np.array([g2v])}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)

        m = (1 - b1) * g1v
        v = (1 - b2) * g1v ** 2
        x_ref = 0.5 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2v
        v = b2 * v + (1 - b2) * g2v ** 2
        x_ref -= lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
        assert x["a"][0] == pytest.approx(x_ref, rel=1e-12)

    def test_non_finite_gradient_rejected(self):
        x = {"a": np.array([1.0])}
        state = AdamState.zeros(x)
        with pytest.raises(ParamError, match="a"):
            adam_step(x, {"a": np.array([np.nan])}, state)
        assert state.t == 0


class TestDirect:
    def test_deterministic_and_valid(self):
        a = init_direct(DIMS, seed=7)
        b = init_direct(DIMS, seed=7)
        np.testing.assert_array_equal(a.left, b.left)
        assert validate_grammar(forward_grammar_direct(a), tol=1e-9).ok

    def test_zero_scale_gives_uniform_rows(self):
        g = forward_grammar_direct(init_direct(DIMS, seed=0, scale=0.0))
        np.testing.assert_allclose(g.log_left, np.log(1.0 / DIMS.n_sym), atol=1e-12)
        np.testing.assert_allclose(g.log_emit, np.log(1.0 / DIMS.vocab_size),
                                   atol=1e-12)

    def test_tied_direct(self):
        g = forward_grammar_direct(init_direct(DIMS, seed=0), tied=True)
        assert g.log_right is g.log_left

    def test_finite_differences(self):
        logits = init_direct(DIMS, seed=2)
        w = weighted_table_loss(DIMS, seed=4)
        grad = backward_direct(logits, w)
        step = 1e-6
        for name in ("root", "left", "right", "emit"):
            tensor = getattr(logits, name)
            gt = getattr(grad, name)
            flat, gflat = tensor.reshape(-1), gt.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                hi = table_loss_value(forward_grammar_direct(logits), w)
                flat[i] = keep - step
                lo = table_loss_value(forward_grammar_direct(logits), w)
                flat[i] = keep
                assert gflat[i] == pytest.approx((hi - lo) / (2 * step),
                                                 rel=1e-5, abs=1e-9), name

    def test_tied_gradient_routing(self):
        logits = init_direct(DIMS, seed=2)
        w = weighted_table_loss(DIMS, seed=4)
        grad = backward_direct(logits, w, tied=True)
        assert not grad.right.any()
        # FD against the tied forward confirms both tables flow into left
        step = 1e-6
        flat = logits.left.reshape(-1)
        gflat = grad.left.reshape(-1)
        for i in range(0, flat.size, 3):
            keep = flat[i]
            flat[i] = keep + step
            hi = table_loss_value(forward_grammar_direct(logits, tied=True), w)
            flat[i] = keep - step
            lo = table_loss_value(forward_grammar_direct(logits, tied=True), w)
            flat[i] = keep
            assert gflat[i] == pytest.approx((hi - lo) / (2 * step),
                                             rel=1e-5, abs=1e-9)
