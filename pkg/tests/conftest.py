"""Shared fixtures: tiny closed-form grammars and oracle helpers."""

import numpy as np
import pytest

from flashpcfg.grammar import GrammarDims, SimpleGrammar, random_grammar

LOG_HALF = float(np.log(0.5))


def make_g1() -> SimpleGrammar:
    """One nonterminal A, one preterminal T, vocab {x}.

    root(A)=1; A's left and right child are each A or T with probability
    one half; T always emits x.  Every string x^l then has likelihood
    Catalan(l-1) / 4^(l-1).
    """
    return SimpleGrammar(
        GrammarDims(1, 1, 1),
        log_root=np.array([0.0]),
        log_left=np.array([[LOG_HALF, LOG_HALF]]),
        log_right=np.array([[LOG_HALF, LOG_HALF]]),
        log_emit=np.array([[0.0]]),
    )


@pytest.fixture
def g1() -> SimpleGrammar:
    return make_g1()


def random_instance(rng: np.random.Generator, max_nt: int = 3, max_pt: int = 3,
                    max_vocab: int = 4, max_len: int = 6,
                    concentration: float = 1.0):
    """Small (grammar, sentence) pair sized for the brute-force oracle."""
    n_nt = int(rng.integers(1, max_nt + 1))
    n_pt = int(rng.integers(1, max_pt + 1))
    vocab = int(rng.integers(1, max_vocab + 1))
    length = int(rng.integers(2, max_len + 1))
    g = random_grammar(GrammarDims(n_nt, n_pt, vocab),
                       seed=int(rng.integers(2 ** 31)),
                       concentration=concentration)
    tokens = rng.integers(0, vocab, size=length).astype(np.int64)
    return g, tokens


def fd_grammar_grad(g: SimpleGrammar, tokens, table: str, row: int, col: int,
                    step: float = 1e-5) -> float:
    """Central finite difference of log_z in a grammar log-probability.

    Perturbs one log-table entry by +-step with the row renormalized, so
    the comparison target is the analytic gradient projected onto the
    probability simplex: g - p * sum(g) over the row.
    """
    from flashpcfg.inside import inside_reference

    def shifted(delta: float) -> SimpleGrammar:
        tables = {
            "root": g.log_root.copy(),
            "left": g.log_left.copy(),
            "right": g.log_right.copy(),
            "emit": g.log_emit.copy(),
        }
        t = tables[table]
        if table == "root":
            t[col] += delta
            t -= _lse(t)
        else:
            t[row, col] += delta
            t[row] -= _lse(t[row])
        return SimpleGrammar(g.dims, tables["root"], tables["left"],
                             tables["right"], tables["emit"])

    up = inside_reference(shifted(step), tokens).log_z
    down = inside_reference(shifted(-step), tokens).log_z
    return (up - down) / (2.0 * step)


def projected_grad(grad_table: np.ndarray, log_table: np.ndarray,
                   row: int | None, col: int) -> float:
    """Simplex-projected analytic gradient matching fd_grammar_grad."""
    if row is None:
        grad_row, log_row = grad_table, log_table
    else:
        grad_row, log_row = grad_table[row], log_table[row]
    return float(grad_row[col] - np.exp(log_row[col]) * grad_row.sum())


def _lse(v: np.ndarray) -> float:
    m = np.max(v)
    return m + np.log(np.exp(v - m).sum())
