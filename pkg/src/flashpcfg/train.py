"""Training loop for the sentence log-likelihood objective.

One step processes one equal-length batch: materialize the grammar
from the current parameters, run the fused inside pass per sentence,
accumulate analytic gradients through the inside recursion and the
parameterization, clip, and apply Adam.  Dev perplexity is tracked on
a schedule and the best-scoring parameters are kept.  Given a seed the
whole procedure is deterministic, so training logs compare bitwise.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, batch_by_length
from .grammar import GrammarDims, GrammarGrad, SimpleGrammar
from .inside import ENGINES, corpus_log_likelihood, inside_backward
from .neuralparam import (AdamState, DirectLogits, EmbeddingParams, ParamGrad,
                          adam_step, backward_direct, backward_params,
                          forward_grammar, forward_grammar_direct, init_direct,
                          init_params)
from .parse import F1Result, GoldAnnotation, corpus_f1

logger = logging.getLogger(__name__)


class TrainError(Exception):
    """Invalid configuration or a diverged training run."""


@dataclass
class TrainConfig:
    """Everything a run needs; round-trips through JSON."""

    parameterization: str = "neural"
    n_nt: int = 16
    n_pt: int | None = None
    d: int = 512
    lr: float = 0.002
    beta1: float = 0.75
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    max_epochs: int = 10
    batch_cap: int = 512
    eval_every: int = 50
    seed: int = 0
    engine: str = "flash"
    tied: bool = False
    max_len: int = 40
    vocab_size: int | None = None

    def __post_init__(self):
        if self.parameterization not in ("neural", "direct"):
            raise TrainError(
                f"unknown parameterization {self.parameterization!r}")
        if self.n_nt < 1:
            raise TrainError("n_nt must be at least 1")
        if self.n_pt is None:
            self.n_pt = self.n_nt
        for name in ("lr", "beta1", "beta2", "eps", "clip"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")
        if self.engine not in ENGINES:
            raise TrainError(f"unknown engine {self.engine!r}")

    def dims(self) -> GrammarDims:
        if self.vocab_size is None:
            raise TrainError("vocab_size has not been set")
        return GrammarDims(self.n_nt, self.n_pt, self.vocab_size)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TrainError(f"config is not valid JSON: {exc}") from exc
        known = TrainConfig.__dataclass_fields__
        unknown = set(raw) - set(known)
        if unknown:
            raise TrainError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(**raw)


@dataclass
class TrainLog:
    """Per-step losses and scheduled dev evaluations.

    The canonical CSV carries only seed, config, steps, and dev
    perplexities; wall-clock time is kept out of it so identical runs
    produce identical files.
    """

    seed: int
    config_json: str
    steps: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_csv(self) -> str:
        evals = dict(self.evals)
        lines = ["# trainlog-v1",
                 "# config=" + json.dumps(json.loads(self.config_json),
                                          sort_keys=True),
                 "step,loss,dev_ppl"]
        for step, loss in self.steps:
            ppl = evals.get(step)
            lines.append(f"{step},{loss!r},{'' if ppl is None else repr(ppl)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class TrainResult:
    params: EmbeddingParams | DirectLogits
    grammar: SimpleGrammar
    dev_ppl: float
    step: int
    log: TrainLog


def _clip_grads(tensors: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for v in tensors.values():
        total += float(np.square(v).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for v in tensors.values():
            v *= scale
    return norm


def _copy_params(params):
    if isinstance(params, EmbeddingParams):
        return EmbeddingParams(params.dims, params.d,
                               {k: v.copy() for k, v in params.tensors.items()})
    return DirectLogits(params.dims, params.root.copy(), params.left.copy(),
                        params.right.copy(), params.emit.copy())


def train(config: TrainConfig, train_corpus: Corpus, dev_corpus: Corpus
          ) -> TrainResult:
    """Optimize the corpus log-likelihood; return the best-dev state.

    Raises with the offending sentence's id and log probability if the
    loss ever turns non-finite.
    """
    t_start = time.perf_counter()
    if config.vocab_size is None:
        raise TrainError("config.vocab_size must be set before training")
    dims = config.dims()
    neural = config.parameterization == "neural"
    if neural:
        params = init_params(dims, config.d, config.seed)
    else:
        params = init_direct(dims, config.seed)
    state = AdamState.zeros(params.tensors)

    kept = [s for s in train_corpus.sentences if len(s) <= config.max_len]
    dropped = len(train_corpus.sentences) - len(kept)
    if dropped:
        logger.info("excluded %d training sentences over %d tokens",
                    dropped, config.max_len)
    if not kept:
        raise TrainError("no training sentences within max_len")
    train_kept = Corpus(kept, [[]] * len(kept))
    batches = batch_by_length(train_kept, config.batch_cap)
    engine = ENGINES[config.engine]
    rng = np.random.default_rng(config.seed)

    log = TrainLog(config.seed, config.to_json())
    best: TrainResult | None = None
    step = 0

    def make_grammar():
        if neural:
            return forward_grammar(params, tied=config.tied)
        return forward_grammar_direct(params, tied=config.tied)

    def run_eval(step: int, grammar: SimpleGrammar) -> None:
        nonlocal best
        _, ppl = corpus_log_likelihood(grammar, dev_corpus.sentences,
                                       engine=config.engine)
        log.evals.append((step, ppl))
        logger.info("step %d dev ppl %.3f", step, ppl)
        if best is None or ppl < best.dev_ppl:
            best = TrainResult(_copy_params(params), grammar, ppl, step, log)

    for _ in range(config.max_epochs):
        order = rng.permutation(len(batches))
        for bi in order:
            batch = batches[int(bi)]
            grammar = make_grammar()
            total_grad = GrammarGrad.zeros(dims)
            losses = []
            for row, idx in zip(batch.tokens, batch.indices):
                chart = engine(grammar, row)
                if not np.isfinite(chart.log_z):
                    raise TrainError(
                        f"non-finite loss at step {step + 1}: sentence "
                        f"{idx} has log probability {chart.log_z}")
                ggrad, _ = inside_backward(grammar, row, chart)
                total_grad.add_(ggrad)
                losses.append(-chart.log_z)
            # loss = mean per-sentence NLL, so d loss / d tables = -mean
            total_grad.scale_(-1.0 / len(losses))
            if neural:
                pgrad = backward_params(params, total_grad, tied=config.tied)
                grads = pgrad.tensors
            else:
                grads = backward_direct(params, total_grad,
                                        tied=config.tied).tensors
            _clip_grads(grads, config.clip)
            adam_step(params.tensors, grads, state, lr=config.lr,
                      beta1=config.beta1, beta2=config.beta2, eps=config.eps)
            step += 1
            log.steps.append((step, float(np.mean(losses))))
            if step % config.eval_every == 0:
                run_eval(step, make_grammar())

    if not log.evals or log.evals[-1][0] != step:
        run_eval(step, make_grammar())
    assert best is not None
    log.wall_clock_s = time.perf_counter() - t_start
    return best


@dataclass
class EvalReport:
    ppl: float
    n_sentences: int
    n_tokens: int
    f1: F1Result | None = None
    decoder: str = "mbr"

    def format(self) -> str:
        lines = [f"sentences:  {self.n_sentences}",
                 f"tokens:     {self.n_tokens}",
                 f"perplexity: {self.ppl:.4f}"]
        if self.f1 is not None:
            lines.append(f"mean S-F1:  {self.f1.mean_f1:.4f} "
                         f"({self.decoder}, {len(self.f1.rows)} scored, "
                         f"{self.f1.skipped} skipped)")
        return "\n".join(lines)


def evaluate(grammar: SimpleGrammar, corpus: Corpus, vocab=None,
             treebank: list[GoldAnnotation] | None = None,
             decoder: str = "mbr", engine: str = "flash") -> EvalReport:
    """Perplexity of a corpus, plus S-F1 when a treebank is given."""
    if vocab is not None and grammar.dims.vocab_size != vocab.size:
        raise TrainError(
            f"grammar expects a vocabulary of {grammar.dims.vocab_size} "
            f"tokens but got {vocab.size}")
    _, ppl = corpus_log_likelihood(grammar, corpus.sentences, engine=engine)
    report = EvalReport(ppl, len(corpus), corpus.n_tokens, decoder=decoder)
    if treebank is not None:
        if vocab is None:
            raise TrainError("scoring a treebank requires a vocabulary")
        report.f1 = corpus_f1(grammar, treebank, vocab.encode,
                              decoder=decoder, engine=engine)
    return report
