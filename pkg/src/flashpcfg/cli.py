"""Command-line surface for training, evaluation, parsing, and benchmarks.

Heavy imports stay inside the command handlers so ``--help`` is instant and
``bench --threads`` can cap the BLAS pools before numpy warms them up.
Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract reserves 2
    # for data errors, so usage problems are rethrown and mapped to 1.
    def error(self, message):
        raise _UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise _UsageError(f"expected comma-separated integers, got {text!r}")


def _load_vocab(path):
    from .data import Vocabulary
    return Vocabulary.load(path) if path else None


def _encoder(vocab, g):
    """Tokens -> id array; without a vocabulary ids are read off the tokens."""
    import numpy as np

    from .data import DataError

    if vocab is not None:
        if vocab.size != g.dims.vocab_size:
            raise DataError(
                f"grammar expects a vocabulary of {g.dims.vocab_size} "
                f"tokens but the file has {vocab.size}")
        return lambda toks: np.asarray(vocab.encode(toks), dtype=np.int64)

    def encode(toks):
        ids = []
        for tok in toks:
            text = tok[1:] if tok[:1] == "w" else tok
            try:
                i = int(text)
            except ValueError:
                raise DataError(
                    f"token {tok!r} is not an integer id; pass --vocab "
                    f"to map raw text") from None
            if not 0 <= i < g.dims.vocab_size:
                raise DataError(
                    f"token id {i} outside vocabulary of size "
                    f"{g.dims.vocab_size}")
            ids.append(i)
        return np.asarray(ids, dtype=np.int64)

    return encode


def _read_sentences(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.split() for line in lines if line.split()]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    from .data import build_vocab, load_corpus
    from .grammar import save_grammar
    from .neuralparam import save_params
    from .train import TrainConfig, TrainError, train

    overrides = {}
    for name in ("parameterization", "n_nt", "n_pt", "d", "lr", "max_epochs",
                 "batch_cap", "eval_every", "seed", "engine", "max_len",
                 "vocab_size"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.tied:
        overrides["tied"] = True
    try:
        if args.config:
            cfg = TrainConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
            if overrides:
                cfg = dataclasses.replace(cfg, **overrides)
        else:
            cfg = TrainConfig(**overrides)
    except (TrainError, json.JSONDecodeError) as exc:
        raise _UsageError(f"bad training config: {exc}")

    max_size = None if cfg.vocab_size is None else cfg.vocab_size - 1
    vocab = build_vocab(args.train, max_size=max_size,
                        lowercase=args.lowercase,
                        normalize_digits=args.normalize_digits)
    cfg = dataclasses.replace(cfg, vocab_size=vocab.size)
    train_corpus = load_corpus(args.train, vocab, lowercase=args.lowercase,
                               normalize_digits=args.normalize_digits)
    dev_corpus = load_corpus(args.dev, vocab, lowercase=args.lowercase,
                             normalize_digits=args.normalize_digits)

    result = train(cfg, train_corpus, dev_corpus)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_grammar(result.grammar, out / "grammar.spcfg")
    vocab.save(out / "vocab.txt")
    result.log.save(out / "trainlog.csv")
    if cfg.parameterization == "neural":
        save_params(result.params, out / "params.sprm")
    print(f"trained {result.step} steps; best dev ppl {result.dev_ppl:.4f}")
    print(f"wrote {out / 'grammar.spcfg'}")
    return EXIT_OK


def _cmd_eval_ppl(args) -> int:
    from .data import load_corpus
    from .grammar import load_grammar
    from .train import evaluate

    g = load_grammar(args.grammar)
    vocab = _load_vocab(args.vocab)
    if vocab is not None:
        corpus = load_corpus(args.input, vocab)
        report = evaluate(g, corpus, vocab=vocab, engine=args.engine)
    else:
        from .data import Corpus
        encode = _encoder(None, g)
        texts = _read_sentences(args.input)
        texts = [t for t in texts if len(t) >= 2]
        corpus = Corpus([encode(t) for t in texts], texts)
        report = evaluate(g, corpus, engine=args.engine)
    print(report.format())
    return EXIT_OK


def _cmd_parse(args) -> int:
    from .grammar import load_grammar
    from .inside import ENGINES, inside_backward
    from .parse import mbr_decode, viterbi_decode

    g = load_grammar(args.grammar)
    vocab = _load_vocab(args.vocab)
    encode = _encoder(vocab, g)
    run = ENGINES[args.engine]
    out_lines = []
    for toks in _read_sentences(args.input):
        if len(toks) < 2:
            out_lines.append(f"(X {toks[0]})" if toks else "")
            continue
        ids = encode(toks)
        if args.decoder == "viterbi":
            tree = viterbi_decode(g, ids)
        else:
            chart = run(g, ids)
            _, marg = inside_backward(g, ids, chart)
            tree = mbr_decode(marg)
        out_lines.append(tree.to_bracketed(toks))
    text = "\n".join(out_lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_eval_f1(args) -> int:
    from .grammar import load_grammar
    from .parse import (corpus_f1, format_f1_report, load_punct_tags,
                        read_bracketed_trees, write_f1_csv)

    g = load_grammar(args.grammar)
    vocab = _load_vocab(args.vocab)
    encode = _encoder(vocab, g)
    punct = load_punct_tags(args.punct_tags) if args.keep_punct is False else frozenset()
    treebank = read_bracketed_trees(args.treebank, punct_tags=punct)
    result = corpus_f1(g, treebank, encode, decoder=args.decoder,
                       engine=args.engine)
    print(format_f1_report(result, args.decoder))
    if args.csv:
        write_f1_csv(result, args.csv)
    return EXIT_OK


def _cmd_sample(args) -> int:
    from .data import generate_synthetic, write_corpus, write_treebank
    from .grammar import load_grammar

    g = load_grammar(args.grammar)
    corpus, treebank = generate_synthetic(g, args.n, seed=args.seed)
    if args.out:
        write_corpus(corpus, args.out)
    else:
        for text in corpus.texts:
            print(" ".join(text))
    if args.trees:
        write_treebank(treebank, args.trees)
    return EXIT_OK


def _cmd_convert_lowrank(args) -> int:
    import numpy as np

    from .grammar import (GrammarDims, GrammarError, LowRankGrammar,
                          lowrank_to_simple, save_grammar)

    try:
        with np.load(args.input) as data:
            arrays = {name: np.asarray(data[name], dtype=np.float64)
                      for name in ("U", "V", "W", "log_root", "log_emit")}
    except KeyError as exc:
        raise GrammarError(f"low-rank archive is missing array {exc}")
    except (OSError, ValueError) as exc:
        raise GrammarError(f"cannot read low-rank archive {args.input}: {exc}")
    n_nt, rank = arrays["U"].shape
    n_sym = arrays["V"].shape[0]
    n_pt, vocab = arrays["log_emit"].shape
    if n_sym != n_nt + n_pt:
        raise GrammarError(
            f"inconsistent shapes: V has {n_sym} symbols but U and log_emit "
            f"imply {n_nt} + {n_pt}")
    lr = LowRankGrammar(GrammarDims(n_nt, n_pt, vocab), rank, **arrays)
    g = lowrank_to_simple(lr)
    save_grammar(g, args.out)
    print(f"wrote {args.out} "
          f"(n_nt={g.dims.n_nt} n_pt={g.dims.n_pt} vocab={g.dims.vocab_size})")
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .bench import bench_inside, format_report, resolve_threads

    threads = resolve_threads(args.threads)
    budget = None
    if args.memory_budget_mb is not None:
        budget = int(args.memory_budget_mb * 2 ** 20)
    report = bench_inside(args.sizes, args.lengths, variants=args.variants,
                          batch=args.batch, repeats=args.repeats,
                          seed=args.seed, threads=threads,
                          memory_budget_bytes=budget)
    if args.out:
        report.save(args.out)
        print(f"wrote {args.out}")
    else:
        print(report.to_csv(), end="")
    if args.table:
        print(format_report(report))
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .grammar import GrammarFileError, load_grammar, validate_grammar
    from .neuralparam import load_params

    path = Path(args.path)
    magic = b""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(5)
    except OSError as exc:
        raise GrammarFileError(f"cannot read {path}: {exc}")
    if magic == b"SPRM1":
        params = load_params(path)
        d = params.dims
        print(f"OK params n_nt={d.n_nt} n_pt={d.n_pt} "
              f"vocab={d.vocab_size} d={params.d}")
        return EXIT_OK
    g = load_grammar(path)
    report = validate_grammar(g)
    if not report.ok:
        raise GrammarFileError(f"{path}: {report}")
    d = g.dims
    print(f"OK grammar n_nt={d.n_nt} n_pt={d.n_pt} vocab={d.vocab_size}"
          f"{' tied' if g.tied else ''}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_engine_flag(p) -> None:
    p.add_argument("--engine", default="flash",
                   choices=("flash", "logeinsumexp", "logsumexp", "reference"),
                   help="inside-chart engine (default flash)")


def build_parser() -> _Parser:
    parser = _Parser(prog="flashpcfg",
                     description="Grammar induction with fused inside charts.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", help="fit a grammar to a text corpus")
    p.add_argument("--train", required=True, help="training corpus, one sentence per line")
    p.add_argument("--dev", required=True, help="development corpus for perplexity tracking")
    p.add_argument("--out", required=True, help="output directory for checkpoint files")
    p.add_argument("--config", help="JSON training config; flags below override it")
    p.add_argument("--parameterization", choices=("neural", "direct"))
    p.add_argument("--n-nt", dest="n_nt", type=int, help="nonterminal count")
    p.add_argument("--n-pt", dest="n_pt", type=int, help="preterminal count (default: n-nt)")
    p.add_argument("--d", type=int, help="embedding width")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-cap", dest="batch_cap", type=int,
                   help="max tokens per batch")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-len", dest="max_len", type=int,
                   help="drop training sentences longer than this")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--tied", action="store_true",
                   help="share left and right child distributions")
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--normalize-digits", action="store_true",
                   help="map every digit to 0 before counting tokens")
    _add_engine_flag(p)
    p.set_defaults(func=_cmd_train, engine=None)

    p = sub.add_parser("eval-ppl", help="per-token perplexity of a corpus")
    p.add_argument("--grammar", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", help="token file written by train; omit for integer-id input")
    _add_engine_flag(p)
    p.set_defaults(func=_cmd_eval_ppl)

    p = sub.add_parser("parse", help="print one bracketed tree per sentence")
    p.add_argument("--grammar", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab")
    p.add_argument("--decoder", default="mbr", choices=("mbr", "viterbi"))
    p.add_argument("--out", help="write trees here instead of stdout")
    _add_engine_flag(p)
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("eval-f1", help="sentence-level span F1 against a treebank")
    p.add_argument("--grammar", required=True)
    p.add_argument("--treebank", required=True, help="bracketed trees, one per line")
    p.add_argument("--vocab")
    p.add_argument("--decoder", default="mbr",
                   choices=("mbr", "viterbi", "right-branching", "left-branching"))
    p.add_argument("--csv", help="write per-sentence scores here")
    p.add_argument("--punct-tags", dest="punct_tags",
                   help="file of leaf tags to strip (default: built-in list)")
    p.add_argument("--keep-punct", dest="keep_punct", action="store_true",
                   help="score punctuation spans too")
    _add_engine_flag(p)
    p.set_defaults(func=_cmd_eval_f1, keep_punct=False)

    p = sub.add_parser("sample", help="sample sentences from a grammar")
    p.add_argument("--grammar", required=True)
    p.add_argument("--n", type=int, default=10, help="sentence count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write sentences here instead of stdout")
    p.add_argument("--trees", help="also write the sampled trees here")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("convert-lowrank",
                       help="expand a low-rank grammar into the simple form")
    p.add_argument("--input", required=True,
                   help="npz archive with U, V, W, log_root, log_emit")
    p.add_argument("--out", required=True, help="output grammar path")
    p.set_defaults(func=_cmd_convert_lowrank)

    p = sub.add_parser("bench", help="time the inside engines on a size grid")
    p.add_argument("--sizes", type=_int_list, default=[64, 128],
                   help="comma-separated symbol counts (default 64,128)")
    p.add_argument("--lengths", type=_int_list, default=[10, 20],
                   help="comma-separated sentence lengths (default 10,20)")
    p.add_argument("--variants", type=lambda s: s.split(","),
                   default=["logsumexp", "logeinsumexp", "flash"],
                   help="comma-separated engine names")
    p.add_argument("--batch", type=int, default=5, help="sentences per timing rep")
    p.add_argument("--repeats", type=int, default=5, help="reps per cell; median wins")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int,
                   help="BLAS worker cap (default: FLASHPCFG_THREADS or 1)")
    p.add_argument("--memory-budget-mb", dest="memory_budget_mb", type=float,
                   help="skip cells predicted to allocate more than this")
    p.add_argument("--out", help="write the CSV report here")
    p.add_argument("--table", action="store_true",
                   help="also print a fixed-width table")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("validate", help="check a grammar or parameter file")
    p.add_argument("path", help="file to check")
    p.set_defaults(func=_cmd_validate)

    return parser


def _data_error_types():
    from .bench import BenchError
    from .data import DataError
    from .grammar import GrammarError
    from .inside import InsideError
    from .neuralparam import ParamError
    from .parse import ParseError
    from .train import TrainError
    from .trees import TreeError
    return (GrammarError, InsideError, ParamError, ParseError, DataError,
            TrainError, TreeError, BenchError, OSError)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "command", None) is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _data_error_types() as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
