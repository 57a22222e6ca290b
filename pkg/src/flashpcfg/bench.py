"""Benchmark harness comparing inside-algorithm variants.

Times the chart engines on deterministic random inputs and records peak
transient allocation per the arena accounting in ``inside``.  The CSV output
is the contract; ratios are derived from the raw columns at render time and
never stored.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grammar import GrammarDims, SimpleGrammar, random_grammar
from .inside import AllocMeter, ENGINES, InsideError, inside_flash, inside_logeinsumexp, inside_reference

BENCH_VARIANTS = ("logsumexp", "logeinsumexp", "flash")
BENCH_BASELINE = "logsumexp"
CSV_HEADER = "# bench-v1"
CSV_COLUMNS = ("variant", "n_sym", "length", "batch", "threads",
               "median_ms", "peak_transient_bytes", "speed_ratio",
               "memory_ratio", "status")


class BenchError(Exception):
    """Raised for invalid harness inputs or a failed correctness gate."""


@dataclass(frozen=True)
class BenchRow:
    variant: str
    n_sym: int
    length: int
    batch: int
    threads: int
    median_ms: float
    peak_transient_bytes: int
    skipped: bool = False


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    baseline: str = BENCH_BASELINE

    def _group(self, n_sym: int, length: int) -> list[BenchRow]:
        return [r for r in self.rows
                if r.n_sym == n_sym and r.length == length and not r.skipped]

    def speed_ratio(self, row: BenchRow) -> float | None:
        """Speedup over the baseline variant in the same (n_sym, length) group."""
        if row.skipped:
            return None
        base = [r for r in self._group(row.n_sym, row.length)
                if r.variant == self.baseline]
        if not base or row.median_ms <= 0.0:
            return None
        return base[0].median_ms / row.median_ms

    def memory_ratio(self, row: BenchRow) -> float | None:
        """Peak transient bytes relative to the leanest variant in the group."""
        if row.skipped:
            return None
        group = self._group(row.n_sym, row.length)
        best = min((r.peak_transient_bytes for r in group), default=0)
        if best <= 0:
            return None
        return row.peak_transient_bytes / best

    def to_csv(self) -> str:
        lines = [CSV_HEADER, ",".join(CSV_COLUMNS)]
        for row in self.rows:
            speed = self.speed_ratio(row)
            mem = self.memory_ratio(row)
            lines.append(",".join((
                row.variant,
                str(row.n_sym),
                str(row.length),
                str(row.batch),
                str(row.threads),
                "" if row.skipped else f"{row.median_ms:.3f}",
                "" if row.skipped else str(row.peak_transient_bytes),
                "" if speed is None else f"{speed:.3f}",
                "" if mem is None else f"{mem:.3f}",
                "skipped" if row.skipped else "ok",
            )))
        lines.append(f"# host: {host_description()}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def host_description() -> str:
    return (f"{platform.system()} {platform.machine()}, "
            f"{os.cpu_count()} cpu, python {platform.python_version()}, "
            f"numpy {np.__version__}")


def resolve_threads(requested: int | None) -> int:
    """Worker count: explicit flag, then FLASHPCFG_THREADS, then 1."""
    if requested is not None:
        value = requested
    else:
        env = os.environ.get("FLASHPCFG_THREADS", "").strip()
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise BenchError(f"FLASHPCFG_THREADS is not an integer: {env!r}")
    if value < 1:
        raise BenchError(f"thread count must be >= 1, got {value}")
    return value


def pin_threads(n: int) -> None:
    """Cap the BLAS worker pools used by the matmul projections."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
    except ImportError:
        return
    threadpoolctl.threadpool_limits(limits=n)


def predicted_peak_bytes(variant: str, n_sym: int, length: int) -> int:
    """Upper-bound estimate of a variant's peak transient allocation.

    Used only for the memory-budget gate, so it errs high: the reference
    engine materializes per-span projection tensors of n_nt * n_sym floats,
    the other two peak on width-level buffers.
    """
    n_nt = max(n_sym // 2, 1)
    merge_rows = max((w - 1) * (length - w + 1) for w in range(2, length + 1)) \
        if length >= 2 else 1
    if variant == "logsumexp":
        span = length * n_nt * n_sym * 2 + merge_rows * n_nt * 2
    elif variant == "logeinsumexp":
        span = length * n_sym * 2 + merge_rows * n_nt * 2 + length * n_nt * 2
    elif variant == "flash":
        span = length * n_sym + length * n_nt * 2 + merge_rows * n_nt
    else:
        raise BenchError(f"unknown variant {variant!r}; "
                         f"choose from {list(BENCH_VARIANTS)}")
    rules = n_nt * n_sym * 2
    return (span + rules) * 8 * 2


def _bench_inputs(n_sym: int, length: int, batch: int,
                  seed: int) -> tuple[SimpleGrammar, np.ndarray]:
    n_nt = max(n_sym // 2, 1)
    n_pt = n_sym - n_nt
    if n_pt < 1:
        raise BenchError(f"n_sym must be >= 2, got {n_sym}")
    vocab = 64
    dims = GrammarDims(n_nt, n_pt, vocab)
    g = random_grammar(dims, seed=(n_sym * 1000003 + length * 9176 + seed) % (2 ** 31))
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, vocab, size=(batch, length), dtype=np.int64)
    return g, tokens


def _run_variant(variant: str, g: SimpleGrammar,
                 tokens: np.ndarray) -> tuple[list[float], int]:
    run = ENGINES[variant]
    log_zs: list[float] = []
    peak = 0
    for sent in tokens:
        meter = AllocMeter()
        chart = run(g, sent, meter=meter)
        log_zs.append(chart.log_z)
        peak = max(peak, meter.peak_transient_bytes)
    return log_zs, peak


def _correctness_gate(variants: list[str], g: SimpleGrammar,
                      tokens: np.ndarray, tol: float = 1e-8) -> None:
    scores = {v: np.array(_run_variant(v, g, tokens)[0]) for v in variants}
    ref = scores[variants[0]]
    for v in variants[1:]:
        gap = float(np.max(np.abs(scores[v] - ref)))
        if not np.isfinite(gap) or gap > tol:
            raise BenchError(
                f"correctness gate failed: {v} vs {variants[0]} log_z "
                f"differ by {gap:.3e} at n_sym={g.dims.n_sym} "
                f"l={tokens.shape[1]} (tol {tol:g})")


def bench_inside(sizes, lengths, variants=BENCH_VARIANTS, batch: int = 5,
                 repeats: int = 5, seed: int = 0, threads: int | None = None,
                 memory_budget_bytes: int | None = None) -> BenchReport:
    """Time the inside engines over a (n_sym, length) grid.

    Inputs are deterministic per seed.  All requested variants must agree on
    every sentence's log_z before any timing happens; a configuration whose
    predicted footprint exceeds the budget produces a row marked skipped
    instead of running.  Repeats are interleaved across variants so drift in
    background load hits every engine alike, and the median rep is reported.
    """
    sizes = list(sizes)
    lengths = list(lengths)
    variants = list(variants)
    if not sizes or not lengths or not variants:
        raise BenchError("sizes, lengths, and variants must be non-empty")
    for v in variants:
        if v not in BENCH_VARIANTS:
            raise BenchError(f"unknown variant {v!r}; "
                             f"choose from {list(BENCH_VARIANTS)}")
    if len(set(variants)) != len(variants):
        raise BenchError("duplicate variants")
    if batch < 1 or repeats < 1:
        raise BenchError("batch and repeats must be >= 1")
    for length in lengths:
        if length < 1:
            raise BenchError(f"length must be >= 1, got {length}")
    n_threads = resolve_threads(threads)
    pin_threads(n_threads)

    report = BenchReport()
    for n_sym in sizes:
        for length in lengths:
            g, tokens = _bench_inputs(n_sym, length, batch, seed)
            active = []
            for v in variants:
                over = (memory_budget_bytes is not None
                        and predicted_peak_bytes(v, n_sym, length)
                        > memory_budget_bytes)
                if over:
                    report.rows.append(BenchRow(
                        variant=v, n_sym=n_sym, length=length, batch=batch,
                        threads=n_threads, median_ms=0.0,
                        peak_transient_bytes=0, skipped=True))
                else:
                    active.append(v)
            if not active:
                continue
            _correctness_gate(active, g, tokens)
            times: dict[str, list[float]] = {v: [] for v in active}
            peaks: dict[str, int] = {}
            for rep in range(repeats):
                for v in active:
                    t0 = time.perf_counter()
                    _, peak = _run_variant(v, g, tokens)
                    times[v].append((time.perf_counter() - t0) * 1e3)
                    peaks[v] = peak
            for v in active:
                report.rows.append(BenchRow(
                    variant=v, n_sym=n_sym, length=length, batch=batch,
                    threads=n_threads,
                    median_ms=statistics.median(times[v]),
                    peak_transient_bytes=peaks[v]))
    return report


def format_report(report: BenchReport) -> str:
    """Fixed-width table for terminal display; the CSV stays the contract."""
    head = (f"{'variant':<14} {'n_sym':>6} {'len':>4} {'batch':>5} "
            f"{'ms/batch':>10} {'peak MiB':>9} {'speed':>7} {'mem':>6}")
    lines = [head, "-" * len(head)]
    for row in report.rows:
        if row.skipped:
            lines.append(f"{row.variant:<14} {row.n_sym:>6} {row.length:>4} "
                         f"{row.batch:>5} {'skipped':>10}")
            continue
        speed = report.speed_ratio(row)
        mem = report.memory_ratio(row)
        lines.append(
            f"{row.variant:<14} {row.n_sym:>6} {row.length:>4} "
            f"{row.batch:>5} {row.median_ms:>10.2f} "
            f"{row.peak_transient_bytes / 2**20:>9.3f} "
            f"{'' if speed is None else f'{speed:.2f}x':>7} "
            f"{'' if mem is None else f'{mem:.2f}x':>6}")
    lines.append(f"host: {host_description()}")
    return "\n".join(lines)
