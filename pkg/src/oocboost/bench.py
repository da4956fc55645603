"""Largest trainable dataset per training mode under a fixed device budget."""
from __future__ import annotations

import logging
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .booster import BoosterParams, train
from .ellpack import bits_for, pack_symbols, rows_per_page
from .errors import BudgetExceeded
from .ingest import SYNTH_BLOCK_ROWS, synthetic_block, synthetic_blocks
from .pagestore import EllpackPage, EllpackStore, MemoryBudget, StreamedPages
from .quantile import DEFAULT_MAX_BIN, QuantileSketch
from .tree import grow_tree

logger = logging.getLogger(__name__)

MIB = 1 << 20
SKETCH_ROWS = 8 * SYNTH_BLOCK_ROWS


@dataclass(frozen=True)
class BenchMode:
    name: str
    mode: str
    subsample: float

    @property
    def label(self) -> str:
        if self.mode == "in_core":
            return "in_core"
        return f"out_of_core f={self.subsample:g}"


def default_modes(low_rate: float = 0.1) -> list[BenchMode]:
    return [BenchMode("in_core", "in_core", 1.0),
            BenchMode("ooc_full", "out_of_core", 1.0),
            BenchMode("ooc_sampled", "out_of_core", low_rate)]


@dataclass
class BenchConfig:
    memory_budget: int = 64 * MIB
    num_features: int = 50
    page_bytes: int | None = None  # default: budget / 16
    max_bin: int = DEFAULT_MAX_BIN
    max_depth: int = 6
    sampling_method: str = "mvs"
    low_rate: float = 0.1
    seed: int = 0
    prefetch_depth: int = 2
    start_rows: int = 4 * SYNTH_BLOCK_ROWS
    resolution: float = 0.01
    workdir: Path | None = None

    @property
    def page_limit(self) -> int:
        return self.page_bytes if self.page_bytes is not None else self.memory_budget // 16


class SyntheticStore:
    """ELLPACK pages of the synthetic task, extended on demand.

    Cuts come from a fixed leading sample, and rows are prefix-stable, so a
    store grown to N rows holds the same first rows as one grown to M > N.
    """

    def __init__(self, directory, num_features: int, seed: int, max_bin: int, page_bytes: int):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.num_features = num_features
        self.seed = seed
        sketch = QuantileSketch(num_features, max_bin)
        for block in synthetic_blocks(SKETCH_ROWS, num_features, seed):
            sketch.push(block)
        self.cuts = sketch.finalize()
        self.bits = bits_for(self.cuts.total_bins)
        self.rows_per_page = rows_per_page(page_bytes, num_features, self.bits)
        self.store = EllpackStore(self.directory, self.cuts, num_features, self.bits, [], page_bytes, [])
        self._labels: list[np.ndarray] = []
        self._pending_bins: list[np.ndarray] = []
        self._pending_rows = 0
        self._next_block = 0

    @property
    def n_rows(self) -> int:
        return self.store.n_rows

    def ensure(self, n_rows: int) -> EllpackStore:
        grew = False
        while self.store.n_rows < n_rows:
            self._write_page()
            grew = True
        if grew or not (self.directory / EllpackStore.META).exists():
            self.store.save_meta(np.concatenate(self._labels))
        return self.store

    def _write_page(self) -> None:
        rpp = self.rows_per_page
        while self._pending_rows < rpp:
            X, y = synthetic_block(self._next_block, self.num_features, self.seed)
            self._next_block += 1
            self._pending_bins.append(self.cuts.bin_dense(X))
            self._labels.append(y)
            self._pending_rows += len(y)
        bins = np.concatenate(self._pending_bins)
        page_bins, rest = bins[:rpp], bins[rpp:]
        self._pending_bins = [rest]
        self._pending_rows = len(rest)
        words = pack_symbols(page_bins.ravel(), self.bits)
        page = EllpackPage(rpp, self.num_features, self.bits, words, self.store.n_rows,
                           self.cuts.total_bins, self.cuts.fingerprint)
        i = self.store.page_count
        self.store.page_path(i).write_bytes(page.to_bytes())
        self.store.page_rows.append(rpp)
        self.store.page_bytes.append(page.nbytes())


@dataclass
class Probe:
    rows: int
    ok: bool
    peak_bytes: int
    seconds: float


@dataclass
class ModeResult:
    mode: BenchMode
    max_rows: int
    probes: list[Probe] = field(default_factory=list)


def _probe(source: SyntheticStore, n_rows: int, mode: BenchMode, cfg: BenchConfig, scratch: Path) -> Probe:
    source.ensure(n_rows)
    store = source.store.prefix(n_rows, scratch)
    params = BoosterParams(num_rounds=1, mode=mode.mode, subsample=mode.subsample,
                           sampling_method=cfg.sampling_method, max_depth=cfg.max_depth,
                           seed=cfg.seed, prefetch_depth=cfg.prefetch_depth)
    budget = MemoryBudget(cfg.memory_budget)
    t0 = time.perf_counter()
    try:
        train(store, params, budget)
        ok = True
    except BudgetExceeded:
        ok = False
    return Probe(n_rows, ok, budget.peak_bytes, time.perf_counter() - t0)


def _round_rows(n: float) -> int:
    return max(2, int(n))


def search_max_rows(source: SyntheticStore, mode: BenchMode, cfg: BenchConfig, scratch: Path) -> ModeResult:
    """Exponential growth to the first failure, then bisection to ``cfg.resolution``."""
    result = ModeResult(mode, 0)

    def probe(n):
        p = _probe(source, n, mode, cfg, scratch)
        result.probes.append(p)
        logger.info("%s: %d rows -> %s (peak %d bytes, %.2fs)", mode.label, n,
                    "ok" if p.ok else "over budget", p.peak_bytes, p.seconds)
        return p.ok

    n = cfg.start_rows
    if probe(n):
        lo = n
        while True:
            n *= 2
            if not probe(n):
                hi = n
                break
            lo = n
    else:
        lo, hi = 0, n
    while hi - lo > max(1, int(cfg.resolution * max(lo, 1))):
        mid = _round_rows((lo + hi) // 2)
        if mid <= lo:
            break
        if probe(mid):
            lo = mid
        else:
            hi = mid
    result.max_rows = lo
    return result


def format_report(cfg: BenchConfig, results: list[ModeResult]) -> str:
    base = next((r.max_rows for r in results if r.mode.mode == "in_core"), 0)
    lines = [
        f"memory budget: {cfg.memory_budget} bytes; features: {cfg.num_features}; "
        f"page bytes: {cfg.page_limit}; max_bin: {cfg.max_bin}; max_depth: {cfg.max_depth}; "
        f"sampling: {cfg.sampling_method}; seed: {cfg.seed}",
        f"{'mode':<24} {'max_rows':>12} {'ratio_vs_in_core':>18}",
    ]
    for r in results:
        ratio = f"{r.max_rows / base:.2f}" if base else "n/a"
        lines.append(f"{r.mode.label:<24} {r.max_rows:>12} {ratio:>18}")
    return "\n".join(lines)


def prefetch_overlap(source: SyntheticStore, n_rows: int, cfg: BenchConfig, scratch: Path) -> dict:
    """One streamed tree at ``n_rows``: passes, wall time and time spent waiting on pages."""
    store = source.store.prefix(n_rows, scratch)
    budget = MemoryBudget(cfg.memory_budget)
    pages = StreamedPages(store, budget, cfg.prefetch_depth)
    labels = store.labels().astype(np.float64)
    gpair = np.stack([0.5 - labels, np.full_like(labels, 0.25)], axis=1).astype(np.float32)
    t0 = time.perf_counter()
    grow_tree(pages, gpair, BoosterParams(max_depth=cfg.max_depth).tree_params(), store.cuts, budget)
    total = time.perf_counter() - t0
    return {"rows": n_rows, "passes": pages.passes, "seconds": total,
            "wait_seconds": pages.stats.wait_seconds, "max_resident_pages": pages.stats.max_resident}


def run_bench(cfg: BenchConfig, modes: list[BenchMode] | None = None, log=sys.stderr) -> tuple[str, list[ModeResult]]:
    modes = modes if modes is not None else default_modes(cfg.low_rate)
    own_dir = cfg.workdir is None
    work = Path(tempfile.mkdtemp(prefix="oocbench-")) if own_dir else Path(cfg.workdir)
    try:
        source = SyntheticStore(work / "master", cfg.num_features, cfg.seed, cfg.max_bin, cfg.page_limit)
        results = []
        for mode in modes:
            t0 = time.perf_counter()
            res = search_max_rows(source, mode, cfg, work / "probe")
            results.append(res)
            if log is not None:
                print(f"[bench] {mode.label}: max_rows={res.max_rows} after {len(res.probes)} probes "
                      f"in {time.perf_counter() - t0:.1f}s", file=log)
        if log is not None:
            full = next((r for r in results if r.mode.mode == "out_of_core" and r.mode.subsample == 1.0), None)
            if full is not None and full.max_rows:
                o = prefetch_overlap(source, full.max_rows, cfg, work / "probe")
                print(f"[bench] streamed tree at {o['rows']} rows: {o['passes']} passes, "
                      f"{o['seconds']:.2f}s, {o['wait_seconds']:.2f}s waiting on pages, "
                      f"max {o['max_resident_pages']} pages resident", file=log)
        return format_report(cfg, results), results
    finally:
        if own_dir:
            shutil.rmtree(work, ignore_errors=True)
