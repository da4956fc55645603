"""CSR to ELLPACK conversion and size-bounded page spilling."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import OOCError
from .ingest import CsrPage, PageSet, _concat
from .pagestore import EllpackPage, EllpackStore, MemoryBudget, ellpack_page_bytes
from .quantile import DEFAULT_MAX_BIN, HistogramCuts, build_cuts

logger = logging.getLogger(__name__)


def bits_for(total_bins: int) -> int:
    """Width needed for symbols 0..total_bins, the last one being padding."""
    return max(1, int(total_bins).bit_length())


def pack_symbols(symbols: np.ndarray, bits: int) -> np.ndarray:
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    out = np.zeros(K.words_for(len(symbols), bits), dtype=np.uint64)
    K.pack(symbols, bits, out)
    return out


def unpack_symbols(words: np.ndarray, bits: int, count: int, start: int = 0) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    K.unpack(words, bits, start, count, out)
    return out


def _alloc_page(n_rows, stride, bits, budget, what):
    if budget is None:
        return None
    return budget.allocate(ellpack_page_bytes(n_rows, stride, bits), what)


def build_ellpack_page(csr: CsrPage, cuts: HistogramCuts, budget: MemoryBudget | None = None,
                       row_stride: int | None = None) -> EllpackPage:
    """Bin every entry of ``csr`` and lay rows out at a fixed stride.

    The returned page holds its budget allocation; call ``page.release()``
    once it is no longer resident.
    """
    lengths = csr.row_lengths
    longest = int(lengths.max()) if csr.n_rows else 0
    stride = max(1, longest) if row_stride is None else row_stride
    if longest > stride:
        raise OOCError(f"row with {longest} entries exceeds row stride {stride}")
    if csr.n_entries and int(csr.feature_index.max()) >= cuts.num_features:
        raise OOCError(f"feature index {int(csr.feature_index.max())} outside cuts "
                       f"for {cuts.num_features} features")
    sentinel = cuts.total_bins
    bits = bits_for(sentinel)
    allocation = _alloc_page(csr.n_rows, stride, bits, budget, "ELLPACK page")
    try:
        bins = cuts.global_bins(csr.feature_index, csr.values)
        symbols = np.full(csr.n_rows * stride, sentinel, dtype=np.int64)
        rows = np.repeat(np.arange(csr.n_rows, dtype=np.int64), lengths)
        pos = rows * stride + (np.arange(csr.n_entries) - csr.row_offsets[rows])
        symbols[pos] = bins
        words = pack_symbols(symbols, bits)
    except Exception:
        if allocation is not None:
            allocation.release()
        raise
    return EllpackPage(csr.n_rows, stride, bits, words, csr.base_row_id, sentinel,
                       cuts.fingerprint, allocation)


def rows_per_page(page_byte_limit: int, row_stride: int, bits: int) -> int:
    """Largest row count whose packed page fits ``page_byte_limit``."""
    words = (page_byte_limit - ellpack_page_bytes(0, row_stride, bits)) // 8
    n = (64 * words) // (row_stride * bits)
    if n < 1:
        raise OOCError(f"page limit {page_byte_limit} cannot hold a single row "
                       f"({ellpack_page_bytes(1, row_stride, bits)} bytes)")
    return int(n)


def write_ellpack_pages(pages: PageSet, cuts: HistogramCuts, page_byte_limit: int,
                        budget: MemoryBudget | None, out_dir, row_stride: int | None = None) -> EllpackStore:
    """Accumulate CSR pages until a full ELLPACK page is predicted, then convert and spill.

    Pages are cut at row granularity so none exceeds ``page_byte_limit``;
    whatever is left at the end becomes one final, possibly small, page.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.glob("page_*.ell"):
        stale.unlink()
    if row_stride is None:
        row_stride = pages.row_stride or max(int(p.row_lengths.max()) for p in pages)
    row_stride = max(1, row_stride)
    bits = bits_for(cuts.total_bins)
    per_page = rows_per_page(page_byte_limit, row_stride, bits)

    page_rows: list[int] = []
    page_bytes: list[int] = []
    labels = []
    pending: list[CsrPage] = []
    pending_rows = 0

    def emit(csr: CsrPage):
        page = build_ellpack_page(csr, cuts, budget, row_stride)
        try:
            page.base_row_id = sum(page_rows)
            path = out_dir / f"page_{len(page_rows):05d}.ell"
            path.write_bytes(page.to_bytes())
        finally:
            page.release()
        page_rows.append(page.n_rows)
        page_bytes.append(page.nbytes())

    for csr in pages:
        labels.append(csr.labels)
        pending.append(csr)
        pending_rows += csr.n_rows
        if pending_rows >= per_page:
            merged = _concat(pending)
            start = 0
            while merged.n_rows - start >= per_page:
                emit(merged.slice(start, start + per_page))
                start += per_page
            pending = [merged.slice(start, merged.n_rows)] if start < merged.n_rows else []
            pending_rows = merged.n_rows - start
    if pending_rows:
        emit(_concat(pending))
    if not page_rows:
        raise OOCError("empty dataset")
    store = EllpackStore(out_dir, cuts, row_stride, bits, page_rows, page_byte_limit, page_bytes)
    store.save_meta(np.concatenate(labels))
    logger.info("wrote %d ELLPACK pages (%d rows, %d bytes) to %s",
                store.page_count, store.n_rows, store.total_bytes, out_dir)
    return store


def convert(pages: PageSet, out_dir, max_bin: int = DEFAULT_MAX_BIN,
            page_byte_limit: int | None = None, budget: MemoryBudget | None = None) -> EllpackStore:
    """Quantile pass followed by the ELLPACK pass."""
    cuts = build_cuts(pages, max_bin)
    limit = pages.page_byte_limit if page_byte_limit is None else page_byte_limit
    return write_ellpack_pages(pages, cuts, limit, budget, out_dir)


def decode_page(page: EllpackPage) -> np.ndarray:
    """All symbols as an ``(n_rows, row_stride)`` matrix."""
    return unpack_symbols(page.words, page.bits_per_symbol, page.n_symbols).reshape(
        page.n_rows, page.row_stride)


def decode_row(page: EllpackPage, row: int, cuts: HistogramCuts) -> list[tuple[int, int]]:
    if not 0 <= row < page.n_rows:
        raise IndexError(f"row {row} out of range for page with {page.n_rows} rows")
    symbols = unpack_symbols(page.words, page.bits_per_symbol, page.row_stride, row * page.row_stride)
    symbols = symbols[symbols != page.sentinel]
    features = cuts.feature_of_bin(symbols)
    return [(int(f), int(s - cuts.feature_offsets[f])) for f, s in zip(features, symbols)]


def empty_page(n_rows: int, row_stride: int, bits: int, n_bins: int, fingerprint: int,
               budget: MemoryBudget | None = None, what: str = "ELLPACK page") -> EllpackPage:
    """Zeroed page ready to be filled with :func:`_kernels.copy_rows`."""
    allocation = _alloc_page(n_rows, row_stride, bits, budget, what)
    words = np.zeros(K.words_for(n_rows * row_stride, bits), dtype=np.uint64)
    return EllpackPage(n_rows, row_stride, bits, words, 0, n_bins, fingerprint, allocation)


def copy_page_rows(pages, rows_per_source, budget: MemoryBudget | None, n_bins: int,
                   fingerprint: int, what: str = "ELLPACK page") -> EllpackPage:
    """Gather the given local rows of each source page into one new page."""
    pages = list(pages)
    stride, bits = pages[0].row_stride, pages[0].bits_per_symbol
    out = empty_page(sum(len(r) for r in rows_per_source), stride, bits, n_bins, fingerprint, budget, what)
    start = 0
    for page, rows in zip(pages, rows_per_source):
        K.copy_rows(page.words, bits, stride, np.asarray(rows, dtype=np.int64), out.words, start)
        start += len(rows)
    return out


def slice_page(page: EllpackPage, start: int, stop: int) -> EllpackPage:
    out = copy_page_rows([page], [np.arange(start, stop)], None, page.n_bins, page.cuts_fingerprint)
    out.base_row_id = page.base_row_id + start
    return out


def load_in_core(store: EllpackStore, budget: MemoryBudget | None,
                 prefetch_depth: int = 2) -> EllpackPage:
    """Concatenate every page of ``store`` into one resident page.

    The whole matrix is allocated first, so a dataset that cannot fit fails
    before any page is read.
    """
    from .pagestore import stream_pages

    stride, bits = store.row_stride, store.bits_per_symbol
    allocation = _alloc_page(store.n_rows, stride, bits, budget, "in-core ELLPACK matrix")
    try:
        words = np.zeros(K.words_for(store.n_rows * stride, bits), dtype=np.uint64)
        source = stream_pages(store, budget, prefetch_depth) if budget is not None else (
            store.read_page(i) for i in range(store.page_count))
        start = 0
        for page in source:
            K.copy_rows(page.words, bits, stride, np.arange(page.n_rows, dtype=np.int64), words, start)
            start += page.n_rows
    except Exception:
        if allocation is not None:
            allocation.release()
        raise
    return EllpackPage(store.n_rows, stride, bits, words, 0, store.cuts.total_bins,
                       store.cuts.fingerprint, allocation)
