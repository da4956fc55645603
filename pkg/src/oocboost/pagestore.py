"""Device memory budget, ELLPACK page files and the prefetching page stream.

The budget stands in for accelerator memory: every structure that would live
on the device during training is allocated against it, and going over
capacity raises :class:`BudgetExceeded` instead of silently swapping.
"""
from __future__ import annotations

import json
import logging
import os
import queue
import shutil
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from ._kernels import words_for
from .errors import BudgetExceeded, FormatError
from .quantile import HistogramCuts

logger = logging.getLogger(__name__)

DEFAULT_PREFETCH_DEPTH = 2


class Allocation:
    """Token for bytes held against a :class:`MemoryBudget`."""

    __slots__ = ("budget", "nbytes", "what", "_live")

    def __init__(self, budget, nbytes, what):
        self.budget = budget
        self.nbytes = nbytes
        self.what = what
        self._live = True

    def release(self) -> None:
        if not self._live:
            raise RuntimeError(f"allocation {self.what!r} released twice")
        self._live = False
        self.budget._free(self.nbytes)

    @property
    def live(self) -> bool:
        return self._live

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._live:
            self.release()


class MemoryBudget:
    """Thread-safe byte counter with a hard capacity (``None`` = unlimited)."""

    def __init__(self, capacity_bytes: int | None = None):
        self.capacity_bytes = capacity_bytes
        self.in_use_bytes = 0
        self.peak_bytes = 0
        self.live_allocations = 0
        self._lock = threading.Lock()

    @property
    def available_bytes(self) -> float:
        if self.capacity_bytes is None:
            return float("inf")
        return self.capacity_bytes - self.in_use_bytes

    def allocate(self, nbytes: int, what: str = "") -> Allocation:
        nbytes = int(nbytes)
        if nbytes < 0:
            raise ValueError("cannot allocate a negative size")
        with self._lock:
            if self.capacity_bytes is not None and self.in_use_bytes + nbytes > self.capacity_bytes:
                raise BudgetExceeded(nbytes, self.capacity_bytes - self.in_use_bytes,
                                     self.capacity_bytes, what)
            self.in_use_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.in_use_bytes)
            self.live_allocations += 1
        return Allocation(self, nbytes, what)

    def _free(self, nbytes: int) -> None:
        with self._lock:
            self.in_use_bytes -= nbytes
            self.live_allocations -= 1

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.in_use_bytes

    def __repr__(self):
        return (f"MemoryBudget(capacity={self.capacity_bytes}, in_use={self.in_use_bytes}, "
                f"peak={self.peak_bytes})")


# ---------------------------------------------------------------- ELLPACK pages

ELLPACK_MAGIC = b"OOCE"
ELLPACK_VERSION = 1
_ELL_HEADER = struct.Struct("<4sIQIIQ")
_ELL_TRAILER = struct.Struct("<Q")


def ellpack_page_bytes(n_rows: int, row_stride: int, bits: int) -> int:
    """Exact serialized (and resident) size of an ELLPACK page."""
    return _ELL_HEADER.size + 8 * words_for(n_rows * row_stride, bits) + _ELL_TRAILER.size


@dataclass
class EllpackPage:
    n_rows: int
    row_stride: int
    bits_per_symbol: int
    words: np.ndarray
    base_row_id: int
    n_bins: int
    cuts_fingerprint: int = 0
    allocation: Allocation | None = field(default=None, repr=False, compare=False)

    def release(self) -> None:
        if self.allocation is not None and self.allocation.live:
            self.allocation.release()

    @property
    def sentinel(self) -> int:
        return self.n_bins

    @property
    def n_symbols(self) -> int:
        return self.n_rows * self.row_stride

    def nbytes(self) -> int:
        return ellpack_page_bytes(self.n_rows, self.row_stride, self.bits_per_symbol)

    def to_bytes(self) -> bytes:
        return b"".join([
            _ELL_HEADER.pack(ELLPACK_MAGIC, ELLPACK_VERSION, self.n_rows, self.row_stride,
                             self.bits_per_symbol, self.n_symbols),
            self.words.astype("<u8").tobytes(),
            _ELL_TRAILER.pack(self.base_row_id),
        ])

    @classmethod
    def from_bytes(cls, data: bytes, n_bins: int, cuts_fingerprint: int = 0) -> EllpackPage:
        if len(data) < _ELL_HEADER.size + _ELL_TRAILER.size:
            raise FormatError("truncated ELLPACK page")
        magic, version, n_rows, stride, bits, n_symbols = _ELL_HEADER.unpack_from(data)
        if magic != ELLPACK_MAGIC:
            raise FormatError(f"bad ELLPACK page magic {magic!r}")
        if version > ELLPACK_VERSION:
            raise FormatError(f"unsupported ELLPACK page version {version}")
        if n_symbols != n_rows * stride or not 1 <= bits <= 32:
            raise FormatError("inconsistent ELLPACK header")
        if len(data) != ellpack_page_bytes(n_rows, stride, bits):
            raise FormatError("ELLPACK page size does not match its header")
        n_words = words_for(n_symbols, bits)
        words = np.frombuffer(data, "<u8", n_words, _ELL_HEADER.size).astype(np.uint64)
        (base,) = _ELL_TRAILER.unpack_from(data, _ELL_HEADER.size + 8 * n_words)
        return cls(n_rows, stride, bits, words, base, n_bins, cuts_fingerprint)


@dataclass
class EllpackStore:
    """Directory of ELLPACK pages sharing one set of cuts.

    Labels are kept alongside as host data; they are never charged to the
    device budget.
    """

    directory: Path
    cuts: HistogramCuts
    row_stride: int
    bits_per_symbol: int
    page_rows: list[int]
    page_byte_limit: int
    page_bytes: list[int] = field(default_factory=list)

    META = "meta.json"
    CUTS = "cuts.bin"
    LABELS = "labels.npy"

    @property
    def page_count(self) -> int:
        return len(self.page_rows)

    @property
    def n_rows(self) -> int:
        return sum(self.page_rows)

    @property
    def base_row_ids(self) -> list[int]:
        return [int(x) for x in np.concatenate([[0], np.cumsum(self.page_rows)[:-1]])]

    @property
    def total_bytes(self) -> int:
        return sum(self.page_bytes)

    @property
    def max_page_bytes(self) -> int:
        return max(self.page_bytes) if self.page_bytes else 0

    def page_path(self, i: int) -> Path:
        return self.directory / f"page_{i:05d}.ell"

    def read_page(self, i: int) -> EllpackPage:
        try:
            data = self.page_path(i).read_bytes()
            return EllpackPage.from_bytes(data, self.cuts.total_bins, self.cuts.fingerprint)
        except (FormatError, OSError) as exc:
            raise FormatError(f"ELLPACK page {i} ({self.page_path(i)}): {exc}") from None

    def labels(self) -> np.ndarray:
        return np.load(self.directory / self.LABELS)

    def save_meta(self, labels: np.ndarray) -> None:
        (self.directory / self.CUTS).write_bytes(self.cuts.to_bytes())
        np.save(self.directory / self.LABELS, np.asarray(labels, dtype=np.float32))
        meta = {"format": "ellpack", "n_rows": self.n_rows, "num_features": self.cuts.num_features,
                "total_bins": self.cuts.total_bins, "row_stride": self.row_stride,
                "bits_per_symbol": self.bits_per_symbol, "cuts_fingerprint": self.cuts.fingerprint,
                "page_byte_limit": self.page_byte_limit, "page_rows": self.page_rows,
                "page_bytes": self.page_bytes}
        (self.directory / self.META).write_text(json.dumps(meta, indent=1))

    @classmethod
    def open(cls, directory) -> EllpackStore:
        directory = Path(directory)
        try:
            meta = json.loads((directory / cls.META).read_text())
            cuts, _ = HistogramCuts.from_buffer((directory / cls.CUTS).read_bytes())
        except FileNotFoundError:
            raise FileNotFoundError(f"no ELLPACK page store at {directory}") from None
        if meta.get("format") != "ellpack":
            raise FormatError(f"{directory} is not an ELLPACK page store")
        if cuts.fingerprint != meta["cuts_fingerprint"]:
            raise FormatError(f"{directory}: cuts do not match the page index")
        return cls(directory, cuts, meta["row_stride"], meta["bits_per_symbol"], meta["page_rows"],
                   meta["page_byte_limit"], meta["page_bytes"])

    def prefix(self, n_rows: int, directory) -> EllpackStore:
        """A new store holding the first ``n_rows`` rows.

        Whole pages are hard-linked when the filesystem allows it; only the
        last, truncated page is rewritten.
        """
        from .ellpack import slice_page

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("page_*.ell"):
            stale.unlink()
        rows, sizes = [], []
        left = n_rows
        for i, count in enumerate(self.page_rows):
            if left <= 0:
                break
            dst = directory / f"page_{len(rows):05d}.ell"
            if count <= left:
                try:
                    os.link(self.page_path(i), dst)
                except OSError:
                    shutil.copyfile(self.page_path(i), dst)
                rows.append(count)
                sizes.append(self.page_bytes[i])
            else:
                page = slice_page(self.read_page(i), 0, left)
                dst.write_bytes(page.to_bytes())
                rows.append(page.n_rows)
                sizes.append(page.nbytes())
            left -= rows[-1]
        out = EllpackStore(directory, self.cuts, self.row_stride, self.bits_per_symbol, rows,
                           self.page_byte_limit, sizes)
        out.save_meta(self.labels()[:n_rows])
        return out


# ---------------------------------------------------------------- streaming

@dataclass
class StreamStats:
    pages: int = 0
    max_resident: int = 0
    wait_seconds: float = 0.0
    reserved_bytes: int = 0

    _resident: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _enter(self):
        with self._lock:
            self._resident += 1
            self.max_resident = max(self.max_resident, self._resident)

    def _leave(self):
        with self._lock:
            self._resident -= 1


def _reserve(budget: MemoryBudget, slot_bytes: int, slots: int) -> tuple[Allocation, int]:
    """Reserve up to ``slots`` page slots, degrading to fewer when tight."""
    for k in range(slots, 0, -1):
        try:
            return budget.allocate(k * slot_bytes, f"{k} resident ELLPACK page(s)"), k
        except BudgetExceeded:
            if k == 1:
                raise
    raise AssertionError("unreachable")


def stream_pages(store: EllpackStore, budget: MemoryBudget,
                 prefetch_depth: int = DEFAULT_PREFETCH_DEPTH,
                 stats: StreamStats | None = None) -> Iterator[EllpackPage]:
    """Yield pages in index order while a background thread prefetches ahead.

    Up to ``prefetch_depth + 1`` page slots are reserved against the budget
    for the whole pass; a page's slot is returned when the consumer asks for
    the next page.
    """
    if prefetch_depth < 1:
        raise ValueError("prefetch_depth must be >= 1")
    n = store.page_count
    if n == 0:
        return
    stats = stats if stats is not None else StreamStats()
    reservation, slots = _reserve(budget, store.max_page_bytes, min(prefetch_depth + 1, n))
    stats.reserved_bytes = reservation.nbytes
    free_slots = threading.Semaphore(slots)
    ready: queue.Queue = queue.Queue()
    stop = threading.Event()

    def produce():
        for i in range(n):
            while not free_slots.acquire(timeout=0.05):
                if stop.is_set():
                    return
            if stop.is_set():
                return
            try:
                page = store.read_page(i)
            except Exception as exc:  # handed to the consumer
                ready.put((i, None, exc))
                return
            stats._enter()
            ready.put((i, page, None))

    worker = threading.Thread(target=produce, name="page-prefetch", daemon=True)
    worker.start()
    held = False
    try:
        for expected in range(n):
            if held:
                stats._leave()
                free_slots.release()
                held = False
            t0 = time.perf_counter()
            i, page, exc = ready.get()
            stats.wait_seconds += time.perf_counter() - t0
            if exc is not None:
                raise exc
            assert i == expected
            held = True
            stats.pages += 1
            yield page
    finally:
        stop.set()
        if held:
            stats._leave()
            free_slots.release()
        worker.join()
        while not ready.empty():
            _, page, _ = ready.get_nowait()
            if page is not None:
                stats._leave()
        reservation.release()


class ResidentPages:
    """Pages already held in device memory; iterating costs nothing."""

    def __init__(self, pages: list[EllpackPage]):
        self.pages = pages

    def __iter__(self):
        return iter(self.pages)

    @property
    def n_rows(self) -> int:
        return sum(p.n_rows for p in self.pages)


class StreamedPages:
    """Re-iterable view that runs one prefetching pass per iteration."""

    def __init__(self, store: EllpackStore, budget: MemoryBudget,
                 prefetch_depth: int = DEFAULT_PREFETCH_DEPTH):
        self.store = store
        self.budget = budget
        self.prefetch_depth = prefetch_depth
        self.passes = 0
        self.stats = StreamStats()

    def __iter__(self):
        self.passes += 1
        return stream_pages(self.store, self.budget, self.prefetch_depth, self.stats)

    @property
    def n_rows(self) -> int:
        return self.store.n_rows
