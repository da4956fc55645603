import struct
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oocboost.errors import BudgetExceeded, FormatError
from oocboost.pagestore import (EllpackPage, EllpackStore, MemoryBudget, StreamedPages, StreamStats,
                                ellpack_page_bytes, stream_pages)


def test_allocate_over_budget():
    b = MemoryBudget(100)
    b.allocate(60)
    with pytest.raises(BudgetExceeded) as info:
        b.allocate(50)
    assert info.value.requested == 50 and info.value.available == 40


def test_release_frees_budget():
    b = MemoryBudget(100)
    b.allocate(60).release()
    b.allocate(50)
    assert b.peak_bytes == 60 and b.in_use_bytes == 50


def test_negative_allocation_rejected():
    with pytest.raises(ValueError):
        MemoryBudget(10).allocate(-1)


def test_double_release_rejected():
    a = MemoryBudget(10).allocate(5)
    a.release()
    with pytest.raises(RuntimeError):
        a.release()


def test_random_alloc_release_balance():
    rng = np.random.default_rng(0)
    b = MemoryBudget(10**6)
    live, in_use, peak = [], 0, 0
    for _ in range(1000):
        if live and rng.random() < 0.5:
            tok = live.pop(rng.integers(len(live)))
            in_use -= tok.nbytes
            tok.release()
        else:
            n = int(rng.integers(0, 5000))
            try:
                live.append(b.allocate(n))
                in_use += n
            except BudgetExceeded:
                assert in_use + n > 10**6
        peak = max(peak, in_use)
        assert b.in_use_bytes == in_use and 0 <= in_use <= 10**6
    assert b.peak_bytes == peak
    for tok in live:
        tok.release()
    assert b.in_use_bytes == 0 and b.live_allocations == 0


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 300)), max_size=200))
def test_budget_invariants(ops):
    b = MemoryBudget(1000)
    live = []
    for release, n in ops:
        if release and live:
            live.pop().release()
        else:
            try:
                live.append(b.allocate(n))
            except BudgetExceeded:
                pass
        assert 0 <= b.in_use_bytes <= b.peak_bytes <= 1000
    while live:
        live.pop().release()
    assert b.in_use_bytes == 0


@pytest.fixture
def five_pages(make_store):
    store = make_store(n_rows=5000, n_features=4, page_bytes=2500)
    assert store.page_count >= 5
    return store


def page_bytes_seen(store, budget, depth):
    return [p.to_bytes() for p in stream_pages(store, budget, depth)]


def test_stream_order_and_residency(five_pages):
    budget = MemoryBudget(None)
    stats = StreamStats()
    seen = [p.base_row_id for p in stream_pages(five_pages, budget, 1, stats)]
    assert seen == five_pages.base_row_ids
    assert stats.max_resident <= 2
    assert budget.peak_bytes <= 2 * five_pages.max_page_bytes


def test_slow_consumer_bounded(five_pages):
    budget = MemoryBudget(None)
    stats = StreamStats()
    for _ in stream_pages(five_pages, budget, 3, stats):
        time.sleep(0.02)  # give the prefetcher time to run as far ahead as it can
    assert stats.max_resident == 4
    assert budget.peak_bytes <= 4 * five_pages.max_page_bytes


def test_iterate_twice_identical(five_pages):
    b = MemoryBudget(None)
    assert page_bytes_seen(five_pages, b, 2) == page_bytes_seen(five_pages, b, 2)


@pytest.mark.parametrize("depth", [1, 2, 5])
def test_contents_independent_of_depth(five_pages, depth):
    ref = [five_pages.read_page(i).to_bytes() for i in range(five_pages.page_count)]
    assert page_bytes_seen(five_pages, MemoryBudget(None), depth) == ref


def test_budget_conservation_and_peak(five_pages):
    b = MemoryBudget(10**6)
    keep = b.allocate(1234)
    for depth in (1, 2, 3):
        b.reset_peak()
        for _ in stream_pages(five_pages, b, depth):
            pass
        assert b.in_use_bytes == 1234
        assert b.peak_bytes <= 1234 + (depth + 1) * five_pages.max_page_bytes
    keep.release()


def test_early_exit_releases(five_pages):
    b = MemoryBudget(None)
    for i, _ in enumerate(stream_pages(five_pages, b, 2)):
        if i == 1:
            break
    assert b.in_use_bytes == 0


def test_budget_too_small_for_one_page(five_pages):
    with pytest.raises(BudgetExceeded):
        next(iter(stream_pages(five_pages, MemoryBudget(five_pages.max_page_bytes - 1), 2)))


def test_tight_budget_degrades_depth(five_pages):
    b = MemoryBudget(2 * five_pages.max_page_bytes)
    stats = StreamStats()
    assert len(list(stream_pages(five_pages, b, 4, stats))) == five_pages.page_count
    assert stats.max_resident <= 2


def test_corrupt_page_reports_index(five_pages):
    path = five_pages.page_path(3)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="page 3"):
        for _ in stream_pages(five_pages, MemoryBudget(None), 2):
            pass


def test_prefetch_depth_validated(five_pages):
    with pytest.raises(ValueError):
        next(iter(stream_pages(five_pages, MemoryBudget(None), 0)))


def test_streamed_pages_counts_passes(five_pages):
    sp = StreamedPages(five_pages, MemoryBudget(None), 2)
    for _ in range(3):
        list(sp)
    assert sp.passes == 3 and sp.n_rows == five_pages.n_rows


def test_page_file_layout():
    words = np.array([0x0123456789ABCDEF, 7], dtype=np.uint64)
    page = EllpackPage(n_rows=3, row_stride=5, bits_per_symbol=7, words=words, base_row_id=42, n_bins=100)
    data = page.to_bytes()
    assert struct.unpack_from("<4sIQIIQ", data) == (b"OOCE", 1, 3, 5, 7, 15)
    assert struct.unpack_from("<2Q", data, 32) == (0x0123456789ABCDEF, 7)
    assert struct.unpack_from("<Q", data, 48) == (42,)
    assert len(data) == ellpack_page_bytes(3, 5, 7) == 56
    back = EllpackPage.from_bytes(data, 100)
    assert back.to_bytes() == data


@pytest.mark.parametrize("mutate", ["truncate", "version", "symbols"])
def test_bad_page_rejected(mutate):
    page = EllpackPage(2, 2, 3, np.array([5], np.uint64), 0, 4)
    data = bytearray(page.to_bytes())
    if mutate == "truncate":
        data = data[:-3]
    elif mutate == "version":
        data[4:8] = struct.pack("<I", 99)
    else:
        data[24:32] = struct.pack("<Q", 5)
    with pytest.raises(FormatError):
        EllpackPage.from_bytes(bytes(data), 4)


def test_store_reopen_and_prefix(five_pages, tmp_path):
    again = EllpackStore.open(five_pages.directory)
    assert again.page_rows == five_pages.page_rows and again.cuts == five_pages.cuts
    n = five_pages.page_rows[0] + 7
    pre = five_pages.prefix(n, tmp_path / "pre")
    assert pre.n_rows == n and pre.page_rows == [five_pages.page_rows[0], 7]
    assert pre.read_page(0).to_bytes() == five_pages.read_page(0).to_bytes()
    np.testing.assert_array_equal(pre.labels(), five_pages.labels()[:n])
