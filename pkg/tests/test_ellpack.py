import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oocboost.ellpack import (bits_for, build_ellpack_page, decode_page, decode_row, pack_symbols,
                              rows_per_page, slice_page, unpack_symbols, write_ellpack_pages)
from oocboost.errors import BudgetExceeded, OOCError
from oocboost.ingest import CsrPage, ingest_blocks, ingest_stream, synthetic_blocks
from oocboost.pagestore import MemoryBudget, ellpack_page_bytes
from oocboost.quantile import HistogramCuts, build_cuts

from oracles import pack_reference

MIB = 1 << 20


@pytest.fixture
def two_feature_cuts():
    return HistogramCuts(np.array([2, 4, 1, 3], np.float32), np.array([0, 2, 4]), np.array([0, 0], np.float32))


def scalar_symbols(row, cuts, stride):
    """Global bin per entry by linear scan of the cut list, padded with the sentinel."""
    out = []
    for f, v in row:
        c = cuts.cut_values[cuts.feature_offsets[f]:cuts.feature_offsets[f + 1]]
        local = next((b for b, cut in enumerate(c) if v <= cut), len(c) - 1)
        out.append(int(cuts.feature_offsets[f]) + local)
    return out + [cuts.total_bins] * (stride - len(out))


def test_global_index_example(two_feature_cuts):
    row = [(0, 3.0), (1, 0.5)]
    page = build_ellpack_page(CsrPage.from_rows([(1.0, row)]), two_feature_cuts)
    assert page.bits_per_symbol == 3 and page.sentinel == 4
    assert decode_page(page).tolist() == [[1, 2]] == [scalar_symbols(row, two_feature_cuts, 2)]


def test_empty_row_is_all_sentinel(two_feature_cuts):
    page = build_ellpack_page(CsrPage.from_rows([(0.0, [])]), two_feature_cuts, row_stride=2)
    assert decode_page(page).tolist() == [[4, 4]]
    assert decode_row(page, 0, two_feature_cuts) == []


def test_row_stride_is_max_entries(two_feature_cuts, tmp_path):
    cuts = HistogramCuts(np.array([1, 1, 1], np.float32), np.array([0, 1, 2, 3]), np.zeros(3, np.float32))
    rows = [(0.0, [(0, 1.0), (1, 1.0), (2, 1.0)]), (1.0, [(0, 1.0)]), (0.0, [(1, 1.0), (2, 1.0)])]
    assert build_ellpack_page(CsrPage.from_rows(rows), cuts).row_stride == 3
    store = write_ellpack_pages(ingest_stream(rows, 1 << 20, tmp_path / "csr"), cuts, 1 << 20, None, tmp_path / "e")
    assert store.row_stride == 3


def test_decode_example(two_feature_cuts):
    page = build_ellpack_page(CsrPage.from_rows([(1.0, [(0, 3.0), (1, 0.5)])]), two_feature_cuts)
    assert decode_row(page, 0, two_feature_cuts) == [(0, 1), (1, 0)]
    with pytest.raises(IndexError):
        decode_row(page, 1, two_feature_cuts)


def test_stride_too_small_rejected(two_feature_cuts):
    with pytest.raises(OOCError):
        build_ellpack_page(CsrPage.from_rows([(1.0, [(0, 3.0), (1, 0.5)])]), two_feature_cuts, row_stride=1)


def test_non_finite_value_rejected(two_feature_cuts):
    csr = CsrPage(np.array([0, 1]), np.array([0], np.uint32), np.array([np.nan], np.float32), np.zeros(1, np.float32))
    budget = MemoryBudget(None)
    with pytest.raises(OOCError):
        build_ellpack_page(csr, two_feature_cuts, budget)
    assert budget.in_use_bytes == 0


@pytest.mark.parametrize("bits", range(1, 33))
def test_pack_matches_reference(bits):
    rng = np.random.default_rng(bits)
    n = int(rng.integers(1, 300))
    symbols = rng.integers(0, 1 << bits, size=n, dtype=np.int64)
    words = pack_symbols(symbols, bits)
    assert words.tolist() == pack_reference(symbols.tolist(), bits)
    np.testing.assert_array_equal(unpack_symbols(words, bits, n), symbols)
    start = int(rng.integers(0, n))
    np.testing.assert_array_equal(unpack_symbols(words, bits, n - start, start), symbols[start:])


@given(st.integers(1, 32), st.lists(st.integers(0, 2**32 - 1), max_size=200))
def test_pack_round_trip(bits, raw):
    symbols = np.array([s & ((1 << bits) - 1) for s in raw], dtype=np.int64)
    np.testing.assert_array_equal(unpack_symbols(pack_symbols(symbols, bits), bits, len(symbols)), symbols)


@pytest.mark.parametrize("total_bins,bits", [(1, 1), (3, 2), (4, 3), (255, 8), (256, 9), (12800, 14)])
def test_bits_for(total_bins, bits):
    assert bits_for(total_bins) == bits == math.ceil(math.log2(total_bins + 1))


def random_rows(rng, n, nf):
    rows = []
    for _ in range(n):
        feats = np.sort(rng.choice(nf, size=rng.integers(0, nf + 1), replace=False))
        rows.append((float(rng.integers(0, 2)), [(int(f), float(np.float32(rng.normal()))) for f in feats]))
    return rows


def test_decode_encode_identity_1000_rows():
    rng = np.random.default_rng(0)
    rows = random_rows(rng, 1000, 7)
    csr = CsrPage.from_rows(rows)
    cuts = build_cuts([csr], 16, num_features=7)
    page = build_ellpack_page(csr, cuts)
    for i, (_, entries) in enumerate(rows):
        expect = [(f, cuts.lookup_bin(f, v)) for f, v in entries]
        assert decode_row(page, i, cuts) == expect
        assert decode_page(page)[i].tolist() == scalar_symbols(entries, cuts, page.row_stride)


def test_one_page_when_everything_fits(make_store):
    store = make_store(n_rows=500, n_features=4, page_bytes=32 * MIB)
    assert store.total_bytes < 10 * 1024 and store.page_count == 1


def test_page_count_arithmetic_one_kib_rows():
    # 1 KiB packed rows: 1024 symbols of 8 bits
    per_page = rows_per_page(4 * MIB, 1024, 8)
    assert per_page == (4 * MIB - ellpack_page_bytes(0, 1024, 8)) // 1024
    assert ellpack_page_bytes(per_page, 1024, 8) <= 4 * MIB < ellpack_page_bytes(per_page + 1, 1024, 8)
    counts = [min(per_page, 10_000 - s) for s in range(0, 10_000, per_page)]
    assert len(counts) == 3 and counts[:2] == [per_page] * 2 and counts[2] == 10_000 - 2 * per_page


@pytest.mark.parametrize("limit", [700, 2048, 5000])
def test_flushed_sizes_match_prediction(make_store, limit):
    store = make_store(n_rows=3000, n_features=5, page_bytes=limit)
    per_page = rows_per_page(limit, store.row_stride, store.bits_per_symbol)
    assert store.page_count == math.ceil(3000 / per_page)
    assert store.page_rows[:-1] == [per_page] * (store.page_count - 1)
    for i, size in enumerate(store.page_bytes):
        assert size <= limit
        assert size == len(store.page_path(i).read_bytes())
        assert size == ellpack_page_bytes(store.page_rows[i], store.row_stride, store.bits_per_symbol)


def test_page_limit_below_one_row():
    with pytest.raises(OOCError):
        rows_per_page(40, 50, 9)


def whole_symbols(store):
    return np.concatenate([decode_page(store.read_page(i)) for i in range(store.page_count)])


@given(st.integers(0, 2**32 - 1), st.integers(300, 4000), st.integers(300, 4000))
def test_page_split_independence(tmp_path_factory, seed, csr_limit, ell_limit):
    d = tmp_path_factory.mktemp("split")
    blocks = list(synthetic_blocks(700, 5, seed % 1000, missing_rate=0.3, block_rows=100))
    csr_one = ingest_blocks(blocks, 1 << 22, d / "csr1")
    csr_many = ingest_blocks(blocks, csr_limit, d / "csr2")
    cuts = build_cuts(csr_one, 16)
    one = write_ellpack_pages(csr_one, cuts, 1 << 22, None, d / "e1")
    many = write_ellpack_pages(csr_many, cuts, ell_limit, None, d / "e2")
    assert one.page_count == 1
    np.testing.assert_array_equal(whole_symbols(one), whole_symbols(many))
    # and equal to converting the whole dataset at once, split at the same row boundaries
    whole = build_ellpack_page(CsrPage.from_dense(*_dense(blocks)), cuts, row_stride=many.row_stride)
    for i, base in enumerate(many.base_row_ids):
        page = many.read_page(i)
        assert page.base_row_id == base
        ref = slice_page(whole, base, base + page.n_rows)
        assert page.words.tolist() == ref.words.tolist()
    np.testing.assert_array_equal(many.labels(), one.labels())


def _dense(blocks):
    nf = 5
    X = np.concatenate([b.to_dense(nf) for b in blocks])
    return X, np.concatenate([b.labels for b in blocks])


def test_compression_bound(make_store):
    store = make_store(n_rows=2500, n_features=6, page_bytes=3000)
    for i in range(store.page_count):
        page = store.read_page(i)
        payload = page.n_rows * page.row_stride * page.bits_per_symbol / 8
        body = page.nbytes() - ellpack_page_bytes(0, page.row_stride, page.bits_per_symbol)
        assert payload <= body < payload + 8


def test_budget_exceeded_leaves_budget_clean(two_feature_cuts):
    csr = CsrPage.from_rows([(1.0, [(0, 3.0), (1, 0.5)])] * 100)
    budget = MemoryBudget(50)
    with pytest.raises(BudgetExceeded):
        build_ellpack_page(csr, two_feature_cuts, budget)
    assert budget.in_use_bytes == 0
    ok = MemoryBudget(ellpack_page_bytes(100, 2, 3))
    page = build_ellpack_page(csr, two_feature_cuts, ok)
    assert ok.in_use_bytes == page.nbytes()
    page.release()
    assert ok.in_use_bytes == 0
