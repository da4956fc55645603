import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oocboost.errors import OOCError
from oocboost.ingest import CsrPage
from oocboost.quantile import (EMPTY_FEATURE_CUT, HistogramCuts, QuantileSketch, QuantileSummary,
                               build_cuts, merge_summaries)


def column_page(values, base=0):
    v = np.asarray(values, dtype=np.float32).reshape(-1, 1)
    return CsrPage.from_dense(v, np.zeros(len(v), np.float32), base_row_id=base)


def cuts_of(values, max_bin, chunks=1):
    parts = np.array_split(np.asarray(values, dtype=np.float32), chunks)
    return build_cuts([column_page(p) for p in parts if len(p)], max_bin, num_features=1)


def empirical_rank_ok(values, cuts: np.ndarray, max_bin: int) -> bool:
    v = np.sort(np.asarray(values, dtype=np.float32))
    B = len(cuts)
    cdf = np.searchsorted(v, cuts, side="right") / len(v)
    target = (np.arange(B) + 1) / B
    return bool(np.all(np.abs(cdf - target) <= 1.0 / max_bin + 1e-12))


def test_eight_values_four_bins():
    np.testing.assert_array_equal(cuts_of(range(1, 9), 4).feature_cuts(0), [2, 4, 6, 8])


def test_constant_feature_single_cut():
    np.testing.assert_array_equal(cuts_of([5, 5, 5], 256).feature_cuts(0), [5])


def test_few_distinct_values_each_get_a_bin():
    np.testing.assert_array_equal(cuts_of([7, 1, 3, 3, 1], 256).feature_cuts(0), [1, 3, 7])


def test_feature_without_values_gets_sentinel_cut():
    page = CsrPage.from_rows([(0.0, [(0, 1.0)]), (1.0, [(0, 2.0)])])
    cuts = build_cuts([page], 16, num_features=3)
    assert cuts.feature_cuts(1).tolist() == [EMPTY_FEATURE_CUT] == cuts.feature_cuts(2).tolist()


def test_non_finite_value_rejected():
    page = CsrPage(np.array([0, 1]), np.array([0], np.uint32), np.array([np.inf], np.float32),
                   np.zeros(1, np.float32))
    with pytest.raises(OOCError):
        build_cuts([page], 16)


@pytest.mark.parametrize("value,expected", [(3, 1), (2, 0), (9, 3), (-5, 0), (8, 3), (4.0001, 2)])
def test_lookup_bin(value, expected):
    cuts = cuts_of(range(1, 9), 4)
    assert cuts.lookup_bin(0, value) == expected
    # independent linear scan
    c = cuts.feature_cuts(0)
    scan = next((b for b, cut in enumerate(c) if value <= cut), len(c) - 1)
    assert scan == expected


def test_lookup_bin_bad_feature():
    with pytest.raises(IndexError):
        cuts_of(range(1, 9), 4).lookup_bin(1, 0.0)


@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=300),
       st.lists(st.floats(-2e3, 2e3, width=32), min_size=2, max_size=50), st.integers(2, 64))
def test_lookup_bin_monotone(values, queries, max_bin):
    cuts = cuts_of(values, max_bin)
    q = sorted(queries)
    bins = [cuts.lookup_bin(0, x) for x in q]
    assert bins == sorted(bins)


@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=2000), st.integers(2, 64))
def test_cut_invariants(values, max_bin):
    c = cuts_of(values, max_bin).feature_cuts(0)
    assert 1 <= len(c) <= max_bin
    assert np.all(np.diff(c) > 0)
    assert c[-1] >= np.float32(max(values))


@given(st.integers(100, 20000), st.sampled_from([2, 4, 16, 64, 256]), st.integers(0, 2**32 - 1),
       st.sampled_from(["normal", "exponential", "integers"]))
def test_rank_accuracy_property(n, max_bin, seed, dist):
    rng = np.random.default_rng(seed)
    values = {"normal": lambda: rng.normal(size=n),
              "exponential": lambda: rng.exponential(size=n),
              "integers": lambda: rng.integers(0, 1000, size=n)}[dist]()
    values = values.astype(np.float32)
    cuts = cuts_of(values, max_bin, chunks=int(rng.integers(1, 8))).feature_cuts(0)
    distinct = np.unique(values)
    if len(distinct) <= max_bin:
        np.testing.assert_array_equal(cuts, distinct)
        return
    # with ties a cut covers a rank interval; the target must lie within 1/max_bin of it
    v = np.sort(values)
    lo = np.searchsorted(v, cuts, side="left") / n
    hi = np.searchsorted(v, cuts, side="right") / n
    tol = 1.0 / max_bin + 1e-12

    def gap(target, lo, hi):
        return np.maximum(lo - target, target - hi).clip(min=0)

    if len(cuts) == max_bin:
        assert np.all(gap((np.arange(max_bin) + 1) / max_bin, lo, hi) <= tol)
    # near-duplicate picks collapse, so in general: every target rank has a nearby cut
    targets = (np.arange(max_bin) + 1) / max_bin
    nearest = gap(targets[:, None], lo[None, :], hi[None, :]).min(axis=1)
    assert np.all(nearest <= tol)


def test_merge_with_empty_is_identity():
    rng = np.random.default_rng(0)
    s = QuantileSummary.from_page(column_page(rng.normal(size=500)), 1, 1 / 64)
    e = QuantileSummary.empty(1, 1 / 64)
    m = merge_summaries(s, e)
    f0, g0 = s.features[0], m.features[0]
    np.testing.assert_array_equal(f0.values, g0.values)
    np.testing.assert_array_equal(f0.rmin, g0.rmin)
    np.testing.assert_array_equal(f0.rmax, g0.rmax)


@pytest.mark.parametrize("n", [100, 3000, 10000])
def test_halves_vs_whole_exact_cuts(n):
    rng = np.random.default_rng(n)
    values = rng.normal(size=n).astype(np.float32)
    max_bin = 16
    whole = cuts_of(values, max_bin).feature_cuts(0)
    halves = cuts_of(values, max_bin, chunks=2).feature_cuts(0)
    np.testing.assert_array_equal(whole, halves)
    # exact-quantile oracle: every cut lands within 1/max_bin of its target rank
    assert empirical_rank_ok(values, whole, max_bin)


@given(st.integers(0, 2**32 - 1))
def test_merge_commutative(seed):
    rng = np.random.default_rng(seed)
    a = QuantileSummary.from_page(column_page(rng.normal(size=rng.integers(1, 3000))), 1, 1 / 32)
    b = QuantileSummary.from_page(column_page(rng.exponential(size=rng.integers(1, 3000))), 1, 1 / 32)
    sk_ab, sk_ba = QuantileSketch(1, 16), QuantileSketch(1, 16)
    sk_ab.push_summary(merge_summaries(a, b))
    sk_ba.push_summary(merge_summaries(b, a))
    np.testing.assert_array_equal(sk_ab.finalize().cut_values, sk_ba.finalize().cut_values)


def test_merge_rejects_feature_mismatch():
    with pytest.raises(OOCError):
        merge_summaries(QuantileSummary.empty(1, 0.1), QuantileSummary.empty(2, 0.1))


def test_summary_size_bounded():
    rng = np.random.default_rng(1)
    sketch = QuantileSketch(1, 16)
    for k in range(50):
        sketch.push(column_page(rng.normal(size=2000), base=k * 2000))
    s = sketch.summary()
    assert len(s.features[0]) <= s.capacity


def test_page_boundary_independence():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(6000, 3)).astype(np.float32)
    X[rng.random(X.shape) < 0.2] = np.nan
    y = np.zeros(len(X), np.float32)
    one = build_cuts([CsrPage.from_dense(X, y)], 32)
    pages = [CsrPage.from_dense(X[i:i + 700], y[i:i + 700], i) for i in range(0, 6000, 700)]
    many = build_cuts(pages, 32)
    assert one == many


def test_cuts_serialization_round_trip():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 4)).astype(np.float32)
    cuts = build_cuts([CsrPage.from_dense(X, np.zeros(500, np.float32))], 8)
    data = cuts.to_bytes()
    back, pos = HistogramCuts.from_buffer(data)
    assert pos == len(data) and back == cuts and back.fingerprint == cuts.fingerprint
    assert np.frombuffer(data, "<u4", 1)[0] == 4
