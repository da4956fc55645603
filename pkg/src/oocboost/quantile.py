"""Mergeable quantile summaries and histogram cut points.

A summary entry ``(value, rmin, rmax, w)`` records ``w`` copies of ``value``
with ``rmin`` a lower bound on the number of items strictly below it and
``rmax`` an upper bound on the number of items at or below it. Summaries stay
exact until they outgrow their capacity, after which they are pruned to
evenly spaced ranks.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._kernels import bin_entries
from .errors import FormatError, OOCError

DEFAULT_MAX_BIN = 256
EMPTY_FEATURE_CUT = np.float32(np.finfo(np.float32).max)


@dataclass
class FeatureSummary:
    values: np.ndarray
    rmin: np.ndarray
    rmax: np.ndarray
    weight: np.ndarray

    @classmethod
    def empty(cls) -> FeatureSummary:
        z = np.empty(0)
        return cls(z, z, z, z)

    @classmethod
    def exact(cls, sorted_values: np.ndarray) -> FeatureSummary:
        """Exact summary of an already sorted column."""
        if len(sorted_values) == 0:
            return cls.empty()
        values, counts = np.unique(sorted_values, return_counts=True)
        counts = counts.astype(np.float64)
        rmax = np.cumsum(counts)
        return cls(values.astype(np.float64), rmax - counts, rmax, counts)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def total(self) -> float:
        # the maximum is always retained, so its upper rank is the exact count
        return float(self.rmax[-1]) if len(self.rmax) else 0.0

    def _bounds_at(self, v: np.ndarray):
        """Rank bounds this summary gives for arbitrary query values."""
        n = len(self.values)
        if n == 0:
            z = np.zeros(len(v))
            return z, z, z
        pos = np.searchsorted(self.values, v)
        hit = (pos < n) & (self.values[np.minimum(pos, n - 1)] == v)
        prev = pos - 1
        nxt = np.minimum(pos, n - 1)
        lower = np.where(prev >= 0, self.rmin[np.maximum(prev, 0)] + self.weight[np.maximum(prev, 0)], 0.0)
        upper = np.where(pos < n, self.rmax[nxt] - self.weight[nxt], self.total)
        rmin = np.where(hit, self.rmin[nxt], lower)
        rmax = np.where(hit, self.rmax[nxt], upper)
        w = np.where(hit, self.weight[nxt], 0.0)
        return rmin, rmax, w

    def merge(self, other: FeatureSummary) -> FeatureSummary:
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        values = np.union1d(self.values, other.values)
        a = self._bounds_at(values)
        b = other._bounds_at(values)
        return FeatureSummary(values, a[0] + b[0], a[1] + b[1], a[2] + b[2])

    def prune(self, capacity: int) -> FeatureSummary:
        n = len(self.values)
        if n <= capacity:
            return self
        mid = (self.rmin + self.rmax) / 2
        targets = np.arange(1, capacity - 1) * (self.total / (capacity - 1))
        idx = _nearest(mid, targets)
        keep = np.unique(np.concatenate([[0], idx, [n - 1]]))
        return FeatureSummary(self.values[keep], self.rmin[keep], self.rmax[keep], self.weight[keep])


def _nearest(sorted_keys: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Index of the key closest to each target; ties go to the lower index."""
    pos = np.searchsorted(sorted_keys, targets)
    hi = np.minimum(pos, len(sorted_keys) - 1)
    lo = np.maximum(pos - 1, 0)
    pick_lo = np.abs(targets - sorted_keys[lo]) <= np.abs(sorted_keys[hi] - targets)
    return np.where(pick_lo, lo, hi)


@dataclass
class QuantileSummary:
    """Per-feature summaries sharing one error bound."""

    features: list[FeatureSummary]
    eps: float

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def capacity(self) -> int:
        return summary_capacity(self.eps)

    @classmethod
    def empty(cls, num_features: int, eps: float) -> QuantileSummary:
        return cls([FeatureSummary.empty() for _ in range(num_features)], eps)

    @classmethod
    def from_page(cls, page, num_features: int, eps: float) -> QuantileSummary:
        values = page.values
        if values.size and not np.all(np.isfinite(values)):
            raise OOCError(f"non-finite feature value in page starting at row {page.base_row_id}")
        feats = page.feature_index.astype(np.int64)
        if feats.size and feats.max() >= num_features:
            raise OOCError(f"feature index {feats.max()} >= num_features {num_features}")
        order = np.lexsort((values, feats))
        feats, values = feats[order], values[order]
        bounds = np.searchsorted(feats, np.arange(num_features + 1))
        cap = summary_capacity(eps)
        out = [FeatureSummary.exact(values[bounds[f]:bounds[f + 1]]).prune(cap)
               for f in range(num_features)]
        return cls(out, eps)

    @classmethod
    def from_column(cls, values, eps: float) -> QuantileSummary:
        return cls([FeatureSummary.exact(np.sort(np.asarray(values, dtype=np.float32))).prune(
            summary_capacity(eps))], eps)


# columns up to this many distinct values are summarised exactly, so their cuts
# do not depend on how rows were split into pages
EXACT_SUMMARY_SIZE = 16384


def summary_capacity(eps: float) -> int:
    return max(EXACT_SUMMARY_SIZE, math.ceil(8.0 / eps))


def merge_summaries(a: QuantileSummary, b: QuantileSummary) -> QuantileSummary:
    """Merge two summaries and prune the result back to its size bound."""
    if a.num_features != b.num_features:
        raise OOCError(f"cannot merge summaries over {a.num_features} and {b.num_features} features")
    eps = max(a.eps, b.eps)
    cap = summary_capacity(eps)
    return QuantileSummary([fa.merge(fb).prune(cap) for fa, fb in zip(a.features, b.features)], eps)


class QuantileSketch:
    """Page-at-a-time accumulator.

    Summaries are combined like a binary counter so each value passes through
    O(log pages) prunes, which keeps the accumulated rank error bounded.
    """

    def __init__(self, num_features: int, max_bin: int = DEFAULT_MAX_BIN):
        if max_bin < 2:
            raise ValueError("max_bin must be >= 2")
        self.num_features = num_features
        self.max_bin = max_bin
        self.eps = 1.0 / (2 * max_bin)
        self._levels: list[QuantileSummary | None] = []
        self.n_pages = 0

    def push_summary(self, summary: QuantileSummary) -> None:
        level = 0
        while level < len(self._levels) and self._levels[level] is not None:
            summary = merge_summaries(self._levels[level], summary)
            self._levels[level] = None
            level += 1
        if level == len(self._levels):
            self._levels.append(None)
        self._levels[level] = summary
        self.n_pages += 1

    def push(self, page) -> None:
        self.push_summary(QuantileSummary.from_page(page, self.num_features, self.eps))

    def summary(self) -> QuantileSummary:
        out = QuantileSummary.empty(self.num_features, self.eps)
        for s in self._levels:
            if s is not None:
                out = merge_summaries(out, s)
        return out

    def finalize(self) -> HistogramCuts:
        return cuts_from_summary(self.summary(), self.max_bin)


def _feature_cuts(s: FeatureSummary, max_bin: int) -> np.ndarray:
    if len(s) == 0:
        return np.array([EMPTY_FEATURE_CUT], dtype=np.float32)
    if len(s) <= max_bin:
        return s.values.astype(np.float32)
    est = (s.rmin + s.weight + s.rmax) / 2
    targets = np.arange(1, max_bin + 1) * (s.total / max_bin)
    idx = np.unique(_nearest(est, targets))
    idx[-1] = len(s) - 1
    return np.unique(s.values[idx].astype(np.float32))


def cuts_from_summary(summary: QuantileSummary, max_bin: int) -> HistogramCuts:
    per_feature = [_feature_cuts(s, max_bin) for s in summary.features]
    offsets = np.concatenate([[0], np.cumsum([len(c) for c in per_feature])]).astype(np.int64)
    mins = np.array([s.values[0] if len(s) else 0.0 for s in summary.features], dtype=np.float32)
    cut_values = np.concatenate(per_feature) if per_feature else np.empty(0, np.float32)
    return HistogramCuts(cut_values.astype(np.float32), offsets, mins)


def build_cuts(pages, max_bin: int = DEFAULT_MAX_BIN, num_features: int | None = None) -> HistogramCuts:
    """One streaming pass over CSR pages, one summary per page."""
    if num_features is None:
        num_features = getattr(pages, "num_features", None)
    if num_features is None:
        pages = list(pages)
        num_features = max((int(p.feature_index.max()) + 1 for p in pages if p.n_entries), default=0)
    sketch = QuantileSketch(num_features, max_bin)
    for page in pages:
        sketch.push(page)
    if sketch.n_pages == 0:
        raise OOCError("cannot build cuts from an empty page set")
    return sketch.finalize()


_CUTS_HEADER = struct.Struct("<I")


@dataclass
class HistogramCuts:
    cut_values: np.ndarray
    feature_offsets: np.ndarray
    min_values: np.ndarray
    _fingerprint: int | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.cut_values = np.ascontiguousarray(self.cut_values, dtype=np.float32)
        self.feature_offsets = np.ascontiguousarray(self.feature_offsets, dtype=np.int64)
        self.min_values = np.ascontiguousarray(self.min_values, dtype=np.float32)

    @property
    def num_features(self) -> int:
        return len(self.feature_offsets) - 1

    @property
    def total_bins(self) -> int:
        return int(self.feature_offsets[-1])

    def feature_cuts(self, feature: int) -> np.ndarray:
        return self.cut_values[self.feature_offsets[feature]:self.feature_offsets[feature + 1]]

    def feature_of_bin(self, global_bin):
        return np.searchsorted(self.feature_offsets, global_bin, side="right") - 1

    def lookup_bin(self, feature: int, value: float) -> int:
        """Local bin: first cut >= value, clamped to the last bin."""
        if not 0 <= feature < self.num_features:
            raise IndexError(f"feature {feature} out of range [0, {self.num_features})")
        if not math.isfinite(value):
            raise OOCError(f"cannot bin non-finite value {value}")
        cuts = self.feature_cuts(feature)
        return min(int(np.searchsorted(cuts, np.float32(value), side="left")), len(cuts) - 1)

    def global_bins(self, features: np.ndarray, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float32)
        if values.size and not np.all(np.isfinite(values)):
            raise OOCError("cannot bin non-finite feature values")
        out = np.empty(len(values), dtype=np.int64)
        bin_entries(np.asarray(features, dtype=np.int64), values, self.cut_values, self.feature_offsets, out)
        return out

    def bin_dense(self, X: np.ndarray) -> np.ndarray:
        """Global bins of a dense matrix; NaN cells map to -1."""
        X = np.asarray(X, dtype=np.float32)
        out = np.full(X.shape, -1, dtype=np.int64)
        present = ~np.isnan(X)
        cols = np.broadcast_to(np.arange(X.shape[1]), X.shape)[present]
        out[present] = self.global_bins(cols, X[present])
        return out

    def to_bytes(self) -> bytes:
        return b"".join([
            _CUTS_HEADER.pack(self.num_features),
            self.feature_offsets.astype("<u4").tobytes(),
            self.cut_values.astype("<f4").tobytes(),
            self.min_values.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_buffer(cls, data: bytes, pos: int = 0) -> tuple[HistogramCuts, int]:
        try:
            (nf,) = _CUTS_HEADER.unpack_from(data, pos)
            pos += _CUTS_HEADER.size
            offsets = np.frombuffer(data, "<u4", nf + 1, pos).astype(np.int64)
            pos += 4 * (nf + 1)
            total = int(offsets[-1])
            cuts = np.frombuffer(data, "<f4", total, pos).copy()
            pos += 4 * total
            mins = np.frombuffer(data, "<f4", nf, pos).copy()
            pos += 4 * nf
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated histogram cuts: {exc}") from None
        if offsets[0] != 0 or np.any(np.diff(offsets) < 1):
            raise FormatError("corrupt histogram cut offsets")
        return cls(cuts, offsets, mins), pos

    @property
    def fingerprint(self) -> int:
        if self._fingerprint is None:
            digest = hashlib.blake2b(self.to_bytes(), digest_size=8).digest()
            self._fingerprint = int.from_bytes(digest, "little")
        return self._fingerprint

    def __eq__(self, other):
        if not isinstance(other, HistogramCuts):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()
