"""Histogram-based regression tree growth over ELLPACK pages.

Gradient sums are accumulated in 64-bit fixed point: every gradient pair is
scaled by a power of two and rounded once, so histogram sums are exact
integers and do not depend on how rows are spread over pages or in which
order pages arrive. This is what makes in-core, streaming and compacted
growth produce identical trees.
"""
from __future__ import annotations

import logging
import math
from contextlib import ExitStack
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import OOCError
from .pagestore import (DEFAULT_PREFETCH_DEPTH, EllpackPage, EllpackStore, MemoryBudget,
                        ResidentPages, StreamedPages)
from .quantile import HistogramCuts

logger = logging.getLogger(__name__)

MODES = ("in_core", "streaming", "sampled")


@dataclass
class TreeParams:
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    learning_rate: float = 1.0
    per_node_passes: bool = False

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("lambda, gamma and min_child_weight must be non-negative")


# ---------------------------------------------------------------- objective

def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    """Optimal leaf value -G / (H + lambda)."""
    denom = H + reg_lambda
    if denom <= 0:
        raise OOCError(f"leaf weight undefined for H + lambda = {denom}")
    return -G / denom


def node_objective(G: float, H: float, reg_lambda: float, gamma: float, T: int = 1) -> float:
    denom = H + reg_lambda
    if denom <= 0:
        raise OOCError(f"objective undefined for H + lambda = {denom}")
    return -0.5 * G * G / denom + gamma * T


def split_gain(GL: float, HL: float, GR: float, HR: float, reg_lambda: float, gamma: float,
               G: float | None = None, H: float | None = None) -> float:
    """Loss reduction of dividing a node (totals G, H) into the given children."""
    G = GL + GR if G is None else G
    H = HL + HR if H is None else H
    return 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda)
                  - G * G / (H + reg_lambda)) - gamma


# ---------------------------------------------------------------- fixed point

def gradient_scale(gpair: np.ndarray, rows: np.ndarray | None = None) -> float:
    """Power-of-two multiplier keeping the sum of rounded gradients below 2**62."""
    sub = gpair if rows is None else gpair[rows]
    total = max(float(np.abs(sub[:, 0].astype(np.float64)).sum()),
                float(np.abs(sub[:, 1].astype(np.float64)).sum()))
    if not math.isfinite(total):
        raise OOCError("non-finite gradient")
    return math.ldexp(1.0, 60 - math.ceil(math.log2(total + 1.0)))


def to_float(q, scale: float):
    """Fixed-point sums back to float64 (one correctly rounded conversion)."""
    if isinstance(q, np.ndarray):
        return q.astype(np.float64) / scale
    return float(q) / scale


# ---------------------------------------------------------------- histograms

def new_histogram(n_bins: int) -> np.ndarray:
    # one extra slot swallows the padding sentinel
    return np.zeros((n_bins + 1, 2), dtype=np.int64)


def histogram_bytes(n_bins: int) -> int:
    return (n_bins + 1) * 2 * 8


def build_histograms(page: EllpackPage, rows: np.ndarray, gpair: np.ndarray, scale: float,
                     hist: np.ndarray | None = None) -> np.ndarray:
    """Add the fixed-point (g, h) of ``rows`` (which must lie in ``page``) to a histogram."""
    if hist is None:
        hist = new_histogram(page.n_bins)
    K.build_histogram(page.words, page.bits_per_symbol, page.row_stride, page.sentinel,
                      page.base_row_id, rows, gpair, scale, hist)
    return hist


@dataclass
class SplitCandidate:
    feature: int
    split_bin: int
    local_bin: int
    gain: float
    default_left: bool
    left_sum: tuple[int, int]
    right_sum: tuple[int, int]
    scale: float

    @property
    def left_gh(self) -> tuple[float, float]:
        return to_float(self.left_sum[0], self.scale), to_float(self.left_sum[1], self.scale)

    @property
    def right_gh(self) -> tuple[float, float]:
        return to_float(self.right_sum[0], self.scale), to_float(self.right_sum[1], self.scale)


class SplitEvaluator:
    """Best (bin, missing direction) boundary of a node's histogram."""

    def __init__(self, cuts: HistogramCuts, params: TreeParams):
        self.cuts = cuts
        self.params = params

    def evaluate(self, hist: np.ndarray, node_sum: tuple[int, int], scale: float) -> SplitCandidate | None:
        p = self.params
        offsets = self.cuts.feature_offsets
        g, h = node_sum
        b, left_default, gain, lg, lh = K.best_split(hist, g, h, offsets, scale, p.reg_lambda,
                                                     p.gamma, p.min_child_weight)
        if b < 0:
            return None
        f = int(np.searchsorted(offsets, b, side="right")) - 1
        return SplitCandidate(f, int(b), int(b - offsets[f]), float(gain), bool(left_default),
                              (int(lg), int(lh)), (int(g - lg), int(h - lh)), scale)


def evaluate_split(hist: np.ndarray, node_sums: tuple[int, int], cuts: HistogramCuts,
                   params: TreeParams, scale: float) -> SplitCandidate | None:
    return SplitEvaluator(cuts, params).evaluate(hist, node_sums, scale)


# ---------------------------------------------------------------- partition

class RowPartition:
    """Row ids grouped by node; each node's span stays in ascending row order."""

    def __init__(self, rows: np.ndarray):
        dtype = np.int32 if (len(rows) == 0 or rows.max() < 2**31) else np.int64
        self.ridx = np.ascontiguousarray(rows, dtype=dtype)
        self.spans: dict[int, tuple[int, int]] = {0: (0, len(rows))}

    def rows(self, node: int) -> np.ndarray:
        b, e = self.spans[node]
        return self.ridx[b:e]

    def page_segment(self, node: int, page: EllpackPage) -> tuple[int, int]:
        """Span offsets of the node's rows that live in ``page``."""
        span = self.rows(node)
        lo, hi = np.searchsorted(span, [page.base_row_id, page.base_row_id + page.n_rows])
        return int(lo), int(hi)

    def split(self, node: int, go_left: np.ndarray, left: int, right: int) -> None:
        """Stable partition of ``node``'s span given one flag per row."""
        b, e = self.spans.pop(node)
        span = self.ridx[b:e]
        n_left = int(np.count_nonzero(go_left))
        self.ridx[b:e] = np.concatenate([span[go_left], span[~go_left]])
        self.spans[left] = (b, b + n_left)
        self.spans[right] = (b + n_left, e)


def repartition(partition: RowPartition, node: int, split: SplitCandidate, page: EllpackPage,
                cuts: HistogramCuts, left: int, right: int) -> None:
    """Single-page convenience: route ``node``'s rows by ``split`` and divide its span."""
    rows = partition.rows(node)
    go = np.empty(len(rows), dtype=np.bool_)
    f = split.feature
    K.partition_rows(page.words, page.bits_per_symbol, page.row_stride, page.sentinel, page.base_row_id,
                     rows, int(cuts.feature_offsets[f]), int(cuts.feature_offsets[f + 1]),
                     split.split_bin, split.default_left, go)
    partition.split(node, go, left, right)


# ---------------------------------------------------------------- tree

@dataclass
class RegressionTree:
    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    split_bin: np.ndarray
    split_value: np.ndarray
    default_left: np.ndarray
    leaf_value: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.left < 0))

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def _feature_ranges(self, cuts: HistogramCuts):
        f = np.maximum(self.feature, 0)
        return cuts.feature_offsets[f].astype(np.int64), cuts.feature_offsets[f + 1].astype(np.int64)

    def route_page(self, page: EllpackPage, cuts: HistogramCuts) -> np.ndarray:
        """Leaf id of every row of a binned page."""
        fbeg, fend = self._feature_ranges(cuts)
        out = np.empty(page.n_rows, dtype=np.int32)
        K.route_rows(page.words, page.bits_per_symbol, page.row_stride, page.sentinel, page.n_rows,
                     self.left, self.right, fbeg, fend, self.split_bin.astype(np.int64),
                     self.default_left.astype(np.bool_), out)
        return out

    def route_bins(self, bins: np.ndarray) -> np.ndarray:
        """Leaf id of every row of a dense global-bin matrix (-1 = missing)."""
        out = np.empty(len(bins), dtype=np.int32)
        K.route_binned(bins, self.left, self.right, np.maximum(self.feature, 0).astype(np.int64),
                       self.split_bin.astype(np.int64), self.default_left.astype(np.bool_), out)
        return out

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in self.__dataclass_fields__)


@dataclass
class _Node:
    nid: int
    depth: int
    sums: tuple[int, int]
    hist: np.ndarray | None = None
    hist_alloc: object = None
    split: SplitCandidate | None = None
    children: tuple[int, int] | None = None


class _TreeBuilder:
    def __init__(self):
        self.left, self.right, self.feature, self.split_bin = [], [], [], []
        self.split_value, self.default_left, self.leaf_value, self.gain, self.cover = [], [], [], [], []

    def add(self) -> int:
        for col, v in ((self.left, -1), (self.right, -1), (self.feature, -1), (self.split_bin, -1),
                       (self.split_value, 0.0), (self.default_left, 0), (self.leaf_value, 0.0),
                       (self.gain, 0.0), (self.cover, 0.0)):
            col.append(v)
        return len(self.left) - 1

    def finish(self) -> RegressionTree:
        return RegressionTree(np.array(self.left, np.int32), np.array(self.right, np.int32),
                              np.array(self.feature, np.int32), np.array(self.split_bin, np.int32),
                              np.array(self.split_value, np.float32), np.array(self.default_left, np.uint8),
                              np.array(self.leaf_value, np.float64), np.array(self.gain, np.float64),
                              np.array(self.cover, np.float64))


def _alloc(budget, nbytes, what):
    return budget.allocate(nbytes, what) if budget is not None else None


def _free(*allocs):
    for a in allocs:
        if a is not None and a.live:
            a.release()


def grow_tree(pages, gpair: np.ndarray, params: TreeParams, cuts: HistogramCuts,
              budget: MemoryBudget | None = None, rows: np.ndarray | None = None,
              leaf_out: np.ndarray | None = None) -> RegressionTree:
    """Breadth-first growth; each level costs one pass over ``pages``.

    ``pages`` is any re-iterable of ELLPACK pages whose ``base_row_id`` places
    them in the row space of ``gpair``. ``rows`` restricts growth to a subset
    (in-core sampling); by default every gradient row takes part. When
    ``leaf_out`` is given, the final leaf of each participating row is written
    to it, which saves a separate routing pass.
    """
    gpair = np.ascontiguousarray(gpair, dtype=np.float32)
    if rows is None:
        rows = np.arange(len(gpair))
    evaluator = SplitEvaluator(cuts, params)
    n_bins = cuts.total_bins
    hbytes = histogram_bytes(n_bins)
    builder = _TreeBuilder()

    with ExitStack() as stack:
        for nbytes, what in ((gpair.nbytes, "gradient pairs"),
                             (len(rows) * (4 if len(gpair) < 2**31 else 8), "row partition"),
                             (len(rows), "partition scratch")):
            a = _alloc(budget, nbytes, what)
            if a is not None:
                stack.callback(_free, a)
        partition = RowPartition(rows)
        scale = gradient_scale(gpair, partition.ridx)
        root = _Node(builder.add(), 0, K.node_sums(partition.ridx, gpair, scale))
        live_hists: list[_Node] = []
        stack.callback(lambda: _free(*(n.hist_alloc for n in live_hists)))

        frontier = [root]
        if params.max_depth > 0:
            root.hist_alloc = _alloc(budget, hbytes, "histogram")
            root.hist = new_histogram(n_bins)
            live_hists.append(root)
            for page in pages:
                lo, hi = partition.page_segment(root.nid, page)
                build_histograms(page, partition.ridx[lo:hi], gpair, scale, root.hist)
            root.split = evaluator.evaluate(root.hist, root.sums, scale)

        while True:
            splitting = [n for n in frontier if n.split is not None]
            for n in frontier:
                _finish_node(builder, n, params, scale, cuts)
            if not splitting:
                break
            children = _level_pass(pages, splitting, partition, gpair, scale, params, cuts,
                                   builder, budget, hbytes, live_hists)
            for n in splitting:
                if n.hist is not None:
                    _free(n.hist_alloc)
                    n.hist = None
                    live_hists.remove(n)
            for c in children:
                if c.hist is not None:
                    c.split = evaluator.evaluate(c.hist, c.sums, scale)
            frontier = children
        if leaf_out is not None:
            for nid, (b, e) in partition.spans.items():
                leaf_out[partition.ridx[b:e]] = nid
    return builder.finish()


def _finish_node(builder: _TreeBuilder, node: _Node, params: TreeParams, scale: float,
                 cuts: HistogramCuts) -> None:
    G, H = to_float(node.sums[0], scale), to_float(node.sums[1], scale)
    builder.cover[node.nid] = H
    s = node.split
    if s is None:
        builder.leaf_value[node.nid] = leaf_weight(G, H, params.reg_lambda) * params.learning_rate
        return
    left, right = builder.add(), builder.add()
    node.children = (left, right)
    builder.left[node.nid] = left
    builder.right[node.nid] = right
    builder.feature[node.nid] = s.feature
    builder.split_bin[node.nid] = s.split_bin
    builder.split_value[node.nid] = float(cuts.cut_values[s.split_bin])
    builder.default_left[node.nid] = int(s.default_left)
    builder.gain[node.nid] = s.gain


def _level_pass(pages, splitting, partition, gpair, scale, params, cuts, builder,
                budget, hbytes, live_hists) -> list[_Node]:
    """Repartition every splitting node and build the smaller child's histogram.

    The larger child's histogram is the parent's minus the smaller one's, computed
    in the parent's buffer.
    """
    offsets = cuts.feature_offsets
    children: list[_Node] = []
    work = []
    for n in splitting:
        s = n.split
        depth = n.depth + 1
        lnode = _Node(n.children[0], depth, s.left_sum)
        rnode = _Node(n.children[1], depth, s.right_sum)
        children += [lnode, rnode]
        need_hist = depth < params.max_depth
        small_left = s.left_sum[1] <= s.right_sum[1]
        small = lnode if small_left else rnode
        if need_hist:
            small.hist_alloc = _alloc(budget, hbytes, "histogram")
            small.hist = new_histogram(cuts.total_bins)
            live_hists.append(small)
        b, e = partition.spans[n.nid]
        work.append((n, np.empty(e - b, dtype=np.bool_), need_hist, small_left, small))

    batches = [[w] for w in work] if params.per_node_passes else [work]
    for batch in batches:
        for page in pages:
            for n, go, need_hist, small_left, small in batch:
                lo, hi = partition.page_segment(n.nid, page)
                if lo == hi:
                    continue
                seg = partition.rows(n.nid)[lo:hi]
                f = n.split.feature
                K.partition_rows(page.words, page.bits_per_symbol, page.row_stride, page.sentinel,
                                 page.base_row_id, seg, int(offsets[f]), int(offsets[f + 1]),
                                 n.split.split_bin, n.split.default_left, go[lo:hi])
                if need_hist:
                    mask = go[lo:hi] if small_left else ~go[lo:hi]
                    build_histograms(page, seg[mask], gpair, scale, small.hist)

    for i, (n, go, need_hist, small_left, small) in enumerate(work):
        lnode, rnode = children[2 * i], children[2 * i + 1]
        partition.split(n.nid, go, lnode.nid, rnode.nid)
        if need_hist:
            # the parent's buffer becomes the larger child's: parent - small, in place
            large = rnode if small_left else lnode
            large.hist, large.hist_alloc = n.hist, n.hist_alloc
            large.hist -= small.hist
            n.hist, n.hist_alloc = None, None
            live_hists.remove(n)
            live_hists.append(large)
    return children


def build_tree(mode: str, data, grads: np.ndarray, params: TreeParams, cuts: HistogramCuts,
               budget: MemoryBudget | None = None, sample=None,
               prefetch_depth: int = DEFAULT_PREFETCH_DEPTH) -> RegressionTree:
    """Grow one tree.

    ``in_core``: ``data`` is a resident :class:`EllpackPage`.
    ``streaming``: ``data`` is an :class:`EllpackStore`, streamed once per level.
    ``sampled``: ``data`` is an :class:`EllpackStore`; the rows chosen by
    ``sample`` are compacted into one resident page first.
    """
    if mode == "in_core":
        rows = None if sample is None else sample.rows
        g = grads
        if sample is not None:
            g = np.zeros_like(grads, dtype=np.float32)
            g[sample.rows] = sample.apply(grads)
        return grow_tree(ResidentPages([data]), g, params, cuts, budget, rows)
    if mode == "streaming":
        return grow_tree(StreamedPages(data, budget, prefetch_depth), grads, params, cuts, budget)
    if mode == "sampled":
        from .sampling import compact_pages, sample_uniform

        if sample is None:
            sample = sample_uniform(grads, 1.0, 0)
        page, _ = compact_pages(StreamedPages(data, budget, prefetch_depth), sample, budget)
        try:
            return grow_tree(ResidentPages([page]), sample.apply(grads), params, cuts, budget)
        finally:
            page.release()
    raise ValueError(f"unknown tree mode {mode!r}; choose from {', '.join(MODES)}")
