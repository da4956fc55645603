"""Boosting loop, losses, metrics and model files."""
from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .ellpack import build_ellpack_page, load_in_core
from .errors import BudgetExceeded, FormatError, OOCError
from .ingest import PageSet
from .pagestore import (DEFAULT_PREFETCH_DEPTH, EllpackPage, EllpackStore, MemoryBudget,
                        ResidentPages, StreamedPages, stream_pages)
from .quantile import DEFAULT_MAX_BIN, HistogramCuts
from .sampling import METHODS, compact_pages, sample
from .tree import RegressionTree, TreeParams, grow_tree

logger = logging.getLogger(__name__)

LOSSES = {"logistic": 0, "squared": 1}
MODES = ("in_core", "out_of_core")
METRICS_HEADER = ["iteration", "train_logloss", "eval_logloss", "eval_auc", "elapsed_ms"]


# ---------------------------------------------------------------- losses

def compute_gradients(loss: str, margins: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """First and second derivatives of the loss w.r.t. the margin, as an (n, 2) float64 array."""
    margins = np.asarray(margins, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if margins.shape != labels.shape:
        raise ValueError(f"{len(margins)} margins but {len(labels)} labels")
    if loss == "logistic":
        if not np.all((labels == 0) | (labels == 1)):
            bad = labels[(labels != 0) & (labels != 1)][0]
            raise OOCError(f"logistic loss needs labels in {{0, 1}}, got {bad}")
        p = expit(margins)
        return np.stack([p - labels, np.maximum(p * (1 - p), 1e-16)], axis=1)
    if loss == "squared":
        return np.stack([margins - labels, np.ones_like(margins)], axis=1)
    raise ValueError(f"unknown loss {loss!r}; choose from {', '.join(LOSSES)}")


def loss_value(loss: str, margins: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row loss: logistic log loss or ½(ŷ − y)²."""
    m = np.asarray(margins, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if loss == "logistic":
        return np.logaddexp(0.0, m) - y * m
    if loss == "squared":
        return 0.5 * (m - y) ** 2
    raise ValueError(f"unknown loss {loss!r}")


def logloss(margins: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(loss_value("logistic", margins, labels)))


def eval_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve from ranks; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0.5
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OOCError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _metric(loss: str, margins, labels) -> float:
    if loss == "logistic":
        return logloss(margins, labels)
    return float(np.sqrt(np.mean((np.asarray(margins, np.float64) - labels) ** 2)))


# ---------------------------------------------------------------- params / model

@dataclass
class BoosterParams:
    num_rounds: int = 10
    learning_rate: float = 0.3
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    max_bin: int = DEFAULT_MAX_BIN
    loss: str = "logistic"
    mode: str = "out_of_core"
    subsample: float = 1.0
    sampling_method: str = "mvs"
    goss_a: float = 0.1
    goss_b: float | None = None
    mvs_lambda: float = 1.0
    base_score: float | None = None
    seed: int = 0
    deterministic: bool = True
    prefetch_depth: int = DEFAULT_PREFETCH_DEPTH
    per_node_passes: bool = False

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError(f"learning rate must lie in (0, 1], got {self.learning_rate}")
        if self.num_rounds < 0:
            raise ValueError("num_rounds must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.sampling_method not in METHODS:
            raise ValueError(f"unknown sampling method {self.sampling_method!r}")
        if not 0 < self.subsample <= 1:
            raise ValueError(f"subsample must lie in (0, 1], got {self.subsample}")
        if self.prefetch_depth < 1:
            raise ValueError("prefetch_depth must be >= 1")
        self.tree_params()  # validates the tree hyper-parameters

    @property
    def margin_base(self) -> float:
        # a logistic base of probability 0.5 and a squared-loss base of 0 are both margin 0
        return 0.0 if self.base_score is None else float(self.base_score)

    def tree_params(self) -> TreeParams:
        return TreeParams(self.max_depth, self.reg_lambda, self.gamma, self.min_child_weight,
                          self.learning_rate, self.per_node_passes)


@dataclass
class Model:
    cuts: HistogramCuts
    trees: list[RegressionTree] = field(default_factory=list)
    base_score: float = 0.0
    loss: str = "logistic"

    @property
    def num_features(self) -> int:
        return self.cuts.num_features

    def predict_bins(self, bins: np.ndarray, output: str = "margin") -> np.ndarray:
        margins = np.full(len(bins), np.float64(np.float32(self.base_score)))
        for t in self.trees:
            margins += t.leaf_value[t.route_bins(bins)]
        return self._transform(margins, output)

    def predict(self, X: np.ndarray, output: str = "margin") -> np.ndarray:
        """Predict dense rows; NaN marks a missing feature."""
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise OOCError(f"model expects {self.num_features} features, input has "
                           f"{X.shape[-1] if X.ndim == 2 else X.shape}")
        return self.predict_bins(self.cuts.bin_dense(X), output)

    def predict_page(self, page: EllpackPage, output: str = "margin") -> np.ndarray:
        margins = np.full(page.n_rows, np.float64(np.float32(self.base_score)))
        for t in self.trees:
            margins += t.leaf_value[t.route_page(page, self.cuts)]
        return self._transform(margins, output)

    def _transform(self, margins, output):
        if output == "margin":
            return margins
        if output == "probability":
            if self.loss != "logistic":
                raise OOCError("probability output needs the logistic loss")
            return expit(margins)
        raise ValueError(f"unknown output {output!r}")

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return model_to_bytes(self) == model_to_bytes(other)


# ---------------------------------------------------------------- serialization

MODEL_MAGIC = b"OOCM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIBf")
_COUNT = struct.Struct("<I")
_TREE_ARRAYS = (("left", "<i4"), ("right", "<i4"), ("feature", "<i4"), ("split_bin", "<i4"),
                ("split_value", "<f4"), ("default_left", "u1"), ("leaf_value", "<f8"),
                ("gain", "<f8"), ("cover", "<f8"))


def model_to_bytes(model: Model) -> bytes:
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, LOSSES[model.loss], model.base_score),
             model.cuts.to_bytes(), _COUNT.pack(len(model.trees))]
    for t in model.trees:
        parts.append(_COUNT.pack(t.n_nodes))
        parts += [getattr(t, name).astype(dt).tobytes() for name, dt in _TREE_ARRAYS]
    return b"".join(parts)


def model_from_bytes(data: bytes) -> Model:
    try:
        magic, version, tag, base = _MODEL_HEADER.unpack_from(data, 0)
    except struct.error:
        raise FormatError("truncated model header") from None
    if magic != MODEL_MAGIC:
        raise FormatError(f"not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version} (this build reads {MODEL_VERSION})")
    losses = {v: k for k, v in LOSSES.items()}
    if tag not in losses:
        raise FormatError(f"unknown loss tag {tag}")
    cuts, pos = HistogramCuts.from_buffer(data, _MODEL_HEADER.size)
    trees = []
    try:
        (count,) = _COUNT.unpack_from(data, pos)
        pos += _COUNT.size
        for _ in range(count):
            (n,) = _COUNT.unpack_from(data, pos)
            pos += _COUNT.size
            arrays = {}
            for name, dt in _TREE_ARRAYS:
                a = np.frombuffer(data, dt, n, pos)
                pos += a.nbytes
                arrays[name] = a.astype(a.dtype.newbyteorder("="))
            trees.append(RegressionTree(**arrays))
    except (struct.error, ValueError):
        raise FormatError("truncated model file") from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last tree")
    for i, t in enumerate(trees):
        _check_tree(t, cuts, i)
    return Model(cuts, trees, base, losses[tag])


def _check_tree(t: RegressionTree, cuts: HistogramCuts, index: int) -> None:
    n = t.n_nodes
    inner = t.left >= 0
    ok = n > 0 and np.all((t.left[inner] < n) & (t.right[inner] > 0) & (t.right[inner] < n))
    f = t.feature[inner]
    ok = ok and np.all((f >= 0) & (f < cuts.num_features))
    if ok and inner.any():
        b = t.split_bin[inner]
        ok = np.all((b >= cuts.feature_offsets[f]) & (b < cuts.feature_offsets[f + 1]))
    if not ok:
        raise FormatError(f"tree {index} references nodes or bins outside the model")


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- metrics

@dataclass
class IterationMetrics:
    iteration: int
    train_logloss: float
    eval_logloss: float | None
    eval_auc: float | None
    elapsed_ms: float

    def row(self) -> list[str]:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [str(self.iteration), fmt(self.train_logloss), fmt(self.eval_logloss),
                fmt(self.eval_auc), f"{self.elapsed_ms:.3f}"]


def write_metrics(metrics: list[IterationMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: Model
    metrics: list[IterationMetrics]
    margins: np.ndarray
    eval_margins: np.ndarray | None = None


def holdout_split(n_rows: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random train/holdout row ids (both ascending)."""
    if not 0 < train_fraction <= 1:
        raise ValueError(f"split must lie in (0, 1], got {train_fraction}")
    perm = np.random.default_rng([seed, 0x5B17]).permutation(n_rows)
    k = int(round(train_fraction * n_rows))
    return np.sort(perm[:k]), np.sort(perm[k:])


def _eval_pages(eval_set, cuts: HistogramCuts) -> list[EllpackPage]:
    """Binned host copies of an evaluation set (never charged to the budget)."""
    if isinstance(eval_set, EllpackStore):
        if eval_set.cuts != cuts:
            raise OOCError("evaluation pages were binned with different cuts")
        return [eval_set.read_page(i) for i in range(eval_set.page_count)]
    if isinstance(eval_set, PageSet):
        return [build_ellpack_page(p, cuts) for p in eval_set]
    raise TypeError(f"unsupported evaluation set {type(eval_set).__name__}")


def _route_store(store, budget, prefetch_depth, margins, tree: RegressionTree, cuts):
    """Add one tree's leaf values to the cached margins, streaming every page."""
    for page in stream_pages(store, budget, prefetch_depth):
        leaves = tree.route_page(page, cuts)
        b = page.base_row_id
        margins[b:b + page.n_rows] += tree.leaf_value[leaves]


def train(store: EllpackStore, params: BoosterParams, budget: MemoryBudget | None = None, *,
          train_rows: np.ndarray | None = None, eval_rows: np.ndarray | None = None,
          eval_set=None, eval_labels: np.ndarray | None = None) -> TrainResult:
    """Fit ``params.num_rounds`` trees on an ELLPACK page store.

    ``train_rows`` / ``eval_rows`` split the store into fitted and held-out
    rows; the holdout never reaches tree construction but its margins are
    tracked for the metrics. ``eval_set`` is a separate page set scored each
    round with ``eval_labels`` (taken from the set itself when omitted).
    """
    budget = budget if budget is not None else MemoryBudget()
    cuts = store.cuts
    labels = store.labels().astype(np.float64)
    n = store.n_rows
    if n == 0:
        raise OOCError("training set is empty")
    rows = np.arange(n) if train_rows is None else np.asarray(train_rows, dtype=np.int64)
    if len(rows) == 0:
        raise OOCError("no training rows")
    tparams = params.tree_params()
    model = Model(cuts, [], params.margin_base, params.loss)
    base = np.float64(np.float32(params.margin_base))
    margins = np.full(n, base)

    ev_pages, ev_labels, ev_margins = None, None, None
    if eval_set is not None:
        ev_pages = _eval_pages(eval_set, cuts)
        ev_labels = np.asarray(eval_labels if eval_labels is not None else eval_set.labels(), np.float64)
        ev_margins = np.full(sum(p.n_rows for p in ev_pages), base)
    elif eval_rows is not None and len(eval_rows):
        ev_labels = labels[eval_rows]

    # without sampling and holdout, the final row partition already says where every row lands
    covers_all = params.subsample == 1.0 and len(rows) == n
    resident = None
    metrics: list[IterationMetrics] = []
    t_start = time.perf_counter()
    try:
        if params.mode == "in_core":
            resident = load_in_core(store, budget, params.prefetch_depth)
        for it in range(params.num_rounds):
            grads = compute_gradients(params.loss, margins[rows], labels[rows]).astype(np.float32)
            leaves = np.full(n, -1, dtype=np.int32) if covers_all else None
            tree = _fit_tree(store, resident, rows, n, grads, params, tparams, budget, it, leaves)
            model.trees.append(tree)
            if leaves is not None:
                margins += tree.leaf_value[leaves]
            elif resident is not None:
                margins += tree.leaf_value[tree.route_page(resident, cuts)]
            else:
                _route_store(store, budget, params.prefetch_depth, margins, tree, cuts)
            metrics.append(_iteration_metrics(it, params.loss, margins, labels, rows, eval_rows,
                                              ev_pages, ev_margins, ev_labels, tree, cuts, t_start))
            logger.debug("iteration %d: %s", it, metrics[-1])
    except BudgetExceeded as exc:
        exc.args = (f"{exc.args[0]}; reduce the data or train out of core with row sampling "
                    f"(e.g. subsample 0.1 with MVS)",)
        raise
    finally:
        if resident is not None:
            resident.release()
    return TrainResult(model, metrics, margins, ev_margins)


def _fit_tree(store, resident, rows, n, grads, params, tparams, budget, it, leaves) -> RegressionTree:
    cuts = store.cuts
    if params.subsample < 1.0:
        s = sample(params.sampling_method, grads, params.subsample, [params.seed, it],
                   params.goss_a, params.goss_b, params.mvs_lambda)
    else:
        s = None
    if resident is not None:
        gpair = np.zeros((n, 2), dtype=np.float32)
        if s is None:
            gpair[rows] = grads
            return grow_tree(ResidentPages([resident]), gpair, tparams, cuts, budget, rows, leaves)
        gpair[rows[s.rows]] = s.apply(grads)
        return grow_tree(ResidentPages([resident]), gpair, tparams, cuts, budget, rows[s.rows])
    if s is None:
        gpair = np.zeros((n, 2), dtype=np.float32)
        gpair[rows] = grads
        return grow_tree(StreamedPages(store, budget, params.prefetch_depth), gpair, tparams, cuts,
                         budget, rows, leaves)
    global_rows = rows[s.rows]
    with budget.allocate(8 * len(global_rows), "sampled row ids"):
        s_global = type(s)(global_rows, s.scale, n, s.sample_rate)
        page, _ = compact_pages(StreamedPages(store, budget, params.prefetch_depth), s_global, budget)
        try:
            return grow_tree(ResidentPages([page]), s.apply(grads), tparams, cuts, budget)
        finally:
            page.release()


def _iteration_metrics(it, loss, margins, labels, rows, eval_rows, ev_pages, ev_margins, ev_labels,
                       tree, cuts, t_start) -> IterationMetrics:
    train_loss = _metric(loss, margins[rows], labels[rows])
    if not np.isfinite(train_loss):
        raise OOCError(f"training loss became {train_loss} at iteration {it}; "
                       f"check labels and lower the learning rate")
    ev_loss = ev_auc = None
    ev = None
    if ev_pages is not None:
        pos = 0
        for page in ev_pages:
            ev_margins[pos:pos + page.n_rows] += tree.leaf_value[tree.route_page(page, cuts)]
            pos += page.n_rows
        ev = ev_margins
    elif eval_rows is not None and len(eval_rows):
        ev = margins[eval_rows]
    if ev is not None and len(ev):
        ev_loss = _metric(loss, ev, ev_labels)
        if loss == "logistic" and 0 < ev_labels.sum() < len(ev_labels):
            ev_auc = eval_auc(ev, ev_labels)
    return IterationMetrics(it, train_loss, ev_loss, ev_auc, (time.perf_counter() - t_start) * 1e3)
