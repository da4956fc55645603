"""Per-iteration row sampling (SGB, GOSS, MVS) and page compaction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .ellpack import empty_page
from .errors import OOCError
from .pagestore import EllpackPage, MemoryBudget

METHODS = ("uniform", "goss", "mvs")


@dataclass
class SampleResult:
    """Selected global rows (ascending) and the multiplier for each of them."""

    rows: np.ndarray
    scale: np.ndarray
    n: int
    sample_rate: float

    def __post_init__(self):
        if len(self.rows) == 0:
            raise OOCError("a sample must select at least one row")

    @property
    def selected(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.rows] = True
        return mask

    @property
    def is_full(self) -> bool:
        return len(self.rows) == self.n and bool(np.all(self.scale == 1.0))

    def apply(self, grads: np.ndarray) -> np.ndarray:
        """Scaled gradient pairs of the selected rows, in selection order."""
        out = grads[self.rows].astype(np.float64) * self.scale[:, None]
        return out.astype(np.float32)


def _rng(seed):
    return np.random.default_rng(seed)


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _full(n: int) -> SampleResult:
    return SampleResult(np.arange(n, dtype=np.int64), np.ones(n), n, 1.0)


def sample_uniform(grads: np.ndarray, f: float, seed) -> SampleResult:
    """Exactly round(f*n) rows without replacement, no reweighting."""
    if not 0 < f <= 1:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {f}")
    n = len(grads)
    if f == 1.0:
        return _full(n)
    k = max(1, _round(f * n))
    rows = np.sort(_rng(seed).choice(n, size=k, replace=False))
    return SampleResult(rows.astype(np.int64), np.ones(k), n, f)


def sample_goss(grads: np.ndarray, a: float, b: float, seed) -> SampleResult:
    """Keep the top ``a`` fraction by |g|, sample ``b`` of the rest scaled by (1-a)/b."""
    if a < 0 or b <= 0 or a + b > 1 + 1e-12:
        raise ValueError(f"GOSS needs a >= 0, b > 0 and a + b <= 1 (got a={a}, b={b})")
    n = len(grads)
    order = np.argsort(-np.abs(grads[:, 0].astype(np.float64)), kind="stable")
    k_top = min(n, _round(a * n))
    rest = order[k_top:]
    k_rand = min(len(rest), _round(b * n))
    if k_top + k_rand == 0:
        k_rand = 1
    picked = _rng(seed).choice(rest, size=k_rand, replace=False) if k_rand else rest[:0]
    rows = np.concatenate([order[:k_top], picked]).astype(np.int64)
    scale = np.concatenate([np.ones(k_top), np.full(k_rand, (1 - a) / b)])
    srt = np.argsort(rows, kind="stable")
    return SampleResult(rows[srt], scale[srt], n, a + b)


def regularized_gradient(grads: np.ndarray, lambda_reg: float) -> np.ndarray:
    g = grads[:, 0].astype(np.float64)
    h = grads[:, 1].astype(np.float64)
    return np.sqrt(g * g + lambda_reg * h * h)


def mvs_threshold(ghat: np.ndarray, expected: float) -> float:
    """Solve sum(min(1, ghat/mu)) = expected for mu.

    With ghat sorted descending and the k largest rows capped at 1, the root
    is mu = (sum of the rest) / (expected - k) for the first k where that mu
    separates the capped rows from the others. The sum is monotone in mu, so
    the first consistent k is the root. Returns 0 when fewer than
    ``expected`` rows are positive, meaning every positive row is kept.
    """
    positive = int(np.count_nonzero(ghat > 0))
    if positive <= expected:
        return 0.0
    v = np.sort(ghat)[::-1]
    k = np.arange(int(math.ceil(expected)))
    rest = np.concatenate([np.cumsum(v[::-1])[::-1], [0.0]])[k]
    mu = rest / (expected - k)
    above = np.concatenate([[np.inf], v])[k]
    ok = (v[k] <= mu) & (mu <= above)
    return float(mu[np.argmax(ok)])


def mvs_probabilities(grads: np.ndarray, f: float, lambda_reg: float = 1.0) -> np.ndarray:
    ghat = regularized_gradient(grads, lambda_reg)
    if f == 1.0:
        return np.ones(len(ghat))
    mu = mvs_threshold(ghat, f * len(ghat))
    if mu == 0.0:
        return (ghat > 0).astype(np.float64)
    return np.minimum(1.0, ghat / mu)


def sample_mvs(grads: np.ndarray, f: float, lambda_reg: float = 1.0, seed=0) -> SampleResult:
    """Poisson sampling with inclusion probability min(1, ghat/mu), debiased by 1/p."""
    if not 0 < f <= 1:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {f}")
    if lambda_reg < 0:
        raise ValueError("MVS lambda must be non-negative")
    n = len(grads)
    if f == 1.0:
        return _full(n)
    ghat = regularized_gradient(grads, lambda_reg)
    if not np.any(ghat > 0):
        res = sample_uniform(grads, f, seed)
        res.scale = np.full(len(res.rows), 1.0 / f)
        return res
    p = mvs_probabilities(grads, f, lambda_reg)
    u = _rng(seed).random(n)
    rows = np.flatnonzero(u < p)
    if len(rows) == 0:
        rows = np.array([int(np.argmax(p))])
    return SampleResult(rows.astype(np.int64), 1.0 / p[rows], n, f)


def sample(method: str, grads: np.ndarray, f: float, seed, goss_a: float = 0.1,
           goss_b: float | None = None, mvs_lambda: float = 1.0) -> SampleResult:
    """Dispatch on ``method``; GOSS splits ``f`` into a + b when b is not given."""
    if method == "uniform":
        return sample_uniform(grads, f, seed)
    if method == "goss":
        if f == 1.0 and goss_b is None:
            return _full(len(grads))
        if goss_b is not None:
            return sample_goss(grads, goss_a, goss_b, seed)
        a = min(goss_a, f / 2)  # keep a random part even for tiny rates
        return sample_goss(grads, a, f - a, seed)
    if method == "mvs":
        return sample_mvs(grads, f, mvs_lambda, seed)
    raise ValueError(f"unknown sampling method {method!r}; choose from {', '.join(METHODS)}")


def compact_pages(pages, sample: SampleResult, budget: MemoryBudget | None) -> tuple[EllpackPage, np.ndarray]:
    """Copy the selected rows of every page into one resident page.

    Returns the compacted page and the global row id of each of its rows.
    The output is allocated before the first copy, so an oversized sample
    fails without touching the remaining pages.
    """
    rows = sample.rows
    out = None
    try:
        for page in pages:
            if out is None:
                stride, fingerprint = page.row_stride, page.cuts_fingerprint
                out = empty_page(len(rows), stride, page.bits_per_symbol, page.n_bins, fingerprint,
                                 budget, "compacted page")
                written = 0
            if page.cuts_fingerprint != fingerprint or page.row_stride != stride:
                raise OOCError(f"page at row {page.base_row_id} does not share cuts/stride with the others")
            lo, hi = np.searchsorted(rows, [page.base_row_id, page.base_row_id + page.n_rows])
            local = rows[lo:hi] - page.base_row_id
            written = _append_rows(out, page, local, written)
    except Exception:
        if out is not None:
            out.release()
        raise
    if out is None:
        raise OOCError("no pages to compact")
    if written != len(rows):
        out.release()
        raise OOCError(f"sample references {len(rows)} rows but pages held {written}")
    return out, rows


def _append_rows(out: EllpackPage, page: EllpackPage, local_rows: np.ndarray, start: int) -> int:
    K.copy_rows(page.words, page.bits_per_symbol, page.row_stride, local_rows.astype(np.int64),
                out.words, start)
    return start + len(local_rows)
