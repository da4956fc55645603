"""Text parsing, CSR pages and page-spilling ingestion."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import FormatError, OOCError, ParseError

logger = logging.getLogger(__name__)

CSR_MAGIC = b"OOCB"
CSR_VERSION = 1
_CSR_HEADER = struct.Struct("<4sIQQ")
DEFAULT_PAGE_BYTES = 32 * 1024 * 1024
_ENTRY_DTYPE = np.dtype([("index", "<u4"), ("value", "<f4")])


class FeatureEntry(NamedTuple):
    feature_index: int
    value: float


# ---------------------------------------------------------------- parsing

def _to_f32(token, line_number, what):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"bad {what} {token!r}", line_number) from None
    f32 = np.float32(value)
    if math.isinf(f32):
        raise ParseError(f"non-finite {what} {token!r}", line_number)
    return float(f32)


def parse_libsvm_line(line: str, zero_based: bool = False, line_number: int | None = None):
    """Parse ``<label> idx:val ...`` into ``(label, entries)``.

    Entries come back sorted by feature index. Indices are 1-based in the file
    unless ``zero_based`` is set. Unsorted input is accepted; a repeated index
    is not.
    """
    text = line.split("#", 1)[0].strip()
    if not text:
        raise ParseError("empty line", line_number)
    tokens = text.split()
    label = _to_f32(tokens[0], line_number, "label")
    if math.isnan(label):
        raise ParseError("label is NaN", line_number)
    entries = []
    for tok in tokens[1:]:
        idx_s, sep, val_s = tok.partition(":")
        if not sep:
            raise ParseError(f"malformed token {tok!r}", line_number)
        if idx_s == "qid":
            continue
        try:
            idx = int(idx_s)
        except ValueError:
            raise ParseError(f"bad feature index {idx_s!r}", line_number) from None
        if not zero_based:
            idx -= 1
        if idx < 0:
            raise ParseError(f"feature index {idx_s} out of range", line_number)
        value = _to_f32(val_s, line_number, "value")
        if math.isnan(value):
            continue
        entries.append(FeatureEntry(idx, value))
    entries.sort(key=lambda e: e.feature_index)
    for a, b in zip(entries, entries[1:]):
        if a.feature_index == b.feature_index:
            raise ParseError(f"duplicate feature index {a.feature_index}", line_number)
    return label, entries


def read_libsvm(path, zero_based: bool = False) -> Iterator[tuple[float, list[FeatureEntry]]]:
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.split("#", 1)[0].strip():
                continue
            yield parse_libsvm_line(line, zero_based=zero_based, line_number=n)


def read_csv(path) -> Iterator[tuple[float, list[FeatureEntry]]]:
    """First column is the label; empty cells and ``nan`` are missing."""
    with open(path, newline="") as fh:
        for n, cells in enumerate(csv.reader(fh), 1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if n == 1:
                try:
                    float(cells[0])
                except ValueError:
                    continue  # header
            label = _to_f32(cells[0].strip(), n, "label")
            if math.isnan(label):
                raise ParseError("label is NaN", n)
            entries = []
            for j, cell in enumerate(cells[1:]):
                cell = cell.strip()
                if not cell:
                    continue
                value = _to_f32(cell, n, "value")
                if not math.isnan(value):
                    entries.append(FeatureEntry(j, value))
            yield label, entries


# ---------------------------------------------------------------- CSR pages

def csr_page_bytes(n_rows: int, n_entries: int) -> int:
    """Serialized size of a CSR page file."""
    return _CSR_HEADER.size + 8 * (n_rows + 1) + 8 * n_entries + 4 * n_rows


@dataclass
class CsrPage:
    row_offsets: np.ndarray
    feature_index: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    base_row_id: int = 0

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.feature_index = np.asarray(self.feature_index, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def n_entries(self) -> int:
        return len(self.values)

    @property
    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def nbytes(self) -> int:
        return csr_page_bytes(self.n_rows, self.n_entries)

    def row(self, i: int) -> tuple[float, list[FeatureEntry]]:
        a, b = self.row_offsets[i], self.row_offsets[i + 1]
        entries = [FeatureEntry(int(f), float(v))
                   for f, v in zip(self.feature_index[a:b], self.values[a:b])]
        return float(self.labels[i]), entries

    def rows(self):
        for i in range(self.n_rows):
            yield self.row(i)

    def slice(self, start: int, stop: int) -> CsrPage:
        a, b = self.row_offsets[start], self.row_offsets[stop]
        return CsrPage(self.row_offsets[start:stop + 1] - a, self.feature_index[a:b],
                       self.values[a:b], self.labels[start:stop], self.base_row_id + start)

    def validate(self) -> None:
        off = self.row_offsets
        if len(off) != self.n_rows + 1 or off[0] != 0 or off[-1] != self.n_entries:
            raise FormatError("inconsistent row offsets")
        if np.any(np.diff(off) < 0):
            raise FormatError("row offsets decrease")
        if self.n_entries > 1:
            step = np.diff(self.feature_index.astype(np.int64))
            row_start = np.zeros(self.n_entries, dtype=bool)
            row_start[off[1:-1][off[1:-1] < self.n_entries]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise FormatError("feature indices not strictly increasing within a row")

    def to_bytes(self) -> bytes:
        entries = np.empty(self.n_entries, dtype=_ENTRY_DTYPE)
        entries["index"] = self.feature_index
        entries["value"] = self.values
        return b"".join([
            _CSR_HEADER.pack(CSR_MAGIC, CSR_VERSION, self.n_rows, self.n_entries),
            self.row_offsets.astype("<u8").tobytes(),
            entries.tobytes(),
            self.labels.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes, base_row_id: int = 0) -> CsrPage:
        if len(data) < _CSR_HEADER.size:
            raise FormatError("truncated CSR page header")
        magic, version, n_rows, n_entries = _CSR_HEADER.unpack_from(data)
        if magic != CSR_MAGIC:
            raise FormatError(f"bad CSR page magic {magic!r}")
        if version > CSR_VERSION:
            raise FormatError(f"unsupported CSR page version {version}")
        if len(data) != csr_page_bytes(n_rows, n_entries):
            raise FormatError("CSR page size does not match its header")
        pos = _CSR_HEADER.size
        offsets = np.frombuffer(data, "<u8", n_rows + 1, pos).astype(np.int64)
        pos += 8 * (n_rows + 1)
        entries = np.frombuffer(data, _ENTRY_DTYPE, n_entries, pos)
        pos += 8 * n_entries
        labels = np.frombuffer(data, "<f4", n_rows, pos)
        page = cls(offsets, entries["index"].copy(), entries["value"].copy(), labels.copy(), base_row_id)
        page.validate()
        return page

    @classmethod
    def from_rows(cls, rows, base_row_id: int = 0) -> CsrPage:
        offsets = [0]
        idx: list[int] = []
        vals: list[float] = []
        labels = []
        for label, entries in rows:
            labels.append(label)
            for e in entries:
                idx.append(e[0])
                vals.append(e[1])
            offsets.append(len(idx))
        return cls(np.array(offsets), np.array(idx, dtype=np.uint32),
                   np.array(vals, dtype=np.float32), np.array(labels, dtype=np.float32), base_row_id)

    @classmethod
    def from_dense(cls, X, y, base_row_id: int = 0) -> CsrPage:
        """Dense block with NaN marking missing cells."""
        X = np.asarray(X, dtype=np.float32)
        present = ~np.isnan(X)
        offsets = np.concatenate([[0], np.cumsum(present.sum(axis=1))])
        cols = np.broadcast_to(np.arange(X.shape[1], dtype=np.uint32), X.shape)
        return cls(offsets, cols[present], X[present], y, base_row_id)

    def to_dense(self, num_features: int) -> np.ndarray:
        X = np.full((self.n_rows, num_features), np.nan, dtype=np.float32)
        rows = np.repeat(np.arange(self.n_rows), self.row_lengths)
        X[rows, self.feature_index] = self.values
        return X


@dataclass
class PageSet:
    """A directory of CSR page files plus a small JSON index."""

    directory: Path
    page_rows: list[int]
    num_features: int
    page_byte_limit: int = DEFAULT_PAGE_BYTES
    row_stride: int = 0
    page_bytes: list[int] = field(default_factory=list)

    META = "meta.json"

    @property
    def page_count(self) -> int:
        return len(self.page_rows)

    @property
    def num_rows(self) -> int:
        return sum(self.page_rows)

    @property
    def base_row_ids(self) -> list[int]:
        return [int(x) for x in np.concatenate([[0], np.cumsum(self.page_rows)[:-1]])]

    def page_path(self, i: int) -> Path:
        return self.directory / f"page_{i:05d}.csr"

    def read_page(self, i: int) -> CsrPage:
        path = self.page_path(i)
        try:
            page = CsrPage.from_bytes(path.read_bytes(), self.base_row_ids[i])
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
        return page

    def __iter__(self) -> Iterator[CsrPage]:
        for i in range(self.page_count):
            yield self.read_page(i)

    def labels(self) -> np.ndarray:
        return np.concatenate([p.labels for p in self]) if self.page_count else np.empty(0, np.float32)

    def save_meta(self) -> None:
        meta = {"format": "csr", "num_features": self.num_features, "num_rows": self.num_rows,
                "page_byte_limit": self.page_byte_limit, "row_stride": self.row_stride,
                "page_rows": self.page_rows, "page_bytes": self.page_bytes}
        (self.directory / self.META).write_text(json.dumps(meta, indent=1))

    @classmethod
    def open(cls, directory) -> PageSet:
        directory = Path(directory)
        meta_path = directory / cls.META
        try:
            meta = json.loads(meta_path.read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"no CSR page set at {directory}") from None
        if meta.get("format") != "csr":
            raise FormatError(f"{meta_path} is not a CSR page index")
        return cls(directory, meta["page_rows"], meta["num_features"], meta["page_byte_limit"],
                   meta.get("row_stride", 0), meta.get("page_bytes", []))


# ---------------------------------------------------------------- ingestion

class _PageWriter:
    def __init__(self, output_dir, page_byte_limit, num_features):
        self.dir = Path(output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        for stale in self.dir.glob("page_*.csr"):
            stale.unlink()
        self.limit = page_byte_limit
        self.num_features = num_features
        self.buffer: list[CsrPage] = []
        self.size = csr_page_bytes(0, 0)
        self.page_rows: list[int] = []
        self.page_bytes: list[int] = []
        self.max_feature = -1
        self.row_stride = 0

    def add(self, block: CsrPage) -> None:
        if block.n_rows == 0:
            return
        if block.n_entries:
            self.max_feature = max(self.max_feature, int(block.feature_index.max()))
            self.row_stride = max(self.row_stride, int(block.row_lengths.max()))
        cum = np.cumsum(12 + 8 * block.row_lengths)
        start = 0
        while start < block.n_rows:
            prior = cum[start - 1] if start else 0
            fit = int(np.searchsorted(cum, self.limit - self.size + prior, side="right")) - start
            if fit == 0:
                if not self.buffer:
                    row_bytes = csr_page_bytes(1, int(block.row_lengths[start]))
                    raise OOCError(f"row {block.base_row_id + start} needs {row_bytes} bytes, "
                                   f"larger than page limit {self.limit}")
                self.flush()
                continue
            piece = block.slice(start, start + fit)
            self.buffer.append(piece)
            self.size += int(cum[start + fit - 1] - prior)
            start += fit

    def flush(self) -> None:
        if not self.buffer:
            return
        page = _concat(self.buffer)
        path = self.dir / f"page_{len(self.page_rows):05d}.csr"
        try:
            path.write_bytes(page.to_bytes())
        except OSError as exc:
            raise OSError(f"cannot write page {path}: {exc}") from exc
        self.page_rows.append(page.n_rows)
        self.page_bytes.append(page.nbytes())
        self.buffer = []
        self.size = csr_page_bytes(0, 0)

    def finish(self) -> PageSet:
        self.flush()
        if not self.page_rows:
            raise OOCError("empty dataset")
        nf = self.num_features if self.num_features is not None else self.max_feature + 1
        if self.max_feature >= nf:
            raise OOCError(f"feature index {self.max_feature} exceeds num_features={nf}")
        ps = PageSet(self.dir, self.page_rows, nf, self.limit, self.row_stride, self.page_bytes)
        ps.save_meta()
        logger.info("wrote %d CSR pages, %d rows to %s", ps.page_count, ps.num_rows, self.dir)
        return ps


def _concat(pages: list[CsrPage]) -> CsrPage:
    if len(pages) == 1:
        p = pages[0]
        return CsrPage(p.row_offsets - p.row_offsets[0], p.feature_index, p.values, p.labels, p.base_row_id)
    offsets = [np.zeros(1, np.int64)]
    total = 0
    for p in pages:
        offsets.append(p.row_offsets[1:] - p.row_offsets[0] + total)
        total += p.n_entries
    return CsrPage(np.concatenate(offsets), np.concatenate([p.feature_index for p in pages]),
                   np.concatenate([p.values for p in pages]), np.concatenate([p.labels for p in pages]),
                   pages[0].base_row_id)


def _batched(rows, size=4096):
    batch = []
    for row in rows:
        batch.append(row)
        if len(batch) == size:
            yield CsrPage.from_rows(batch)
            batch = []
    if batch:
        yield CsrPage.from_rows(batch)


def ingest_blocks(blocks: Iterable[CsrPage], page_byte_limit: int, output_dir,
                  num_features: int | None = None) -> PageSet:
    """Spill blocks of rows into CSR page files of at most ``page_byte_limit`` bytes."""
    writer = _PageWriter(output_dir, page_byte_limit, num_features)
    for block in blocks:
        writer.add(block)
    return writer.finish()


def ingest_stream(source, page_byte_limit: int = DEFAULT_PAGE_BYTES, output_dir=".",
                  num_features: int | None = None) -> PageSet:
    """Ingest ``(label, entries)`` rows in input order.

    A page is flushed as soon as appending the next row would take its
    serialized size past ``page_byte_limit``.
    """
    return ingest_blocks(_batched(source), page_byte_limit, output_dir, num_features)


def read_text(path, fmt: str = "libsvm", zero_based: bool = False):
    if not os.path.exists(path):
        raise FileNotFoundError(f"input file not found: {path}")
    if fmt == "libsvm":
        return read_libsvm(path, zero_based)
    if fmt == "csv":
        return read_csv(path)
    raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------- synthetic data

SYNTH_BLOCK_ROWS = 8192


def synthetic_block(index: int, n_features: int, seed: int, missing_rate: float = 0.0,
                    block_rows: int = SYNTH_BLOCK_ROWS) -> tuple[np.ndarray, np.ndarray]:
    """Block ``index`` of the synthetic binary task as dense (X, y); NaN = missing.

    Label model: logistic noise below 2·x·w + 0.8·x0·x1 + (1 if x2 > 0.5 else -0.3),
    with a unit-norm random w drawn once per seed.
    """
    w = np.random.default_rng([seed, 0x5EED]).normal(size=n_features)
    w /= np.linalg.norm(w)
    rng = np.random.default_rng([seed, index])
    X = rng.standard_normal((block_rows, n_features), dtype=np.float32)
    score = 2.0 * (X @ w)
    if n_features >= 2:
        score += 0.8 * X[:, 0] * X[:, 1]
    if n_features >= 3:
        score += np.where(X[:, 2] > 0.5, 1.0, -0.3)
    y = (rng.logistic(size=block_rows) < score).astype(np.float32)
    if missing_rate > 0:
        X[rng.random(X.shape) < missing_rate] = np.nan
    return X, y


def synthetic_blocks(n_rows: int, n_features: int, seed: int, task: str = "binary",
                     missing_rate: float = 0.0, block_rows: int = SYNTH_BLOCK_ROWS,
                     start_row: int = 0) -> Iterator[CsrPage]:
    """Rows ``start_row .. n_rows`` of a deterministic synthetic binary task.

    Every block draws from its own seeded stream and is always generated in
    full, so row i is the same whatever ``n_rows`` is. ``start_row`` must be
    a multiple of ``block_rows``.
    """
    if n_rows < 2 or n_features < 1:
        raise ValueError("need n_rows >= 2 and n_features >= 1")
    if task != "binary":
        raise ValueError(f"unsupported task {task!r}")
    if start_row % block_rows:
        raise ValueError("start_row must be a multiple of block_rows")
    for start in range(start_row, n_rows, block_rows):
        X, y = synthetic_block(start // block_rows, n_features, seed, missing_rate, block_rows)
        n = min(block_rows, n_rows - start)
        yield CsrPage.from_dense(X[:n], y[:n], base_row_id=start)


def generate_synthetic(n_rows: int, n_features: int, seed: int, task: str = "binary",
                       missing_rate: float = 0.0):
    """Row iterator over :func:`synthetic_blocks`."""
    for block in synthetic_blocks(n_rows, n_features, seed, task, missing_rate):
        yield from block.rows()
