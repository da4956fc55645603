"""Command-line front end: convert, train, predict, inspect, bench."""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .booster import (BoosterParams, holdout_split, load_model, model_from_bytes, save_model, train,
                      write_metrics)
from .ellpack import decode_page, write_ellpack_pages
from .errors import BudgetExceeded, FormatError, OOCError, ParseError
from .ingest import (CSR_MAGIC, DEFAULT_PAGE_BYTES, CsrPage, PageSet, ingest_stream, read_text)
from .pagestore import ELLPACK_MAGIC, EllpackPage, EllpackStore, MemoryBudget
from .quantile import DEFAULT_MAX_BIN, build_cuts
from .sampling import METHODS

logger = logging.getLogger("oocboost")

EXIT_OK, EXIT_USAGE, EXIT_BUDGET, EXIT_IO = 0, 2, 3, 4
CSR_DIR, ELLPACK_DIR = "csr", "ellpack"

_SIZE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]?)(i?b?)\s*$", re.IGNORECASE)


def parse_size(text: str) -> int:
    """Byte count from '67108864', '64MiB', '64M' or '1.5GB' (binary multiples)."""
    m = _SIZE.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}")
    value, unit = float(m.group(1)), m.group(2).lower()
    scale = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}[unit]
    n = int(value * scale)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return n


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


# ---------------------------------------------------------------- parser

def _add_input(p, help_text):
    p.add_argument("--input", required=True, help=help_text)
    p.add_argument("--format", choices=("libsvm", "csv"), default="libsvm")
    p.add_argument("--zero-based", action="store_true", help="LibSVM feature indices start at 0")


def _add_budget(p):
    p.add_argument("--memory-budget", type=parse_size, default=None,
                   help="device memory budget in bytes (suffixes KiB/MiB/GiB accepted); unlimited if omitted")
    p.add_argument("--page-bytes", type=parse_size, default=DEFAULT_PAGE_BYTES)
    p.add_argument("--prefetch-depth", type=_positive_int, default=2)


def _add_training(p):
    p.add_argument("--mode", choices=("in_core", "out_of_core"), default="out_of_core")
    p.add_argument("--nrounds", type=int, default=10)
    p.add_argument("--eta", type=_fraction, default=0.3)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--max-bin", type=_positive_int, default=DEFAULT_MAX_BIN)
    p.add_argument("--lambda", dest="reg_lambda", type=_non_negative, default=1.0)
    p.add_argument("--gamma", type=_non_negative, default=0.0)
    p.add_argument("--min-child-weight", type=_non_negative, default=1.0)
    p.add_argument("--subsample", type=_fraction, default=1.0)
    p.add_argument("--sampling-method", choices=METHODS, default="mvs")
    p.add_argument("--goss-a", type=_non_negative, default=0.1)
    p.add_argument("--goss-b", type=_fraction, default=None)
    p.add_argument("--mvs-lambda", type=_non_negative, default=1.0)
    p.add_argument("--loss", choices=("logistic", "squared"), default="logistic")
    p.add_argument("--per-node-passes", action="store_true",
                   help="one page pass per node instead of per level (slow; for comparison)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oocboost", description="Out-of-core histogram gradient boosting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="text data -> CSR pages -> ELLPACK pages")
    _add_input(p, "LibSVM or CSV file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-bin", type=_positive_int, default=DEFAULT_MAX_BIN)
    _add_budget(p)
    _add_common(p)

    p = sub.add_parser("train", help="train on a converted directory (or a text file)")
    _add_input(p, "directory written by convert, or a text file converted on the fly")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--metrics-out", default=None, help="per-iteration metrics CSV")
    p.add_argument("--split", type=_fraction, default=None,
                   help="train on this random fraction of rows, evaluate on the rest")
    _add_budget(p)
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("predict", help="score a text file with a trained model")
    _add_input(p, "LibSVM or CSV file")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="-", help="predictions file, one per line ('-' = stdout)")
    p.add_argument("--output", choices=("probability", "margin"), default="probability")
    _add_common(p)

    p = sub.add_parser("inspect", help="describe a model, a page directory or a page file")
    p.add_argument("--input", required=True)
    p.add_argument("--max-rows", type=int, default=0, help="also decode this many ELLPACK rows")
    _add_common(p)

    p = sub.add_parser("bench", help="largest trainable row count per mode under a budget")
    p.add_argument("--memory-budget", type=parse_size, default=64 << 20)
    p.add_argument("--page-bytes", type=parse_size, default=None,
                   help="ELLPACK page size (default: budget / 16)")
    p.add_argument("--num-features", type=_positive_int, default=50)
    p.add_argument("--max-bin", type=_positive_int, default=DEFAULT_MAX_BIN)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--subsample", type=_fraction, default=0.1, help="sampling ratio of the sampled mode")
    p.add_argument("--sampling-method", choices=METHODS, default="mvs")
    p.add_argument("--prefetch-depth", type=_positive_int, default=2)
    p.add_argument("--resolution", type=float, default=0.01, help="relative precision of each search")
    p.add_argument("--workdir", default=None, help="scratch directory (default: a temporary one)")
    _add_common(p)
    return parser


# ---------------------------------------------------------------- commands

def _budget(args) -> MemoryBudget:
    return MemoryBudget(args.memory_budget)


def _convert(args, out_dir: Path, budget: MemoryBudget) -> EllpackStore:
    source = read_text(args.input, args.format, args.zero_based)
    pages = ingest_stream(source, args.page_bytes, out_dir / CSR_DIR)
    cuts = build_cuts(pages, args.max_bin)
    return write_ellpack_pages(pages, cuts, args.page_bytes, budget, out_dir / ELLPACK_DIR)


def cmd_convert(args) -> int:
    out = Path(args.out)
    store = _convert(args, out, _budget(args))
    pages = PageSet.open(out / CSR_DIR)
    print(f"rows={store.n_rows} features={store.cuts.num_features} csr_pages={pages.page_count} "
          f"ellpack_pages={store.page_count} bins={store.cuts.total_bins} "
          f"row_stride={store.row_stride} bits={store.bits_per_symbol}")
    return EXIT_OK


def _open_training_store(args, scratch: Path) -> EllpackStore:
    src = Path(args.input)
    if src.is_dir():
        if (src / ELLPACK_DIR / EllpackStore.META).exists():
            return EllpackStore.open(src / ELLPACK_DIR)
        return EllpackStore.open(src)
    if not src.exists():
        raise FileNotFoundError(f"input not found: {src}")
    return _convert(args, scratch, MemoryBudget())


def cmd_train(args) -> int:
    if args.goss_b is not None and args.sampling_method != "goss":
        raise _Usage("--goss-b only applies to --sampling-method goss")
    if args.goss_b is not None and args.goss_a + args.goss_b > 1:
        raise _Usage("GOSS needs --goss-a + --goss-b <= 1")
    try:
        params = BoosterParams(num_rounds=args.nrounds, learning_rate=args.eta, max_depth=args.max_depth,
                               reg_lambda=args.reg_lambda, gamma=args.gamma,
                               min_child_weight=args.min_child_weight, max_bin=args.max_bin, loss=args.loss,
                               mode=args.mode, subsample=args.subsample,
                               sampling_method=args.sampling_method, goss_a=args.goss_a,
                               goss_b=args.goss_b, mvs_lambda=args.mvs_lambda, seed=args.seed,
                               deterministic=args.deterministic, prefetch_depth=args.prefetch_depth,
                               per_node_passes=args.per_node_passes)
    except ValueError as exc:
        raise _Usage(str(exc)) from None
    with tempfile.TemporaryDirectory(prefix="oocboost-") as scratch:
        store = _open_training_store(args, Path(scratch))
        train_rows = eval_rows = None
        if args.split is not None and args.split < 1:
            train_rows, eval_rows = holdout_split(store.n_rows, args.split, args.seed)
        budget = _budget(args)
        result = train(store, params, budget, train_rows=train_rows, eval_rows=eval_rows)
    save_model(result.model, args.out)
    if args.metrics_out:
        write_metrics(result.metrics, args.metrics_out)
    last = result.metrics[-1] if result.metrics else None
    summary = f"trees={len(result.model.trees)} peak_device_bytes={budget.peak_bytes}"
    if last is not None:
        summary += f" train_loss={last.train_logloss:.6f}"
        if last.eval_auc is not None:
            summary += f" eval_loss={last.eval_logloss:.6f} eval_auc={last.eval_auc:.6f}"
    print(summary)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    labels, rows = [], []
    for label, entries in read_text(args.input, args.format, args.zero_based):
        labels.append(label)
        rows.append(entries)
    X = np.full((len(rows), model.num_features), np.nan, dtype=np.float32)
    for i, entries in enumerate(rows):
        for f, v in entries:
            if f >= model.num_features:
                raise _Usage(f"row {i + 1} has feature {f}, model knows {model.num_features} features")
            X[i, f] = v
    preds = model.predict(X, args.output) if len(rows) else np.empty(0)
    text = "".join(f"{p:.9g}\n" for p in preds)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def _describe_store(store: EllpackStore, max_rows: int) -> list[str]:
    cuts = store.cuts
    out = [f"ELLPACK store {store.directory}",
           f"rows={store.n_rows} pages={store.page_count} features={cuts.num_features} "
           f"bins={cuts.total_bins} row_stride={store.row_stride} bits={store.bits_per_symbol} "
           f"page_byte_limit={store.page_byte_limit} total_bytes={store.total_bytes}"]
    counts = np.zeros(cuts.total_bins + 1, dtype=np.int64)
    shown = 0
    for i in range(store.page_count):
        page = store.read_page(i)
        out.append(f"page {i}: rows={page.n_rows} base_row_id={page.base_row_id} bytes={page.nbytes()}")
        sym = decode_page(page)
        counts += np.bincount(sym.ravel(), minlength=cuts.total_bins + 1)
        for r in range(min(max_rows - shown, page.n_rows)):
            present = sym[r][sym[r] != page.sentinel]
            out.append(f"  row {page.base_row_id + r}: " + " ".join(
                f"{int(f)}:{int(s - cuts.feature_offsets[f])}" for f, s in
                zip(cuts.feature_of_bin(present), present)))
            shown += 1
    out.append("per-feature bin counts (feature: counts by local bin; missing)")
    for f in range(cuts.num_features):
        b0, b1 = cuts.feature_offsets[f], cuts.feature_offsets[f + 1]
        c = counts[b0:b1]
        out.append(f"  {f}: {' '.join(map(str, c))}; missing={store.n_rows - int(c.sum())}")
    return out


def _describe_model(path: Path) -> list[str]:
    model = model_from_bytes(path.read_bytes())
    out = [f"model {path}", f"loss={model.loss} base_score={model.base_score:.9g} "
           f"features={model.num_features} bins={model.cuts.total_bins} trees={len(model.trees)}"]
    for i, t in enumerate(model.trees):
        out.append(f"tree {i}: nodes={t.n_nodes} leaves={t.n_leaves} depth={t.depth()}")
    return out


def cmd_inspect(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    if path.is_dir():
        if (path / ELLPACK_DIR).is_dir():
            path = path / ELLPACK_DIR
        meta = json.loads((path / "meta.json").read_text())
        if meta.get("format") == "csr":
            ps = PageSet.open(path)
            lines = [f"CSR page set {path}", f"rows={ps.num_rows} pages={ps.page_count} "
                     f"features={ps.num_features} row_stride={ps.row_stride}"]
            lines += [f"page {i}: rows={r}" for i, r in enumerate(ps.page_rows)]
        else:
            lines = _describe_store(EllpackStore.open(path), args.max_rows)
    else:
        data = path.read_bytes()
        magic = data[:4]
        if magic == b"OOCM":
            lines = _describe_model(path)
        elif magic == ELLPACK_MAGIC:
            page = EllpackPage.from_bytes(data, 0)
            lines = [f"ELLPACK page {path}", f"rows={page.n_rows} row_stride={page.row_stride} "
                     f"bits={page.bits_per_symbol} symbols={page.n_symbols} base_row_id={page.base_row_id}"]
        elif magic == CSR_MAGIC:
            page = CsrPage.from_bytes(data)
            lines = [f"CSR page {path}", f"rows={page.n_rows} entries={page.n_entries}"]
        else:
            raise FormatError(f"{path}: unrecognised file (magic {magic!r})")
    print("\n".join(lines))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = bench_mod.BenchConfig(memory_budget=args.memory_budget, num_features=args.num_features,
                                page_bytes=args.page_bytes, max_bin=args.max_bin, max_depth=args.max_depth,
                                sampling_method=args.sampling_method, low_rate=args.subsample,
                                seed=args.seed, prefetch_depth=args.prefetch_depth,
                                resolution=args.resolution,
                                workdir=Path(args.workdir) if args.workdir else None)
    report, _ = bench_mod.run_bench(cfg)
    print(report)
    return EXIT_OK


COMMANDS = {"convert": cmd_convert, "train": cmd_train, "predict": cmd_predict,
            "inspect": cmd_inspect, "bench": cmd_bench}


class _Usage(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        parser.error(str(exc))
    except BudgetExceeded as exc:
        print(f"error: {exc}\nhint: train out of core with row sampling, e.g. "
              f"--mode out_of_core --subsample 0.1 --sampling-method mvs", file=sys.stderr)
        return EXIT_BUDGET
    except ParseError as exc:
        print(f"error: {args.input}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}" if exc.filename else f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OOCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
