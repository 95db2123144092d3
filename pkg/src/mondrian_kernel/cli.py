"""Command-line entry point: ``mondrian-kernel <command> [flags]``.

Exit codes: 0 success, 1 invalid flags or data, 2 runtime failure,
3 a verification report failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import BoundedBox, RngStream, data_box, sample_mondrian, sample_trees, stream_id
from .data import DataError, Dataset, SplitSpec, ingest_csv
from .forest import GaussianParams, forward_path
from .grid import init_grid, run_search, select_features
from .kernel_approx import backward_path, fit_predict
from .linalg import KernelRidge, laplace_gram
from .verify import run_suite

log = logging.getLogger("mondrian_kernel")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def thread_limit() -> int:
    """Worker cap from ``MK_THREADS`` (default 1)."""
    raw = os.environ.get("MK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"MK_THREADS must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mondrian-kernel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", default="-", help="output path ('-' for stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        if data:
            sp.add_argument("--data", required=True)
            sp.add_argument("--target", default="-1", help="target column name or index")
            sp.add_argument("--no-header", action="store_true")
            sp.add_argument("--split", type=float, default=0.8)

    sp = sub.add_parser("sample", help="sample one Mondrian tree on a box")
    common(sp, data=False)
    sp.add_argument("--lower", type=_floats, required=True)
    sp.add_argument("--upper", type=_floats, required=True)
    sp.add_argument("--lifetime", type=_nonneg_float, required=True)

    sp = sub.add_parser("forest-path", help="forest RMSE over the lifetime")
    common(sp)
    sp.add_argument("--trees", type=_positive(int), default=10)
    sp.add_argument("--lifetime", type=_nonneg_float, required=True)
    sp.add_argument("--prior-mean", type=float)
    sp.add_argument("--prior-var", type=_positive(float))
    sp.add_argument("--noise-var", type=_positive(float))

    sp = sub.add_parser("kernel-path", help="random-feature ridge RMSE over the lifetime")
    common(sp)
    sp.add_argument("--trees", type=_positive(int), default=10)
    sp.add_argument("--lifetime", type=_nonneg_float, required=True)
    sp.add_argument("--delta", type=_positive(float), default=1.0)

    sp = sub.add_parser("grid-search", help="greedy per-dimension lifetime search")
    common(sp)
    sp.add_argument("--trees", type=_positive(int), default=10)
    sp.add_argument("--optimizer", choices=("greedy", "bidir"), default="greedy")
    sp.add_argument("--budget", type=_positive(int), default=20)
    sp.add_argument("--delta", type=_positive(float), default=1.0)
    sp.add_argument("--eps", type=_positive(float), default=1e-6)

    sp = sub.add_parser("compare-exact", help="random-feature vs exact Laplace kernel ridge")
    common(sp)
    sp.add_argument("--lifetime", type=_nonneg_float, required=True)
    sp.add_argument("--delta", type=_positive(float), default=1.0)
    sp.add_argument("--trees-list", type=_ints, default=[1, 5, 25, 100])

    sp = sub.add_parser("verify", help="run statistical self-checks")
    sp.add_argument("--suite", default="all")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.add_argument("--out", default="-")
    return p


def _load(args) -> tuple[Dataset, np.ndarray, np.ndarray]:
    target = args.target
    ds = ingest_csv(args.data, target, has_header=not args.no_header)
    tr, va = SplitSpec(args.split, args.seed).indices(ds.N)
    return ds, tr, va


def _meta(args, **extra) -> dict:
    meta = {k: v for k, v in vars(args).items() if k not in ("out", "format")}
    meta.update(extra)
    meta["version"] = __version__
    return meta


def _emit(args, meta: dict, key: str, rows: list[dict], columns: Sequence[str]):
    if getattr(args, "format", "json") == "csv":
        buf = io.StringIO()
        for k, v in meta.items():
            buf.write(f"# {k}={json.dumps(v)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_csv_cell(r[c]) for c in columns])
        text = buf.getvalue()
    else:
        text = json.dumps({"meta": meta, key: rows}, indent=1) + "\n"
    _write(args.out, text)


def _csv_cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write(path: str, text: str):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_sample(args):
    box = BoundedBox(args.lower, args.upper)
    tree = sample_mondrian(box, args.lifetime, RngStream(args.seed, stream_id("tree", 0)))
    _write(args.out, json.dumps({"meta": _meta(args), "tree": tree.to_dict()}) + "\n")


def cmd_forest_path(args):
    ds, tr, va = _load(args)
    params = GaussianParams.from_targets(ds.y[tr])
    params = GaussianParams(
        params.prior_mean if args.prior_mean is None else args.prior_mean,
        params.prior_var if args.prior_var is None else args.prior_var,
        params.noise_var if args.noise_var is None else args.noise_var,
    )
    trees = sample_trees(data_box(ds.X), args.trees, args.lifetime, args.seed)
    path = forward_path(trees, params, ds.X[tr], ds.y[tr], ds.X[va], ds.y[va])
    meta = _meta(
        args,
        prior_mean=params.prior_mean,
        prior_var=params.prior_var,
        noise_var=params.noise_var,
        n_train=len(tr),
        n_val=len(va),
        clamped=0,
    )
    rows = [p.to_dict() for p in path]
    _emit(args, meta, "path", rows, ("lifetime", "rmse_train", "rmse_val"))


def cmd_kernel_path(args):
    ds, tr, va = _load(args)
    trees = sample_trees(data_box(ds.X), args.trees, args.lifetime, args.seed)
    path = backward_path(trees, ds.X, ds.y, tr, va, args.delta)
    rows = [p.to_dict() for p in path]
    meta = _meta(args, n_train=len(tr), n_val=len(va))
    _emit(args, meta, "path", rows, ("lifetime", "rmse_train", "rmse_val", "num_features"))


def cmd_grid_search(args):
    ds, tr, va = _load(args)
    state = init_grid(ds.X, args.trees, np.zeros(ds.D), args.delta, ds.y, tr, va, args.seed)
    trace, final = run_search(state, args.optimizer, args.budget)
    selected = sorted(select_features(final.lambdas, args.eps))
    meta = _meta(
        args,
        n_train=len(tr),
        n_val=len(va),
        initial_rmse_val=state.rmse(),
        selected_features=[ds.feature_names[d] for d in selected],
    )
    if args.format == "csv":
        rows = [
            {
                "step": s["step"],
                **{f"lambda_{d}": lam for d, lam in enumerate(s["lambdas"])},
                "rmse_val": s["rmse_val"],
                "dim": s["move"]["dim"],
                "dir": s["move"]["dir"],
            }
            for s in trace
        ]
        cols = ["step"] + [f"lambda_{d}" for d in range(ds.D)] + ["rmse_val", "dim", "dir"]
        _emit(args, meta, "trace", rows, cols)
    else:
        _emit(args, meta, "trace", trace, ())


def cmd_compare_exact(args):
    ds, tr, va = _load(args)
    Xtr, ytr, Xva, yva = ds.X[tr], ds.y[tr], ds.X[va], ds.y[va]
    exact = KernelRidge(laplace_gram(Xtr, args.lifetime), ytr, args.delta)
    pred = exact.predict(laplace_gram(Xva, args.lifetime, Xtr))
    rmse_exact = float(np.sqrt(np.mean((pred - yva) ** 2)))
    box = data_box(ds.X)

    def one(M):
        trees = sample_trees(box, M, args.lifetime, args.seed)
        p = fit_predict(trees, Xtr, ytr, Xva, args.delta)
        return {"M": M, "rmse_approx": float(np.sqrt(np.mean((p - yva) ** 2))), "rmse_exact": rmse_exact}

    with ThreadPoolExecutor(max_workers=thread_limit()) as pool:
        rows = list(pool.map(one, args.trees_list))
    _emit(args, _meta(args), "table", rows, ("M", "rmse_approx", "rmse_exact"))


def cmd_verify(args) -> int:
    reports = run_suite(args.suite, args.seed, args.alpha)
    _write(args.out, "".join(r.to_json() + "\n" for r in reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


COMMANDS = {
    "sample": cmd_sample,
    "forest-path": cmd_forest_path,
    "kernel-path": cmd_kernel_path,
    "grid-search": cmd_grid_search,
    "compare-exact": cmd_compare_exact,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        thread_limit()
        rc = COMMANDS[args.command](args)
    except (UsageError, DataError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime exit code
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
