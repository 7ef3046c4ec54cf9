"""Command-line entry point: ``generate``, ``fit``, ``benchmark`` and ``verify``.

Exit codes: 0 success, 1 property failure (``verify``), 2 usage or input error.
Settings may come from a flat YAML mapping passed with ``--config``; explicit
flags override config keys.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .bench import SETTINGS, SynthSetting, generate_synth, grid_from_data, run_benchmark, default_eval_grid
from .dist import Dataset, EvalGrid
from .learners import FittedLearner, LearnerConfig, WorkingModel, fit_learner

log = logging.getLogger("cdte")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
BOUNDS_HEADER = ("row_id", "grid_value", "lower", "upper")


class InputError(Exception):
    """Bad input file, config or output path; maps to exit code 2."""


# ---------------------------------------------------------------------------
# CSV I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def format_dataset(data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j + 1}" for j in range(data.d)] + ["a", "y"])
    for x, a, y in zip(data.X, data.a, data.y):
        w.writerow([_fmt(v) for v in x] + [str(int(a)), _fmt(y)])
    return buf.getvalue()


def parse_dataset(text: str, source: str = "<input>") -> Dataset:
    """Parse ``x1,...,xd,a,y``; errors name the file and 1-based line number."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{source}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 2
    expected = [f"x{j + 1}" for j in range(d)] + ["a", "y"]
    if d < 1 or header != expected:
        raise InputError(f"{source}: line 1: header must be {','.join(expected) if d >= 1 else 'x1,...,xd,a,y'}")
    X, a, y = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise InputError(f"{source}: line {lineno}: expected {d + 2} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise InputError(f"{source}: line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"{source}: line {lineno}: non-finite value")
        if vals[d] not in (0.0, 1.0):
            raise InputError(f"{source}: line {lineno}: treatment 'a' must be 0 or 1, got {row[d]!r}")
        X.append(vals[:d])
        a.append(int(vals[d]))
        y.append(vals[d + 1])
    if not X:
        raise InputError(f"{source}: no data rows")
    return Dataset(np.array(X), np.array(a), np.array(y))


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    return parse_dataset(text, str(path))


def write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


def format_bounds(grid: np.ndarray, lower: np.ndarray, upper: np.ndarray, columns: np.ndarray | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOUNDS_HEADER)
    cols = np.arange(grid.size) if columns is None else columns
    for i in range(lower.shape[0]):
        for j in cols:
            w.writerow([i, _fmt(grid[j]), _fmt(lower[i, j]), _fmt(upper[i, j])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# model serialization


def save_models(path: str | Path, fitted: FittedLearner) -> None:
    cfg = fitted.config
    arrays = {
        "learner": np.array(cfg.learner),
        "estimand": np.array(cfg.estimand),
        "gamma": np.array(cfg.effective_gamma),
        "delta_grid": cfg.eval_grid.delta_grid,
        "alpha_grid": cfg.eval_grid.alpha_grid,
        "y_grid": cfg.eval_grid.y_grid,
    }
    for side, m in (("lower", fitted.lower_model), ("upper", fitted.upper_model)):
        if m is not None:
            arrays.update({f"{side}_weights": m.weights, f"{side}_x_mean": m.x_mean,
                           f"{side}_x_scale": m.x_scale, f"{side}_degree": np.array(m.degree)})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


def load_models(path: str | Path) -> tuple[WorkingModel, WorkingModel]:
    """Rebuild the two working models saved by a two-stage ``fit`` run."""
    with np.load(path) as z:
        if "lower_weights" not in z:
            raise InputError(f"{path}: single-stage learner; no working models stored")
        kind = "cdf" if str(z["estimand"]) == "cdf_bounds" else "quantile"
        grid = z["delta_grid"] if kind == "cdf" else z["alpha_grid"]
        return tuple(  # type: ignore[return-value]
            WorkingModel(z[f"{s}_weights"], z[f"{s}_x_mean"], z[f"{s}_x_scale"], int(z[f"{s}_degree"]), s, kind, grid)
            for s in ("lower", "upper")
        )


# ---------------------------------------------------------------------------
# config handling

_CONFIG_KEYS = {
    "setting", "n", "seed", "seeds", "out", "input", "test_csv", "out_dir", "learner", "learners",
    "estimand", "estimands", "gamma", "k_folds", "n_delta", "n_alpha", "n_d", "clip_floor", "ridge",
    "degree", "nuisance", "bandwidth", "benefit", "n_train", "n_test", "oracle", "checks", "full",
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise InputError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"config {path} must be a flat key-value mapping")
    cfg = {str(k).replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - _CONFIG_KEYS)
    if unknown:
        raise InputError(f"config {path}: unknown keys {unknown}")
    nested = [k for k, v in cfg.items() if isinstance(v, dict)]
    if nested:
        raise InputError(f"config {path}: nested values are not allowed ({nested})")
    return cfg


def _learner_config(args: argparse.Namespace, grid: EvalGrid, learner: str | None = None,
                    estimand: str | None = None) -> LearnerConfig:
    return LearnerConfig(
        eval_grid=grid,
        learner=learner or args.learner,
        estimand=estimand or args.estimand,
        gamma=args.gamma,
        K=args.k_folds,
        clip_floor=args.clip_floor,
        ridge=args.ridge,
        degree=args.degree,
        nuisance_method=args.nuisance,
        bandwidth=args.bandwidth,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args: argparse.Namespace) -> int:
    if args.out is None:
        raise InputError("generate needs --out")
    data = generate_synth(SynthSetting(args.setting, args.seed), args.n)
    write_text(args.out, format_dataset(data))
    log.info("wrote %d rows to %s", data.n, args.out)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    if args.input is None or args.out_dir is None:
        raise InputError("fit needs --input and --out-dir")
    data = read_dataset(args.input)
    test = read_dataset(args.test_csv) if args.test_csv else None
    for arm in (0, 1):
        if not np.any(data.a == arm):
            raise InputError(f"{args.input}: no rows with a={arm}; both arms are required")
    grid = grid_from_data(data, args.n_delta, args.n_alpha, args.n_d)
    zero_col = None
    if args.benefit:
        if args.estimand != "cdf_bounds":
            raise InputError("--benefit reports CDF bounds at delta = 0; use --estimand cdf_bounds")
        deltas = np.union1d(grid.delta_grid, [0.0])
        grid = replace(grid, delta_grid=deltas)
        zero_col = np.flatnonzero(deltas == 0.0)
    cfg = _learner_config(args, grid)
    try:
        fitted = fit_learner(data, cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out_dir)
    total_cross = 0
    for name, d in (("bounds", data), ("bounds_test", test)):
        if d is None:
            continue
        if d.d != data.d:
            raise InputError(f"{args.test_csv}: {d.d} covariates, training data has {data.d}")
        lo, up, n_cross = fitted.predict(d.X)
        total_cross += n_cross
        write_text(out / f"{name}.csv", format_bounds(cfg.grid, lo, up, zero_col))
    save_models(out / "models.npz", fitted)
    print(f"crossings repaired: {total_cross}")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    if args.out is None:
        raise InputError("benchmark needs --out")
    grid = default_eval_grid(args.setting, args.n_delta, args.n_alpha, args.n_d)
    base = _learner_config(args, grid, learner="au", estimand="cdf_bounds")
    seeds = args.seeds if args.seeds is not None else [args.seed]
    if not seeds:
        raise InputError("seeds must be nonempty")
    report = run_benchmark(args.setting, args.n_train, seeds, args.learners, args.estimands,
                           n_test=args.n_test, base=base, oracle=args.oracle)
    write_text(args.out, report.to_csv())
    log.info("wrote %d metric rows to %s", len(report.rows), args.out)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from .verify import run_checks

    try:
        results = run_checks(args.checks, full=args.full)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from None
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_learner_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learner", choices=("plugin", "iptw", "ca", "au"), default="au", help="learner (default au)")
    p.add_argument("--estimand", choices=("cdf_bounds", "quantile_bounds"), default="cdf_bounds")
    p.add_argument("--gamma", type=float, default=None,
                   help="AU correction scale in [0, 1]; default 0.25 for CDF bounds, 0.01 for quantile bounds")
    p.add_argument("--k-folds", type=int, default=5, help="cross-fitting folds (default 5)")
    p.add_argument("--n-delta", type=int, default=50, help="delta grid size (default 50)")
    p.add_argument("--n-alpha", type=int, default=50, help="alpha grid size (default 50)")
    p.add_argument("--n-d", type=int, default=200, help="outcome grid size (default 200)")
    p.add_argument("--clip-floor", type=float, default=0.05, help="propensity clipping floor (default 0.05)")
    p.add_argument("--ridge", type=float, default=1e-3, help="second-stage ridge penalty (default 1e-3)")
    p.add_argument("--degree", type=int, default=2, help="second-stage polynomial degree (default 2)")
    p.add_argument("--nuisance", choices=("kernel_empirical", "gaussian_loc_scale"), default="kernel_empirical")
    p.add_argument("--bandwidth", type=float, default=None, help="kernel bandwidth (default Scott's rule)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdte", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat YAML file of settings; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    g.add_argument("--setting", choices=SETTINGS, default="normal")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output CSV path")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a learner on a CSV dataset and export bounds")
    f.add_argument("--input", help="training CSV with header x1,...,xd,a,y")
    f.add_argument("--test-csv", help="held-out CSV; bounds are also exported for its rows")
    f.add_argument("--out-dir", help="directory for bounds.csv, bounds_test.csv and models.npz")
    f.add_argument("--seed", type=int, default=0, help="accepted for config symmetry; fitting is deterministic")
    f.add_argument("--benefit", action="store_true", help="export only the bounds at delta = 0")
    _add_learner_flags(f)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("benchmark", help="run learners on synthetic data and write a metrics CSV")
    b.add_argument("--setting", choices=SETTINGS, default="normal")
    b.add_argument("--n-train", type=int, nargs="+", default=[100, 250, 500, 750, 1000])
    b.add_argument("--n-test", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0, help="single seed when --seeds is not given")
    b.add_argument("--seeds", type=int, nargs="+", default=None)
    b.add_argument("--learners", nargs="+", choices=("plugin", "iptw", "ca", "au"),
                   default=["plugin", "iptw", "ca", "au"])
    b.add_argument("--estimands", nargs="+", choices=("cdf_bounds", "quantile_bounds"), default=["cdf_bounds"])
    b.add_argument("--oracle", action="store_true", help="use the true nuisances")
    b.add_argument("--out", help="metrics CSV path")
    _add_learner_flags(b)
    b.set_defaults(func=cmd_benchmark)

    v = sub.add_parser("verify", help="run the numerical property battery")
    v.add_argument("--checks", nargs="+", default=None, help="subset of checks to run")
    v.add_argument("--full", action="store_true", help="also run the slow learner-ordering and oracle-gap checks")
    v.set_defaults(func=cmd_verify)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    cfg = load_config(known.config)
    args = parser.parse_args(argv)
    if cfg:
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        valid = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in cfg.items() if k in valid})
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "gamma", None) is not None and not 0.0 <= args.gamma <= 1.0:
            raise InputError("--gamma must lie in [0, 1]")
        return args.func(args)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
