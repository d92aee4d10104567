"""Command-line surface: train, predict, evaluate, simulate, importance.

Exit codes: 0 success, 2 input error (bad CSV, bad arguments, schema
mismatch), 3 numeric or convergence failure.  Flags mirror config-file keys;
flags that are given explicitly override the config file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import metrics, simdata
from .binfit import BinGrid
from .boost import BoostConfig, BoostModel, fit, load_model, save_model
from .errors import NumericError
from .tree import importance as feature_importance


class InputError(Exception):
    """User-input problem mapped to exit code 2."""


def read_csv(path, response=None):
    """Strict CSV reader: header required, all cells numeric, no NA.

    Returns ``(X, y, feature_names)``; ``y`` is None when no response column
    is requested.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        y_col = None
        if response is not None:
            if response not in header:
                raise InputError(f"{path}: response column {response!r} not found")
            y_col = header.index(response)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}: line {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            parsed = []
            for col_no, cell in enumerate(row, start=1):
                text = cell.strip()
                if text == "" or text.upper() in ("NA", "NAN", "NULL"):
                    raise InputError(f"{path}: line {line_no}, column {col_no}: missing value")
                try:
                    parsed.append(float(text))
                except ValueError:
                    raise InputError(
                        f"{path}: line {line_no}, column {col_no}: not a number: {text!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise InputError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    if y_col is None:
        return data, None, header
    mask = np.ones(len(header), dtype=bool)
    mask[y_col] = False
    features = [h for h, keep in zip(header, mask) if keep]
    return data[:, mask], data[:, y_col], features


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _float_cell(v):
    return repr(float(v))


CONFIG_KEYS = {
    "n_trees": int,
    "eta": float,
    "max_depth": int,
    "df": float,
    "n_basis": int,
    "n_bins": int,
    "min_node": int,
    "n_candidates": int,
    "gain_threshold": float,
    "inner_eps": float,
    "inner_max_iter": int,
    "carrying": str,
    "validation_fraction": float,
    "early_stop_patience": int,
    "penalized_surrogate": bool,
    "transform": str,
    "shift_nonpositive": bool,
    "center": bool,
    "seed": int,
    "n_threads": int,
}


def _build_config(args):
    values = {}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config file {args.config}: {exc}") from exc
        for key, raw in file_cfg.items():
            if key not in CONFIG_KEYS:
                raise InputError(f"unknown config key {key!r}")
            values[key] = raw if raw is None else CONFIG_KEYS[key](raw)
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        return BoostConfig(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad configuration: {exc}") from exc


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--df", type=float)
    p.add_argument("--splines", dest="n_basis", type=int)
    p.add_argument("--bins", dest="n_bins", type=int)
    p.add_argument("--min-node", dest="min_node", type=int)
    p.add_argument("--candidates", dest="n_candidates", type=int)
    p.add_argument("--gain-threshold", dest="gain_threshold", type=float)
    p.add_argument("--carrying", choices=["gaussian", "uniform"])
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    p.add_argument("--patience", dest="early_stop_patience", type=int)
    p.add_argument("--transform", choices=["boxcox", "log"])
    p.add_argument("--shift-nonpositive", dest="shift_nonpositive", action="store_const", const=True)
    p.add_argument("--center", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", dest="n_threads", type=int)


def _cmd_train(args):
    X, y, _ = read_csv(args.data, response=args.response)
    config = _build_config(args)
    model = fit(X, y, config)
    save_model(model, args.out)
    if args.diagnostics:
        diag = model.diagnostics
        rows = [[0, _float_cell(diag["baseline_train_loglik"]),
                 "" if diag["baseline_val_loglik"] is None else _float_cell(diag["baseline_val_loglik"])]]
        val = diag["val_loglik"] or []
        for i, tr_ll in enumerate(diag["train_loglik"], start=1):
            rows.append([i, _float_cell(tr_ll), _float_cell(val[i - 1]) if i <= len(val) else ""])
        _write_csv(args.diagnostics, ["iteration", "train_loglik", "validation_loglik"], rows)
    print(f"model written to {args.out} ({len(model.trees)} trees, {model.selected_trees} selected)")
    return 0


def _load_model_checked(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise InputError(f"cannot open model {path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise InputError(f"cannot load model {path}: {exc}") from exc


def _cmd_predict(args):
    model = _load_model_checked(args.model)
    X, _, _ = read_csv(args.data)
    if X.shape[1] != model.n_features:
        raise InputError(
            f"model expects {model.n_features} covariates, data has {X.shape[1]}"
        )
    if args.kind == "density":
        out_grid = None
        if args.lo is not None and args.hi is not None:
            out_grid = BinGrid(n_bins=args.bins or 50, lo=args.lo, hi=args.hi)
        grid, dens = model.predict_density(X, n_bins=args.bins, out_grid=out_grid)
        header = [f"density_{m:.6g}" for m in grid.midpoints]
        _write_csv(args.out, header, [[_float_cell(v) for v in row] for row in dens])
    elif args.kind == "quantile":
        levels = _parse_levels(args.levels or "0.05,0.25,0.5,0.75,0.95")
        q = model.predict_quantiles(X, levels, n_bins=args.bins or 50)
        header = [f"q{lvl:g}" for lvl in levels]
        _write_csv(args.out, header, [[_float_cell(v) for v in row] for row in q])
    else:  # cdf
        if not args.at:
            raise InputError("--at is required for kind=cdf")
        points = _parse_levels(args.at, open_interval=False)
        vals = model.predict_cdf(X, points, n_bins=args.bins or 50)
        header = [f"cdf_{p:g}" for p in points]
        _write_csv(args.out, header, [[_float_cell(v) for v in row] for row in vals])
    print(f"predictions written to {args.out}")
    return 0


def _parse_levels(text, open_interval=True):
    try:
        levels = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise InputError(f"bad numeric list {text!r}") from exc
    if not levels:
        raise InputError("empty level list")
    if open_interval and any(not (0.0 < l < 1.0) for l in levels):
        raise InputError("levels must lie strictly inside (0, 1)")
    return levels


def _cmd_evaluate(args):
    model = _load_model_checked(args.model)
    X, y, _ = read_csv(args.data, response=args.response)
    if X.shape[1] != model.n_features:
        raise InputError(
            f"model expects {model.n_features} covariates, data has {X.shape[1]}"
        )
    oracle = None
    if args.oracle:
        try:
            with open(args.oracle, "r", encoding="utf-8") as fh:
                oracle = simdata.SimSpec.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read oracle spec {args.oracle}: {exc}") from exc
    levels = _parse_levels(args.levels) if args.levels else (0.05, 0.25, 0.5, 0.75, 0.95)
    nominal = _parse_levels(args.nominal) if args.nominal else (0.9,)
    report = metrics.evaluate_model(
        model, X, y, oracle=oracle, quantile_levels=tuple(levels), nominal_levels=tuple(nominal),
        n_bins=args.bins or 50,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")
    if args.csv:
        row = report.to_csv_row()
        _write_csv(args.csv, list(row.keys()), [["" if v is None else _float_cell(v) for v in row.values()]])
    print(f"report written to {args.out}")
    return 0


def _cmd_simulate(args):
    try:
        spec = simdata.SimSpec(
            kind=args.kind, n=args.n, d=args.d, seed=args.seed, variant=args.variant
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    X, y = simdata.generate(spec)
    header = [f"x{j + 1}" for j in range(X.shape[1])] + ["y"]
    rows = [[_float_cell(v) for v in row] + [_float_cell(t)] for row, t in zip(X, y)]
    _write_csv(args.out, header, rows)
    sidecar = args.out + ".spec.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=1)
        fh.write("\n")
    print(f"wrote {len(y)} rows to {args.out} (spec sidecar {sidecar})")
    return 0


def _cmd_importance(args):
    model = _load_model_checked(args.model)
    trees = model.trees[: model.selected_trees]
    if not trees:
        raise InputError("model has no selected trees; nothing to attribute")
    scores = feature_importance(trees)
    rows = [[f"x{j + 1}", _float_cell(s)] for j, s in enumerate(scores)]
    _write_csv(args.out, ["feature", "importance"], rows)
    print(f"importance written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cdeboost", description="Boosted conditional density estimation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model from a CSV file")
    p.add_argument("--data", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--diagnostics", help="per-iteration log-likelihood CSV")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="densities, quantiles or CDF values")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["density", "quantile", "cdf"], default="density")
    p.add_argument("--levels", help="comma-separated quantile levels")
    p.add_argument("--at", help="comma-separated response points for kind=cdf")
    p.add_argument("--bins", type=int)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score a model on a test CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--response", default="y")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional flat CSV row")
    p.add_argument("--oracle", help="simulation spec JSON for truth-based metrics")
    p.add_argument("--levels", help="quantile-loss levels")
    p.add_argument("--nominal", help="interval nominal levels")
    p.add_argument("--bins", type=int)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("simulate", help="draw a synthetic benchmark data set")
    p.add_argument("--kind", required=True, choices=sorted(simdata._DEFAULT_DIM))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="variance", choices=["variance", "modality", "skewness"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("importance", help="per-feature importance of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_importance)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
