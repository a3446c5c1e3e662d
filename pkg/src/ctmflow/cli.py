"""Command line interface.

Exit codes: 0 on success, 2 for configuration or data validation problems,
3 for numeric failures, 4 for I/O errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np
import pandas as pd

from ._validation import check_finite
from ._version import __version__
from .basis import bernstein_eval
from .config import load_model_config
from .data import load_csv
from .exceptions import (
    ConfigError,
    DataValidationError,
    DivergenceError,
    NumericGuardError,
)
from .model import DctmRegressor
from .simulate import run_simulation_suite, run_uci_benchmark
from .training import grad_check


def _parse_float_list(text: str, what: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"could not parse {what} '{text}'") from None


def _parse_int_list(text: str, what: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"could not parse {what} '{text}'") from None


def _training_log_path(model_path: str) -> str:
    stem, _ = os.path.splitext(model_path)
    return stem + "-training-log.csv"


def cmd_fit(args) -> int:
    est = load_model_config(args.config)
    features = args.features.split(",") if args.features else None
    ds = load_csv(args.data, args.outcome, features)
    est.fit(ds.X, ds.y)
    est.save(args.out)

    log = est.training_log_
    log_path = _training_log_path(args.out)
    pd.DataFrame(
        {
            "epoch": np.arange(len(log.train_loss)),
            "train_loss": log.train_loss,
            "val_loss": log.val_loss,
        }
    ).to_csv(log_path, index=False)

    print(f"fit {ds.n_rows} rows ({ds.n_dropped_rows} dropped) from {args.data}")
    print(
        f"stopped by {log.stopping_reason} at epoch {len(log.train_loss) - 1}; "
        f"best validation loss {log.best_val_loss:.6f} at epoch {log.best_epoch}"
    )
    if est.diagnostics_.get("jacobian_violations"):
        print(
            f"warning: {est.diagnostics_['jacobian_violations']} transformation "
            "slope violations were clamped during training"
        )
    print(f"model written to {args.out}; training log to {log_path}")
    return 0


def _features_for_model(model: DctmRegressor, data_path: str) -> pd.DataFrame:
    frame = pd.read_csv(data_path)
    names = [str(n) for n in model.feature_names_in_]
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise DataValidationError(
            f"data is missing model feature column(s): {', '.join(missing)}"
        )
    extra = [str(c) for c in frame.columns if str(c) not in names]
    if extra:
        warnings.warn(
            f"ignoring column(s) not used by the model: {', '.join(extra)}",
            stacklevel=2,
        )
    X = frame[names].astype(np.float64)
    check_finite(X.to_numpy(), "X")
    return X


def cmd_predict(args) -> int:
    model = DctmRegressor.load(args.model)
    X = _features_for_model(model, args.data)
    if args.at == "quantiles":
        levels = _parse_float_list(args.quantiles, "quantile levels")
        if not levels:
            raise ConfigError("at least one quantile level is required")
        out = pd.DataFrame(index=X.index)
        for p in levels:
            out[f"q{p:g}"] = model.predict_quantile(X, p)
        out.to_csv(args.out, index=False)
        print(
            f"wrote {out.shape[0]} predictions x {len(levels)} quantiles to {args.out}"
        )
        return 0

    grid = int(args.grid)
    if grid < 2:
        raise ConfigError(f"--grid must be at least 2, got {grid}")
    y_grid = np.linspace(model.bernstein_.lower, model.bernstein_.upper, grid)
    if args.at == "cdf-grid":
        values, prefix = model.predict_cdf(X, y_grid), "cdf"
    else:
        values, prefix = model.predict_density(X, y_grid), "pdf"
    out = pd.DataFrame(
        values, columns=[f"{prefix}@{v:.6g}" for v in y_grid], index=X.index
    )
    out.to_csv(args.out, index=False)
    print(
        f"wrote {out.shape[0]} rows x {grid} outcome grid points "
        f"({args.at}) to {args.out}"
    )
    return 0


def cmd_partial_effects(args) -> int:
    model = DctmRegressor.load(args.model)
    grid = int(args.grid)
    if grid < 2:
        raise ConfigError(f"--grid must be at least 2, got {grid}")

    for side_name, predictor in (("shift", model.shift_), ("interaction", model.interaction_)):
        spec = next((s for s in predictor.specs if s.label == args.term), None)
        if spec is not None:
            break
    else:
        known = [s.label for s in model.shift_.specs] + [
            s.label for s in model.interaction_.specs
        ]
        raise ConfigError(
            f"no term named '{args.term}'; model terms: {', '.join(known)}"
        )

    if spec.kind == "deep":
        raise ConfigError(
            "deep terms have no one-dimensional partial effect; "
            "use predict or predict_cdf to inspect them"
        )

    frame = _partial_effect_frame(model, side_name, spec, grid)
    frame.to_csv(args.out, index=False)
    print(f"wrote partial effect of '{args.term}' ({frame.shape[0]} rows) to {args.out}")
    return 0


def _grid_inputs(model: DctmRegressor, spec, state, grid: int):
    names = [str(n) for n in model.feature_names_in_]
    ranges = state["feature_range"]
    axes = [np.linspace(lo, hi, grid) for lo, hi in ranges]
    if len(axes) == 1:
        mesh = axes[0][:, None]
    else:
        a, b = np.meshgrid(axes[0], axes[1], indexing="ij")
        mesh = np.column_stack([a.ravel(), b.ravel()])
    Xm = np.zeros((mesh.shape[0], len(names)))
    for k, f in enumerate(spec.features):
        Xm[:, names.index(f)] = mesh[:, k]
    return Xm, mesh


def _partial_effect_frame(model, side_name, spec, grid):
    if spec.kind == "intercept" and side_name == "shift":
        value = model.shift_coefficients()[spec.label][0]
        return pd.DataFrame({"effect": [value]})

    predictor = model.shift_ if side_name == "shift" else model.interaction_
    state = predictor.states[spec.label]

    if side_name == "shift":
        coefs = model.shift_coefficients()[spec.label]
        Xm, mesh = _grid_inputs(model, spec, state, grid)
        cols = predictor.term_columns(spec.label, Xm)
        effect = cols @ coefs
        if spec.kind in ("smooth", "tensor_smooth"):
            # Smooth effects are identified only up to a constant; report
            # them on a sum-to-zero scale over the grid.
            effect = effect - effect.mean()
        data = {f: mesh[:, k] for k, f in enumerate(spec.features)}
        data["effect"] = effect
        return pd.DataFrame(data)

    # Interaction side: effect varies with the outcome as well.
    y_grid = np.linspace(model.bernstein_.lower, model.bernstein_.upper, grid)
    a_mat = bernstein_eval(y_grid, model.bernstein_)
    gamma_block = model.gamma_[:, predictor.index_map[spec.label]]
    if spec.kind == "intercept":
        effect = a_mat @ gamma_block[:, 0]
        return pd.DataFrame({"y": y_grid, "effect": effect})
    if spec.kind == "tensor_smooth":
        raise ConfigError(
            "partial effects for interaction-side tensor smooths are not "
            "supported; inspect predict_cdf on chosen rows instead"
        )
    Xm, mesh = _grid_inputs(model, spec, state, grid)
    cols = predictor.term_columns(spec.label, Xm)
    surface = a_mat @ gamma_block @ cols.T
    y_rep = np.repeat(y_grid, mesh.shape[0])
    x_rep = np.tile(mesh[:, 0], grid)
    return pd.DataFrame(
        {"y": y_rep, spec.features[0]: x_rep, "effect": surface.ravel()}
    )


def cmd_simulate(args) -> int:
    with open(args.suite_config, "r", encoding="utf-8") as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"could not parse suite config '{args.suite_config}': {exc}"
            ) from None
    frame = run_simulation_suite(config)
    frame.to_csv(args.out, index=False)
    print(f"wrote {frame.shape[0]} simulation results to {args.out}")
    for (dgp, n), group in frame.groupby(["dgp", "n"]):
        print(
            f"  {dgp} n={n}: median RIMSE {group['rimse_h1'].median():.5f}, "
            f"median neg PLS {group['neg_pls_test'].median():.4f}"
        )
    return 0


def cmd_benchmark(args) -> int:
    seeds = range(int(args.seeds)) if args.seeds.isdigit() else _parse_int_list(args.seeds, "seeds")
    frame, summary = run_uci_benchmark(
        args.data,
        args.dataset,
        order=int(args.order),
        seeds=seeds,
        train_fraction=float(args.train_fraction),
        layers=tuple(_parse_int_list(args.layers, "layers")),
        max_epochs=int(args.max_epochs),
    )
    frame.to_csv(args.out, index=False)
    print(f"wrote {frame.shape[0]} benchmark rows to {args.out}")
    print(
        f"{summary['dataset']}: neg PLS {summary['neg_pls_mean']:.4f} "
        f"(sd {summary['neg_pls_sd']:.4f}, stderr {summary['neg_pls_stderr']:.4f}) "
        f"over {summary['n_seeds']} seeds"
    )
    return 0


def cmd_gradcheck(args) -> int:
    est = load_model_config(args.config)
    features = args.features.split(",") if args.features else None
    ds = load_csv(args.data, args.outcome, features)
    report = grad_check(
        est,
        ds.X,
        ds.y,
        tolerance=float(args.tolerance),
        seed=int(args.seed),
        max_coordinates=int(args.max_coordinates) if args.max_coordinates else None,
        _corrupt=bool(args.corrupt),
    )
    status = "PASS" if report.passed else "FAIL"
    print(
        f"gradcheck {status}: max deviation {report.max_deviation:.3e} at "
        f"{report.worst_parameter or 'n/a'} over {report.n_coordinates} "
        f"coordinates (tolerance {report.tolerance:g})"
    )
    return 0 if report.passed else 1


def cmd_version(args) -> int:
    print(f"ctmflow {__version__}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctmflow",
        description=(
            "Conditional transformation models: monotone Bernstein outcome "
            "transformations with structured additive and deep predictors. "
            "Set CTMFLOW_THREADS to parallelize simulation suites."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model from a config and a CSV")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--data", required=True, help="training data CSV")
    p.add_argument("--outcome", required=True, help="outcome column name")
    p.add_argument("--features", default="", help="comma-separated feature columns")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict quantiles or distribution grids")
    p.add_argument("--model", required=True, help="fitted model JSON")
    p.add_argument("--data", required=True, help="feature CSV")
    p.add_argument(
        "--at",
        default="quantiles",
        choices=["quantiles", "cdf-grid", "density-grid"],
        help="quantity to emit per input row",
    )
    p.add_argument("--quantiles", default="0.5", help="comma-separated levels")
    p.add_argument("--grid", default="101", help="outcome grid resolution")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("partial-effects", help="evaluate one term on a grid")
    p.add_argument("--model", required=True, help="fitted model JSON")
    p.add_argument("--term", required=True, help="term name")
    p.add_argument("--grid", default="101", help="grid points per axis")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_partial_effects)

    p = sub.add_parser("simulate", help="run a simulation suite")
    p.add_argument("--suite-config", required=True, help="suite config JSON")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="random-split benchmark on a local CSV")
    p.add_argument("--data", required=True, help="dataset CSV path")
    p.add_argument("--dataset", required=True, help="dataset name (schema)")
    p.add_argument("--order", default="32", help="Bernstein order")
    p.add_argument("--seeds", default="5", help="seed count or comma list")
    p.add_argument("--train-fraction", default="0.9", help="training fraction")
    p.add_argument("--layers", default="16,8", help="hidden layer widths")
    p.add_argument("--max-epochs", default="500", help="training epochs")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--data", required=True, help="data CSV")
    p.add_argument("--outcome", required=True, help="outcome column name")
    p.add_argument("--features", default="", help="comma-separated feature columns")
    p.add_argument("--tolerance", default="1e-4", help="maximum relative deviation")
    p.add_argument("--seed", default="0", help="randomization seed")
    p.add_argument("--max-coordinates", default="", help="subsample of coordinates")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=cmd_version)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericGuardError, DivergenceError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
