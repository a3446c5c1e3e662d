"""Simulation lab and benchmark harness.

Data generating processes of the form y = g^-1(eta(x) + sigma(x) z) with
known transformation parts, evaluation metrics (RIMSE on the outcome
transformation, coefficient MSE, negative predictive log score), a
multi-configuration simulation suite, and a train/test benchmark runner
for locally supplied tabular datasets.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import load_csv
from .distributions import get_error_distribution
from .exceptions import ConfigError, DataValidationError
from .model import DctmRegressor
from .terms import TermSpec, deep, linear, smooth, tensor_smooth
from .training import rng_stream

LOG_DENSITY_FLOOR = float(np.log(1e-300))


@dataclass(frozen=True)
class DgpSpec:
    """Data generating process: y = g^-1(eta(x) + sigma(x) z)."""

    name: str
    transform: str = "identity"
    eta_kind: str = "linear"
    sigma_kind: str = "const"
    n_features: int = 2
    noise: str = "gaussian"

    def __post_init__(self):
        if self.transform not in ("identity", "log"):
            raise ConfigError(f"unknown transform '{self.transform}'")
        if self.eta_kind not in ("linear", "smooth"):
            raise ConfigError(f"unknown eta kind '{self.eta_kind}'")
        if self.sigma_kind not in ("const", "exp"):
            raise ConfigError(f"unknown sigma kind '{self.sigma_kind}'")
        if self.n_features < 2:
            raise ConfigError("data generating processes use at least 2 features")

    def g(self, y):
        return np.log(y) if self.transform == "log" else np.asarray(y, dtype=np.float64)

    def g_inverse(self, t):
        return np.exp(t) if self.transform == "log" else np.asarray(t, dtype=np.float64)

    def eta(self, X: np.ndarray) -> np.ndarray:
        if self.eta_kind == "linear":
            return 1.0 + 2.0 * X[:, 0]
        return np.sin(3.0 * X[:, 0]) + X[:, 1]

    def sigma(self, X: np.ndarray) -> np.ndarray:
        if self.sigma_kind == "const":
            return np.ones(X.shape[0])
        return np.exp(0.5 * X[:, 1])

    @property
    def true_shift_coefficients(self):
        """Per-feature shift coefficients, when the shift is linear.

        Defined only for linear eta with constant sigma, where
        h2(x) = -(1 + 2 x1), so the slope on the first feature is -2.
        """
        if self.eta_kind == "linear" and self.sigma_kind == "const":
            coefs = np.zeros(self.n_features)
            coefs[0] = -2.0
            return coefs
        return None


DGP_REGISTRY = {
    s.name: s
    for s in (
        DgpSpec(name="linear-identity"),
        DgpSpec(name="linear-log", transform="log"),
        DgpSpec(name="smooth-identity", eta_kind="smooth"),
        DgpSpec(name="smooth-log", transform="log", eta_kind="smooth"),
        DgpSpec(name="linear-identity-hetero", sigma_kind="exp"),
        DgpSpec(name="smooth-identity-hetero", eta_kind="smooth", sigma_kind="exp"),
    )
}


def get_dgp(name: str) -> DgpSpec:
    try:
        return DGP_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(DGP_REGISTRY))
        raise ConfigError(f"unknown DGP '{name}'; choose one of: {known}") from None


def default_terms(spec: DgpSpec) -> list:
    """Model terms adequate for a registry process.

    The location part mirrors eta; heteroscedastic processes additionally
    interact the outcome basis with the scale-driving feature and use a
    tensor smooth for the scaled location.
    """
    if spec.sigma_kind == "const":
        if spec.eta_kind == "linear":
            return [linear(f"x{j + 1}") for j in range(spec.n_features)]
        return [smooth("x1", q=8), linear("x2")]
    terms: list[TermSpec] = [tensor_smooth("x1", "x2", q=5)]
    terms.append(smooth("x2", target="interaction", q=5))
    return terms


@dataclass
class SimulatedData:
    """One draw from a process, with the true transformation parts."""

    spec: DgpSpec
    y: np.ndarray
    X: pd.DataFrame
    sigma: np.ndarray
    eta: np.ndarray
    n_resampled: int = 0

    def true_h1(self, y_vals, sigma_val: float) -> np.ndarray:
        """Outcome part of the true transformation at one scale value."""
        return self.spec.g(np.asarray(y_vals, dtype=np.float64)) / float(sigma_val)

    def true_h2(self) -> np.ndarray:
        """Shift part of the true transformation at the sampled rows."""
        return -self.eta / self.sigma


def _draw_noise(dist_name: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if dist_name == "gaussian":
        return rng.standard_normal(n)
    dist = get_error_distribution(dist_name)
    u = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    return dist.quantile(u)


def simulate(spec: DgpSpec, n: int, seed: int, role: str = "train") -> SimulatedData:
    """Draw a dataset; features are uniform on [-1, 1].

    Rows whose outcome is non-finite are redrawn; the draw aborts when
    more than 10 percent of rows need resampling.
    """
    if n < 1:
        raise ConfigError(f"n must be positive, got {n}")
    rng = rng_stream(seed, f"dgp:{spec.name}:{role}")
    X = rng.uniform(-1.0, 1.0, size=(n, spec.n_features))
    z = _draw_noise(spec.noise, rng, n)
    y = spec.g_inverse(spec.eta(X) + spec.sigma(X) * z)

    n_resampled = 0
    for _ in range(10):
        bad = ~np.isfinite(y)
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        if n_resampled == 0 and n_bad > 0.1 * n:
            raise DataValidationError(
                f"{n_bad} of {n} simulated outcomes are non-finite; the "
                "process is numerically degenerate at these settings"
            )
        n_resampled += n_bad
        X[bad] = rng.uniform(-1.0, 1.0, size=(n_bad, spec.n_features))
        z_new = _draw_noise(spec.noise, rng, n_bad)
        y[bad] = spec.g_inverse(spec.eta(X[bad]) + spec.sigma(X[bad]) * z_new)
    else:
        raise DataValidationError("resampling did not clear non-finite outcomes")

    frame = pd.DataFrame(
        X, columns=[f"x{j + 1}" for j in range(spec.n_features)]
    )
    return SimulatedData(
        spec=spec,
        y=y,
        X=frame,
        sigma=spec.sigma(X),
        eta=spec.eta(X),
        n_resampled=n_resampled,
    )


def rimse(est_grid: np.ndarray, truth_grid: np.ndarray) -> float:
    """Range-normalized integrated squared error between two surfaces.

    Both surfaces are centered column-wise first because the split between
    the outcome part and the shift part is only identified up to a
    constant per feature configuration. A flat truth surface has no range
    to normalize by; the unscaled error is returned with a warning.
    """
    est = np.asarray(est_grid, dtype=np.float64)
    truth = np.asarray(truth_grid, dtype=np.float64)
    if est.shape != truth.shape:
        raise DataValidationError(
            f"grids differ in shape: {est.shape} vs {truth.shape}"
        )
    est_c = est - est.mean(axis=0, keepdims=True)
    truth_c = truth - truth.mean(axis=0, keepdims=True)
    spread = float(truth_c.max() - truth_c.min())
    if spread <= 0.0:
        warnings.warn(
            "truth surface is flat; returning unnormalized integrated error",
            stacklevel=2,
        )
        return float(np.mean((est_c - truth_c) ** 2))
    return float(np.mean(((est_c - truth_c) / spread) ** 2))


def h1_grids(model: DctmRegressor, sim: SimulatedData, n_y: int = 101, n_x: int = 11):
    """Estimated and true outcome-transformation surfaces on a shared grid.

    Rows index outcome quantiles, columns index scale quantiles; each
    column evaluates at the sampled row whose scale is nearest that
    quantile.
    """
    y_grid = np.quantile(sim.y, np.linspace(0.0, 1.0, n_y))
    sigma_levels = np.quantile(sim.sigma, np.linspace(0.0, 1.0, n_x))
    Xm = sim.X.to_numpy()
    est = np.empty((n_y, n_x))
    truth = np.empty((n_y, n_x))
    for j, level in enumerate(sigma_levels):
        row = int(np.argmin(np.abs(sim.sigma - level)))
        x_rep = np.repeat(Xm[row : row + 1], n_y, axis=0)
        est[:, j] = model.interaction_part(x_rep, y_grid)
        truth[:, j] = sim.true_h1(y_grid, sim.sigma[row])
    return est, truth


def coefficient_mse(estimated, truth) -> float:
    """Mean squared difference between coefficient vectors."""
    a = np.asarray(estimated, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise DataValidationError(
            f"coefficient vectors differ in shape: {a.shape} vs {b.shape}"
        )
    return float(np.mean((a - b) ** 2))


def neg_pls(model: DctmRegressor, X, y) -> float:
    """Negative mean predictive log score on held-out rows.

    Log densities are floored at log(1e-300) so a single underflow cannot
    dominate the average; flooring emits a warning.
    """
    log_density = model.log_density(X, y)
    n_floored = int(np.count_nonzero(log_density < LOG_DENSITY_FLOOR))
    if n_floored:
        warnings.warn(
            f"{n_floored} log densities fell below the floor and were clamped",
            stacklevel=2,
        )
    return float(-np.mean(np.maximum(log_density, LOG_DENSITY_FLOOR)))


def _linear_coefficient_estimates(model: DctmRegressor, spec: DgpSpec):
    if spec.true_shift_coefficients is None:
        return None
    coefs = model.shift_coefficients()
    out = np.zeros(spec.n_features)
    for j in range(spec.n_features):
        label = f"lin(x{j + 1})"
        if label in coefs:
            out[j] = float(coefs[label][0])
    return out


def _run_sim_job(job: dict) -> dict:
    spec = get_dgp(job["dgp"])
    started = time.perf_counter()
    sim = simulate(spec, job["n"], job["seed"], role="train")
    test = simulate(spec, job["n_test"], job["seed"], role="test")
    model = DctmRegressor(
        terms=default_terms(spec),
        order=job["order"],
        error_distribution=job["error_distribution"],
        seed=job["seed"],
        max_epochs=job["max_epochs"],
    )
    model.fit(sim.X, sim.y)
    est, truth = h1_grids(model, sim)
    row = {
        "dgp": spec.name,
        "n": job["n"],
        "seed": job["seed"],
        "rimse_h1": rimse(est, truth),
        "coef_mse": np.nan,
        "neg_pls_test": neg_pls(model, test.X, test.y),
        "runtime_s": 0.0,
    }
    estimates = _linear_coefficient_estimates(model, spec)
    if estimates is not None:
        row["coef_mse"] = coefficient_mse(estimates, spec.true_shift_coefficients)
    row["runtime_s"] = round(time.perf_counter() - started, 3)
    return row


def thread_count() -> int:
    """Worker count from CTMFLOW_THREADS; defaults to 1."""
    raw = os.environ.get("CTMFLOW_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"CTMFLOW_THREADS must be an integer, got '{raw}'") from None
    if value < 1:
        raise ConfigError(f"CTMFLOW_THREADS must be >= 1, got {value}")
    return value


SUITE_KEYS = {
    "dgps",
    "sizes",
    "seeds",
    "order",
    "error_distribution",
    "max_epochs",
    "n_test",
}


def run_simulation_suite(config: dict) -> pd.DataFrame:
    """Run every (process, size, seed) combination and collect metrics.

    The result rows are sorted, so output is deterministic regardless of
    worker scheduling. Worker count comes from CTMFLOW_THREADS.
    """
    unknown = set(config) - SUITE_KEYS
    if unknown:
        raise ConfigError(
            f"unknown suite config field(s): {', '.join(sorted(unknown))}"
        )
    if "dgps" not in config or "sizes" not in config:
        raise ConfigError("suite config needs 'dgps' and 'sizes'")
    dgps = [str(d) for d in config["dgps"]]
    for name in dgps:
        get_dgp(name)
    sizes = [int(v) for v in config["sizes"]]
    seeds_cfg = config.get("seeds", 5)
    seeds = (
        list(range(int(seeds_cfg)))
        if isinstance(seeds_cfg, int)
        else [int(s) for s in seeds_cfg]
    )
    jobs = [
        {
            "dgp": dgp,
            "n": n,
            "seed": seed,
            "order": int(config.get("order", 15)),
            "error_distribution": str(config.get("error_distribution", "gaussian")),
            "max_epochs": int(config.get("max_epochs", 500)),
            "n_test": int(config.get("n_test", 1000)),
        }
        for dgp in dgps
        for n in sizes
        for seed in seeds
    ]
    workers = thread_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_sim_job, jobs))
    else:
        rows = [_run_sim_job(job) for job in jobs]
    frame = pd.DataFrame(rows)
    return frame.sort_values(["dgp", "n", "seed"]).reset_index(drop=True)


UCI_SCHEMAS = {
    "boston": {
        "outcome": "medv",
        "features": [
            "crim", "zn", "indus", "chas", "nox", "rm", "age",
            "dis", "rad", "tax", "ptratio", "b", "lstat",
        ],
    },
    "airfoil": {
        "outcome": "sound",
        "features": ["frequency", "angle", "chord", "velocity", "thickness"],
    },
    "diabetes": {
        "outcome": "target",
        "features": ["age", "sex", "bmi", "bp", "s1", "s2", "s3", "s4", "s5", "s6"],
    },
}


def benchmark_schema_message(dataset: str, path: str) -> str:
    """Actionable description of the CSV a benchmark dataset expects."""
    schema = UCI_SCHEMAS[dataset]
    cols = ", ".join(schema["features"] + [schema["outcome"]])
    return (
        f"benchmark dataset '{dataset}' expects a CSV at {path} with columns "
        f"{cols} (outcome column '{schema['outcome']}'); the tool never "
        "downloads data, supply the file locally"
    )


def run_uci_benchmark(
    csv_path: str,
    dataset: str,
    order: int = 32,
    seeds=range(5),
    train_fraction: float = 0.9,
    layers=(16, 8),
    max_epochs: int = 500,
):
    """Random-split benchmark on a locally supplied dataset.

    Fits a transformation model with a deep shift term over all features
    for each seed and scores the negative predictive log score on the
    held-out rows. Returns (per-seed frame, summary dict).
    """
    if dataset not in UCI_SCHEMAS:
        known = ", ".join(sorted(UCI_SCHEMAS))
        raise ConfigError(f"unknown benchmark dataset '{dataset}'; known: {known}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    schema = UCI_SCHEMAS[dataset]
    if not os.path.exists(csv_path):
        raise FileNotFoundError(benchmark_schema_message(dataset, csv_path))
    ds = load_csv(csv_path, schema["outcome"], schema["features"])

    rows = []
    for seed in seeds:
        started = time.perf_counter()
        rng = rng_stream(int(seed), f"benchmark:{dataset}")
        perm = rng.permutation(ds.n_rows)
        n_train = int(np.floor(train_fraction * ds.n_rows))
        train, test = perm[:n_train], perm[n_train:]
        model = DctmRegressor(
            terms=[deep(schema["features"], layers=layers)],
            order=order,
            seed=int(seed),
            max_epochs=max_epochs,
        )
        model.fit(ds.X.iloc[train], ds.y[train])
        rows.append(
            {
                "dataset": dataset,
                "seed": int(seed),
                "n_train": int(n_train),
                "n_test": int(ds.n_rows - n_train),
                "neg_pls": neg_pls(model, ds.X.iloc[test], ds.y[test]),
                "runtime_s": round(time.perf_counter() - started, 3),
            }
        )
    frame = pd.DataFrame(rows)
    values = frame["neg_pls"].to_numpy()
    summary = {
        "dataset": dataset,
        "n_seeds": len(rows),
        "neg_pls_mean": float(values.mean()),
        "neg_pls_sd": float(values.std(ddof=1)) if len(rows) > 1 else 0.0,
        "neg_pls_stderr": (
            float(values.std(ddof=1) / np.sqrt(len(rows))) if len(rows) > 1 else 0.0
        ),
    }
    return frame, summary
