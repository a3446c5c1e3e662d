"""Conditional transformation model: estimator, likelihood, and storage.

The model represents the conditional distribution of an outcome y given
features x through a monotone transformation onto a fixed reference
distribution:

    F(y | x) = F_Z( a(y)' theta(x) + beta(x) )

where a(y) is a Bernstein basis, theta(x) = Gamma' columns driven by an
interaction design, and beta(x) is a structured additive shift. Columns of
Gamma are increasing by construction and the interaction design is
non-negative, so the transformation is increasing in y and the implied
conditional densities integrate to one.
"""

from __future__ import annotations

import json
import warnings

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_feature_frame, check_finite, check_outcome
from ._version import __version__
from .basis import (
    BernsteinBasis,
    PenaltyMatrix,
    bernstein_deriv,
    bernstein_eval,
    difference_penalty,
    tensor_basis,
)
from .distributions import ErrorDistribution, get_error_distribution
from .exceptions import ConfigError, NumericGuardError
from .terms import INTERACTION_INTERCEPT, AdditivePredictor, TermSpec, intercept

FORMAT_VERSION = 1

# Slopes of the transformation below this value count as monotonicity
# violations; the likelihood clamps them to keep the objective finite.
DEFAULT_JACOBIAN_FLOOR = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(x):
    """Inverse of log(1 + exp(.)), stable for both tails."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        small = np.log(np.expm1(np.minimum(x, 20.0)))
    return np.where(x > 20.0, x, small)


def monotone_reparam(raw: np.ndarray) -> np.ndarray:
    """Map unconstrained coefficients to column-increasing ones.

    Row 0 passes through; every later row adds the softplus of its raw
    value to the previous row, so each column is strictly increasing.
    """
    raw = np.asarray(raw, dtype=np.float64)
    flat = raw.ndim == 1
    mat = raw[:, None] if flat else raw
    steps = np.concatenate([mat[:1], softplus(mat[1:])], axis=0)
    gamma = np.cumsum(steps, axis=0)
    return gamma[:, 0] if flat else gamma


def monotone_reparam_backward(raw: np.ndarray, grad_gamma: np.ndarray) -> np.ndarray:
    """Chain gradients through the increasing reparameterization.

    Raw entry m influences every coefficient at or above row m, so its
    gradient is the reverse cumulative sum of the coefficient gradients,
    scaled by the softplus slope for rows past the first.
    """
    raw = np.asarray(raw, dtype=np.float64)
    flat = raw.ndim == 1
    mat = raw[:, None] if flat else raw
    gg = grad_gamma[:, None] if flat else grad_gamma
    tail = np.cumsum(gg[::-1], axis=0)[::-1]
    out = np.empty_like(mat)
    out[0] = tail[0]
    out[1:] = special.expit(mat[1:]) * tail[1:]
    return out[:, 0] if flat else out


def interaction_predict(
    a_mat: np.ndarray, b_mat: np.ndarray, gamma: np.ndarray, method: str = "factored"
) -> np.ndarray:
    """Rowwise bilinear form a_i' Gamma b_i.

    The factored path evaluates (A Gamma) * B and sums rows; the
    khatri-rao path multiplies the rowwise Kronecker design with the
    flattened coefficient matrix. Both give identical values; the factored
    path avoids materializing the (M+1)*P columns.
    """
    if method == "factored":
        return np.einsum("nm,nm->n", a_mat @ gamma, b_mat)
    if method == "khatri-rao":
        return tensor_basis(a_mat, b_mat) @ gamma.ravel()
    raise ConfigError(f"unknown interaction method '{method}'")


def transformation_nll(
    h: np.ndarray,
    jac: np.ndarray,
    dist: ErrorDistribution,
    floor: float = DEFAULT_JACOBIAN_FLOOR,
    strict: bool = False,
):
    """Mean negative log likelihood under the change of variables.

    jac holds the y-derivative of the transformation; non-positive values
    are clamped to the floor and counted. In strict mode any violation
    raises instead.

    Returns (mean negative log likelihood, violation count).
    """
    violations = int(np.count_nonzero(jac <= floor))
    if strict and violations:
        raise NumericGuardError(
            f"{violations} rows have a transformation slope at or below "
            f"{floor}; the density is degenerate there"
        )
    nll = -(dist.log_pdf(h) + np.log(np.maximum(jac, floor)))
    return float(nll.mean()), violations


def resolve_sides(terms) -> tuple:
    """Split term specs into interaction and shift lists.

    Terms targeting both sides appear in both lists. The interaction side
    always carries an intercept block so a baseline transformation exists
    even without interacting features.
    """
    inter: list[TermSpec] = []
    shift: list[TermSpec] = []
    for spec in terms or []:
        if not isinstance(spec, TermSpec):
            raise ConfigError(
                f"terms must be TermSpec instances, got {type(spec).__name__}"
            )
        if spec.target in ("interaction", "both"):
            inter.append(spec)
        if spec.target in ("shift", "both"):
            shift.append(spec)
    if not any(s.kind == "intercept" for s in inter):
        inter.insert(
            0, intercept(target="interaction", name=INTERACTION_INTERCEPT)
        )
    return inter, shift


class DctmRegressor(BaseEstimator):
    """Deep conditional transformation model.

    Fits the conditional distribution of a continuous outcome by maximum
    penalized likelihood. The outcome enters through a monotone Bernstein
    expansion whose coefficients vary with interaction terms; shift terms
    add directly on the transformed scale.

    Parameters
    ----------
    terms : list of TermSpec, optional
        Additive terms; build them with the helpers in ctmflow.terms.
        Without terms the model estimates an unconditional distribution.
    order : int
        Order of the Bernstein expansion in y.
    error_distribution : str
        Reference distribution: "gaussian", "logistic", or "minev".
    support : (float, float), optional
        Outcome interval covered by the basis; inferred from the training
        outcome with relative padding when omitted.
    support_padding : float
        Relative padding applied when the support is inferred.
    lambda_y : float
        Smoothness penalty weight along the outcome direction.
    max_epochs, learning_rate, batch_size, val_fraction, patience, seed
        Optimizer settings. batch_size None means full batch for purely
        structured models and 32 when deep terms are present.
    jacobian_floor : float
        Clamp for non-positive transformation slopes inside the loss.
    strict : bool
        Raise instead of clamping when the floor is hit.
    """

    def __init__(
        self,
        terms=None,
        order: int = 8,
        error_distribution: str = "gaussian",
        support=None,
        support_padding: float = 0.05,
        lambda_y: float = 0.0,
        max_epochs: int = 500,
        learning_rate: float = 0.01,
        batch_size=None,
        val_fraction: float = 0.2,
        patience: int = 20,
        seed: int = 0,
        jacobian_floor: float = DEFAULT_JACOBIAN_FLOOR,
        strict: bool = False,
    ):
        self.terms = terms
        self.order = order
        self.error_distribution = error_distribution
        self.support = support
        self.support_padding = support_padding
        self.lambda_y = lambda_y
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.patience = patience
        self.seed = seed
        self.jacobian_floor = jacobian_floor
        self.strict = strict

    def _validate_settings(self):
        if self.order < 1:
            raise ConfigError(f"order must be >= 1, got {self.order}")
        if self.lambda_y < 0:
            raise ConfigError(f"lambda_y must be non-negative, got {self.lambda_y}")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ConfigError(
                f"val_fraction must lie in [0, 0.5], got {self.val_fraction}"
            )
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.jacobian_floor <= 0:
            raise ConfigError(
                f"jacobian_floor must be positive, got {self.jacobian_floor}"
            )

    def fit(self, X, y):
        """Fit the model by penalized maximum likelihood."""
        from . import training

        self._validate_settings()
        y = check_outcome(y, min_rows=20)
        Xm, names = as_feature_frame(X, n_rows=y.shape[0])
        self.n_features_in_ = Xm.shape[1]
        self.feature_names_in_ = np.asarray(names, dtype=object)
        dist = get_error_distribution(self.error_distribution)

        if self.support is not None:
            lo, hi = float(self.support[0]), float(self.support[1])
            basis = BernsteinBasis(order=self.order, lower=lo, upper=hi)
        else:
            basis = BernsteinBasis.from_data(y, self.order, self.support_padding)
        self.bernstein_ = basis

        inter_specs, shift_specs = resolve_sides(self.terms)
        rng_init = training.rng_stream(self.seed, "init")
        interaction = AdditivePredictor("interaction", inter_specs)
        interaction.initialize(Xm, names, rng_init)
        shift = AdditivePredictor("shift", shift_specs)
        shift.initialize(Xm, names, rng_init)
        self.interaction_ = interaction
        self.shift_ = shift

        result = training.fit_model(self, Xm, y, dist)
        self.gamma_raw_ = result.params["gamma_raw"]
        self.gamma_ = monotone_reparam(self.gamma_raw_)
        psi = result.params.get("psi")
        self.psi_ = psi.ravel().copy() if psi is not None else np.zeros(0)
        self.lambdas_ = result.lambdas
        self.lambda_y_ = float(self.lambda_y)
        self.training_log_ = result.log
        self.diagnostics_ = result.diagnostics
        return self

    def _check_fitted(self):
        if not hasattr(self, "gamma_raw_"):
            raise NotFittedError(
                "this DctmRegressor is not fitted yet; call fit first"
            )

    def _features(self, X) -> np.ndarray:
        self._check_fitted()
        Xm, names = as_feature_frame(X)
        if Xm.shape[1] != self.n_features_in_:
            raise ConfigError(
                f"X has {Xm.shape[1]} features, the model was fit with "
                f"{self.n_features_in_}"
            )
        return Xm

    def _parts(self, Xm: np.ndarray):
        b_mat, _ = self.interaction_.design(Xm)
        c_mat, index_map = self.shift_.design(Xm)
        h2 = np.zeros(Xm.shape[0])
        if c_mat.size:
            # Structured shift columns carry the fitted coefficient vector;
            # deep columns already are their own contribution.
            offset = 0
            for spec in self.shift_.specs:
                cols = c_mat[:, index_map[spec.label]]
                if spec.kind == "deep":
                    h2 = h2 + cols[:, 0]
                else:
                    width = cols.shape[1]
                    h2 = h2 + cols @ self.psi_[offset : offset + width]
                    offset += width
        return b_mat, h2

    def shift_part(self, X) -> np.ndarray:
        """Additive contribution of the shift predictor, per row."""
        Xm = self._features(X)
        _, h2 = self._parts(Xm)
        return h2

    def shift_coefficients(self) -> dict:
        """Fitted coefficients of the structured shift terms, by label."""
        self._check_fitted()
        out = {}
        offset = 0
        from .terms import term_width

        for spec in self.shift_.specs:
            if spec.kind == "deep":
                continue
            width = term_width(spec)
            out[spec.label] = self.psi_[offset : offset + width].copy()
            offset += width
        return out

    def interaction_part(self, X, y) -> np.ndarray:
        """Outcome-dependent part of the transformation at paired (x, y)."""
        Xm = self._features(X)
        y = np.asarray(y, dtype=np.float64)
        check_finite(y, "y")
        b_mat, _ = self._parts(Xm)
        a_mat = bernstein_eval(y, self.bernstein_)
        return interaction_predict(a_mat, b_mat, self.gamma_)

    def transformation(self, X, y) -> np.ndarray:
        """Value of the full transformation h(y | x) at paired rows."""
        Xm = self._features(X)
        y = np.asarray(y, dtype=np.float64)
        check_finite(y, "y")
        b_mat, h2 = self._parts(Xm)
        a_mat = bernstein_eval(y, self.bernstein_)
        return interaction_predict(a_mat, b_mat, self.gamma_) + h2

    def log_density(self, X, y) -> np.ndarray:
        """Log conditional density at paired rows, clamped at the floor."""
        Xm = self._features(X)
        y = np.asarray(y, dtype=np.float64)
        check_finite(y, "y")
        dist = get_error_distribution(self.error_distribution)
        b_mat, h2 = self._parts(Xm)
        a_mat = bernstein_eval(y, self.bernstein_)
        ap_mat = bernstein_deriv(y, self.bernstein_)
        h = interaction_predict(a_mat, b_mat, self.gamma_) + h2
        jac = interaction_predict(ap_mat, b_mat, self.gamma_)
        return dist.log_pdf(h) + np.log(np.maximum(jac, self.jacobian_floor))

    def score(self, X, y) -> float:
        """Mean log density; higher is better."""
        return float(np.mean(self.log_density(X, y)))

    def predict_cdf(self, X, y_grid) -> np.ndarray:
        """Conditional distribution function on a grid; shape (n, grid)."""
        Xm = self._features(X)
        grid = np.asarray(y_grid, dtype=np.float64)
        dist = get_error_distribution(self.error_distribution)
        b_mat, h2 = self._parts(Xm)
        a_grid = bernstein_eval(grid, self.bernstein_)
        h1 = b_mat @ (a_grid @ self.gamma_).T
        return dist.cdf(h1 + h2[:, None])

    def predict_density(self, X, y_grid) -> np.ndarray:
        """Conditional density on a grid; shape (n, grid)."""
        Xm = self._features(X)
        grid = np.asarray(y_grid, dtype=np.float64)
        dist = get_error_distribution(self.error_distribution)
        b_mat, h2 = self._parts(Xm)
        a_grid = bernstein_eval(grid, self.bernstein_)
        ap_grid = bernstein_deriv(grid, self.bernstein_)
        h = b_mat @ (a_grid @ self.gamma_).T + h2[:, None]
        jac = b_mat @ (ap_grid @ self.gamma_).T
        return np.exp(dist.log_pdf(h)) * np.maximum(jac, 0.0)

    def predict_quantile(self, X, p: float) -> np.ndarray:
        """Conditional quantile by bisection on the outcome support.

        Rows whose requested level falls outside the support's probability
        range are clamped to the support boundary.
        """
        Xm = self._features(X)
        dist = get_error_distribution(self.error_distribution)
        target = float(dist.quantile(p))
        b_mat, h2 = self._parts(Xm)
        goal = target - h2

        basis = self.bernstein_
        lo = np.full(Xm.shape[0], basis.lower)
        hi = np.full(Xm.shape[0], basis.upper)

        def h1_at(points):
            a_mat = bernstein_eval(points, basis)
            return interaction_predict(a_mat, b_mat, self.gamma_)

        below = h1_at(lo) >= goal
        above = h1_at(hi) <= goal
        width = basis.upper - basis.lower
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            high_side = h1_at(mid) >= goal
            hi = np.where(high_side, mid, hi)
            lo = np.where(high_side, lo, mid)
            if float(np.max(hi - lo)) < 1e-12 * width:
                break
        out = 0.5 * (lo + hi)
        out[below] = basis.lower
        out[above] = basis.upper
        clamped = int(np.count_nonzero(below) + np.count_nonzero(above))
        if clamped:
            warnings.warn(
                f"{clamped} quantile value(s) fall outside the modeled "
                "outcome support and were clamped to its boundary",
                RuntimeWarning,
            )
        return out

    def predict(self, X) -> np.ndarray:
        """Conditional median."""
        return self.predict_quantile(X, 0.5)

    def save(self, path: str) -> None:
        """Store the fitted model as JSON; floats round-trip exactly."""
        self._check_fitted()
        payload = {
            "format_version": FORMAT_VERSION,
            "package": "ctmflow",
            "package_version": __version__,
            "estimator": self._params_payload(),
            "fit": {
                "feature_names": [str(n) for n in self.feature_names_in_],
                "bernstein": {
                    "order": self.bernstein_.order,
                    "lower": self.bernstein_.lower,
                    "upper": self.bernstein_.upper,
                },
                "gamma_raw": self.gamma_raw_.tolist(),
                "psi": self.psi_.tolist(),
                "interaction_state": self.interaction_.state_dict(),
                "shift_state": self.shift_.state_dict(),
                "lambdas": self.lambdas_,
                "lambda_y": self.lambda_y_,
                "training_log": self.training_log_.to_dict(),
                "diagnostics": self.diagnostics_,
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    def _params_payload(self) -> dict:
        params = self.get_params(deep=False)
        params["terms"] = [t.to_dict() for t in (self.terms or [])]
        if params["support"] is not None:
            params["support"] = [float(v) for v in params["support"]]
        return params

    @classmethod
    def load(cls, path: str) -> "DctmRegressor":
        """Rebuild a fitted model from its JSON file."""
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        _require_keys(
            payload,
            {"format_version", "package", "package_version", "estimator", "fit"},
            "model file",
        )
        if payload["format_version"] != FORMAT_VERSION:
            raise ConfigError(
                f"unsupported format_version {payload['format_version']}; "
                f"this build reads version {FORMAT_VERSION}"
            )
        params = dict(payload["estimator"])
        known = set(cls().get_params(deep=False))
        _require_keys(params, known, "estimator parameters")
        params["terms"] = [TermSpec.from_dict(t) for t in params["terms"]] or None
        if params["support"] is not None:
            params["support"] = tuple(params["support"])
        est = cls(**params)

        fit_state = payload["fit"]
        _require_keys(
            fit_state,
            {
                "feature_names",
                "bernstein",
                "gamma_raw",
                "psi",
                "interaction_state",
                "shift_state",
                "lambdas",
                "lambda_y",
                "training_log",
                "diagnostics",
            },
            "fit state",
        )
        names = [str(n) for n in fit_state["feature_names"]]
        est.feature_names_in_ = np.asarray(names, dtype=object)
        est.n_features_in_ = len(names)
        bern = fit_state["bernstein"]
        est.bernstein_ = BernsteinBasis(
            order=int(bern["order"]),
            lower=float(bern["lower"]),
            upper=float(bern["upper"]),
        )
        inter_specs, shift_specs = resolve_sides(est.terms)
        est.interaction_ = AdditivePredictor("interaction", inter_specs)
        est.interaction_.load_state_dict(fit_state["interaction_state"], names)
        est.shift_ = AdditivePredictor("shift", shift_specs)
        est.shift_.load_state_dict(fit_state["shift_state"], names)
        est.gamma_raw_ = np.asarray(fit_state["gamma_raw"], dtype=np.float64)
        est.gamma_ = monotone_reparam(est.gamma_raw_)
        est.psi_ = np.asarray(fit_state["psi"], dtype=np.float64)
        est.lambdas_ = dict(fit_state["lambdas"])
        est.lambda_y_ = float(fit_state["lambda_y"])
        from .training import TrainingLog

        est.training_log_ = TrainingLog.from_dict(fit_state["training_log"])
        est.diagnostics_ = dict(fit_state["diagnostics"])
        return est


def _require_keys(mapping: dict, expected: set, what: str) -> None:
    keys = set(mapping)
    unknown = keys - expected
    missing = expected - keys
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {', '.join(sorted(unknown))}")
    if missing:
        raise ConfigError(f"missing {what} field(s): {', '.join(sorted(missing))}")


def y_direction_penalty(order: int):
    """Second-order difference penalty on the Bernstein coefficients.

    With fewer than three coefficients there is no curvature to penalize,
    so the penalty is the zero matrix.
    """
    if order < 2:
        return PenaltyMatrix(
            matrix=np.zeros((order + 1, order + 1)), nullspace_dim=order + 1
        )
    return difference_penalty(order + 1, 2)
