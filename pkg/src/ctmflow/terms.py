"""Structured additive predictor terms.

A term turns features into design columns: intercepts, linear effects,
penalized B-spline smooths, tensor-product smooths, and small fully
connected networks. Terms target either the shift predictor (a plain
additive contribution), the interaction predictor (columns that multiply
the outcome basis), or both.

Interaction-side columns must be non-negative so that monotonicity of the
outcome transformation survives the matrix product; a stored per-column
shift enforces that. Shift-side smooths are centered to sum to zero over
the training sample so the transformation absorbs the level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import basis as basis_mod
from ._validation import resolve_feature
from .autodiff import Mlp
from .basis import PenaltyMatrix, SplineBasis, bspline_eval, difference_penalty, tensor_basis
from .exceptions import ConfigError, DataValidationError

KINDS = ("intercept", "linear", "smooth", "tensor_smooth", "deep")
TARGETS = ("shift", "interaction", "both")

# Interaction basis columns are shifted to at least this value on the
# training sample, keeping the transformation strictly increasing.
NONNEG_EPS = 1e-3

INTERACTION_INTERCEPT = "interaction-intercept"


@dataclass(frozen=True)
class TermSpec:
    """Declarative description of one additive term."""

    kind: str
    target: str = "shift"
    features: tuple = ()
    name: str = ""
    q: int = 10
    degree: int = 3
    penalty_order: int = 2
    df: float | None = None
    lam: float | None = None
    layers: tuple = (16, 8)
    width: int = 8
    standardize: bool = True
    orthogonalize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown term kind '{self.kind}'; choose from {KINDS}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown term target '{self.target}'; choose from {TARGETS}")
        arity = {"intercept": 0, "linear": 1, "smooth": 1, "tensor_smooth": 2}
        if self.kind in arity and len(self.features) != arity[self.kind]:
            raise ConfigError(
                f"{self.kind} term takes {arity[self.kind]} feature(s), "
                f"got {len(self.features)}"
            )
        if self.kind == "deep":
            if len(self.features) < 1:
                raise ConfigError("deep term needs at least one feature")
            if self.target == "both":
                raise ConfigError(
                    "deep terms cannot target both sides; declare two terms"
                )
            if not self.layers or any(int(w) < 1 for w in self.layers):
                raise ConfigError(f"deep layer widths must be positive, got {self.layers}")
            if self.width < 1:
                raise ConfigError(f"deep interaction width must be >= 1, got {self.width}")
        if self.kind in ("smooth", "tensor_smooth"):
            if self.q < self.degree + 1:
                raise ConfigError(
                    f"smooth needs q >= degree+1 = {self.degree + 1}, got q={self.q}"
                )
            if self.q <= self.penalty_order:
                raise ConfigError(
                    f"smooth needs q > penalty_order = {self.penalty_order}, got q={self.q}"
                )
        if self.df is not None and self.df <= 0:
            raise ConfigError(f"df must be positive, got {self.df}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "intercept":
            return "intercept"
        if self.kind == "linear":
            return f"lin({self.features[0]})"
        if self.kind == "smooth":
            return f"s({self.features[0]})"
        if self.kind == "tensor_smooth":
            return f"te({self.features[0]},{self.features[1]})"
        return "deep(" + "+".join(self.features) + ")"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "features": list(self.features),
            "name": self.name,
            "q": self.q,
            "degree": self.degree,
            "penalty_order": self.penalty_order,
            "df": self.df,
            "lam": self.lam,
            "layers": list(self.layers),
            "width": self.width,
            "standardize": self.standardize,
            "orthogonalize": self.orthogonalize,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TermSpec":
        kwargs = dict(data)
        kwargs["features"] = tuple(kwargs.get("features", ()))
        kwargs["layers"] = tuple(kwargs.get("layers", (16, 8)))
        return cls(**kwargs)


def intercept(target: str = "shift", name: str = "") -> TermSpec:
    return TermSpec(kind="intercept", target=target, name=name)


def linear(feature: str, target: str = "shift", name: str = "") -> TermSpec:
    return TermSpec(kind="linear", target=target, features=(feature,), name=name)


def smooth(
    feature: str,
    target: str = "shift",
    q: int = 10,
    df: float | None = None,
    lam: float | None = None,
    degree: int = 3,
    penalty_order: int = 2,
    name: str = "",
) -> TermSpec:
    return TermSpec(
        kind="smooth",
        target=target,
        features=(feature,),
        q=q,
        df=df,
        lam=lam,
        degree=degree,
        penalty_order=penalty_order,
        name=name,
    )


def tensor_smooth(
    feature_a: str,
    feature_b: str,
    target: str = "shift",
    q: int = 6,
    df: float | None = None,
    lam: float | None = None,
    degree: int = 3,
    penalty_order: int = 2,
    name: str = "",
) -> TermSpec:
    return TermSpec(
        kind="tensor_smooth",
        target=target,
        features=(feature_a, feature_b),
        q=q,
        df=df,
        lam=lam,
        degree=degree,
        penalty_order=penalty_order,
        name=name,
    )


def deep(
    features,
    target: str = "shift",
    layers=(16, 8),
    width: int = 8,
    standardize: bool = True,
    orthogonalize: bool = False,
    name: str = "",
) -> TermSpec:
    return TermSpec(
        kind="deep",
        target=target,
        features=tuple(features),
        layers=tuple(int(w) for w in layers),
        width=width,
        standardize=standardize,
        orthogonalize=orthogonalize,
        name=name,
    )


def term_penalty(spec: TermSpec) -> PenaltyMatrix | None:
    """Feature-direction penalty of a term, or None when unpenalized."""
    if spec.kind == "smooth":
        return difference_penalty(spec.q, spec.penalty_order)
    if spec.kind == "tensor_smooth":
        marginal = difference_penalty(spec.q, spec.penalty_order)
        return basis_mod.kron_sum_penalty(marginal, 1.0, marginal, 1.0, spec.q)
    return None


def term_width(spec: TermSpec) -> int:
    """Number of design columns the term produces."""
    if spec.kind in ("intercept", "linear"):
        return 1
    if spec.kind == "smooth":
        return spec.q
    if spec.kind == "tensor_smooth":
        return spec.q * spec.q
    if spec.target == "shift":
        return 1
    return spec.width


def apply_sum_to_zero(cols: np.ndarray, state: dict, training: bool) -> np.ndarray:
    """Center columns on their training means; stores the offsets.

    Columns that are constant on the training data center to exactly zero
    and carry no signal; they are flagged so the fit freezes their
    coefficients at zero instead of letting penalty gradients move them.
    """
    if training:
        state["center"] = cols.mean(axis=0).tolist()
        degenerate = cols.max(axis=0) == cols.min(axis=0)
        state["degenerate"] = [bool(d) for d in degenerate]
        if degenerate.any():
            warnings.warn(
                f"{int(degenerate.sum())} constant basis column(s) center to "
                "zero; their coefficients are frozen at 0",
                RuntimeWarning,
            )
    center = np.asarray(state["center"], dtype=np.float64)
    return cols - center


def apply_nonneg_shift(
    cols: np.ndarray, state: dict, training: bool, eps: float = NONNEG_EPS
) -> np.ndarray:
    """Shift columns so the training minimum is at least eps.

    New data may still fall below zero after the stored shift, so values
    are clamped at zero to preserve monotonicity off the training sample.
    """
    if training:
        mins = cols.min(axis=0)
        state["shift"] = np.maximum(0.0, eps - mins).tolist()
    shift = np.asarray(state["shift"], dtype=np.float64)
    return np.maximum(cols + shift, 0.0)


def orthogonalize(deep_cols: np.ndarray, span: np.ndarray, w: np.ndarray | None = None):
    """Project columns off the span of a structured design.

    Returns the residual columns and the projection coefficients; pass the
    stored coefficients back in to replay the projection on new data.
    """
    if w is None:
        gram = span.T @ span
        gram = gram + 1e-10 * np.eye(gram.shape[0])
        w = np.linalg.solve(gram, span.T @ deep_cols)
    return deep_cols - span @ w, w


def assemble_design(blocks: list) -> tuple:
    """Stack named column blocks; returns (matrix, name -> column slice).

    blocks is a list of (name, columns) pairs; duplicate names are
    rejected because the slice map would silently lose a block.
    """
    index_map: dict[str, slice] = {}
    start = 0
    mats = []
    for name, cols in blocks:
        if name in index_map:
            raise ConfigError(f"duplicate term name '{name}'")
        width = cols.shape[1]
        index_map[name] = slice(start, start + width)
        start += width
        mats.append(cols)
    if mats:
        return np.hstack(mats), index_map
    return np.zeros((0, 0)), index_map


def _standardize_inputs(spec: TermSpec, X: np.ndarray, idx: list, state: dict, training: bool):
    sub = X[:, idx]
    if not spec.standardize:
        return sub
    if training:
        mean = sub.mean(axis=0)
        scale = sub.std(axis=0)
        # A constant feature would divide by zero; its column becomes zero
        # after centering, which the network simply ignores.
        scale = np.where(scale > 0.0, scale, 1.0)
        state["input_mean"] = mean.tolist()
        state["input_scale"] = scale.tolist()
    mean = np.asarray(state["input_mean"], dtype=np.float64)
    scale = np.asarray(state["input_scale"], dtype=np.float64)
    return (sub - mean) / scale


def evaluate_term_raw(
    spec: TermSpec,
    X: np.ndarray,
    feature_names: list,
    state: dict,
    training: bool = False,
    mlp: Mlp | None = None,
    counter: dict | None = None,
) -> np.ndarray:
    """Raw design columns of one term, before side-specific transforms."""
    n = X.shape[0]
    if spec.kind == "intercept":
        return np.ones((n, 1))

    idx = [resolve_feature(f, feature_names) for f in spec.features]
    if spec.kind == "deep":
        inputs = _standardize_inputs(spec, X, idx, state, training)
        if mlp is None:
            mlp = mlp_from_state(spec, state)
        return mlp.forward_np(inputs)

    if training:
        for j, f in zip(idx, spec.features):
            col = X[:, j]
            if col.max() == col.min():
                raise DataValidationError(
                    f"feature '{f}' is constant; drop it or remove term "
                    f"'{spec.label}'"
                )
        state["feature_range"] = [
            [float(X[:, j].min()), float(X[:, j].max())] for j in idx
        ]

    if spec.kind == "linear":
        return X[:, idx[0]][:, None]

    if spec.kind == "smooth":
        if training:
            sb = SplineBasis.from_data(X[:, idx[0]], spec.q, spec.degree)
            state["knots"] = sb.knots.tolist()
        sb = SplineBasis(
            num_basis=spec.q,
            degree=spec.degree,
            knots=np.asarray(state["knots"], dtype=np.float64),
        )
        return bspline_eval(X[:, idx[0]], sb, counter)

    # tensor_smooth
    if training:
        sa = SplineBasis.from_data(X[:, idx[0]], spec.q, spec.degree)
        sb = SplineBasis.from_data(X[:, idx[1]], spec.q, spec.degree)
        state["knots_a"] = sa.knots.tolist()
        state["knots_b"] = sb.knots.tolist()
    sa = SplineBasis(
        num_basis=spec.q, degree=spec.degree,
        knots=np.asarray(state["knots_a"], dtype=np.float64),
    )
    sb = SplineBasis(
        num_basis=spec.q, degree=spec.degree,
        knots=np.asarray(state["knots_b"], dtype=np.float64),
    )
    return tensor_basis(
        bspline_eval(X[:, idx[0]], sa, counter),
        bspline_eval(X[:, idx[1]], sb, counter),
    )


def mlp_architecture(spec: TermSpec) -> list:
    """Hidden widths plus the output width implied by the term's target."""
    out = 1 if spec.target == "shift" else spec.width
    return [int(w) for w in spec.layers] + [out]


def mlp_from_state(spec: TermSpec, state: dict) -> Mlp:
    net = Mlp(len(spec.features), mlp_architecture(spec))
    net.weights = [np.asarray(w, dtype=np.float64) for w in state["weights"]]
    net.biases = [np.asarray(b, dtype=np.float64) for b in state["biases"]]
    return net


class AdditivePredictor:
    """All terms on one side of the model (shift or interaction).

    Owns per-term fitted state so a stored model replays transformations
    (knots, centering offsets, non-negativity shifts, network weights,
    projection coefficients) exactly.
    """

    def __init__(self, side: str, specs: list):
        if side not in ("shift", "interaction"):
            raise ConfigError(f"unknown side '{side}'")
        self.side = side
        self.specs = list(specs)
        labels = [s.label for s in self.specs]
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise ConfigError(
                f"duplicate term name(s) on {side} side: {', '.join(dupes)}"
            )
        self.states: dict[str, dict] = {}
        self.mlps: dict[str, Mlp] = {}
        self._train_structured: np.ndarray | None = None
        self._train_span: np.ndarray | None = None

    @property
    def structured_specs(self) -> list:
        return [s for s in self.specs if s.kind != "deep"]

    @property
    def deep_specs(self) -> list:
        return [s for s in self.specs if s.kind == "deep"]

    @property
    def n_columns(self) -> int:
        return sum(term_width(s) for s in self.specs)

    @property
    def index_map(self) -> dict:
        """Term label -> column slice, derived from the specs alone."""
        out: dict[str, slice] = {}
        start = 0
        for spec in self.specs:
            width = term_width(spec)
            out[spec.label] = slice(start, start + width)
            start += width
        return out

    def initialize(self, X: np.ndarray, feature_names: list, rng: np.random.Generator):
        """Fit all data-dependent constants and initialize network weights."""
        self.states = {s.label: {} for s in self.specs}
        self.mlps = {}
        counter: dict = {}
        for spec in self.specs:
            state = self.states[spec.label]
            if spec.kind == "deep":
                net = Mlp(len(spec.features), mlp_architecture(spec))
                net.init_params(rng)
                self.mlps[spec.label] = net
                _standardize_inputs(
                    spec, X, [resolve_feature(f, feature_names) for f in spec.features],
                    state, training=True,
                )
                continue
            cols = evaluate_term_raw(
                spec, X, feature_names, state, training=True, counter=counter
            )
            if self.side == "shift":
                if spec.kind in ("smooth", "tensor_smooth"):
                    apply_sum_to_zero(cols, state, training=True)
            else:
                apply_nonneg_shift(cols, state, training=True)
        self._feature_names = list(feature_names)
        blocks = [
            (s.label, self._structured_cols(s, X)) for s in self.structured_specs
        ]
        self._train_structured, _ = assemble_design(blocks)
        if self._train_structured.size:
            self._train_span = np.hstack(
                [np.ones((X.shape[0], 1)), self._train_structured]
            )
        else:
            self._train_span = np.ones((X.shape[0], 1))
        self.refresh_deep_state(X)

    def _structured_cols(self, spec: TermSpec, X: np.ndarray, counter: dict | None = None):
        state = self.states[spec.label]
        cols = evaluate_term_raw(
            spec, X, self._feature_names, state, training=False, counter=counter
        )
        if self.side == "shift":
            if spec.kind in ("smooth", "tensor_smooth"):
                cols = apply_sum_to_zero(cols, state, training=False)
        else:
            cols = apply_nonneg_shift(cols, state, training=False)
        return cols

    def _deep_cols(self, spec: TermSpec, X: np.ndarray):
        state = self.states[spec.label]
        mlp = self.mlps.get(spec.label)
        out = evaluate_term_raw(
            spec, X, self._feature_names, state, training=False, mlp=mlp
        )
        if self.side == "interaction":
            return apply_nonneg_shift(out, state, training=False)
        if spec.orthogonalize:
            span = np.hstack([np.ones((X.shape[0], 1)), self._replay_structured(X)])
            w = np.asarray(state["orth_w"], dtype=np.float64)
            out, _ = orthogonalize(out, span, w)
        return out

    def _replay_structured(self, X: np.ndarray) -> np.ndarray:
        blocks = [(s.label, self._structured_cols(s, X)) for s in self.structured_specs]
        mat, _ = assemble_design(blocks)
        if not mat.size:
            return np.zeros((X.shape[0], 0))
        return mat

    def refresh_deep_state(self, X: np.ndarray):
        """Recompute stop-gradient constants from the current weights.

        Interaction terms refresh their non-negativity shift; shift terms
        with orthogonalization refresh the projection coefficients. Called
        once per epoch during training and once more on the final weights.
        """
        for spec in self.deep_specs:
            state = self.states[spec.label]
            mlp = self.mlps.get(spec.label)
            out = evaluate_term_raw(
                spec, X, self._feature_names, state, training=False, mlp=mlp
            )
            if self.side == "interaction":
                apply_nonneg_shift(out, state, training=True)
            elif spec.orthogonalize:
                _, w = orthogonalize(out, self._train_span)
                state["orth_w"] = w.tolist()

    def term_columns(self, label: str, X: np.ndarray, counter: dict | None = None):
        spec = next((s for s in self.specs if s.label == label), None)
        if spec is None:
            raise ConfigError(f"no term named '{label}' on the {self.side} side")
        if spec.kind == "deep":
            return self._deep_cols(spec, X)
        return self._structured_cols(spec, X, counter)

    def design(self, X: np.ndarray, counter: dict | None = None):
        """Full design matrix and name -> column slice map, in term order."""
        blocks = []
        for spec in self.specs:
            if spec.kind == "deep":
                blocks.append((spec.label, self._deep_cols(spec, X)))
            else:
                blocks.append((spec.label, self._structured_cols(spec, X, counter)))
        if not blocks:
            return np.zeros((X.shape[0], 0)), {}
        return assemble_design(blocks)

    def penalized_terms(self) -> list:
        """(spec, penalty) pairs for terms that carry a smoothness penalty."""
        out = []
        for spec in self.specs:
            pen = term_penalty(spec)
            if pen is not None:
                out.append((spec, pen))
        return out

    def state_dict(self) -> dict:
        """JSON-ready snapshot including network weights."""
        payload = {}
        for spec in self.specs:
            state = dict(self.states[spec.label])
            if spec.kind == "deep":
                mlp = self.mlps[spec.label]
                state["weights"] = [w.tolist() for w in mlp.weights]
                state["biases"] = [b.tolist() for b in mlp.biases]
            payload[spec.label] = state
        return payload

    def load_state_dict(self, payload: dict, feature_names: list):
        self._feature_names = list(feature_names)
        self.states = {}
        self.mlps = {}
        for spec in self.specs:
            if spec.label not in payload:
                raise ConfigError(f"stored model lacks state for term '{spec.label}'")
            state = dict(payload[spec.label])
            self.states[spec.label] = state
            if spec.kind == "deep":
                self.mlps[spec.label] = mlp_from_state(spec, state)
