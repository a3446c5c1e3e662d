"""Penalized maximum likelihood training.

Two gradient paths feed the same Adam loop: a closed-form path for purely
structured models, and a reverse-mode tape path when deep terms are
present. Both optimize the mean negative log likelihood plus quadratic
smoothness penalties divided by the training size.

Data-dependent constants inside deep terms (non-negativity shifts on the
interaction side, projection coefficients for orthogonalized shift terms)
are recomputed once per epoch from the current weights and treated as
constants within the epoch, so gradients never flow through them.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import PenaltyMatrix, bernstein_deriv, bernstein_eval
from .distributions import ErrorDistribution, get_error_distribution
from .exceptions import ConfigError, DivergenceError
from .autodiff import Tape
from .model import (
    monotone_reparam,
    monotone_reparam_backward,
    softplus_inverse,
    transformation_nll,
    y_direction_penalty,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_PATIENCE = 5
DEEP_DEFAULT_BATCH = 32


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under one user seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    )


@dataclass
class TrainingLog:
    """Per-epoch losses and the stopping decision."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopping_reason: str = ""
    jacobian_violations: int = 0
    n_train: int = 0
    n_val: int = 0

    def to_dict(self) -> dict:
        return {
            "train_loss": [float(v) for v in self.train_loss],
            "val_loss": [float(v) for v in self.val_loss],
            "best_epoch": self.best_epoch,
            "best_val_loss": float(self.best_val_loss),
            "stopping_reason": self.stopping_reason,
            "jacobian_violations": self.jacobian_violations,
            "n_train": self.n_train,
            "n_val": self.n_val,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingLog":
        return cls(
            train_loss=list(data["train_loss"]),
            val_loss=list(data["val_loss"]),
            best_epoch=int(data["best_epoch"]),
            best_val_loss=float(data["best_val_loss"]),
            stopping_reason=str(data["stopping_reason"]),
            jacobian_violations=int(data["jacobian_violations"]),
            n_train=int(data["n_train"]),
            n_val=int(data["n_val"]),
        )


class Adam:
    """Adam with bias correction; updates the parameter dict in place."""

    def __init__(self, params: dict, learning_rate: float):
        self.lr = learning_rate
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - ADAM_BETA1**self.t
        c2 = 1.0 - ADAM_BETA2**self.t
        for key, grad in grads.items():
            self.m[key] = ADAM_BETA1 * self.m[key] + (1.0 - ADAM_BETA1) * grad
            self.v[key] = ADAM_BETA2 * self.v[key] + (1.0 - ADAM_BETA2) * grad * grad
            step = self.lr * (self.m[key] / c1) / (np.sqrt(self.v[key] / c2) + ADAM_EPS)
            params[key] = params[key] - step


# --- smoothing calibration -------------------------------------------------


def _gram(cols: np.ndarray) -> np.ndarray:
    gram = cols.T @ cols
    jitter = 1e-10 * max(1.0, float(np.trace(gram)) / gram.shape[0])
    return gram + jitter * np.eye(gram.shape[0])


def smoother_df(cols: np.ndarray, penalty: PenaltyMatrix, lam: float) -> float:
    """Effective degrees of freedom: trace of the penalized hat matrix."""
    gram = _gram(cols)
    return float(np.trace(np.linalg.solve(gram + lam * penalty.matrix, gram)))


def df_to_lambda(
    cols: np.ndarray,
    penalty: PenaltyMatrix,
    target_df: float,
    log10_range: tuple = (-12.0, 12.0),
) -> float:
    """Invert the degrees-of-freedom curve by bisection on log10(lambda).

    The curve df(lambda) = sum_i 1 / (1 + lambda d_i) uses the generalized
    eigenvalues d_i of the penalty in the metric of the block's Gram
    matrix, and decreases from the block rank toward the penalty null
    space dimension.
    """
    gram = _gram(cols)
    eigs = scipy.linalg.eigh(penalty.matrix, gram, eigvals_only=True)
    eigs = np.maximum(eigs, 0.0)
    # Null-space eigenvalues come out as noise on the order of machine
    # precision; snap them to zero so the df floor is exactly the null
    # space dimension rather than noise-dependent.
    eigs[eigs <= eigs.max() * 1e-12] = 0.0

    def df_at(log_lam: float) -> float:
        return float(np.sum(1.0 / (1.0 + 10.0**log_lam * eigs)))

    lo, hi = log10_range
    df_hi, df_lo = df_at(lo), df_at(hi)
    if target_df > df_hi + 1e-6:
        raise ConfigError(
            f"target df {target_df:.4g} exceeds the rank {df_hi:.4g} "
            "available to this term"
        )
    if target_df >= df_hi - 1e-9:
        return 0.0
    if target_df < penalty.nullspace_dim - 1e-6:
        raise ConfigError(
            f"target df {target_df:.4g} is below the penalty null space "
            f"dimension {penalty.nullspace_dim}"
        )
    if target_df <= df_lo + 1e-9:
        # The df curve flattens at the null space dimension, so the target
        # is only reachable in the infinite-smoothing limit.
        warnings.warn(
            f"target df {target_df:.4g} needs unbounded smoothing; weight "
            f"capped at 1e{hi:g}",
            RuntimeWarning,
        )
        return float(10.0**hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if df_at(mid) > target_df:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return float(10.0 ** (0.5 * (lo + hi)))


def resolve_lambdas(interaction, shift, Xm: np.ndarray) -> dict:
    """Per-term penalty weights, side-qualified by name.

    Terms with an explicit lambda keep it; terms with a target df are
    calibrated by degrees of freedom; the rest share the flexibility of
    the least flexible penalized term, which itself stays unpenalized.
    """
    lambdas: dict[str, float] = {}
    auto = []
    for side, predictor in (("interaction", interaction), ("shift", shift)):
        for spec, pen in predictor.penalized_terms():
            key = f"{side}:{spec.label}"
            cols = predictor.term_columns(spec.label, Xm)
            if spec.lam is not None:
                lambdas[key] = float(spec.lam)
            elif spec.df is not None:
                lambdas[key] = df_to_lambda(cols, pen, spec.df)
            else:
                auto.append((key, cols, pen))
    if auto:
        ranks = [int(np.linalg.matrix_rank(_gram(cols))) for _, cols, _ in auto]
        target = min(ranks)
        for (key, cols, pen), rank in zip(auto, ranks):
            lambdas[key] = 0.0 if rank == target else df_to_lambda(cols, pen, float(target))
    return lambdas


# --- objectives -------------------------------------------------------------


def _penalty_value_closed(gamma, psi, pens, lam_y, d_y):
    value = 0.0
    d_gamma = np.zeros_like(gamma)
    d_psi = np.zeros_like(psi) if psi is not None else None
    if lam_y > 0:
        dg = d_y @ gamma
        value += lam_y * float(np.sum(dg * gamma))
        d_gamma += 2.0 * lam_y * dg
    for target, sl, mat, lam in pens:
        if lam <= 0:
            continue
        if target == "gamma":
            block = gamma[:, sl]
            bd = block @ mat
            value += lam * float(np.sum(bd * block))
            d_gamma[:, sl] += 2.0 * lam * bd
        else:
            block = psi[sl]
            bd = mat @ block
            value += lam * float(np.sum(block * bd))
            d_psi[sl] += 2.0 * lam * bd
    return value, d_gamma, d_psi


class ClosedFormObjective:
    """Analytic gradients for models without deep terms."""

    def __init__(
        self, A, Ap, B, C, dist, floor, strict, pens, lam_y, d_y, n_train,
        psi_freeze=None,
    ):
        self.A, self.Ap, self.B, self.C = A, Ap, B, C
        self.dist = dist
        self.floor = floor
        self.strict = strict
        self.pens = pens
        self.lam_y = lam_y
        self.d_y = d_y
        self.n_train = n_train
        self.psi_freeze = psi_freeze

    def epoch_refresh(self, params: dict) -> None:
        pass

    def _forward(self, params: dict, idx: np.ndarray):
        gamma = monotone_reparam(params["gamma_raw"])
        a_g = self.A[idx] @ gamma
        ap_g = self.Ap[idx] @ gamma
        b = self.B[idx]
        h1 = np.einsum("nm,nm->n", a_g, b)
        h1p = np.einsum("nm,nm->n", ap_g, b)
        h = h1
        if self.C is not None:
            h = h + (self.C[idx] @ params["psi"]).ravel()
        return gamma, h, h1p

    def train_loss_and_grad(self, params: dict, idx: np.ndarray):
        gamma, h, h1p = self._forward(params, idx)
        nll, violations = transformation_nll(
            h, h1p, self.dist, self.floor, self.strict
        )
        m = idx.shape[0]
        u = -self.dist.dlog_pdf(h)
        mask = (h1p > self.floor).astype(np.float64)
        v = -mask / np.maximum(h1p, self.floor)

        b = self.B[idx]
        d_gamma = (
            self.A[idx].T @ (u[:, None] * b) + self.Ap[idx].T @ (v[:, None] * b)
        ) / m
        psi = params.get("psi")
        pen_value, d_gamma_pen, d_psi_pen = _penalty_value_closed(
            gamma, psi, self.pens, self.lam_y, self.d_y
        )
        d_gamma += d_gamma_pen / self.n_train
        grads = {"gamma_raw": monotone_reparam_backward(params["gamma_raw"], d_gamma)}
        if self.C is not None:
            d_psi = (self.C[idx].T @ u)[:, None] / m
            grads["psi"] = d_psi + d_psi_pen / self.n_train
            if self.psi_freeze is not None:
                grads["psi"][self.psi_freeze] = 0.0
        loss = nll + pen_value / self.n_train
        return loss, grads, violations

    def eval_nll(self, params: dict, idx: np.ndarray) -> float:
        _, h, h1p = self._forward(params, idx)
        nll, _ = transformation_nll(h, h1p, self.dist, self.floor, strict=False)
        return nll

    def count_violations(self, params: dict, idx: np.ndarray) -> int:
        _, _, h1p = self._forward(params, idx)
        return int(np.count_nonzero(h1p <= self.floor))


class TapeObjective:
    """Reverse-mode gradients when deep terms are present."""

    def __init__(
        self,
        A,
        Ap,
        inter_struct_cols: dict,
        inter_deep: list,
        inter_index_map: dict,
        shift_struct: np.ndarray | None,
        shift_deep: list,
        span_full: np.ndarray,
        interaction,
        shift,
        dist,
        floor,
        strict,
        pens,
        lam_y,
        d_y,
        n_train,
        n_gamma_cols: int,
        psi_freeze=None,
    ):
        self.A, self.Ap = A, Ap
        self.inter_struct_cols = inter_struct_cols
        self.inter_deep = inter_deep
        self.inter_index_map = inter_index_map
        self.shift_struct = shift_struct
        self.shift_deep = shift_deep
        self.span_full = span_full
        self.interaction = interaction
        self.shift = shift
        self.dist = dist
        self.floor = floor
        self.strict = strict
        self.pens = pens
        self.lam_y = lam_y
        self.d_y = d_y
        self.n_train = n_train
        self.psi_freeze = psi_freeze
        order_plus_1 = A.shape[1]
        self.L = np.tril(np.ones((order_plus_1, order_plus_1)))
        self.P = n_gamma_cols
        self._epoch_shift: dict[str, np.ndarray] = {}
        self._epoch_w: dict[str, np.ndarray] = {}

    def sync_weights(self, params: dict) -> None:
        for side, predictor, terms in (
            ("interaction", self.interaction, self.inter_deep),
            ("shift", self.shift, self.shift_deep),
        ):
            for entry in terms:
                mlp = predictor.mlps[entry["label"]]
                mlp.weights = [
                    params[f"{side}|{entry['label']}|W{i}"]
                    for i in range(len(mlp.weights))
                ]
                mlp.biases = [
                    params[f"{side}|{entry['label']}|b{i}"]
                    for i in range(len(mlp.biases))
                ]

    def epoch_refresh(self, params: dict, Xm: np.ndarray | None = None) -> None:
        self.sync_weights(params)
        if Xm is None:
            Xm = self._Xm
        self._Xm = Xm
        self.interaction.refresh_deep_state(Xm)
        self.shift.refresh_deep_state(Xm)
        for entry in self.inter_deep:
            state = self.interaction.states[entry["label"]]
            self._epoch_shift[entry["label"]] = np.asarray(
                state["shift"], dtype=np.float64
            )[None, :]
        for entry in self.shift_deep:
            if entry["spec"].orthogonalize:
                state = self.shift.states[entry["label"]]
                self._epoch_w[entry["label"]] = np.asarray(
                    state["orth_w"], dtype=np.float64
                )

    def _deep_param_nodes(self, tape, params, side, entry):
        mlp_len = entry["n_layers"]
        return [
            (
                tape.leaf(params[f"{side}|{entry['label']}|W{i}"]),
                tape.leaf(params[f"{side}|{entry['label']}|b{i}"]),
            )
            for i in range(mlp_len)
        ]

    def train_loss_and_grad(self, params: dict, idx: np.ndarray):
        tape = Tape()
        order_plus_1 = self.A.shape[1]
        raw = tape.leaf(params["gamma_raw"])
        steps = tape.vstack(
            tape.rows(raw, 0, 1), tape.softplus(tape.rows(raw, 1, order_plus_1))
        )
        gamma = tape.matmul(tape.constant(self.L), steps)
        a_gamma = tape.matmul(tape.constant(self.A[idx]), gamma)
        ap_gamma = tape.matmul(tape.constant(self.Ap[idx]), gamma)

        deep_nodes = {}
        h1 = None
        h1p = None
        for label, sl in self.inter_index_map.items():
            if label in self.inter_struct_cols:
                block = tape.constant(self.inter_struct_cols[label][idx])
            else:
                entry = next(e for e in self.inter_deep if e["label"] == label)
                nodes = self._deep_param_nodes(tape, params, "interaction", entry)
                deep_nodes[("interaction", label)] = nodes
                x_node = tape.constant(entry["inputs"][idx])
                out = entry["mlp"].forward_tape(tape, x_node, nodes)
                shifted = tape.add(out, tape.constant(self._epoch_shift[label]))
                block = tape.clamp_min(shifted, 0.0)
            part = tape.sum(
                tape.mul(tape.cols(a_gamma, sl.start, sl.stop), block),
                axis=1,
                keepdims=True,
            )
            part_p = tape.sum(
                tape.mul(tape.cols(ap_gamma, sl.start, sl.stop), block),
                axis=1,
                keepdims=True,
            )
            h1 = part if h1 is None else tape.add(h1, part)
            h1p = part_p if h1p is None else tape.add(h1p, part_p)

        h = h1
        if self.shift_struct is not None:
            psi = tape.leaf(params["psi"])
            h = tape.add(h, tape.matmul(tape.constant(self.shift_struct[idx]), psi))
        else:
            psi = None
        for entry in self.shift_deep:
            nodes = self._deep_param_nodes(tape, params, "shift", entry)
            deep_nodes[("shift", entry["label"])] = nodes
            x_node = tape.constant(entry["inputs"][idx])
            out = entry["mlp"].forward_tape(tape, x_node, nodes)
            if entry["spec"].orthogonalize:
                w = self._epoch_w[entry["label"]]
                proj = tape.constant(self.span_full[idx] @ w)
                out = tape.sub(out, proj)
            h = tape.add(h, out)

        violations = int(np.count_nonzero(h1p.value <= self.floor))
        if self.strict and violations:
            from .exceptions import NumericGuardError

            raise NumericGuardError(
                f"{violations} rows have a transformation slope at or below "
                f"{self.floor}; the density is degenerate there"
            )
        neg_log = self.dist.neg_log_pdf_nodes(tape, h)
        jac = tape.clamp_min(h1p, self.floor)
        data_loss = tape.mean(tape.sub(neg_log, tape.log(jac)))

        total = data_loss
        if self.lam_y > 0:
            dg = tape.matmul(tape.constant(self.d_y), gamma)
            pen = tape.sum(tape.mul(dg, gamma))
            total = tape.add(total, tape.scale(pen, self.lam_y / self.n_train))
        for target, sl, mat, lam in self.pens:
            if lam <= 0:
                continue
            if target == "gamma":
                block = tape.cols(gamma, sl.start, sl.stop)
                quad = tape.sum(
                    tape.mul(tape.matmul(block, tape.constant(mat)), block)
                )
            else:
                block = tape.rows(psi, sl.start, sl.stop)
                quad = tape.sum(
                    tape.mul(block, tape.matmul(tape.constant(mat), block))
                )
            total = tape.add(total, tape.scale(quad, lam / self.n_train))

        grads_view = tape.backward(total)
        grads = {"gamma_raw": grads_view[raw]}
        if psi is not None:
            grads["psi"] = grads_view[psi]
            if self.psi_freeze is not None:
                grads["psi"][self.psi_freeze] = 0.0
        for (side, label), nodes in deep_nodes.items():
            for i, (w_node, b_node) in enumerate(nodes):
                grads[f"{side}|{label}|W{i}"] = grads_view[w_node]
                grads[f"{side}|{label}|b{i}"] = grads_view[b_node]
        return float(total.value), grads, violations

    def _numpy_forward(self, params: dict, idx: np.ndarray):
        self.sync_weights(params)
        gamma = monotone_reparam(params["gamma_raw"])
        a_g = self.A[idx] @ gamma
        ap_g = self.Ap[idx] @ gamma
        n = idx.shape[0]
        h1 = np.zeros(n)
        h1p = np.zeros(n)
        for label, sl in self.inter_index_map.items():
            if label in self.inter_struct_cols:
                block = self.inter_struct_cols[label][idx]
            else:
                entry = next(e for e in self.inter_deep if e["label"] == label)
                out = entry["mlp"].forward_np(entry["inputs"][idx])
                block = np.maximum(out + self._epoch_shift[label], 0.0)
            h1 += np.einsum("nm,nm->n", a_g[:, sl], block)
            h1p += np.einsum("nm,nm->n", ap_g[:, sl], block)
        h = h1
        if self.shift_struct is not None:
            h = h + (self.shift_struct[idx] @ params["psi"]).ravel()
        for entry in self.shift_deep:
            out = entry["mlp"].forward_np(entry["inputs"][idx])
            if entry["spec"].orthogonalize:
                out = out - self.span_full[idx] @ self._epoch_w[entry["label"]]
            h = h + out.ravel()
        return h, h1p

    def eval_nll(self, params: dict, idx: np.ndarray) -> float:
        h, h1p = self._numpy_forward(params, idx)
        nll, _ = transformation_nll(h, h1p, self.dist, self.floor, strict=False)
        return nll

    def count_violations(self, params: dict, idx: np.ndarray) -> int:
        _, h1p = self._numpy_forward(params, idx)
        return int(np.count_nonzero(h1p <= self.floor))


# --- setup ------------------------------------------------------------------


def init_gamma_raw(y: np.ndarray, basis, dist, scale: float, b_bar: np.ndarray) -> np.ndarray:
    """Warm start for the transformation coefficients.

    Sets each Bernstein coefficient to the scaled reference quantile of
    the empirical outcome distribution at the coefficient's node, which is
    the classical (and automatically monotone) Bernstein approximation of
    the marginal transformation. The curve is spread over the interaction
    columns so the average interaction design reproduces it.
    """
    order = basis.order
    n = y.shape[0]
    nodes = basis.lower + (basis.upper - basis.lower) * np.arange(order + 1) / order
    sorted_y = np.sort(y)
    ecdf = np.searchsorted(sorted_y, nodes, side="right") / n
    ecdf = np.clip(ecdf, 0.5 / n, 1.0 - 0.5 / n)
    theta = scale * dist.quantile(ecdf)
    span = float(theta.max() - theta.min())
    min_step = max(1e-6, 1e-3 * max(span, 1.0) / max(order, 1))
    steps = np.maximum(np.diff(theta), min_step)
    weights = b_bar / float(b_bar @ b_bar)
    raw = np.empty((order + 1, weights.shape[0]))
    raw[0] = theta[0] * weights
    raw[1:] = softplus_inverse(np.outer(steps, weights))
    return raw


def _deep_entries(predictor, Xm: np.ndarray, feature_names: list) -> list:
    from ._validation import resolve_feature
    from .terms import _standardize_inputs

    entries = []
    for spec in predictor.deep_specs:
        state = predictor.states[spec.label]
        idx = [resolve_feature(f, feature_names) for f in spec.features]
        inputs = _standardize_inputs(spec, Xm, idx, state, training=False)
        mlp = predictor.mlps[spec.label]
        entries.append(
            {
                "label": spec.label,
                "spec": spec,
                "mlp": mlp,
                "inputs": inputs,
                "n_layers": len(mlp.weights),
            }
        )
    return entries


def build_objective(est, Xm: np.ndarray, y: np.ndarray, dist: ErrorDistribution):
    """Assemble the objective and initial parameters for a prepared model.

    The estimator must already carry its basis and initialized predictors.
    Returns (objective, params, lambdas, clamp_counter).
    """
    counter: dict = {}
    A = bernstein_eval(y, est.bernstein_, counter)
    Ap = bernstein_deriv(y, est.bernstein_)
    interaction, shift = est.interaction_, est.shift_
    names = [str(n) for n in est.feature_names_in_]
    n = y.shape[0]

    lambdas = resolve_lambdas(interaction, shift, Xm)

    from .terms import term_width

    inter_map = interaction.index_map
    pens = []
    for spec, pen in interaction.penalized_terms():
        pens.append(
            ("gamma", inter_map[spec.label], pen.matrix, lambdas[f"interaction:{spec.label}"])
        )
    shift_struct_specs = [s for s in shift.specs if s.kind != "deep"]
    offset = 0
    shift_slices = {}
    for spec in shift_struct_specs:
        width = term_width(spec)
        shift_slices[spec.label] = slice(offset, offset + width)
        offset += width
    for spec, pen in shift.penalized_terms():
        pens.append(
            ("psi", shift_slices[spec.label], pen.matrix, lambdas[f"shift:{spec.label}"])
        )

    struct_blocks = [
        (s.label, interaction.term_columns(s.label, Xm))
        for s in interaction.structured_specs
    ]
    inter_struct_cols = dict(struct_blocks)
    shift_struct = None
    psi_freeze = None
    if shift_struct_specs:
        cols = [shift.term_columns(s.label, Xm) for s in shift_struct_specs]
        shift_struct = np.hstack(cols)
        flags: list[bool] = []
        for spec in shift_struct_specs:
            degenerate = shift.states[spec.label].get("degenerate")
            if degenerate is None:
                flags.extend([False] * term_width(spec))
            else:
                flags.extend(bool(d) for d in degenerate)
        if any(flags):
            psi_freeze = np.asarray(flags, dtype=bool)

    d_y = y_direction_penalty(est.order).matrix

    has_deep = bool(interaction.deep_specs or shift.deep_specs)
    b_full, _ = interaction.design(Xm)

    # Warm start: a ridge least-squares fit of y on the structured shift
    # design estimates how much steeper the conditional transformation is
    # than the marginal one, and seeds the shift coefficients near the
    # value that explanation implies.
    psi0 = None
    scale_up = 1.0
    if shift_struct is not None and shift_struct.size:
        design1 = np.hstack([np.ones((n, 1)), shift_struct])
        gram = design1.T @ design1
        ridge = 1e-8 * max(1.0, float(np.trace(gram)) / gram.shape[0])
        coefs = np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), design1.T @ y)
        resid_sd = float(np.std(y - design1 @ coefs))
        y_sd = float(np.std(y))
        resid_sd = max(resid_sd, 1e-2 * y_sd)
        scale_up = y_sd / resid_sd
        psi0 = (-coefs[1:] / resid_sd)[:, None]
    params = {
        "gamma_raw": init_gamma_raw(
            y, est.bernstein_, dist, scale_up, b_full.mean(axis=0)
        )
    }
    if shift_struct is not None:
        params["psi"] = (
            psi0 if psi0 is not None else np.zeros((shift_struct.shape[1], 1))
        )
        if psi_freeze is not None:
            params["psi"][psi_freeze] = 0.0

    if not has_deep:
        objective = ClosedFormObjective(
            A,
            Ap,
            b_full,
            shift_struct,
            dist,
            est.jacobian_floor,
            est.strict,
            pens,
            est.lambda_y,
            d_y,
            n,
            psi_freeze,
        )
        return objective, params, lambdas, counter

    inter_deep = _deep_entries(interaction, Xm, names)
    shift_deep = _deep_entries(shift, Xm, names)
    span_full = np.hstack(
        [np.ones((n, 1)), shift_struct if shift_struct is not None else np.zeros((n, 0))]
    )
    for side, entries in (("interaction", inter_deep), ("shift", shift_deep)):
        for entry in entries:
            mlp = entry["mlp"]
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                params[f"{side}|{entry['label']}|W{i}"] = w.copy()
                params[f"{side}|{entry['label']}|b{i}"] = b.copy()

    objective = TapeObjective(
        A,
        Ap,
        inter_struct_cols,
        inter_deep,
        inter_map,
        shift_struct,
        shift_deep,
        span_full,
        interaction,
        shift,
        dist,
        est.jacobian_floor,
        est.strict,
        pens,
        est.lambda_y,
        d_y,
        n,
        interaction.n_columns,
        psi_freeze,
    )
    objective._Xm = Xm
    return objective, params, lambdas, counter


@dataclass
class FitResult:
    params: dict
    lambdas: dict
    log: TrainingLog
    diagnostics: dict


def _make_batches(train_idx: np.ndarray, batch_size, rng) -> list:
    if batch_size is None or batch_size >= train_idx.shape[0]:
        return [train_idx]
    order = rng.permutation(train_idx.shape[0])
    shuffled = train_idx[order]
    return [
        shuffled[i : i + batch_size] for i in range(0, shuffled.shape[0], batch_size)
    ]


def fit_model(est, Xm: np.ndarray, y: np.ndarray, dist: ErrorDistribution) -> FitResult:
    """Run the optimization loop and return the best-validation parameters."""
    objective, params, lambdas, counter = build_objective(est, Xm, y, dist)
    n = y.shape[0]

    rng_split = rng_stream(est.seed, "val-split")
    n_val = int(round(est.val_fraction * n)) if est.val_fraction > 0 else 0
    if est.val_fraction > 0:
        n_val = max(1, n_val)
    perm = rng_split.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    if train_idx.shape[0] == 0:
        raise ConfigError("validation split leaves no training rows")

    has_deep = isinstance(objective, TapeObjective)
    batch_size = est.batch_size
    if batch_size is None and has_deep:
        batch_size = DEEP_DEFAULT_BATCH

    rng_batches = rng_stream(est.seed, "batches")
    adam = Adam(params, est.learning_rate)
    log = TrainingLog(n_train=int(train_idx.shape[0]), n_val=int(n_val))
    best_params = None
    bad_epochs = 0
    divergent_streak = 0

    for epoch in range(est.max_epochs):
        if has_deep:
            objective.epoch_refresh(params, Xm)
        else:
            objective.epoch_refresh(params)
        batches = _make_batches(train_idx, batch_size, rng_batches)
        loss_sum = 0.0
        for batch in batches:
            loss, grads, violations = objective.train_loss_and_grad(params, batch)
            log.jacobian_violations += violations
            adam.step(params, grads)
            loss_sum += loss * batch.shape[0]
        train_loss = loss_sum / train_idx.shape[0]
        monitor = (
            objective.eval_nll(params, val_idx) if n_val else train_loss
        )
        log.train_loss.append(float(train_loss))
        log.val_loss.append(float(monitor))

        if not np.isfinite(train_loss) or not np.isfinite(monitor):
            divergent_streak += 1
            if divergent_streak >= DIVERGENCE_PATIENCE:
                recent = log.train_loss[-DIVERGENCE_PATIENCE:]
                raise DivergenceError(
                    f"training loss was non-finite for {DIVERGENCE_PATIENCE} "
                    f"consecutive epochs; last values: {recent}; reduce the "
                    "learning rate or simplify the model"
                )
            continue
        divergent_streak = 0

        if monitor < log.best_val_loss:
            log.best_val_loss = float(monitor)
            log.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if est.patience and bad_epochs >= est.patience:
                log.stopping_reason = "early-stopping"
                break
    if not log.stopping_reason:
        log.stopping_reason = "max-epochs"

    if best_params is None:
        recent = log.train_loss[-DIVERGENCE_PATIENCE:]
        raise DivergenceError(
            f"no epoch produced a finite loss; last values: {recent}"
        )

    if has_deep:
        # Final constants must match the returned weights exactly.
        objective.epoch_refresh(best_params, Xm)

    # Violations during optimization are transient; the count that matters
    # is the one for the returned parameters on the full training data.
    transient_violations = int(log.jacobian_violations)
    log.jacobian_violations = objective.count_violations(best_params, train_idx)

    diagnostics = {
        "jacobian_violations": int(log.jacobian_violations),
        "transient_jacobian_violations": transient_violations,
        "outcome_rows_clamped": int(counter.get("clamped", 0)),
        "n_train": int(train_idx.shape[0]),
        "n_val": int(n_val),
        "stopping_reason": log.stopping_reason,
        "best_epoch": int(log.best_epoch),
    }
    return FitResult(params=best_params, lambdas=lambdas, log=log, diagnostics=diagnostics)


# --- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    max_deviation: float
    worst_parameter: str
    n_coordinates: int
    tolerance: float
    passed: bool


def grad_check(
    estimator,
    X,
    y,
    tolerance: float = 1e-4,
    seed: int = 0,
    max_coordinates: int | None = None,
    _corrupt: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Builds the untrained objective for the estimator's configuration at a
    randomized parameter point and perturbs each checked coordinate by
    1e-5 * (1 + |value|). Deviations are measured relative to
    max(1, |analytic|, |numeric|). The hidden _corrupt switch scales one
    analytic coordinate by 1.5 and must make the check fail; it exists to
    prove the check can fail.
    """
    from sklearn.base import clone

    from ._validation import as_feature_frame, check_outcome
    from .basis import BernsteinBasis
    from .model import resolve_sides
    from .terms import AdditivePredictor

    est = clone(estimator)
    est._validate_settings()
    y = check_outcome(y)
    Xm, names = as_feature_frame(X, n_rows=y.shape[0])
    est.n_features_in_ = Xm.shape[1]
    est.feature_names_in_ = np.asarray(names, dtype=object)
    dist = get_error_distribution(est.error_distribution)
    if est.support is not None:
        est.bernstein_ = BernsteinBasis(
            order=est.order, lower=float(est.support[0]), upper=float(est.support[1])
        )
    else:
        est.bernstein_ = BernsteinBasis.from_data(y, est.order, est.support_padding)
    inter_specs, shift_specs = resolve_sides(est.terms)
    rng_init = rng_stream(seed, "init")
    est.interaction_ = AdditivePredictor("interaction", inter_specs)
    est.interaction_.initialize(Xm, names, rng_init)
    est.shift_ = AdditivePredictor("shift", shift_specs)
    est.shift_.initialize(Xm, names, rng_init)

    objective, params, _, _ = build_objective(est, Xm, y, dist)
    rng = rng_stream(seed, "gradcheck")
    for key in sorted(params):
        params[key] = params[key] + rng.normal(0.0, 0.05, size=params[key].shape)
    idx = np.arange(y.shape[0])
    if isinstance(objective, TapeObjective):
        objective.epoch_refresh(params, Xm)
    else:
        objective.epoch_refresh(params)

    _, grads, _ = objective.train_loss_and_grad(params, idx)

    coords = []
    for key in sorted(params):
        flat = params[key].reshape(-1)
        coords.extend((key, i) for i in range(flat.shape[0]))
    if max_coordinates is not None and max_coordinates < len(coords):
        chosen = rng.choice(len(coords), size=max_coordinates, replace=False)
        coords = [coords[int(c)] for c in chosen]

    corrupt_target = None
    if _corrupt:
        # Corrupt the coordinate with the largest analytic gradient so the
        # negative control fails deterministically.
        corrupt_target = max(
            coords, key=lambda c: abs(float(grads[c[0]].reshape(-1)[c[1]]))
        )

    max_dev = 0.0
    worst = ""
    for key, flat_index in coords:
        flat = params[key].reshape(-1)
        original = flat[flat_index]
        step = 1e-5 * (1.0 + abs(original))
        flat[flat_index] = original + step
        up, _, _ = objective.train_loss_and_grad(params, idx)
        flat[flat_index] = original - step
        down, _, _ = objective.train_loss_and_grad(params, idx)
        flat[flat_index] = original
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[key].reshape(-1)[flat_index])
        if corrupt_target == (key, flat_index):
            analytic *= 1.5
        deviation = abs(numeric - analytic) / max(1.0, abs(numeric), abs(analytic))
        if deviation > max_dev:
            max_dev = deviation
            worst = f"{key}[{flat_index}]"
    return GradCheckReport(
        max_deviation=float(max_dev),
        worst_parameter=worst,
        n_coordinates=len(coords),
        tolerance=tolerance,
        passed=bool(max_dev <= tolerance),
    )
