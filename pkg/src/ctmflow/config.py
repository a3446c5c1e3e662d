"""Strict JSON model configuration.

A configuration names the model settings and the list of additive terms.
Unknown fields are rejected at every level so typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

import json

from .exceptions import ConfigError
from .model import DctmRegressor
from .terms import TermSpec, deep, intercept, linear, smooth, tensor_smooth

MODEL_KEYS = {
    "order",
    "error_distribution",
    "support",
    "support_padding",
    "lambda_y",
    "terms",
    "training",
}
TRAINING_KEYS = {
    "max_epochs",
    "learning_rate",
    "batch_size",
    "val_fraction",
    "patience",
    "seed",
    "jacobian_floor",
    "strict",
}
TERM_KEYS = {
    "kind",
    "target",
    "feature",
    "features",
    "name",
    "q",
    "degree",
    "penalty_order",
    "df",
    "lambda",
    "layers",
    "width",
    "standardize",
    "orthogonalize",
}


def _reject_unknown(mapping: dict, allowed: set, where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(
            f"unknown field(s) in {where}: {', '.join(sorted(unknown))}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )


def _term_features(entry: dict, where: str) -> list:
    if "feature" in entry and "features" in entry:
        raise ConfigError(f"{where}: give either 'feature' or 'features', not both")
    if "feature" in entry:
        if not isinstance(entry["feature"], str):
            raise ConfigError(f"{where}: 'feature' must be a string")
        return [entry["feature"]]
    feats = entry.get("features", [])
    if not isinstance(feats, list) or not all(isinstance(f, str) for f in feats):
        raise ConfigError(f"{where}: 'features' must be a list of strings")
    return feats


def parse_term(entry: dict, index: int) -> TermSpec:
    where = f"terms[{index}]"
    if not isinstance(entry, dict):
        raise ConfigError(f"{where} must be an object")
    _reject_unknown(entry, TERM_KEYS, where)
    if "kind" not in entry:
        raise ConfigError(f"{where}: 'kind' is required")
    kind = entry["kind"]
    target = entry.get("target", "shift")
    name = entry.get("name", "")
    features = _term_features(entry, where)
    try:
        if kind == "intercept":
            return intercept(target=target, name=name)
        if kind == "linear":
            if len(features) != 1:
                raise ConfigError(f"{where}: linear takes exactly one feature")
            return linear(features[0], target=target, name=name)
        if kind == "smooth":
            if len(features) != 1:
                raise ConfigError(f"{where}: smooth takes exactly one feature")
            return smooth(
                features[0],
                target=target,
                q=int(entry.get("q", 10)),
                df=entry.get("df"),
                lam=entry.get("lambda"),
                degree=int(entry.get("degree", 3)),
                penalty_order=int(entry.get("penalty_order", 2)),
                name=name,
            )
        if kind == "tensor_smooth":
            if len(features) != 2:
                raise ConfigError(f"{where}: tensor_smooth takes exactly two features")
            return tensor_smooth(
                features[0],
                features[1],
                target=target,
                q=int(entry.get("q", 6)),
                df=entry.get("df"),
                lam=entry.get("lambda"),
                degree=int(entry.get("degree", 3)),
                penalty_order=int(entry.get("penalty_order", 2)),
                name=name,
            )
        if kind == "deep":
            return deep(
                features,
                target=target,
                layers=tuple(int(w) for w in entry.get("layers", [16, 8])),
                width=int(entry.get("width", 8)),
                standardize=bool(entry.get("standardize", True)),
                orthogonalize=bool(entry.get("orthogonalize", False)),
                name=name,
            )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(
        f"{where}: unknown kind '{kind}'; choose intercept, linear, smooth, "
        "tensor_smooth, or deep"
    )


def parse_model_config(config: dict) -> DctmRegressor:
    """Build an unfitted estimator from a configuration mapping."""
    if not isinstance(config, dict):
        raise ConfigError("model config must be a JSON object")
    _reject_unknown(config, MODEL_KEYS, "model config")
    terms_cfg = config.get("terms", [])
    if not isinstance(terms_cfg, list):
        raise ConfigError("'terms' must be a list")
    terms = [parse_term(entry, i) for i, entry in enumerate(terms_cfg)]

    training = config.get("training", {})
    if not isinstance(training, dict):
        raise ConfigError("'training' must be an object")
    _reject_unknown(training, TRAINING_KEYS, "training")

    support = config.get("support")
    if support is not None:
        if not isinstance(support, list) or len(support) != 2:
            raise ConfigError("'support' must be a two-element list [lower, upper]")
        support = (float(support[0]), float(support[1]))

    try:
        return DctmRegressor(
            terms=terms or None,
            order=int(config.get("order", 8)),
            error_distribution=str(config.get("error_distribution", "gaussian")),
            support=support,
            support_padding=float(config.get("support_padding", 0.05)),
            lambda_y=float(config.get("lambda_y", 0.0)),
            max_epochs=int(training.get("max_epochs", 500)),
            learning_rate=float(training.get("learning_rate", 0.01)),
            batch_size=(
                int(training["batch_size"])
                if training.get("batch_size") is not None
                else None
            ),
            val_fraction=float(training.get("val_fraction", 0.2)),
            patience=int(training.get("patience", 20)),
            seed=int(training.get("seed", 0)),
            jacobian_floor=float(training.get("jacobian_floor", 1e-12)),
            strict=bool(training.get("strict", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config value: {exc}") from None


def load_model_config(path: str) -> DctmRegressor:
    """Read a JSON configuration file and build the estimator."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"could not parse config '{path}': {exc}") from None
    return parse_model_config(config)
