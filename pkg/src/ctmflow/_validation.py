"""Input validation helpers used by the estimator and the basis layer."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .exceptions import DataValidationError, DegenerateOutcomeError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a float64 array, optionally enforcing its rank."""
    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"{name} is not numeric: {exc}") from None
    if ndim is not None and arr.ndim != ndim:
        raise DataValidationError(
            f"{name} must be {ndim}-dimensional, got shape {arr.shape}"
        )
    return arr


def check_finite(arr: np.ndarray, name: str) -> None:
    """Reject non-finite entries, reporting the first offending row."""
    finite = np.isfinite(arr)
    if finite.all():
        return
    bad = np.argwhere(~finite)
    row = int(bad[0][0])
    raise DataValidationError(
        f"{name} contains {bad.shape[0]} non-finite entries; first at row {row}"
    )


def check_outcome(y, min_rows: int = 2) -> np.ndarray:
    """Validate an outcome vector: 1-D, finite, non-degenerate."""
    arr = as_float_array(y, "y", ndim=1)
    if arr.shape[0] < min_rows:
        raise DataValidationError(
            f"y must have at least {min_rows} rows, got {arr.shape[0]}"
        )
    check_finite(arr, "y")
    if arr.max() == arr.min():
        raise DegenerateOutcomeError(
            "outcome has zero variance; a transformation model needs spread in y"
        )
    return arr


def as_feature_frame(X, n_rows: int | None = None):
    """Coerce features to a (matrix, names) pair.

    DataFrames keep their column names; plain arrays get x0..x{p-1}. A 1-D
    array is treated as a single column.
    """
    if isinstance(X, pd.DataFrame):
        names = [str(c) for c in X.columns]
        mat = as_float_array(X.to_numpy(), "X", ndim=2)
    else:
        mat = as_float_array(X, "X")
        if mat.ndim == 1:
            mat = mat[:, None]
        if mat.ndim != 2:
            raise DataValidationError(
                f"X must be 2-dimensional, got shape {mat.shape}"
            )
        names = [f"x{j}" for j in range(mat.shape[1])]
    check_finite(mat, "X")
    if n_rows is not None and mat.shape[0] != n_rows:
        raise DataValidationError(
            f"X has {mat.shape[0]} rows but y has {n_rows}"
        )
    return mat, names


def resolve_feature(name: str, feature_names: list[str]) -> int:
    """Map a feature name to its column index, with a helpful error."""
    try:
        return feature_names.index(name)
    except ValueError:
        known = ", ".join(feature_names)
        raise DataValidationError(
            f"unknown feature '{name}'; available features: {known}"
        ) from None
