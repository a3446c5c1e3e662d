"""Tabular data loading for the command line tool and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import DataValidationError


@dataclass
class Dataset:
    """Outcome vector plus feature frame, with ingestion bookkeeping."""

    y: np.ndarray
    X: pd.DataFrame
    outcome: str
    n_dropped_rows: int = 0

    @property
    def feature_names(self) -> list:
        return [str(c) for c in self.X.columns]

    @property
    def n_rows(self) -> int:
        return int(self.y.shape[0])


def dataset_from_frame(
    frame: pd.DataFrame, outcome: str, features: list | None = None
) -> Dataset:
    """Split a frame into outcome and features, dropping incomplete rows.

    Rows with missing values in the outcome or any used feature are
    dropped and counted. Non-numeric columns are rejected by name.
    """
    if outcome not in frame.columns:
        raise DataValidationError(
            f"outcome column '{outcome}' not found; columns: "
            f"{', '.join(map(str, frame.columns))}"
        )
    if features is None:
        features = [str(c) for c in frame.columns if str(c) != outcome]
    else:
        missing = [f for f in features if f not in frame.columns]
        if missing:
            raise DataValidationError(
                f"feature column(s) not found: {', '.join(missing)}"
            )
    used = frame[[outcome] + list(features)]
    for col in used.columns:
        if not np.issubdtype(used[col].dtype, np.number):
            coerced = pd.to_numeric(used[col], errors="coerce")
            if coerced.isna().sum() > used[col].isna().sum():
                raise DataValidationError(
                    f"column '{col}' is not numeric; encode it before fitting"
                )
            used = used.assign(**{col: coerced})
    complete = used.dropna()
    n_dropped = int(used.shape[0] - complete.shape[0])
    if complete.shape[0] == 0:
        raise DataValidationError("no complete rows remain after dropping missing values")
    y = complete[outcome].to_numpy(dtype=np.float64)
    X = complete[list(features)].astype(np.float64).reset_index(drop=True)
    return Dataset(y=y, X=X, outcome=outcome, n_dropped_rows=n_dropped)


def load_csv(path: str, outcome: str, features: list | None = None) -> Dataset:
    """Read a CSV file and split it into outcome and features."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"could not parse '{path}': {exc}") from None
    return dataset_from_frame(frame, outcome, features)
