"""Reference error distributions on the transformed scale.

Each distribution exposes the pieces the likelihood needs: cdf and quantile
for prediction, log_pdf and its derivative for closed-form gradients, and a
tape-graph builder for the autodiff path. All are parameter free; the model
absorbs location and scale into the transformation.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .exceptions import ConfigError

_LOG_2PI = float(np.log(2.0 * np.pi))


class ErrorDistribution:
    """Interface for a fixed, parameter-free error distribution."""

    name: str = ""

    def cdf(self, z):
        raise NotImplementedError

    def quantile(self, p):
        raise NotImplementedError

    def log_pdf(self, z):
        raise NotImplementedError

    def dlog_pdf(self, z):
        """Derivative of log_pdf with respect to z."""
        raise NotImplementedError

    def neg_log_pdf_nodes(self, tape, z):
        """Build -log_pdf(z) as a tape node for reverse-mode gradients."""
        raise NotImplementedError

    def _check_prob(self, p) -> np.ndarray:
        arr = np.asarray(p, dtype=np.float64)
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise ConfigError("quantile levels must lie strictly inside (0, 1)")
        return arr


class GaussianError(ErrorDistribution):
    """Standard normal reference; yields probit-scale transformations."""

    name = "gaussian"

    def cdf(self, z):
        return special.ndtr(z)

    def quantile(self, p):
        return special.ndtri(self._check_prob(p))

    def log_pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * z * z - 0.5 * _LOG_2PI

    def dlog_pdf(self, z):
        return -np.asarray(z, dtype=np.float64)

    def neg_log_pdf_nodes(self, tape, z):
        half_sq = tape.scale(tape.mul(z, z), 0.5)
        return tape.add_scalar(half_sq, 0.5 * _LOG_2PI)


class LogisticError(ErrorDistribution):
    """Standard logistic reference; transformations act on log-odds."""

    name = "logistic"

    def cdf(self, z):
        return special.expit(z)

    def quantile(self, p):
        return special.logit(self._check_prob(p))

    def log_pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        return -z - 2.0 * np.logaddexp(0.0, -z)

    def dlog_pdf(self, z):
        return 1.0 - 2.0 * special.expit(np.asarray(z, dtype=np.float64))

    def neg_log_pdf_nodes(self, tape, z):
        soft = tape.softplus(tape.neg(z))
        return tape.add(z, tape.scale(soft, 2.0))


class MinExtremeValueError(ErrorDistribution):
    """Minimum extreme value (Gumbel minimum) reference.

    Transformations act on the log of the cumulative hazard, so additive
    shift effects have a proportional-hazards reading.
    """

    name = "minev"

    def cdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        return -np.expm1(-np.exp(z))

    def quantile(self, p):
        p = self._check_prob(p)
        return np.log(-np.log1p(-p))

    def log_pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z - np.exp(z)

    def dlog_pdf(self, z):
        return 1.0 - np.exp(np.asarray(z, dtype=np.float64))

    def neg_log_pdf_nodes(self, tape, z):
        return tape.sub(tape.exp(z), z)


_REGISTRY = {
    d.name: d for d in (GaussianError(), LogisticError(), MinExtremeValueError())
}


def get_error_distribution(name: str) -> ErrorDistribution:
    """Look up a distribution by name: gaussian, logistic, or minev."""
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise ConfigError(
            f"unknown error distribution '{name}'; choose one of: {known}"
        ) from None
