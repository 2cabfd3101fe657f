"""Exponential-family responses under canonical links.

Each family is written in terms of the cumulant ``d(nu)`` of the linear
predictor, so that the log density of one observation is::

    (y * nu - d(nu)) / phi + c(y, phi)

with ``mu = d'(nu)`` and working weight ``d''(nu) / phi``. All functions
accept plain arrays or :class:`galamm.autodiff.Dual` arrays for ``nu`` and
``phi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad

__all__ = [
    "BINOMIAL",
    "Family",
    "GAUSSIAN",
    "get_family",
    "log_density",
    "mean_and_weight",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Family:
    kind: str
    dispersion_known: bool

    def cumulant(self, nu, trials=1.0):
        """``d(nu)``."""
        if self.kind == "gaussian":
            return 0.5 * nu * nu
        return ad.softplus(nu) * trials

    def mean(self, nu, trials=1.0):
        """``d'(nu)``."""
        if self.kind == "gaussian":
            return nu
        return ad.expit(nu) * trials

    def variance(self, nu, trials=1.0):
        """``d''(nu)``."""
        if self.kind == "gaussian":
            if isinstance(nu, ad.Dual):
                return ad.Dual.constant(np.ones(nu.shape), *nu.PQ)
            return np.ones_like(np.asarray(nu, dtype=float))
        s = ad.expit(nu)
        return s * (1.0 - s) * trials

    def log_normaliser(self, y, trials=1.0, phi=1.0):
        """``c(y, phi)``."""
        if self.kind == "gaussian":
            return -0.5 * (y * y) / phi - 0.5 * (ad.log(phi) + _LOG_2PI)
        return log_binom(trials, y)

    def link(self, mu, trials=1.0):
        """Canonical link ``g(mu)`` with ``mu`` on the response scale."""
        if self.kind == "gaussian":
            return np.asarray(mu, dtype=float)
        p = np.asarray(mu, dtype=float) / trials
        return np.log(p) - np.log1p(-p)

    def inverse_link(self, nu, trials=1.0):
        return self.mean(nu, trials)


GAUSSIAN = Family("gaussian", dispersion_known=False)
BINOMIAL = Family("binomial", dispersion_known=True)

_FAMILIES = {
    "gaussian": GAUSSIAN,
    "gaussian-identity": GAUSSIAN,
    "binomial": BINOMIAL,
    "binomial-logit": BINOMIAL,
}


def get_family(name):
    try:
        return _FAMILIES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; expected one of {sorted(_FAMILIES)}") from None


def log_binom(m, y):
    m = np.asarray(m, dtype=float)
    y = np.asarray(y, dtype=float)
    return gammaln(m + 1.0) - gammaln(y + 1.0) - gammaln(m - y + 1.0)


def _check_phi(phi):
    if np.any(np.asarray(ad.value(phi)) <= 0):
        raise ValueError("dispersion phi must be positive")


def log_density(family, y, trials, nu, phi=1.0):
    """Exact log density of each observation, including ``c(y, phi)``."""
    family = get_family(family) if isinstance(family, str) else family
    _check_phi(phi)
    if family.kind == "binomial":
        phi = 1.0
    y = np.asarray(y, dtype=float)
    core = (nu * y - family.cumulant(nu, trials)) / phi
    return core + family.log_normaliser(y, trials, phi)


def mean_and_weight(family, nu, trials=1.0, phi=1.0):
    """Return ``(mu, v)`` with ``mu = d'(nu)`` and ``v = d''(nu) / phi``."""
    family = get_family(family) if isinstance(family, str) else family
    _check_phi(phi)
    if family.kind == "binomial":
        phi = 1.0
    return family.mean(nu, trials), family.variance(nu, trials) / phi
