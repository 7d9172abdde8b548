"""Exponential-family conditional densities and canonical links.

Only the canonical pairs Bernoulli/logit and Poisson/log are supported, so
the canonical parameter equals the linear predictor and the score of one
observation with respect to eta is ``weight * (y - mu)``. The dispersion is
fixed at 1.

All public functions accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import DomainError

#: Saturation clamp applied to the inverse logit.
EPS = 1e-12
LOG_EPS = math.log(EPS)


class FamilyKind(str, enum.Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"


class Link(str, enum.Enum):
    LOGIT = "logit"
    LOG = "log"


@dataclass(frozen=True)
class Family:
    kind: FamilyKind
    dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        if self.dispersion != 1.0:
            raise DomainError("dispersion is fixed at 1")

    @property
    def canonical_link(self) -> Link:
        return CANONICAL_LINK[self.kind]

    def __str__(self):
        return self.kind.value


BERNOULLI = Family(FamilyKind.BERNOULLI)
POISSON = Family(FamilyKind.POISSON)

CANONICAL_LINK = {FamilyKind.BERNOULLI: Link.LOGIT, FamilyKind.POISSON: Link.LOG}


def get_family(name) -> Family:
    if isinstance(name, Family):
        return name
    try:
        return Family(FamilyKind(str(name).lower()))
    except ValueError:
        raise DomainError(f"unknown family {name!r}") from None


def get_link(name) -> Link:
    if isinstance(name, Link):
        return name
    try:
        return Link(str(name).lower())
    except ValueError:
        raise DomainError(f"unknown link {name!r}") from None


def check_pair(family: Family, link: Link) -> None:
    """Raise unless ``link`` is the canonical link of ``family``."""
    if family.canonical_link is not Link(link):
        raise DomainError(
            f"{link.value} link is not canonical for the {family.kind.value} family"
        )


def _result(x):
    return float(x) if np.ndim(x) == 0 else x


def check_outcomes(family: Family, y) -> None:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("outcomes must be finite")
    if family.kind is FamilyKind.BERNOULLI:
        if not np.all((y == 0.0) | (y == 1.0)):
            raise DomainError("Bernoulli outcomes must be 0 or 1")
    elif not np.all((y >= 0.0) & (y == np.floor(y))):
        raise DomainError("Poisson outcomes must be nonnegative integers")


def _check_mean(family: Family, mu):
    mu = np.asarray(mu, dtype=float)
    if family.kind is FamilyKind.BERNOULLI:
        ok = (mu > 0.0) & (mu < 1.0)
    else:
        ok = (mu > 0.0) & np.isfinite(mu)
    if not np.all(ok):
        raise DomainError(f"mean outside the open domain of the {family} family")
    return mu


def log_density(family: Family, y, mu, weight=1.0):
    """Log of the conditional density of ``y`` given mean ``mu``.

    ``weight`` multiplies the ``y*theta - b(theta)`` kernel only.
    """
    mu = _check_mean(family, mu)
    check_outcomes(family, y)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weight, dtype=float)
    if family.kind is FamilyKind.BERNOULLI:
        # y*theta - b(theta) with theta = logit(mu), b = log(1 + e^theta)
        out = w * (y * np.log(mu) + (1.0 - y) * np.log1p(-mu))
    else:
        out = w * (y * np.log(mu) - mu) - gammaln(y + 1.0)
    return _result(out)


def link_inverse(link: Link, eta):
    """Mean ``h(eta)``; the inverse logit saturates inside ``[EPS, 1 - EPS]``."""
    eta = np.asarray(eta, dtype=float)
    if Link(link) is Link.LOGIT:
        # expit without overflow for large |eta|
        e = np.exp(-np.abs(eta))
        mu = np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        mu = np.clip(mu, EPS, 1.0 - EPS)
    else:
        mu = np.exp(eta)
    return _result(mu)


def link_apply(link: Link, mu):
    """Linear predictor ``g(mu)``."""
    mu = np.asarray(mu, dtype=float)
    if Link(link) is Link.LOGIT:
        if not np.all((mu > 0.0) & (mu < 1.0)):
            raise DomainError("logit requires 0 < mu < 1")
        out = np.log(mu) - np.log1p(-mu)
    else:
        if not np.all((mu > 0.0) & np.isfinite(mu)):
            raise DomainError("log link requires mu > 0")
        out = np.log(mu)
    return _result(out)


def variance_function(family: Family, mu):
    mu = _check_mean(family, mu)
    if family.kind is FamilyKind.BERNOULLI:
        return _result(mu * (1.0 - mu))
    return _result(mu)


def loglik_eta(family: Family, y, eta, weight):
    """Vectorised conditional log-density written directly in ``eta``.

    Used by the pure-Python kernels; matches ``log_density(link_inverse(eta))``
    up to round-off, including the saturation clamp.
    """
    if family.kind is FamilyKind.BERNOULLI:
        log_mu = np.maximum(-np.logaddexp(0.0, -eta), LOG_EPS)
        log_1m = np.maximum(-np.logaddexp(0.0, eta), LOG_EPS)
        return weight * (y * log_mu + (1.0 - y) * log_1m)
    return weight * (y * eta - np.exp(eta)) - gammaln(y + 1.0)


def mean_eta(family: Family, eta):
    if family.kind is FamilyKind.BERNOULLI:
        e = np.exp(-np.abs(eta))
        return np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.exp(eta)
