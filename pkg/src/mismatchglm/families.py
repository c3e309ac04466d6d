"""Exponential-family kernel shared by every estimator in the package.

A response distribution is described by its cumulant psi, so that the
density takes the form  exp{(y*theta - psi(theta))/a(phi) + c(y, phi)}.
The mean map h = psi' sends a linear predictor eta to mu = E[y | eta],
and g = h^{-1} sends a mean back.  Supported kinds:

    gaussian     psi(t) = t^2/2          dispersion = sigma^2
    poisson      psi(t) = exp(t)
    binomial     psi(t) = m*log(1+e^t)   m Bernoulli trials per row
    bernoulli    binomial with m = 1, kept distinct so callers can apply
                 binary-response caveats (deviance-only evaluation)
    gamma        shape nu, mean mu, variance mu^2/nu; canonical
                 (reciprocal) or log link

For the gamma family with log link the natural-parameter arithmetic is
bypassed: downstream code only needs the (mean, variance function,
deviance) triple plus Fisher-scoring weights, all of which are expressed
through the mean parameterization here.

Dispersion is fixed and supplied by the caller, never estimated.  All
methods are pure functions of their arguments and accept scalars or
ndarrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

# Linear predictors beyond this magnitude are clamped before
# exponentiation; fit paths count the clamps they trigger.
ETA_LIMIT = 700.0

# Mean-space floor used when an inverse-mean map is handed a value at or
# beyond the boundary of the open mean space.
MEAN_EPS = 1e-10


class DomainError(ValueError):
    """Argument outside the family's admissible domain."""


class Kind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    BINOMIAL = "binomial"
    BERNOULLI = "bernoulli"
    GAMMA = "gamma"


class Link(str, enum.Enum):
    CANONICAL = "canonical"
    LOG = "log"


def _clean(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def _maybe_scalar(arr: np.ndarray, scalar_in: bool):
    return float(arr) if scalar_in else arr


@dataclass(frozen=True)
class Family:
    """Exponential-family descriptor with fixed dispersion.

    dispersion is sigma^2 for gaussian, 1/nu for gamma and 1 otherwise;
    trials is the binomial trial count m.
    """

    kind: Kind
    dispersion: float = 1.0
    trials: int = 1
    link: Link = Link.CANONICAL

    def __post_init__(self):
        if self.dispersion <= 0:
            raise DomainError("dispersion must be positive")
        if self.trials < 1:
            raise DomainError("trials must be at least 1")
        if self.link == Link.LOG and self.kind != Kind.GAMMA:
            raise DomainError("log link is only supported for the gamma family")
        if self.kind == Kind.BERNOULLI and self.trials != 1:
            raise DomainError("bernoulli is binomial with trials fixed at 1")
        if self.kind in (Kind.POISSON, Kind.BINOMIAL, Kind.BERNOULLI) and self.dispersion != 1.0:
            raise DomainError(f"{self.kind.value} has unit dispersion")

    # -- constructors -------------------------------------------------

    @classmethod
    def gaussian(cls, variance: float = 1.0) -> "Family":
        return cls(Kind.GAUSSIAN, dispersion=variance)

    @classmethod
    def poisson(cls) -> "Family":
        return cls(Kind.POISSON)

    @classmethod
    def binomial(cls, trials: int) -> "Family":
        return cls(Kind.BINOMIAL, trials=int(trials))

    @classmethod
    def bernoulli(cls) -> "Family":
        return cls(Kind.BERNOULLI)

    @classmethod
    def gamma(cls, shape: float, link: str | Link = Link.LOG) -> "Family":
        if shape <= 0:
            raise DomainError("gamma shape must be positive")
        return cls(Kind.GAMMA, dispersion=1.0 / shape, link=Link(link))

    # -- derived scalars ----------------------------------------------

    @property
    def shape(self) -> float:
        """Gamma shape parameter nu (reciprocal dispersion)."""
        if self.kind != Kind.GAMMA:
            raise DomainError("shape is only defined for the gamma family")
        return 1.0 / self.dispersion

    @property
    def canonical(self) -> bool:
        return self.link == Link.CANONICAL

    # -- cumulant and link pair ---------------------------------------

    def cumulant(self, theta):
        """psi(theta) on the natural-parameter domain.

        Gamma requires theta < 0 (canonical parameterization) regardless
        of the fitting link.
        """
        t = _clean(theta, "theta")
        scalar = np.isscalar(theta) or getattr(theta, "ndim", 1) == 0
        if self.kind == Kind.GAUSSIAN:
            out = 0.5 * t * t
        elif self.kind == Kind.POISSON:
            with np.errstate(over="ignore"):
                out = np.exp(t)
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            out = self.trials * np.logaddexp(0.0, t)
        else:
            if np.any(t >= 0):
                raise DomainError("gamma cumulant requires theta < 0")
            out = -np.log(-t)
        return _maybe_scalar(out, scalar)

    def mean(self, eta):
        """Mean map h(eta) = E[y | eta]."""
        e = _clean(eta, "eta")
        scalar = np.isscalar(eta) or getattr(eta, "ndim", 1) == 0
        if self.kind == Kind.GAUSSIAN:
            out = e.copy()
        elif self.kind == Kind.POISSON:
            with np.errstate(over="ignore"):
                out = np.exp(e)
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            out = self.trials * special.expit(e)
        elif self.link == Link.LOG:
            with np.errstate(over="ignore"):
                out = np.exp(e)
        else:
            if np.any(e >= 0):
                raise DomainError("canonical gamma requires eta < 0")
            out = -1.0 / e
        return _maybe_scalar(out, scalar)

    def linear_predictor(self, mu):
        """Inverse mean map g(mu) = h^{-1}(mu) on the open mean space."""
        m = _clean(mu, "mu")
        scalar = np.isscalar(mu) or getattr(mu, "ndim", 1) == 0
        if self.kind == Kind.GAUSSIAN:
            out = m.copy()
        elif self.kind == Kind.POISSON:
            if np.any(m <= 0):
                raise DomainError("poisson mean must be positive")
            out = np.log(m)
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            if np.any(m <= 0) or np.any(m >= self.trials):
                raise DomainError("binomial mean must lie strictly inside (0, trials)")
            out = special.logit(m / self.trials)
        elif self.link == Link.LOG:
            if np.any(m <= 0):
                raise DomainError("gamma mean must be positive")
            out = np.log(m)
        else:
            if np.any(m <= 0):
                raise DomainError("gamma mean must be positive")
            out = -1.0 / m
        return _maybe_scalar(out, scalar)

    def mean_derivative(self, eta):
        """d h / d eta, the Fisher weight of the canonical case."""
        e = _clean(eta, "eta")
        scalar = np.isscalar(eta) or getattr(eta, "ndim", 1) == 0
        if self.kind == Kind.GAUSSIAN:
            out = np.ones_like(e)
        elif self.kind == Kind.POISSON:
            with np.errstate(over="ignore"):
                out = np.exp(e)
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            p = special.expit(e)
            out = self.trials * p * (1.0 - p)
        elif self.link == Link.LOG:
            with np.errstate(over="ignore"):
                out = np.exp(e)
        else:
            if np.any(e >= 0):
                raise DomainError("canonical gamma requires eta < 0")
            out = 1.0 / (e * e)
        return _maybe_scalar(out, scalar)

    def variance(self, eta):
        """Var(y | eta) including dispersion."""
        e = _clean(eta, "eta")
        scalar = np.isscalar(eta) or getattr(eta, "ndim", 1) == 0
        if self.kind == Kind.GAUSSIAN:
            out = np.full_like(e, self.dispersion)
        elif self.kind == Kind.POISSON:
            with np.errstate(over="ignore"):
                out = np.exp(e)
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            p = special.expit(e)
            out = self.trials * p * (1.0 - p)
        else:
            mu = np.asarray(self.mean(e))
            out = self.dispersion * mu * mu
        return _maybe_scalar(out, scalar)

    # -- negative log-likelihood kernel --------------------------------

    def nll_terms(self, eta, y):
        """Per-observation negative log-likelihood kernel, a(phi) omitted.

        Canonical links use -y*eta + psi(eta); gamma with log link uses
        the quasi-likelihood kernel y*exp(-eta) + eta.
        """
        e = np.asarray(eta, dtype=float)
        yy = np.asarray(y, dtype=float)
        if self.kind == Kind.GAMMA and self.link == Link.LOG:
            with np.errstate(over="ignore"):
                return yy * np.exp(-e) + e
        if self.kind == Kind.GAMMA and np.any(e >= 0):
            raise DomainError("canonical gamma requires eta < 0")
        return -yy * e + np.asarray(self.cumulant(e))

    def score_eta(self, eta, y):
        """Derivative of nll_terms with respect to eta."""
        e = np.asarray(eta, dtype=float)
        yy = np.asarray(y, dtype=float)
        if self.kind == Kind.GAMMA and self.link == Link.LOG:
            with np.errstate(over="ignore"):
                return 1.0 - yy * np.exp(-e)
        return np.asarray(self.mean(e)) - yy

    def curvature_eta(self, eta, y):
        """Second derivative of nll_terms with respect to eta (observed)."""
        e = np.asarray(eta, dtype=float)
        if self.kind == Kind.GAMMA and self.link == Link.LOG:
            with np.errstate(over="ignore"):
                return np.asarray(y, dtype=float) * np.exp(-e)
        return np.asarray(self.mean_derivative(e))

    def fisher_weight(self, eta):
        """Expected curvature of nll_terms; the IRLS working weight."""
        e = np.asarray(eta, dtype=float)
        if self.kind == Kind.GAMMA and self.link == Link.LOG:
            return np.ones_like(e)
        return np.asarray(self.mean_derivative(e))

    # -- tails and deviance --------------------------------------------

    def tail_probability(self, eta, y):
        """p* = P(Y >= y | eta) if y >= h(eta), else P(Y <= y | eta).

        Uses the family's exact CDF; small values are evidence that the
        observed response does not belong to this linear predictor.
        """
        e = _clean(eta, "eta")
        yy = _clean(y, "y")
        scalar = (np.isscalar(eta) or getattr(eta, "ndim", 1) == 0) and (
            np.isscalar(y) or getattr(y, "ndim", 1) == 0
        )
        e, yy = np.broadcast_arrays(np.atleast_1d(e), np.atleast_1d(yy))
        mu = np.asarray(self.mean(e))
        upper = yy >= mu
        out = np.empty_like(mu)
        if self.kind == Kind.GAUSSIAN:
            sd = np.sqrt(self.dispersion)
            z = (yy - mu) / sd
            out[upper] = stats.norm.sf(z[upper])
            out[~upper] = stats.norm.cdf(z[~upper])
        elif self.kind == Kind.POISSON:
            out[upper] = stats.poisson.sf(np.ceil(yy[upper]) - 1.0, mu[upper])
            out[~upper] = stats.poisson.cdf(np.floor(yy[~upper]), mu[~upper])
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            p = mu / self.trials
            out[upper] = stats.binom.sf(np.ceil(yy[upper]) - 1.0, self.trials, p[upper])
            out[~upper] = stats.binom.cdf(np.floor(yy[~upper]), self.trials, p[~upper])
        else:
            nu = self.shape
            out[upper] = stats.gamma.sf(yy[upper], nu, scale=mu[upper] / nu)
            out[~upper] = stats.gamma.cdf(yy[~upper], nu, scale=mu[~upper] / nu)
        if np.any(~np.isfinite(out)):
            raise FloatingPointError("tail probability evaluation failed")
        out = np.clip(out, 0.0, 1.0)
        return float(out[0]) if scalar else out

    def unit_deviance(self, y, mu):
        """Standard exponential-family unit deviance; zero iff y == mu.

        y = 0 (and y = m for binomial) are handled by the continuous
        extension x*log(x) -> 0.
        """
        yy = _clean(y, "y")
        m = _clean(mu, "mu")
        scalar = (np.isscalar(y) or getattr(y, "ndim", 1) == 0) and (
            np.isscalar(mu) or getattr(mu, "ndim", 1) == 0
        )
        yy, m = np.broadcast_arrays(np.atleast_1d(yy), np.atleast_1d(m))
        if self.kind == Kind.GAUSSIAN:
            out = (yy - m) ** 2
        elif self.kind == Kind.POISSON:
            if np.any(m <= 0):
                raise DomainError("poisson mean must be positive")
            if np.any(yy < 0):
                raise DomainError("poisson response must be nonnegative")
            out = 2.0 * (special.xlogy(yy, yy / m) - (yy - m))
        elif self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            t = float(self.trials)
            if np.any(m <= 0) or np.any(m >= t):
                raise DomainError("binomial mean must lie strictly inside (0, trials)")
            if np.any(yy < 0) or np.any(yy > t):
                raise DomainError("binomial response must lie in [0, trials]")
            out = 2.0 * (special.xlogy(yy, yy / m) + special.xlogy(t - yy, (t - yy) / (t - m)))
        else:
            if np.any(m <= 0):
                raise DomainError("gamma mean must be positive")
            if np.any(yy <= 0):
                raise DomainError("gamma response must be positive")
            out = 2.0 * ((yy - m) / m - np.log(yy / m))
        out = np.maximum(out, 0.0)
        return float(out[0]) if scalar else out

    # -- support and sampling -------------------------------------------

    def check_support(self, y) -> None:
        """Raise DomainError when a response vector leaves the support.

        Count-like families accept nonnegative reals so that transformed
        quasi-likelihood responses (e.g. sqrt counts) pass through.
        """
        yy = _clean(y, "y")
        if self.kind == Kind.POISSON and np.any(yy < 0):
            raise DomainError("poisson response must be nonnegative")
        if self.kind in (Kind.BINOMIAL, Kind.BERNOULLI) and (
            np.any(yy < 0) or np.any(yy > self.trials)
        ):
            raise DomainError("binomial response must lie in [0, trials]")
        if self.kind == Kind.GAMMA and np.any(yy <= 0):
            raise DomainError("gamma response must be positive")

    def sample(self, eta, rng: np.random.Generator) -> np.ndarray:
        """Draw responses at the given linear predictors."""
        e = np.atleast_1d(_clean(eta, "eta"))
        mu = np.asarray(self.mean(e))
        if self.kind == Kind.GAUSSIAN:
            return mu + np.sqrt(self.dispersion) * rng.standard_normal(mu.shape)
        if self.kind == Kind.POISSON:
            return rng.poisson(mu).astype(float)
        if self.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
            # m independent Bernoulli draws per observation, exact at any m.
            p = mu / self.trials
            draws = rng.random((self.trials,) + mu.shape) < p
            return draws.sum(axis=0).astype(float)
        nu = self.shape
        return rng.gamma(shape=nu, scale=mu / nu, size=mu.shape)


def clamp_eta(eta: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp linear predictors to +-ETA_LIMIT, returning the clamp count."""
    arr = np.asarray(eta, dtype=float)
    n_clamped = int(np.count_nonzero(np.abs(arr) > ETA_LIMIT))
    if n_clamped:
        arr = np.clip(arr, -ETA_LIMIT, ETA_LIMIT)
    return arr, n_clamped
