"""Static model ingredients: seasonal arrival intensity, claim severity,
and the economic constants of the cash dynamics.

Conventions used throughout the package:

* time is measured in years, with the integer part counting whole years;
* industry-scale losses are in billions; insurer-scale losses are
  industry times the insurer's market share ``e0``;
* all state-space quantities (layer thresholds, payoffs, coupons, cash)
  are insurer-scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special


@dataclass(frozen=True)
class Seasonality:
    """In-season arrival weight shaped like a rescaled Beta density.

    The weight is zero outside the season window ``(d0, d1)`` (fractions
    of the year) and periodic with period one year.  When
    ``normalize_yearly`` is set the weight integrates to exactly 1 over
    any whole year, so an intensity level ``lam`` means ``lam`` expected
    claims per year.
    """

    d0: float = 0.4958
    d1: float = 0.8736
    alpha_hat: float = 8.0
    beta_hat: float = 6.0
    normalize_yearly: bool = True

    @property
    def season_length(self) -> float:
        return self.d1 - self.d0

    @property
    def peak_time(self) -> float:
        """Location of the maximum of the weight within the first year."""
        a, b = self.alpha_hat, self.beta_hat
        if a > 1.0 and b > 1.0:
            mode = (a - 1.0) / (a + b - 2.0)
        else:
            # no interior mode formula; scan the window
            u = np.linspace(0.0, 1.0, 20001)
            mode = float(u[np.argmax(_beta_pdf(u, a, b))])
        return self.d0 + self.season_length * mode

    @property
    def peak_value(self) -> float:
        return float(seasonality_h(self, self.peak_time))


def _beta_pdf(u, a: float, b: float):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = (u > 0.0) & (u < 1.0)
    ui = u[inside]
    out[inside] = np.exp(
        (a - 1.0) * np.log(ui) + (b - 1.0) * np.log1p(-ui) - special.betaln(a, b)
    )
    return out


def seasonality_h(model: Seasonality, t):
    """Arrival weight at time ``t`` (scalar or array), in 1/year.

    Zero out of season; inside the season it is the Beta density of the
    rescaled argument, divided by the season length when the yearly
    normalization is on.
    """
    t = np.asarray(t, dtype=float)
    frac = np.mod(t, 1.0)
    u = (frac - model.d0) / model.season_length
    val = _beta_pdf(u, model.alpha_hat, model.beta_hat)
    if model.normalize_yearly:
        val = val / model.season_length
    if val.ndim == 0:
        return float(val)
    return val


def season_integral(model: Seasonality, a: float, b: float) -> float:
    """Exact integral of the seasonal weight over ``[a, b]``.

    The weight is a rescaled Beta density, so each in-season piece is a
    difference of regularized incomplete beta functions; the season
    boundaries and year boundaries are handled by exact splitting.
    """
    if b <= a:
        return 0.0
    total = 0.0
    year = math.floor(a)
    while year < b:
        lo = max(a, year + model.d0)
        hi = min(b, year + model.d1)
        if hi > lo:
            u0 = (lo - year - model.d0) / model.season_length
            u1 = (hi - year - model.d0) / model.season_length
            u0 = min(max(u0, 0.0), 1.0)
            u1 = min(max(u1, 0.0), 1.0)
            piece = special.betainc(model.alpha_hat, model.beta_hat, u1) - special.betainc(
                model.alpha_hat, model.beta_hat, u0
            )
            if not model.normalize_yearly:
                piece *= model.season_length
            total += piece
        year += 1
    return float(total)


@dataclass(frozen=True)
class GammaIntensity:
    """Separable arrival intensity ``lam * h(t)``; any ``lam >= 0`` is a
    valid level."""

    seasonality: Seasonality

    def rate(self, t, lam: float):
        return lam * seasonality_h(self.seasonality, t)

    def integrated_rate(self, t: float, s: float, lam: float) -> float:
        return lam * season_integral(self.seasonality, t, s)

    def max_rate(self, lam: float) -> float:
        return lam * self.seasonality.peak_value


@dataclass(frozen=True)
class BernoulliIntensity:
    """Three-scenario intensity that ramps with the elapsed whole years.

    The rate is ``0.5 * h(t) * (1 + floor(t) * lam / horizon)`` for a
    scenario level ``lam`` drawn from ``levels``; during the first year
    all scenarios coincide.
    """

    seasonality: Seasonality
    horizon: float
    levels: tuple[float, ...] = (0.2, 0.3, 0.4)

    def _check_level(self, lam: float) -> None:
        if not any(math.isclose(lam, lv, rel_tol=0.0, abs_tol=1e-12) for lv in self.levels):
            raise ValueError(f"intensity level {lam} not in scenario set {self.levels}")

    def rate(self, t, lam: float):
        self._check_level(lam)
        t_arr = np.asarray(t, dtype=float)
        h = seasonality_h(self.seasonality, t_arr)
        out = 0.5 * h * (1.0 + np.floor(t_arr) * lam / self.horizon)
        if np.ndim(t) == 0:
            return float(out)
        return out

    def integrated_rate(self, t: float, s: float, lam: float) -> float:
        self._check_level(lam)
        if s <= t:
            return 0.0
        total = 0.0
        year = math.floor(t)
        while year < s:
            lo, hi = max(t, year), min(s, year + 1.0)
            if hi > lo:
                factor = 1.0 + year * lam / self.horizon
                total += 0.5 * factor * season_integral(self.seasonality, lo, hi)
            year += 1
        return total

    def max_rate(self, lam: float) -> float:
        self._check_level(lam)
        return 0.5 * self.seasonality.peak_value * (1.0 + lam)


IntensityModel = Union[GammaIntensity, BernoulliIntensity]


def intensity(model: IntensityModel, t, lam: float):
    """Arrival rate of the model at time ``t`` for intensity level ``lam``."""
    return model.rate(t, lam)


@dataclass(frozen=True)
class SeverityModel:
    """Generalized Pareto industry-loss severity, bounded by the total
    insured exposure.

    ``mu`` is the modeling threshold (minimum claim), ``sigma`` the
    scale, ``xi`` the tail index (must be below 1 so the mean is
    finite), all in industry billions.  ``market_share`` converts to the
    insurer's own loss.
    """

    mu: float = 0.5
    sigma: float = 5.0
    xi: float = 0.5
    exposure_cap: float = 4000.0
    market_share: float = 0.1
    n_atoms: int = 2500

    def cdf(self, u):
        """Uncapped GPD cdf on industry scale."""
        u = np.asarray(u, dtype=float)
        z = np.maximum(u - self.mu, 0.0)
        out = 1.0 - (1.0 + self.xi * z / self.sigma) ** (-1.0 / self.xi)
        if out.ndim == 0:
            return float(out)
        return out

    def survival(self, u):
        u = np.asarray(u, dtype=float)
        z = np.maximum(u - self.mu, 0.0)
        out = (1.0 + self.xi * z / self.sigma) ** (-1.0 / self.xi)
        if out.ndim == 0:
            return float(out)
        return out

    def pdf(self, u):
        """Uncapped GPD density on industry scale (0 below the threshold)."""
        u = np.asarray(u, dtype=float)
        z = u - self.mu
        out = np.where(
            z >= 0.0,
            (1.0 / self.sigma) * (1.0 + self.xi * np.maximum(z, 0.0) / self.sigma) ** (-1.0 / self.xi - 1.0),
            0.0,
        )
        if out.ndim == 0:
            return float(out)
        return out

    def mean_uncapped(self, scale: str = "industry") -> float:
        m = self.mu + self.sigma / (1.0 - self.xi)
        return m * self.market_share if scale == "insurer" else m


def severity_quantile(model: SeverityModel, p, scale: str = "industry"):
    """Severity quantile, capped at the total exposure.

    ``scale`` is ``"industry"`` or ``"insurer"``; the insurer quantile is
    the industry one times the market share.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr >= 1.0) or np.any(p_arr < 0.0):
        raise ValueError("quantile level must lie in [0, 1)")
    q = model.mu + (model.sigma / model.xi) * ((1.0 - p_arr) ** (-model.xi) - 1.0)
    q = np.minimum(q, model.exposure_cap)
    if scale == "insurer":
        q = q * model.market_share
    elif scale != "industry":
        raise ValueError(f"unknown scale {scale!r}")
    if q.ndim == 0:
        return float(q)
    return q


def discretize_severity(model: SeverityModel) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight severity atoms on insurer scale.

    Atoms sit at the insurer-scale quantiles of levels k/(n+1),
    k = 1..n, each capped by the insurer share of the exposure; weights
    are uniform 1/n.
    """
    n = model.n_atoms
    if n < 1:
        raise ValueError("n_atoms must be at least 1")
    levels = np.arange(1, n + 1, dtype=float) / (n + 1.0)
    atoms = severity_quantile(model, levels, scale="insurer")
    atoms = np.atleast_1d(np.asarray(atoms, dtype=float))
    weights = np.full(n, 1.0 / n)
    return atoms, weights


@dataclass(frozen=True)
class EconomicParams:
    """Economic constants of the cash process and the gain.

    ``mu_prem`` is the insurance premium rate, ``r`` the interest rate,
    ``H0`` the fixed cost of issuing one bond, ``rho`` the decay rate of
    the post-claim price penalty, ``bump_scale`` the numerator of the
    penalty jump, ``gamma`` the absolute risk aversion, ``c_hat`` the
    (very negative) floor of the gain, ``ell`` the bond maturity, ``T``
    the horizon, ``kappa`` the maximum number of simultaneous bonds.
    """

    mu_prem: float = 0.6825
    r: float = 0.01
    H0: float = 0.0025
    rho: float = 2.0
    bump_scale: float = 0.05
    gamma: float = 1.0
    c_hat: float = -1e300
    ell: float = 3.0
    T: float = 30.0
    kappa: int = 2
    warming_premium_slope: float = 0.0

    def premium_rate(self, t: float) -> float:
        return self.mu_prem * (1.0 + self.warming_premium_slope * t / self.T)
