"""Financial layer: exceedance curves, bond layers, coupon pricing,
state dynamics coefficients, and the terminal gain.

All thresholds, capacities, payoffs and cash amounts are insurer-scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .bonds import BondBook
from .filters import GammaPosterior, ScenarioWeights
from .models import (
    BernoulliIntensity,
    EconomicParams,
    GammaIntensity,
    IntensityModel,
    SeverityModel,
    season_integral,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarketState:
    """Output state: insurer cash and the post-claim price penalty."""

    x1: float
    x2: float


@dataclass(frozen=True)
class LayerSpec:
    """Bond layers derived from the year-zero exceedance curve.

    ``base_oep`` maps each configured return period to the insurer-scale
    threshold computed under the initial prior; a positive
    ``warming_slope`` lets the whole curve drift up linearly over the
    horizon.
    """

    return_periods: tuple[float, ...]
    base_oep: tuple[float, ...]
    warming_slope: float
    horizon: float

    @property
    def n_layers(self) -> int:
        return len(self.return_periods) - 1

    def _warming(self, t: float) -> float:
        return 1.0 + self.warming_slope * t / self.horizon

    def oep_at(self, tau: float, t: float) -> float:
        """Threshold of the given return period at time ``t``."""
        idx = self.return_periods.index(tau) if tau in self.return_periods else None
        if idx is None:
            raise ValueError(f"return period {tau} not tabulated; have {self.return_periods}")
        return self.base_oep[idx] * self._warming(t)

    def attachment(self, k: int, t: float) -> float:
        """Lower bound of layer ``k`` (1-based) at issue time ``t``."""
        if not 1 <= k <= self.n_layers:
            raise ValueError(f"layer index {k} out of range 1..{self.n_layers}")
        return self.base_oep[k - 1] * self._warming(max(t, 0.0))

    def capacity(self, k: int, t: float) -> float:
        """Width of layer ``k`` at issue time ``t``."""
        if not 1 <= k <= self.n_layers:
            raise ValueError(f"layer index {k} out of range 1..{self.n_layers}")
        return (self.base_oep[k] - self.base_oep[k - 1]) * self._warming(max(t, 0.0))


def yearly_max_cdf(
    x: float,
    posterior,
    severity: SeverityModel,
    intensity: IntensityModel,
    year_start: float = 0.0,
) -> float:
    """Probability that the largest claim of the year starting at
    ``year_start`` stays at or below the insurer-scale level ``x``,
    under the predictive law of the posterior."""
    if x >= severity.exposure_cap * severity.market_share:
        return 1.0
    surv = severity.survival(x / severity.market_share) if x / severity.market_share > severity.mu else 1.0
    if isinstance(posterior, GammaPosterior):
        if not isinstance(intensity, GammaIntensity):
            raise TypeError("Gamma posterior requires the separable intensity form")
        base = season_integral(intensity.seasonality, year_start, year_start + 1.0)
        q = base * surv
        return (posterior.beta / (posterior.beta + q)) ** posterior.alpha
    if isinstance(posterior, ScenarioWeights):
        integrals = np.array(
            [intensity.integrated_rate(year_start, year_start + 1.0, lam) for lam in intensity.levels]
        )
        return float(posterior.array @ np.exp(-integrals * surv))
    raise TypeError(f"unsupported posterior type {type(posterior)!r}")


def oep_base(
    tau: float,
    posterior,
    severity: SeverityModel,
    intensity: IntensityModel,
    tol: float = 1e-9,
) -> float:
    """Year-zero threshold for the given return period: the
    (1 - 1/tau)-quantile of the largest claim of the year, found by
    bisection on the predictive cdf."""
    if tau <= 1.0:
        raise ValueError("return period must exceed one year")
    target = 1.0 - 1.0 / tau

    def f(x):
        return yearly_max_cdf(x, posterior, severity, intensity) - target

    if f(0.0) >= 0.0:
        return 0.0
    hi = severity.exposure_cap * severity.market_share
    try:
        root = optimize.brentq(f, 0.0, hi, xtol=tol)
    except ValueError as exc:  # pragma: no cover - guarded by the checks above
        raise RuntimeError(f"exceedance-threshold bisection failed for tau={tau}: {exc}") from exc
    return float(root)


def build_layers(
    posterior,
    severity: SeverityModel,
    intensity: IntensityModel,
    return_periods: tuple[float, ...] = (10.0, 50.0, 200.0, 1000.0),
    warming_slope: float = 0.0,
    horizon: float = 30.0,
) -> LayerSpec:
    """Compute the base exceedance curve once and freeze it into a
    LayerSpec."""
    periods = tuple(float(t) for t in return_periods)
    if any(b <= a for a, b in zip(periods, periods[1:])):
        raise ValueError("return periods must be strictly increasing")
    base = tuple(oep_base(tau, posterior, severity, intensity) for tau in periods)
    return LayerSpec(periods, base, warming_slope, horizon)


def oep_at(layers: LayerSpec, tau: float, t: float) -> float:
    return layers.oep_at(tau, t)


def layer_capacity(layers: LayerSpec, k: int, t: float) -> float:
    return layers.capacity(k, t)


def coupon_rate(k: int, x2: float, eps: float, t: float, layers: LayerSpec) -> float:
    """Annual coupon of a bond on layer ``k`` issued at time ``t``.

    Probability weight of the layer under the one-year exceedance curve
    (full default beyond the layer top, half weight inside the layer),
    times the layer capacity, times the price factor ``1 + x2 + eps``.
    Negative results are clamped at zero.
    """
    kj = layers.return_periods[k - 1]
    kj1 = layers.return_periods[k]
    weight = 1.0 / kj1 + 0.5 * (1.0 / kj - 1.0 / kj1)
    rate = weight * layers.capacity(k, t) * (1.0 + x2 + eps)
    if rate < 0.0:
        log.warning("coupon rate clamped to zero (layer %d, x2=%.4f, eps=%.4f)", k, x2, eps)
        return 0.0
    return rate


def drift(x: MarketState, t: float, book: BondBook, econ: EconomicParams) -> tuple[float, float]:
    """State velocity: premium plus interest minus running coupons on the
    cash axis, exponential decay on the penalty axis."""
    dx1 = econ.premium_rate(t) + econ.r * x.x1 - book.coupon_total()
    dx2 = -econ.rho * x.x2
    return dx1, dx2


def penalty_bump(u_industry: float, severity: SeverityModel, econ: EconomicParams) -> float:
    """Jump of the price penalty after an industry loss; scales with the
    inverse exceedance probability of the loss (uncapped law)."""
    if u_industry <= severity.mu:
        raise ValueError("claim below the modeling threshold")
    return econ.bump_scale / severity.survival(u_industry)


def claim_jump(
    x: MarketState,
    u_insurer: float,
    u_industry: float,
    severity: SeverityModel,
    econ: EconomicParams,
) -> MarketState:
    """State after a claim: cash drops by the insurer loss, the price
    penalty jumps up."""
    if abs(u_insurer - severity.market_share * u_industry) > 1e-6 * max(1.0, u_industry):
        raise ValueError("insurer loss must be the market share of the industry loss")
    return MarketState(
        x1=x.x1 - u_insurer,
        x2=x.x2 + penalty_bump(u_industry, severity, econ),
    )


@dataclass(frozen=True)
class GainSpec:
    """Terminal utility: CARA of cash credited with the unexpired part of
    each running bond's issue cost, floored far below any grid value."""

    gamma: float
    H0: float
    ell: float
    c_hat: float

    @classmethod
    def from_econ(cls, econ: EconomicParams) -> "GainSpec":
        return cls(gamma=econ.gamma, H0=econ.H0, ell=econ.ell, c_hat=econ.c_hat)


def gain_from_cash(x1, remaining_credit, spec: GainSpec):
    """CARA gain of cash plus issue-cost credit; exponent compared in log
    space so large losses saturate at the floor instead of overflowing."""
    arg = -spec.gamma * (np.asarray(x1, dtype=float) + remaining_credit)
    log_floor = np.log(-spec.c_hat)
    out = np.where(arg >= log_floor, spec.c_hat, -np.exp(np.minimum(arg, log_floor)))
    if out.ndim == 0:
        return float(out)
    return out


def gain(x: MarketState, book: BondBook, spec: GainSpec) -> float:
    credit = (spec.H0 / spec.ell) * sum(spec.ell - s.elapsed for s in book.running)
    return gain_from_cash(x.x1, credit, spec)


def integrate_cash(x1: float, t: float, dt: float, coupon_total: float, econ: EconomicParams) -> float:
    """Exact cash flow over ``[t, t+dt]`` with no claims: interest on the
    balance plus the (possibly linearly warming) premium minus coupons."""
    if dt == 0.0:
        return x1
    a = econ.mu_prem - coupon_total
    b = econ.mu_prem * econ.warming_premium_slope / econ.T
    r = econ.r
    if r == 0.0:
        return x1 + a * dt + b * (t * dt + 0.5 * dt * dt)
    e = math.exp(r * dt)
    growth = (e - 1.0) / r
    # source a + b*u integrated against the discounting kernel
    flow = (a + b * (t + dt)) * growth - b * (dt * e / r - growth / r)
    return x1 * e + flow


def decay_penalty(x2: float, dt: float, econ: EconomicParams) -> float:
    return x2 * math.exp(-econ.rho * dt)
