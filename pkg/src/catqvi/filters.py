"""Posterior dynamics for the unknown model parameters.

The intensity-level posterior evolves continuously between claims
(survival reweighting) and jumps at claim instants (likelihood
reweighting).  Two closed forms are supported, a Gamma-conjugate pair
and finite scenario weights, plus a dense grid posterior used as the
reference implementation for both.  Finite-support posteriors over the
severity and coupon parameters update only at their observation events.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import BernoulliIntensity, GammaIntensity, IntensityModel, seasonality_h, season_integral


class FilterError(ValueError):
    """Raised when a Bayes update degenerates (all-zero weights or
    non-finite quantities)."""


@dataclass(frozen=True)
class GammaPosterior:
    """Gamma law over the intensity level; conjugate for separable
    intensities ``lam * h(t)``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0.0 and self.beta > 0.0):
            raise FilterError(f"Gamma parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / self.beta

    @property
    def sd(self) -> float:
        return np.sqrt(self.alpha) / self.beta


def gamma_advance(post: GammaPosterior, t: float, s: float, model: IntensityModel) -> GammaPosterior:
    """No-claim update over ``(t, s]``: the rate parameter accumulates the
    integrated seasonal weight, the shape is unchanged."""
    if not isinstance(model, GammaIntensity):
        raise FilterError("Gamma-conjugate updates require the separable intensity form")
    if s < t:
        raise ValueError("advance requires t <= s")
    return GammaPosterior(post.alpha, post.beta + season_integral(model.seasonality, t, s))


def gamma_jump(post: GammaPosterior) -> GammaPosterior:
    """Claim-instant update: the shape counts the claim."""
    return GammaPosterior(post.alpha + 1.0, post.beta)


def _normalize(weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise FilterError("posterior weights degenerated to zero or non-finite mass")
    return weights / total


@dataclass(frozen=True)
class ScenarioWeights:
    """Probability weights over the scenario levels of the intensity
    model, stored normalized."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0.0):
            raise FilterError("scenario weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise FilterError("scenario weights must sum to one")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @classmethod
    def from_unnormalized(cls, weights) -> "ScenarioWeights":
        w = _normalize(np.asarray(weights, dtype=float))
        return cls(tuple(w))


def scenario_advance(w: ScenarioWeights, t: float, s: float, model: BernoulliIntensity) -> ScenarioWeights:
    """No-claim update over ``(t, s]``: each scenario keeps its survival
    factor, then the weights renormalize.

    Computed in log space so long no-claim stretches cannot underflow.
    """
    if s < t:
        raise ValueError("advance requires t <= s")
    logw = np.log(np.maximum(w.array, 0.0))
    integrals = np.array([model.integrated_rate(t, s, lam) for lam in model.levels])
    logw = logw - integrals
    logw -= logw.max()
    return ScenarioWeights.from_unnormalized(np.exp(logw))


def scenario_jump(w: ScenarioWeights, zeta: float, model: BernoulliIntensity) -> ScenarioWeights:
    """Claim-instant update: weights scale with the instantaneous rate at
    the claim time."""
    lik = np.array([model.rate(zeta, lam) for lam in model.levels])
    if not np.all(np.isfinite(lik)):
        raise FilterError("non-finite intensity at the claim instant")
    post = w.array * lik
    if post.sum() <= 0.0:
        raise FilterError("jump at time of zero posterior intensity")
    return ScenarioWeights.from_unnormalized(post)


@dataclass(frozen=True)
class GridPosterior:
    """Dense posterior over an arbitrary finite grid of intensity
    levels.  Reference implementation for the closed forms above."""

    support: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if s.shape != w.shape:
            raise FilterError("support and weights must align")
        if len(s) > 1 and np.any(np.diff(s) <= 0.0):
            raise FilterError("support must be strictly increasing")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
            raise FilterError("weights must be a probability vector")

    @property
    def support_array(self) -> np.ndarray:
        return np.asarray(self.support, dtype=float)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def mean(self) -> float:
        return float(self.support_array @ self.weight_array)

    @property
    def sd(self) -> float:
        m = self.mean
        return float(np.sqrt(np.maximum((self.support_array - m) ** 2 @ self.weight_array, 0.0)))

    @classmethod
    def from_gamma(cls, post: GammaPosterior, lam_max: float, n: int) -> "GridPosterior":
        """Riemann discretization of a Gamma posterior on [0, lam_max]."""
        lam = np.linspace(0.0, lam_max, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            logpdf = np.where(
                lam > 0.0,
                post.alpha * np.log(post.beta) + (post.alpha - 1.0) * np.log(np.maximum(lam, 1e-300)) - post.beta * lam,
                -np.inf,
            )
        logpdf -= logpdf.max()
        w = _normalize(np.exp(logpdf))
        return cls(tuple(lam), tuple(w))


def grid_advance(post: GridPosterior, t: float, s: float, model: IntensityModel) -> GridPosterior:
    """No-claim update of a grid posterior; log-space survival
    reweighting over the support."""
    if s < t:
        raise ValueError("advance requires t <= s")
    lam = post.support_array
    if isinstance(model, GammaIntensity):
        integrals = lam * season_integral(model.seasonality, t, s)
    else:
        integrals = np.array([model.integrated_rate(t, s, lv) for lv in lam])
    with np.errstate(divide="ignore"):
        logw = np.log(post.weight_array) - integrals
    logw -= logw[np.isfinite(logw)].max()
    return GridPosterior(post.support, tuple(_normalize(np.exp(logw))))


def grid_jump(post: GridPosterior, zeta: float, model: IntensityModel) -> GridPosterior:
    """Claim-instant update of a grid posterior."""
    lam = post.support_array
    if isinstance(model, GammaIntensity):
        lik = lam * seasonality_h(model.seasonality, zeta)
    else:
        lik = np.array([model.rate(zeta, lv) for lv in lam])
    post_w = post.weight_array * lik
    if post_w.sum() <= 0.0:
        raise FilterError("jump at time of zero posterior intensity")
    return GridPosterior(post.support, tuple(_normalize(post_w)))


@dataclass(frozen=True)
class FiniteSupportPosterior:
    """Finite-support posterior for the severity or coupon parameter;
    updates only when its observable jumps."""

    support: tuple
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.support) != len(w):
            raise FilterError("support and weights must align")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
            raise FilterError("weights must be a probability vector")

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def is_degenerate(self) -> bool:
        return len(self.support) == 1


def mark_jump_update(post: FiniteSupportPosterior, likelihoods) -> FiniteSupportPosterior:
    """Bayes update with one likelihood per support atom."""
    lik = np.asarray(likelihoods, dtype=float)
    if lik.shape != post.weight_array.shape:
        raise FilterError("likelihood vector must align with the support")
    if np.any(lik < 0.0):
        raise FilterError("likelihoods must be nonnegative")
    post_w = post.weight_array * lik
    if post_w.sum() <= 0.0:
        raise FilterError("all posterior-likelihood products vanish")
    return FiniteSupportPosterior(post.support, tuple(_normalize(post_w)))


def mean_intensity(posterior, t: float, model: IntensityModel) -> float:
    """Posterior-expected arrival rate at time ``t``."""
    if isinstance(posterior, GammaPosterior):
        out = posterior.mean * seasonality_h(model.seasonality, t)
    elif isinstance(posterior, ScenarioWeights):
        rates = np.array([model.rate(t, lam) for lam in model.levels])
        out = float(posterior.array @ rates)
    elif isinstance(posterior, GridPosterior):
        if isinstance(model, GammaIntensity):
            rates = posterior.support_array * seasonality_h(model.seasonality, t)
        else:
            rates = np.array([model.rate(t, lam) for lam in posterior.support_array])
        out = float(posterior.weight_array @ rates)
    else:
        raise TypeError(f"unsupported posterior type {type(posterior)!r}")
    if not np.isfinite(out):
        raise FilterError("posterior mean intensity is not finite")
    return float(out)
