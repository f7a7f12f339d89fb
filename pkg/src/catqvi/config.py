"""Configuration loading and validation.

Configs are YAML mappings with the documented keys (see README):
``model.intensity.*``, ``model.severity.*``, ``prior.*``,
``economics.*``, ``layers.*``, ``coupon.*``, ``grid.*``,
``simulate.*``.  ``validate_config`` collects every violated invariant
with its field path; ``load_config`` reads a file or a shipped profile
name.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .filters import FiniteSupportPosterior, GammaPosterior, ScenarioWeights
from .models import (
    BernoulliIntensity,
    EconomicParams,
    GammaIntensity,
    Seasonality,
    SeverityModel,
)
from .solver import AxisSpec, GridSpec

PROFILES = ("florida_gamma", "florida_bernoulli", "toy_k0")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists each violation with its
    field path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ModelBundle:
    """Validated models plus solver/simulator defaults from one config."""

    seasonality: Seasonality
    intensity: object
    severity: SeverityModel
    econ: EconomicParams
    prior: object  # GammaPosterior | ScenarioWeights
    return_periods: tuple[float, ...]
    layer_warming_slope: float
    eps_atoms: tuple[float, ...]
    eps_weights: tuple[float, ...]
    grid: Optional[GridSpec] = None
    simulate: dict = field(default_factory=dict)
    severity_posterior: Optional[FiniteSupportPosterior] = None


def common_step(T: float, ell: float, limit: int = 10**6) -> Optional[float]:
    """Largest step dividing both the horizon and the maturity, or None
    when T/ell is not (close to) rational."""
    if T <= 0 or ell <= 0:
        return None
    frac = Fraction(T / ell).limit_denominator(limit)
    if frac.numerator == 0 or abs(T / ell - float(frac)) > 1e-9:
        return None
    return ell / frac.denominator


def _get(raw: dict, path: str, default=None):
    node = raw
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def validate_config(raw: dict) -> ModelBundle:
    """Build the typed bundle, raising ConfigError listing every violated
    invariant with its field path."""
    errors: list[str] = []

    def check(cond: bool, path: str, message: str) -> bool:
        if not cond:
            errors.append(f"{path}: {message}")
        return bool(cond)

    # --- seasonality
    d0 = float(_get(raw, "model.intensity.seasonality.d0", 0.4958))
    d1 = float(_get(raw, "model.intensity.seasonality.d1", 0.8736))
    a_hat = float(_get(raw, "model.intensity.seasonality.alpha_hat", 8.0))
    b_hat = float(_get(raw, "model.intensity.seasonality.beta_hat", 6.0))
    normalize = bool(_get(raw, "model.intensity.seasonality.normalize_yearly", True))
    check(0.0 <= d0 < d1 <= 1.0, "model.intensity.seasonality", "requires 0 <= d0 < d1 <= 1")
    check(a_hat > 0.0, "model.intensity.seasonality.alpha_hat", "must be positive")
    check(b_hat > 0.0, "model.intensity.seasonality.beta_hat", "must be positive")

    # --- horizon and maturity
    T = float(_get(raw, "economics.horizon", 30.0))
    ell = float(_get(raw, "economics.maturity", 3.0))
    kappa = int(_get(raw, "economics.max_bonds", 2))
    check(T > 0.0, "economics.horizon", "must be positive")
    check(ell > 0.0, "economics.maturity", "maturity must be positive")
    check(kappa >= 0, "economics.max_bonds", "must be nonnegative")
    if T > 0.0 and ell > 0.0:
        check(
            common_step(T, ell) is not None,
            "economics",
            "horizon/maturity must be rational so a common time step exists",
        )

    # --- intensity
    variant = str(_get(raw, "model.intensity.variant", "gamma")).lower()
    check(variant in ("gamma", "bernoulli"), "model.intensity.variant", "must be gamma or bernoulli")
    levels = tuple(float(v) for v in _get(raw, "model.intensity.levels", (0.2, 0.3, 0.4)))
    if variant == "bernoulli":
        check(all(v >= 0.0 for v in levels), "model.intensity.levels", "levels must be nonnegative")
        check(
            all(b > a for a, b in zip(levels, levels[1:])),
            "model.intensity.levels",
            "levels must be strictly increasing",
        )

    # --- severity
    mu = float(_get(raw, "model.severity.mu", 0.5))
    sigma = float(_get(raw, "model.severity.sigma", 5.0))
    xi = float(_get(raw, "model.severity.xi", 0.5))
    cap = float(_get(raw, "model.severity.exposure_cap", 4000.0))
    e0 = float(_get(raw, "model.severity.market_share", 0.1))
    n_atoms = int(_get(raw, "model.severity.n_atoms", 2500))
    check(sigma > 0.0, "model.severity.sigma", "must be positive")
    check(0.0 < xi < 1.0, "model.severity.xi", "tail index must lie in (0,1) for finite mean")
    check(mu >= 0.0, "model.severity.mu", "must be nonnegative")
    check(0.0 < e0 <= 1.0, "model.severity.market_share", "must lie in (0, 1]")
    check(n_atoms >= 1, "model.severity.n_atoms", "must be at least 1")
    check(cap > mu, "model.severity.exposure_cap", "must exceed the threshold")

    # --- economics
    mu_prem = float(_get(raw, "economics.premium_rate", 0.6825))
    r = float(_get(raw, "economics.interest_rate", 0.01))
    H0 = float(_get(raw, "economics.issue_cost", 0.0025))
    rho = float(_get(raw, "economics.penalty_decay", 2.0))
    bump = float(_get(raw, "economics.penalty_bump_scale", 0.05))
    gamma = float(_get(raw, "economics.risk_aversion", 1.0))
    c_hat = float(_get(raw, "economics.gain_floor", -1e300))
    warm = float(_get(raw, "economics.warming_premium_slope", 0.0))
    check(r >= 0.0, "economics.interest_rate", "must be nonnegative")
    check(rho >= 0.0, "economics.penalty_decay", "must be nonnegative")
    check(H0 >= 0.0, "economics.issue_cost", "must be nonnegative")
    check(gamma > 0.0, "economics.risk_aversion", "must be positive")
    check(c_hat < 0.0, "economics.gain_floor", "must be negative")

    # --- prior
    if variant == "gamma":
        alpha0 = float(_get(raw, "prior.alpha", 25.0))
        beta0 = float(_get(raw, "prior.beta", 50.0))
        check(alpha0 > 0.0, "prior.alpha", "must be positive")
        check(beta0 > 0.0, "prior.beta", "must be positive")
        prior_weights = None
    else:
        alpha0 = beta0 = 0.0
        prior_weights = tuple(float(v) for v in _get(raw, "prior.weights", (1 / 3,) * len(levels)))
        check(len(prior_weights) == len(levels), "prior.weights", "must align with the scenario levels")
        check(all(v >= 0.0 for v in prior_weights), "prior.weights", "must be nonnegative")
        check(sum(prior_weights) > 0.0, "prior.weights", "must have positive mass")

    # --- layers
    periods = tuple(float(v) for v in _get(raw, "layers.return_periods", (10.0, 50.0, 200.0, 1000.0)))
    check(all(v > 1.0 for v in periods), "layers.return_periods", "must exceed one year")
    check(
        all(b > a for a, b in zip(periods, periods[1:])),
        "layers.return_periods",
        "must be strictly increasing",
    )
    layer_warm = float(_get(raw, "layers.warming_slope", 0.0))

    # --- coupon noise
    eps_atoms = tuple(float(v) for v in _get(raw, "coupon.epsilon_atoms", (0.0,)))
    eps_weights = tuple(float(v) for v in _get(raw, "coupon.epsilon_weights", (1.0,) * len(eps_atoms)))
    check(len(eps_atoms) == len(eps_weights), "coupon", "atoms and weights must align")
    check(
        abs(sum(eps_weights) - 1.0) < 1e-9 and all(v >= 0.0 for v in eps_weights),
        "coupon.epsilon_weights",
        "must be a probability vector",
    )

    # --- grid (optional)
    grid_raw = _get(raw, "grid")
    grid_fields = {}
    if grid_raw is not None:
        h_time = float(_get(raw, "grid.h_time", 0.05))
        check(h_time > 0.0, "grid.h_time", "must be positive")
        if h_time > 0.0 and T > 0.0 and ell > 0.0:
            check(
                abs(T / h_time - round(T / h_time)) < 1e-9,
                "grid.h_time",
                "horizon/h_time must be an integer",
            )
            check(
                abs(ell / h_time - round(ell / h_time)) < 1e-9,
                "grid.h_time",
                "maturity/h_time must be an integer",
            )

        def axis(path: str, default_lo: float, default_hi: float, default_step: float):
            lo = float(_get(raw, f"grid.{path}.min", default_lo))
            hi = float(_get(raw, f"grid.{path}.max", default_hi))
            step = float(_get(raw, f"grid.{path}.step", default_step))
            check(step > 0.0, f"grid.{path}.step", "must be positive")
            check(hi >= lo, f"grid.{path}", "max must be at least min")
            return lo, hi, step

        grid_fields["h_time"] = h_time
        grid_fields["x1"] = axis("x1", -30.0, 25.0, 0.25)
        grid_fields["x2"] = axis("x2", -0.5, 4.0, 0.25)
        if variant == "gamma":
            grid_fields["p"] = axis("p", 25.0, 45.0, 1.0)
            grid_fields["p_step"] = None
        else:
            grid_fields["p"] = None
            grid_fields["p_step"] = float(_get(raw, "grid.p.step", 0.1))
        r_count = int(_get(raw, "grid.r.count", 3))
        check(r_count >= 1, "grid.r.count", "must be at least 1")
        grid_fields["r_count"] = r_count

    # --- simulation defaults
    sim = dict(_get(raw, "simulate", {}) or {})
    if "lambda0" in sim and variant == "bernoulli":
        check(
            any(abs(float(sim["lambda0"]) - lv) < 1e-12 for lv in levels),
            "simulate.lambda0",
            "must be one of the scenario levels",
        )

    if errors:
        raise ConfigError(errors)

    seasonality = Seasonality(d0=d0, d1=d1, alpha_hat=a_hat, beta_hat=b_hat, normalize_yearly=normalize)
    intensity = (
        GammaIntensity(seasonality)
        if variant == "gamma"
        else BernoulliIntensity(seasonality, horizon=T, levels=levels)
    )
    severity = SeverityModel(
        mu=mu, sigma=sigma, xi=xi, exposure_cap=cap, market_share=e0, n_atoms=n_atoms
    )
    econ = EconomicParams(
        mu_prem=mu_prem,
        r=r,
        H0=H0,
        rho=rho,
        bump_scale=bump,
        gamma=gamma,
        c_hat=c_hat,
        ell=ell,
        T=T,
        kappa=kappa,
        warming_premium_slope=warm,
    )
    if variant == "gamma":
        prior = GammaPosterior(alpha0, beta0)
    else:
        s = sum(prior_weights)
        prior = ScenarioWeights(tuple(v / s for v in prior_weights))

    grid = None
    if grid_fields:
        grid = GridSpec(
            h_time=grid_fields["h_time"],
            x1=AxisSpec(*grid_fields["x1"]),
            x2=AxisSpec(*grid_fields["x2"]),
            p=AxisSpec(*grid_fields["p"]) if grid_fields["p"] is not None else None,
            p_step=grid_fields["p_step"],
            r_count=grid_fields["r_count"],
        )

    return ModelBundle(
        seasonality=seasonality,
        intensity=intensity,
        severity=severity,
        econ=econ,
        prior=prior,
        return_periods=periods,
        layer_warming_slope=layer_warm,
        eps_atoms=eps_atoms,
        eps_weights=eps_weights,
        grid=grid,
        simulate=sim,
    )


def config_errors(raw: dict) -> list[str]:
    """All violated invariants of a raw config (empty when valid)."""
    try:
        validate_config(raw)
        return []
    except ConfigError as exc:
        return exc.errors


def profile_path(name: str) -> Path:
    return Path(str(resources.files("catqvi").joinpath(f"profiles/{name}.yaml")))


def load_raw(path_or_profile) -> tuple[dict, bytes]:
    """Raw mapping and file bytes from a path or a shipped profile name."""
    p = Path(path_or_profile)
    if not p.exists() and str(path_or_profile) in PROFILES:
        p = profile_path(str(path_or_profile))
    data = p.read_bytes()
    raw = yaml.safe_load(data) or {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{p}: top level must be a mapping"])
    return raw, data


def config_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_config(path_or_profile) -> tuple[ModelBundle, str]:
    """Validated bundle plus the sha256 of the consumed file."""
    raw, data = load_raw(path_or_profile)
    return validate_config(raw), config_hash(data)
