"""Optimal CAT-bond issuance under parameter uncertainty.

Seasonal claim-arrival models with unknown intensity, Bayesian filtering,
a monotone explicit finite-difference solver for the issuance
quasi-variational inequality, and a Monte Carlo simulator of the
controlled cash process.
"""

__version__ = "0.1.0"

from .models import (
    Seasonality,
    GammaIntensity,
    BernoulliIntensity,
    SeverityModel,
    EconomicParams,
    seasonality_h,
    season_integral,
    intensity,
    severity_quantile,
    discretize_severity,
)
from .config import ModelBundle, ConfigError, validate_config, load_config
from .filters import (
    GammaPosterior,
    ScenarioWeights,
    GridPosterior,
    FiniteSupportPosterior,
    mean_intensity,
)
from .bonds import BondSlot, BondBook
from .market import LayerSpec, MarketState, GainSpec, build_layers
from .solver import GridSpec, AxisSpec, build_workspace, solve
from .simulate import ScenarioTruth, run_path, run_monte_carlo

__all__ = [
    "__version__",
    "Seasonality",
    "GammaIntensity",
    "BernoulliIntensity",
    "SeverityModel",
    "EconomicParams",
    "seasonality_h",
    "season_integral",
    "intensity",
    "severity_quantile",
    "discretize_severity",
    "ModelBundle",
    "ConfigError",
    "validate_config",
    "load_config",
    "GammaPosterior",
    "ScenarioWeights",
    "GridPosterior",
    "FiniteSupportPosterior",
    "mean_intensity",
    "BondSlot",
    "BondBook",
    "LayerSpec",
    "MarketState",
    "GainSpec",
    "build_layers",
    "GridSpec",
    "AxisSpec",
    "build_workspace",
    "solve",
    "ScenarioTruth",
    "run_path",
    "run_monte_carlo",
]
