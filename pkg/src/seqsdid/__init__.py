"""Sequential synthetic difference-in-differences for staggered adoption."""

from .balancing import INF, solve_exact_balance, solve_ridge_balance
from .dgp import Ar2Noise, Confounded, DgpSpec, IidNoise, Independent, monte_carlo, simulate
from .errors import SsdidError
from .inference import BootstrapConfig, BootstrapResult, bootstrap
from .oracle import FactorStructure, OracleConfig, check_affine_hull, run_joint_ols, run_sequential_ols
from .panel import CohortPanel, CovariateScheme, ValidatedPanel, aggregate, read_panel_csv, validate
from .placebo import PlaceboReport, run_placebo
from .ssdid import AUTO, EstimateGrid, SsdidConfig, aggregate_horizon, run_sequential

__all__ = [
    "AUTO", "INF", "Ar2Noise", "BootstrapConfig", "BootstrapResult", "CohortPanel", "Confounded",
    "CovariateScheme", "DgpSpec", "EstimateGrid", "FactorStructure", "IidNoise", "Independent",
    "OracleConfig", "PlaceboReport", "SsdidConfig", "SsdidError", "ValidatedPanel", "aggregate",
    "aggregate_horizon", "bootstrap", "check_affine_hull", "monte_carlo", "read_panel_csv",
    "run_joint_ols", "run_placebo", "run_sequential", "run_sequential_ols", "simulate",
    "solve_exact_balance", "solve_ridge_balance", "validate",
]
