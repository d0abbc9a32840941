"""Placebo checks by backdating adoption times.

Every finite adoption time moves ``P`` periods earlier and the estimator is
rerun with horizons ``0..P-1``, all of which fall before the true adoption.
Under the model those placebo effects are zero, so their z-scores should
centre at zero.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import pandas as pd

from .errors import InvalidConfig, ShiftOutOfRange
from .inference import BootstrapConfig, BootstrapResult, bootstrap
from .panel import NEVER, CohortPanel, CovariateScheme, ValidatedPanel, shift_adoption
from .ssdid import EstimateGrid, SsdidConfig


@dataclass
class PlaceboReport:
    """Placebo estimates and z-scores on the horizon aggregates.

    ``passed`` is true when every placebo horizon (``k < P``) has
    ``|z| <= threshold``. With ``anticipation`` the grid extends past
    ``P - 1``; those horizons estimate true effects at ``k - P`` and are
    reported but not tested.
    """

    P: int
    grid: EstimateGrid
    z_scores: np.ndarray
    passed: bool
    threshold: float = 1.96
    anticipation: bool = False
    result: Optional[BootstrapResult] = None
    meta: dict = field(default_factory=dict)

    @property
    def placebo_horizons(self) -> np.ndarray:
        return np.arange(min(self.P, self.z_scores.size))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "horizon": np.arange(self.z_scores.size),
            "estimate": self.grid.tau_by_horizon,
            "se": self.result.se_horizon,
            "z": self.z_scores,
        })


def _shift_cohort_panel(panel: CohortPanel, P: int) -> CohortPanel:
    if isinstance(P, bool) or int(P) != P or P < 1:
        raise InvalidConfig(f"placebo shift must be a positive integer, got {P!r}")
    finite = panel.adoption != NEVER
    shifted = panel.adoption.copy()
    shifted[finite] -= int(P)
    if np.any(shifted[finite] < 2):
        raise ShiftOutOfRange(f"shifting by {P} leaves a treated row with no pre-period", P=int(P))
    return replace(panel, adoption=shifted)


def z_scores(estimate, se, zero_tol: float = 1e-8) -> np.ndarray:
    """``estimate / se``; cells where both are within ``zero_tol`` of zero get 0."""
    estimate = np.asarray(estimate, dtype=float)
    se = np.asarray(se, dtype=float)
    tiny = (np.abs(estimate) <= zero_tol) & (se <= zero_tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(tiny, 0.0, estimate / np.where(tiny, 1.0, se))
        # a nonzero estimate with zero spread is infinitely significant
        return np.where(~tiny & (se == 0), np.sign(estimate) * np.inf, z)


def run_placebo(
    source: Union[ValidatedPanel, CohortPanel],
    P: int,
    estimator_cfg: SsdidConfig,
    bcfg: BootstrapConfig,
    threshold: float = 1.96,
    anticipation: bool = False,
    K: Optional[int] = None,
    scheme: Optional[CovariateScheme] = None,
    zero_tol: float = 1e-8,
    n_jobs: int = 1,
) -> PlaceboReport:
    """Backdate adoption by ``P``, re-estimate and bootstrap.

    ``K`` defaults to ``P - 1``; a larger ``K`` requires ``anticipation``.
    Explicit ``a_min``/``a_max`` in ``estimator_cfg`` are given on the
    original time scale and are shifted along with the data.

    Raises
    ------
    ShiftOutOfRange
        If a treated cohort would adopt before period 2 after the shift.
    """
    if not threshold > 0:
        raise InvalidConfig("threshold must be positive")
    if isinstance(source, ValidatedPanel):
        shifted = shift_adoption(source, P)
    else:
        shifted = _shift_cohort_panel(source, P)
    P = int(P)
    K = P - 1 if K is None else int(K)
    if K < P - 1 or (K > P - 1 and not anticipation):
        raise InvalidConfig(f"placebo horizon K={K} must equal P-1={P - 1} unless anticipation is set")
    cfg = replace(
        estimator_cfg,
        K=K,
        a_min=None if estimator_cfg.a_min is None else estimator_cfg.a_min - P,
        a_max=None if estimator_cfg.a_max is None else estimator_cfg.a_max - P,
        mu=None if estimator_cfg.mu is None else {a - P: w for a, w in estimator_cfg.mu.items()},
    )
    res = bootstrap(shifted, cfg, bcfg, scheme=scheme, n_jobs=n_jobs)
    z = z_scores(res.point.tau_by_horizon, res.se_horizon, zero_tol)
    passed = bool(np.all(np.abs(z[:P]) <= threshold))
    return PlaceboReport(
        P=P,
        grid=res.point,
        z_scores=z,
        passed=passed,
        threshold=float(threshold),
        anticipation=bool(anticipation),
        result=res,
        meta={"K": K},
    )
