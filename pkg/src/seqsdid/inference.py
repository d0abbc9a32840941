"""Bayesian-bootstrap standard errors and confidence intervals."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DegenerateCohort, InvalidConfig, ZeroSe
from .panel import CohortPanel, CovariateScheme, ValidatedPanel, aggregate_with_layout, row_layout
from .ssdid import (
    AUTO,
    EstimateGrid,
    SsdidConfig,
    aggregate_horizon,
    default_eta,
    run_sequential,
    run_sequential_stacked,
)

log = logging.getLogger(__name__)

MAX_RETRIES = 10
DEGENERATE_WEIGHT = 1e-12
CHUNK = 25  # replicates per stacked engine call; fixed so results never depend on n_jobs


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 100
    alpha: float = 0.05
    seed: int = 0
    granularity: str = "unit"  # "unit" or "cohort_row"
    interval_kind: str = "wald"  # "wald" or "percentile"

    def __post_init__(self):
        if int(self.B) != self.B or self.B < 2:
            raise InvalidConfig("bootstrap needs B >= 2 replicates")
        if not 0 < self.alpha < 1:
            raise InvalidConfig("alpha must lie in (0, 1)")
        if int(self.seed) != self.seed or self.seed < 0 or self.seed >= 2**64:
            raise InvalidConfig("seed must be a 64-bit nonnegative integer")
        if self.granularity not in ("unit", "cohort_row"):
            raise InvalidConfig(f"unknown granularity {self.granularity!r}")
        if self.interval_kind not in ("wald", "percentile"):
            raise InvalidConfig(f"unknown interval kind {self.interval_kind!r}")


def exponential_weights(seed: int, replicate: int, size: int, retry: int = 0) -> np.ndarray:
    """Exp(1) draws by inverse CDF from a counter-based stream.

    The stream is keyed by ``(seed, replicate, retry)`` and position ``i`` is
    unit ``i``'s draw, so a replicate's weights never depend on which other
    replicates ran or in what order.
    """
    key = np.random.SeedSequence([int(seed), int(replicate), int(retry)])
    u = np.random.Generator(np.random.Philox(key)).random(size)
    return -np.log1p(-u)


def t_statistic(point: float, se: float, null: float = 0.0) -> float:
    if not se > 0:
        raise ZeroSe("standard error must be positive")
    return (point - null) / se


@dataclass
class BootstrapResult:
    """Point grid, replicate draws and the derived intervals.

    Cell-level arrays are indexed ``[cohort, k]`` in ``point.cohorts`` order;
    horizon arrays by ``k``.
    """

    point: EstimateGrid
    rep_cells: np.ndarray  # (B, cohorts, K+1)
    rep_horizon: np.ndarray  # (B, K+1)
    se_cells: np.ndarray
    se_horizon: np.ndarray
    ci_cells: tuple
    ci_horizon: tuple
    config: BootstrapConfig
    meta: dict = field(default_factory=dict)

    @property
    def ci_lower(self):
        return self.ci_horizon[0]

    @property
    def ci_upper(self):
        return self.ci_horizon[1]

    def t_stats(self, null=0.0) -> np.ndarray:
        """Horizon t-statistics against ``null`` (scalar or per-horizon)."""
        null = np.broadcast_to(np.asarray(null, dtype=float), self.se_horizon.shape)
        return np.array([t_statistic(p, s, h) for p, s, h in
                         zip(self.point.tau_by_horizon, self.se_horizon, null)])

    def horizon_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "k": np.arange(self.se_horizon.size),
            "tau_k": self.point.tau_by_horizon,
            "se": self.se_horizon,
            "ci_lo": self.ci_horizon[0],
            "ci_hi": self.ci_horizon[1],
        })

    def replicate_frame(self) -> pd.DataFrame:
        """Long table ``replicate,target,estimate`` of every replicate value."""
        B, C, K1 = self.rep_cells.shape
        cohorts = self.point.cohorts
        parts = []
        for k in range(K1):
            parts.append(pd.DataFrame({"replicate": np.arange(B), "target": f"tau_k[{k}]",
                                       "estimate": self.rep_horizon[:, k]}))
        for i, a in enumerate(cohorts):
            for k in range(K1):
                parts.append(pd.DataFrame({"replicate": np.arange(B), "target": f"tau[{a},{k}]",
                                           "estimate": self.rep_cells[:, i, k]}))
        return pd.concat(parts, ignore_index=True)


def _intervals(point, reps, se, cfg):
    if cfg.interval_kind == "wald":
        q = stats.norm.ppf(1 - cfg.alpha / 2)
        return point - q * se, point + q * se
    lo = np.quantile(reps, cfg.alpha / 2, axis=0)
    hi = np.quantile(reps, 1 - cfg.alpha / 2, axis=0)
    return lo, hi


def _as_estimator(estimator_cfg, source) -> Callable[[CohortPanel], EstimateGrid]:
    """Freeze data-dependent settings on the point data, return a callable."""
    if callable(estimator_cfg) and not isinstance(estimator_cfg, SsdidConfig):
        return estimator_cfg
    cfg = estimator_cfg
    if cfg.eta == AUTO:
        cfg = replace(cfg, eta=default_eta(source))
    return cfg


def bootstrap(
    source: Union[ValidatedPanel, CohortPanel],
    estimator_cfg,
    bcfg: BootstrapConfig,
    scheme: Optional[CovariateScheme] = None,
    xi_override: Optional[Callable[[int, int], np.ndarray]] = None,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Bayesian bootstrap of an estimator.

    With a :class:`ValidatedPanel` every unit gets an Exp(1) weight and the
    rows are re-aggregated as weighted means; with a :class:`CohortPanel`
    (``cohort_row`` granularity) each row is reweighted as a whole, which
    only moves the row shares.

    ``estimator_cfg`` is an :class:`SsdidConfig` (``eta='auto'`` is resolved
    once on the original data and held fixed) or any callable mapping a
    :class:`CohortPanel` to an :class:`EstimateGrid`. ``xi_override(b, n)``
    replaces the random draws, for testing.
    """
    unit_level = isinstance(source, ValidatedPanel)
    if unit_level != (bcfg.granularity == "unit"):
        raise InvalidConfig(
            f"granularity {bcfg.granularity!r} does not match a {type(source).__name__} source"
        )
    if unit_level:
        layout = row_layout(source, scheme)
        size = source.n
    else:
        size = len(source.labels)
    group_of = source.adoption

    def resample(xi):
        # scale-free in xi; dividing by the max makes a constant draw all ones
        xi = xi / np.max(xi)
        if unit_level:
            return aggregate_with_layout(source, layout, xi)
        return source.with_pi(source.pi * xi)

    # the point estimate is the all-ones replicate, so constant draws reproduce it exactly
    point_panel = resample(np.ones(size))

    est = _as_estimator(estimator_cfg, source)
    if isinstance(est, SsdidConfig):
        a_min, a_max = est.bounds(point_panel)
        est = replace(est, a_min=a_min, a_max=a_max)
        cfg_frozen = est

        def run(p, keep=True):
            return run_sequential(p, cfg_frozen, keep_cells=keep)
    else:
        def run(p, keep=True):
            return est(p)

    point = run(point_panel)
    point.seed = bcfg.seed
    cohorts = point.cohorts

    groups, group_idx = np.unique(group_of, return_inverse=True)
    base = source.weight if unit_level else source.pi

    def draw(b):
        for retry in range(MAX_RETRIES + 1):
            if xi_override is not None:
                xi = np.asarray(xi_override(b, size), dtype=float)
            else:
                xi = exponential_weights(bcfg.seed, b, size, retry)
            tot = np.bincount(group_idx, weights=xi * base, minlength=groups.size)
            if np.all(tot >= DEGENERATE_WEIGHT):
                return xi
        raise DegenerateCohort(f"replicate {b}: cohort weight below {DEGENERATE_WEIGHT}"
                               f" after {MAX_RETRIES} retries")

    def summarise(panel_b, tau_rows):
        grid = EstimateGrid(rows=point.rows, labels=point.labels, adoption=point.adoption,
                            pi=panel_b.pi[point.rows], tau=tau_rows,
                            estimator_kind=point.estimator_kind, mu=point.mu)
        return grid.cohort_tau(), aggregate_horizon(grid, point.mu)

    B = int(bcfg.B)
    chunks = [range(s, min(s + CHUNK, B)) for s in range(0, B, CHUNK)]

    if isinstance(est, SsdidConfig):
        def run_chunk(idx):
            panels = [resample(draw(b)) for b in idx]
            tau = run_sequential_stacked(np.stack([p.Y for p in panels]),
                                         np.stack([p.pi for p in panels]),
                                         point_panel.adoption, cfg_frozen)
            return [summarise(p, t) for p, t in zip(panels, tau)]
    else:
        def run_chunk(idx):
            out = []
            for b in idx:
                grid = run(resample(draw(b)), keep=False)
                out.append((grid.cohort_tau(), grid.tau_by_horizon))
            return out

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    outs = [o for part in parts for o in part]
    rep_cells = np.stack([o[0] for o in outs])
    rep_horizon = np.stack([o[1] for o in outs])

    se_cells = rep_cells.std(axis=0, ddof=1)
    se_horizon = rep_horizon.std(axis=0, ddof=1)
    pc = point.cohort_tau()
    ph = point.tau_by_horizon
    return BootstrapResult(
        point=point,
        rep_cells=rep_cells,
        rep_horizon=rep_horizon,
        se_cells=se_cells,
        se_horizon=se_horizon,
        ci_cells=_intervals(pc, rep_cells, se_cells, bcfg),
        ci_horizon=_intervals(ph, rep_horizon, se_horizon, bcfg),
        config=bcfg,
        meta={
            "granularity": bcfg.granularity,
            "outside_formal_theory": not unit_level,
            "cohorts": cohorts,
        },
    )
