"""Sequential synthetic difference-in-differences.

The engine walks horizons ``k = 0..K`` in the outer loop and adoption times
``a = a_min..a_max`` in the inner loop. At each step it builds unit weights
over the not-yet-treated rows and time weights over the earlier periods,
forms the weighted double difference and overwrites the treated cell with
its imputed untreated value, so later steps see counterfactual data only.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import pandas as pd

from .balancing import INF, WeightSolution, solve_ridge_balance_stacked
from .errors import (
    HorizonOverflow,
    InvalidConfig,
    NoControls,
    NonFiniteInput,
    NoUntreatedCells,
    WeightSumViolation,
)
from .panel import NEVER, CohortPanel, ValidatedPanel

log = logging.getLogger(__name__)

AUTO = "auto"
ETA_FLOOR = 1e-12

SSDID = "SSDID"
SEQ_DID = "SEQ_DID"
SEQ_OLS = "SEQ_OLS"
JOINT_OLS = "JOINT_OLS"


@dataclass(frozen=True)
class SsdidConfig:
    """Estimator settings.

    ``a_min``/``a_max`` default to the earliest estimable and the latest
    adoption time with ``a + K <= T``. ``eta`` is a positive float, ``"inf"``
    (plain sequential DiD) or ``"auto"`` (noise-scaled default, resolved once
    before the loop). ``mu`` maps adoption time to horizon-aggregation
    weight; ``None`` means cohort-share weights.
    """

    K: int = 0
    a_min: Optional[int] = None
    a_max: Optional[int] = None
    eta: Union[float, str] = AUTO
    mu: Optional[dict] = None
    preaggregated_parallel: bool = False

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 0:
            raise InvalidConfig("K must be a nonnegative integer")
        if isinstance(self.eta, str):
            if self.eta not in (AUTO, INF):
                raise InvalidConfig(f"eta must be a positive number, 'inf' or 'auto', got {self.eta!r}")
        elif not (np.isfinite(self.eta) and self.eta > 0):
            raise InvalidConfig("eta must be positive and finite (use 'inf' for the DiD limit)")

    @property
    def kind(self) -> str:
        return SEQ_DID if self.eta == INF else SSDID

    def bounds(self, panel: CohortPanel):
        """Concrete ``(a_min, a_max)`` validated against the panel."""
        T = panel.T
        finite = sorted({int(a) for a in panel.adoption if a != NEVER})
        a_min = self.a_min
        a_max = self.a_max
        if a_min is None:
            cands = [a for a in finite if a >= 2]
            if not cands:
                raise InvalidConfig("no treated cohort with a pre-period")
            a_min = cands[0]
        if a_max is None:
            cands = [a for a in finite if a_min <= a <= T - self.K]
            if not cands:
                raise HorizonOverflow(f"no cohort adopts early enough for K={self.K} within T={T}")
            a_max = cands[-1]
        if a_min < 2:
            raise InvalidConfig("a_min must be at least 2 (one pre-period)")
        if a_min > a_max:
            raise InvalidConfig(f"a_min={a_min} exceeds a_max={a_max}")
        if a_max + self.K > T:
            raise HorizonOverflow(f"a_max + K = {a_max + self.K} exceeds T = {T}")
        return int(a_min), int(a_max)


@dataclass
class CellEstimate:
    row: int
    label: str
    a: int
    k: int
    tau_hat: float
    omega: Optional[WeightSolution] = None
    lam: Optional[WeightSolution] = None
    controls: Optional[np.ndarray] = None


@dataclass
class EstimateGrid:
    """Cell estimates over rows in range and horizons ``0..K``.

    ``tau`` has one row per estimated panel row; cells outside an
    estimator's range are NaN. ``tau_by_horizon`` aggregates cohort-level
    cells with weights ``mu``.
    """

    rows: np.ndarray
    labels: tuple
    adoption: np.ndarray
    pi: np.ndarray
    tau: np.ndarray
    estimator_kind: str
    eta_used: Union[float, str, None] = None
    mu: Optional[dict] = None
    tau_by_horizon: Optional[np.ndarray] = None
    cells: Optional[list] = None
    imputed_panel: Optional[CohortPanel] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.tau.shape[1] - 1

    @property
    def cohorts(self) -> list:
        return sorted({int(a) for a in self.adoption})

    def cohort_tau(self) -> np.ndarray:
        """Cohort-level estimates, share-weighted over rows of a cohort."""
        out = np.empty((len(self.cohorts), self.tau.shape[1]))
        for i, a in enumerate(self.cohorts):
            sel = self.adoption == a
            w = self.pi[sel] / self.pi[sel].sum()
            out[i] = w @ self.tau[sel]
        return out

    def cohort_shares(self) -> np.ndarray:
        return np.array([self.pi[self.adoption == a].sum() for a in self.cohorts])

    def cell(self, a: int, k: int) -> float:
        return float(self.cohort_tau()[self.cohorts.index(a), k])

    def to_frame(self) -> pd.DataFrame:
        ct = self.cohort_tau()
        recs = [
            (a, k, ct[i, k])
            for k in range(ct.shape[1])
            for i, a in enumerate(self.cohorts)
            if np.isfinite(ct[i, k])
        ]
        return pd.DataFrame(recs, columns=["a", "k", "tau_hat"])


def default_mu(grid: EstimateGrid) -> dict:
    shares = grid.cohort_shares()
    return {a: float(s) for a, s in zip(grid.cohorts, shares / shares.sum())}


def aggregate_horizon(grid: EstimateGrid, mu: Optional[dict] = None) -> np.ndarray:
    """Horizon averages ``sum_a mu_a tau_{a,k}``.

    Raises
    ------
    WeightSumViolation
        If ``mu`` does not sum to one or names cohorts outside the grid.
    """
    cohorts = grid.cohorts
    if mu is None:
        mu = default_mu(grid)
    elif not isinstance(mu, dict):
        mu = dict(zip(cohorts, np.asarray(mu, dtype=float)))
    extra = set(int(a) for a in mu) - set(cohorts)
    if extra:
        raise WeightSumViolation(f"mu names cohorts outside the grid: {sorted(extra)}")
    vec = np.array([float(mu.get(a, 0.0)) for a in cohorts])
    if abs(vec.sum() - 1.0) > 1e-10:
        raise WeightSumViolation(f"mu sums to {vec.sum():.12g}, not 1")
    return vec @ grid.cohort_tau()


def _twfe_residuals(Y, mask):
    """Residuals of an additive row + column fit on the masked cells.

    Solves the least-squares problem exactly by profiling out the row
    effects, which is the fixed point of alternating demeaning.
    """
    M = mask.astype(float)
    c = M.sum(axis=1)
    keep = c > 0
    M, Y, c = M[keep], Y[keep], c[keep]
    Ym = np.where(M > 0, Y, 0.0)
    ybar = Ym.sum(axis=1) / c
    A = np.diag(M.sum(axis=0)) - (M / c[:, None]).T @ M
    b = (M * (Y - ybar[:, None])).sum(axis=0)
    beta = np.linalg.lstsq(A, b, rcond=None)[0]
    bbar = (M @ beta) / c
    resid = (Y - ybar[:, None]) - (beta[None, :] - bbar[:, None])
    return resid, M > 0, keep


def noise_variance(panel: Union[CohortPanel, ValidatedPanel]) -> float:
    """Unit-level noise variance from a two-way fit on untreated cells.

    For an aggregated panel the row residuals are rescaled by the number of
    units behind each row, since a row mean has variance ``sigma^2 / n_a``.
    """
    periods = np.arange(1, panel.T + 1)
    mask = periods[None, :] < panel.adoption[:, None]
    if not mask.any():
        raise NoUntreatedCells("panel has no untreated cells")
    resid, m, keep = _twfe_residuals(panel.Y, mask)
    if isinstance(panel, ValidatedPanel):
        return float(np.mean(resid[m] ** 2))
    scale = (panel.n_units * panel.pi[keep])[:, None]
    return float(np.mean((scale * resid**2)[m]))


def default_eta(panel: Union[CohortPanel, ValidatedPanel]) -> float:
    """``eta = sigma_hat / n^0.45``, i.e. ``eta^2 = sigma_hat^2 / n^0.9``."""
    sigma2 = noise_variance(panel)
    n = panel.n if isinstance(panel, ValidatedPanel) else panel.n_units
    eta = np.sqrt(sigma2) / n**0.45
    if not eta > ETA_FLOOR:
        warnings.warn("two-way residual variance is zero; flooring eta at 1e-12", RuntimeWarning)
        eta = ETA_FLOOR
    return float(eta)


def resolve_eta(cfg: SsdidConfig, panel) -> Union[float, str]:
    if cfg.eta == AUTO:
        return default_eta(panel)
    return cfg.eta


def _controls(adoption, a, t, a_max):
    # A later cohort adopting inside (a, t] has treated cells before t; it is
    # a valid control only if the engine has already imputed them.
    later = adoption > a
    return np.flatnonzero(later & ((adoption > t) | (adoption <= a_max)))


def _step(W, pi, treated, controls, col, eta):
    """One (adoption time, horizon) step on a stack of panels.

    ``W`` is (S, rows, T) and ``pi`` is (S, rows). Returns the estimates
    (S, treated), unit weights with intercepts and time weights with
    intercept, all stacked over the leading axis.
    """
    S = W.shape[0]
    # contiguous operands keep every product on one code path, so a slice
    # gives the same bits whatever the stack size
    c = np.ascontiguousarray
    Yc_pre = c(W[:, controls, :col])  # (S, m, L)
    Yc_now = c(W[:, controls, col])  # (S, m)
    Yt_pre = c(W[:, treated, :col])  # (S, q, L)
    omega, w0 = solve_ridge_balance_stacked(
        Yc_pre.transpose(0, 2, 1), Yt_pre.transpose(0, 2, 1), 1.0 / pi[:, controls], eta
    )
    lam, l0 = solve_ridge_balance_stacked(Yc_pre, Yc_now[:, :, None], np.ones((S, col)), eta)
    omega, lam, l0 = c(omega), c(lam[:, :, 0]), c(l0[:, 0])
    # (treated post - synthetic post) - lambda-weighted pre gap
    gap_now = W[:, treated, col] - np.matmul(c(omega.transpose(0, 2, 1)), Yc_now[:, :, None])[:, :, 0]
    gap_pre = Yt_pre - np.matmul(c(omega.transpose(0, 2, 1)), Yc_pre)
    est = gap_now - np.matmul(gap_pre, lam[:, :, None])[:, :, 0]
    return est, (omega, w0), (lam, l0)


def _cell_solutions(W, pi, treated, controls, col, om, lm):
    """WeightSolution diagnostics for one unstacked step."""
    omega, w0 = om
    lam, l0 = lm
    Yc_pre = W[controls, :col]
    lam_fit = Yc_pre @ lam + l0 - W[controls, col]
    lam_sol = WeightSolution(lam, float(l0), float(np.linalg.norm(lam_fit)), float(lam @ lam))
    out = []
    for i, r in enumerate(treated):
        w = omega[:, i]
        fit = Yc_pre.T @ w + w0[i] - W[r, :col]
        out.append((WeightSolution(w, float(w0[i]), float(np.linalg.norm(fit)),
                                   float(np.sum(w**2 / pi[controls]))), lam_sol))
    return out


def _engine(W, pi, adoption, a_min, a_max, K, eta, parallel, on_cell=None):
    """Algorithm loop shared by the single-panel and stacked entry points.

    Works in place on ``W`` (S, rows, T). Rows sharing an adoption time never
    control for one another, so solving them jointly (``parallel``) or one
    at a time gives the same numbers up to rounding.
    """
    in_range = np.flatnonzero((adoption >= a_min) & (adoption <= a_max))
    pos = np.full(adoption.size, -1)
    pos[in_range] = np.arange(in_range.size)
    times = sorted({int(adoption[r]) for r in in_range})
    tau = np.full((W.shape[0], in_range.size, K + 1), np.nan)
    for k in range(K + 1):
        for a in times:
            t = a + k
            col = t - 1
            treated = np.flatnonzero(adoption == a)
            controls = _controls(adoption, a, t, a_max)
            if controls.size == 0:
                raise NoControls(f"cohort {a} has no later-adopting control row", a=a, k=k)
            batches = [treated] if parallel else [treated[i:i + 1] for i in range(treated.size)]
            for rows in batches:
                est, om, lm = _step(W, pi, rows, controls, col, eta)
                if on_cell is not None:
                    on_cell(a, k, rows, controls, col, est, om, lm)
                W[:, rows, col] -= est
                tau[:, pos[rows], k] = est
    return in_range, tau


def run_sequential(panel: CohortPanel, cfg: SsdidConfig, keep_cells: bool = True) -> EstimateGrid:
    """Sequential SDiD over the full (cohort, horizon) grid.

    Raises
    ------
    NoControls
        If some cohort in range has no later-adopting row to compare with.
    HorizonOverflow
        If ``a_max + K > T``.
    """
    a_min, a_max = cfg.bounds(panel)
    eta = resolve_eta(cfg, panel)
    K = int(cfg.K)
    adoption = panel.adoption
    pi = panel.pi
    W = panel.Y.copy()[None]
    cells = [] if keep_cells else None

    def record(a, k, rows, controls, col, est, om, lm):
        sols = _cell_solutions(W[0], pi, rows, controls, col,
                               (om[0][0], om[1][0]), (lm[0][0], lm[1][0]))
        for i, r in enumerate(rows):
            cells.append(CellEstimate(
                row=int(r), label=panel.labels[r], a=a, k=k, tau_hat=float(est[0, i]),
                omega=sols[i][0], lam=sols[i][1], controls=controls,
            ))

    in_range, tau = _engine(W, pi[None], adoption, a_min, a_max, K, eta,
                            cfg.preaggregated_parallel, record if keep_cells else None)
    grid = EstimateGrid(
        rows=in_range,
        labels=tuple(panel.labels[r] for r in in_range),
        adoption=adoption[in_range].copy(),
        pi=pi[in_range].copy(),
        tau=tau[0],
        estimator_kind=SEQ_DID if eta == INF else SSDID,
        eta_used=eta,
        mu=cfg.mu,
        cells=cells,
        imputed_panel=panel.with_Y(W[0]),
        meta={"a_min": a_min, "a_max": a_max, "K": K},
    )
    grid.tau_by_horizon = aggregate_horizon(grid, cfg.mu)
    return grid


def run_sequential_stacked(Y, pi, adoption, cfg: SsdidConfig) -> np.ndarray:
    """Run the engine on a stack of panels sharing rows and adoption times.

    ``Y`` is (S, rows, T) and ``pi`` is (S, rows); ``cfg`` must carry a
    resolved ``eta`` and explicit ``a_min``/``a_max``. Returns the row-level
    cell estimates, shape (S, rows in range, K+1). Slice ``s`` is the same
    computation as :func:`run_sequential` on panel ``s`` alone.
    """
    if cfg.eta == AUTO or cfg.a_min is None or cfg.a_max is None:
        raise InvalidConfig("stacked runs need a resolved eta and explicit a_min/a_max")
    W = np.array(Y, dtype=float, copy=True)
    pi = np.asarray(pi, dtype=float)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(pi))):
        raise NonFiniteInput("non-finite values in solver input")
    _, tau = _engine(W, pi, np.asarray(adoption), cfg.a_min, cfg.a_max, int(cfg.K), cfg.eta,
                     cfg.preaggregated_parallel)
    return tau


def estimate_cell(working: CohortPanel, a: int, k: int, eta, a_max: Optional[int] = None,
                  row: Optional[int] = None) -> CellEstimate:
    """Weighted double difference for one cell of an already-imputed panel.

    ``a_max`` limits which later cohorts count as imputed (default: every
    later cohort is a valid control, i.e. no contamination check).
    """
    if row is None:
        rows = np.flatnonzero(working.adoption == a)
        if rows.size != 1:
            raise InvalidConfig(f"expected exactly one row with adoption {a}, found {rows.size}")
        row = int(rows[0])
    t = a + k
    if a < 2 or t > working.T:
        raise HorizonOverflow(f"cell ({a}, {k}) outside 2 <= a, a + k <= T")
    controls = _controls(working.adoption, a, t, NEVER - 1 if a_max is None else a_max)
    if controls.size == 0:
        raise NoControls(f"cohort {a} has no later-adopting control row", a=a, k=k)
    W = working.Y[None]
    est, om, lm = _step(W, working.pi[None], np.array([row]), controls, t - 1, eta)
    sol = _cell_solutions(working.Y, working.pi, [row], controls, t - 1,
                          (om[0][0], om[1][0]), (lm[0][0], lm[1][0]))[0]
    return CellEstimate(row=row, label=working.labels[row], a=a, k=k, tau_hat=float(est[0, 0]),
                        omega=sol[0], lam=sol[1], controls=controls)
