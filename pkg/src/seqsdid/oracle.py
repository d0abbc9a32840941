"""Infeasible benchmarks that know the factor structure.

``run_sequential_ols`` balances the true loadings and factors exactly and
imputes sequentially; ``run_joint_ols`` solves the stacked weighted least
squares problem directly. On cells with ``t* <= a + k <= a*`` the two agree,
which is what makes the sequential form a usable benchmark.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .balancing import ExactBalanceProblem, WeightSolution, solve_exact_balance
from .errors import InvalidConfig
from .io import atomic_write_csv
from .panel import CohortPanel
from .ssdid import JOINT_OLS, SEQ_OLS, CellEstimate, EstimateGrid, aggregate_horizon

RANK_RTOL = 1e-8


@dataclass(frozen=True)
class FactorStructure:
    """Loadings per aggregate row and factors per period.

    ``labels`` names the row each loading belongs to, so a structure can be
    matched against any :class:`CohortPanel` built with the same scheme.
    """

    theta: np.ndarray  # (rows, r)
    psi: np.ndarray  # (T, r)
    labels: tuple

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(len(self.labels), -1)
        psi = np.asarray(self.psi, dtype=float)
        psi = psi.reshape(psi.shape[0], -1)
        if theta.shape[1] != psi.shape[1]:
            raise ValueError("loadings and factors must share the rank r")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))

    @property
    def r(self) -> int:
        return self.theta.shape[1]

    def loadings_for(self, panel: CohortPanel) -> np.ndarray:
        index = {lab: i for i, lab in enumerate(self.labels)}
        missing = [lab for lab in panel.labels if str(lab) not in index]
        if missing:
            raise InvalidConfig(f"no loadings for rows {missing}")
        if self.psi.shape[0] != panel.T:
            raise InvalidConfig(f"factors cover {self.psi.shape[0]} periods, panel has {panel.T}")
        return self.theta[[index[str(lab)] for lab in panel.labels]]

    @classmethod
    def zero(cls, panel: CohortPanel) -> "FactorStructure":
        return cls(np.zeros((len(panel.labels), 0)), np.zeros((panel.T, 0)), panel.labels)


@dataclass(frozen=True)
class OracleConfig:
    a_star: int
    t_star: int

    def __post_init__(self):
        if self.t_star > self.a_star:
            raise InvalidConfig(f"t_star={self.t_star} exceeds a_star={self.a_star}")
        if self.t_star < 2:
            raise InvalidConfig("t_star must be at least 2")


@dataclass
class AffineHullReport:
    ok: bool
    r: int
    loadings_rank: int
    factors_rank: int
    n_controls: int
    n_pre_periods: int
    reason: Optional[str] = None

    @property
    def loadings_gap(self) -> int:
        return self.r - self.loadings_rank

    @property
    def factors_gap(self) -> int:
        return self.r - self.factors_rank


def _affine_rank(points: np.ndarray) -> int:
    if points.shape[0] == 0 or points.shape[1] == 0:
        return 0
    centred = points - points.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    scale = max(1.0, float(np.max(np.abs(points))) * np.sqrt(points.shape[0]))
    return int(np.sum(s > RANK_RTOL * scale))


def check_affine_hull(f: FactorStructure, panel: CohortPanel, cfg: OracleConfig) -> AffineHullReport:
    """Do late-adopter loadings and early factors affinely span R^r?"""
    theta = f.loadings_for(panel)
    ctrl = theta[panel.adoption > cfg.a_star]
    pre = f.psi[: cfg.t_star - 1]
    lr, fr = _affine_rank(ctrl), _affine_rank(pre)
    reason = None
    if lr < f.r:
        reason = "affine_hull.loadings_rank"
    elif fr < f.r:
        reason = "affine_hull.factors_rank"
    return AffineHullReport(
        ok=reason is None, r=f.r, loadings_rank=lr, factors_rank=fr,
        n_controls=int(ctrl.shape[0]), n_pre_periods=int(pre.shape[0]), reason=reason,
    )


def tightest_bounds(f: FactorStructure, panel: CohortPanel) -> Optional[OracleConfig]:
    """Largest ``a*`` and smallest ``t*`` passing the affine-hull check."""
    theta = f.loadings_for(panel)
    T = panel.T
    a_star = next((a for a in range(T, 1, -1) if _affine_rank(theta[panel.adoption > a]) == f.r), None)
    t_star = next((t for t in range(2, T + 1) if _affine_rank(f.psi[: t - 1]) == f.r), None)
    if a_star is None or t_star is None or t_star > a_star:
        return None
    return OracleConfig(a_star=a_star, t_star=t_star)


def _oracle_rows(panel, cfg):
    return np.flatnonzero((panel.adoption >= cfg.t_star) & (panel.adoption <= cfg.a_star))


def _grid(panel, rows, tau, kind, cfg, cells=None, imputed=None):
    grid = EstimateGrid(
        rows=rows,
        labels=tuple(panel.labels[r] for r in rows),
        adoption=panel.adoption[rows].copy(),
        pi=panel.pi[rows].copy(),
        tau=tau,
        estimator_kind=kind,
        cells=cells,
        imputed_panel=imputed,
        meta={"a_star": cfg.a_star, "t_star": cfg.t_star},
    )
    if rows.size:
        grid.tau_by_horizon = aggregate_horizon(grid)
    return grid


def unit_weights(theta, pi, controls, r) -> WeightSolution:
    """Minimum ``sum w^2 / pi`` weights reproducing row ``r``'s loading."""
    problem = ExactBalanceProblem.sum_to_one(theta[controls], theta[r], 1.0 / pi[controls])
    return solve_exact_balance(problem)


def time_weights(psi, t) -> WeightSolution:
    """Minimum-norm weights over periods ``< t`` reproducing ``psi_t``."""
    problem = ExactBalanceProblem.sum_to_one(psi[: t - 1], psi[t - 1], np.ones(t - 1))
    return solve_exact_balance(problem)


def run_sequential_ols(panel: CohortPanel, f: FactorStructure, cfg: OracleConfig,
                       keep_cells: bool = True) -> EstimateGrid:
    """Exact-balance sequential estimator over ``t* <= a``, ``a + k <= a*``.

    Raises
    ------
    InfeasibleConstraints
        If some balancing problem has no solution (affine hull fails).
    """
    theta = f.loadings_for(panel)
    adoption, pi = panel.adoption, panel.pi
    W = panel.Y.copy()
    rows = _oracle_rows(panel, cfg)
    pos = {int(r): i for i, r in enumerate(rows)}
    K = cfg.a_star - cfg.t_star
    tau = np.full((rows.size, K + 1), np.nan)
    cells = [] if keep_cells else None
    for k in range(K + 1):
        times = sorted({int(adoption[r]) for r in rows if adoption[r] + k <= cfg.a_star})
        for a in times:
            t = a + k
            controls = np.flatnonzero(adoption > a)
            lam = time_weights(f.psi, t)
            treated = np.flatnonzero(adoption == a)
            est = np.empty(treated.size)
            for i, r in enumerate(treated):
                om = unit_weights(theta, pi, controls, r)
                gap_now = W[r, t - 1] - om.weights @ W[controls, t - 1]
                gap_pre = W[r, : t - 1] - om.weights @ W[controls, : t - 1]
                est[i] = gap_now - lam.weights @ gap_pre
                tau[pos[int(r)], k] = est[i]
                if keep_cells:
                    cells.append(CellEstimate(int(r), panel.labels[r], a, k, float(est[i]),
                                              om, lam, controls))
            W[treated, t - 1] -= est
    return _grid(panel, rows, tau, SEQ_OLS, cfg, cells, panel.with_Y(W))


def joint_ols_design(panel: CohortPanel, f: FactorStructure):
    """Stacked design for the weighted two-way + interacted-factor regression.

    Returns ``(X, y, w, treated_index)`` where ``treated_index`` maps each
    treated cell ``(row, t)`` to its dummy column.
    """
    theta = f.loadings_for(panel)
    psi = f.psi
    R, T = panel.Y.shape
    r = f.r
    rr, tt = np.meshgrid(np.arange(R), np.arange(T), indexing="ij")
    rr, tt = rr.ravel(), tt.ravel()
    n_cells = R * T
    treated = (tt + 1) >= panel.adoption[rr]
    treated_cells = np.flatnonzero(treated)
    blocks = []
    alpha = np.zeros((n_cells, R))
    alpha[np.arange(n_cells), rr] = 1.0
    beta = np.zeros((n_cells, T))
    beta[np.arange(n_cells), tt] = 1.0
    blocks += [alpha, beta]
    if r:
        # theta_a' phi_t: r free coefficients per period
        phi = np.zeros((n_cells, T * r))
        for q in range(r):
            phi[np.arange(n_cells), tt * r + q] = theta[rr, q]
        # nu_a' psi_t: r free coefficients per row
        nu = np.zeros((n_cells, R * r))
        for q in range(r):
            nu[np.arange(n_cells), rr * r + q] = psi[tt, q]
        blocks += [phi, nu]
    dummies = np.zeros((n_cells, treated_cells.size))
    dummies[treated_cells, np.arange(treated_cells.size)] = 1.0
    blocks.append(dummies)
    X = np.hstack(blocks)
    y = panel.Y.ravel()
    w = panel.pi[rr]
    offset = X.shape[1] - treated_cells.size
    treated_index = {(int(rr[c]), int(tt[c]) + 1): offset + j for j, c in enumerate(treated_cells)}
    return X, y, w, treated_index


def run_joint_ols(panel: CohortPanel, f: FactorStructure, cfg: OracleConfig,
                  column_order: Optional[np.ndarray] = None) -> EstimateGrid:
    """Minimum-norm weighted least squares, reporting identified cells only.

    ``column_order`` permutes the design columns before solving; identified
    effects must not depend on it.
    """
    X, y, w, tindex = joint_ols_design(panel, f)
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw
    if column_order is not None:
        order = np.asarray(column_order)
        coef_perm = np.linalg.lstsq(Xw[:, order], yw, rcond=None)[0]
        coef = np.empty_like(coef_perm)
        coef[order] = coef_perm
    else:
        coef = np.linalg.lstsq(Xw, yw, rcond=None)[0]
    rows = _oracle_rows(panel, cfg)
    K = cfg.a_star - cfg.t_star
    tau = np.full((rows.size, K + 1), np.nan)
    for i, r in enumerate(rows):
        a = int(panel.adoption[r])
        for k in range(K + 1):
            if a + k <= cfg.a_star:
                tau[i, k] = coef[tindex[(int(r), a + k)]]
    return _grid(panel, rows, tau, JOINT_OLS, cfg)


@dataclass
class FactorDiagnostics:
    L: np.ndarray
    sigma_tilde: float
    scaled: float  # sigma_tilde * sqrt(n)
    no_factors: bool = False
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def factor_diagnostics(f: FactorStructure, panel: CohortPanel, a: int, k: int) -> FactorDiagnostics:
    """Demeaned interaction matrix over controls ``j > a`` and periods ``l < a + k``."""
    theta = f.loadings_for(panel)
    ctrl = theta[panel.adoption > a]
    pre = f.psi[: a + k - 1]
    L = (ctrl - ctrl.mean(axis=0)) @ (pre - pre.mean(axis=0)).T
    if f.r == 0:
        return FactorDiagnostics(L=np.zeros((ctrl.shape[0], pre.shape[0])), sigma_tilde=0.0,
                                 scaled=0.0, no_factors=True)
    s = np.linalg.svd(L, compute_uv=False)
    tol = 1e-10 * max(1.0, s[0] if s.size else 0.0)
    nz = s[s > tol]
    sig = float(nz[-1]) if nz.size else 0.0
    return FactorDiagnostics(L=L, sigma_tilde=sig, scaled=sig * np.sqrt(panel.n_units),
                             no_factors=False, singular_values=s)


def write_factors_csv(f: FactorStructure, path) -> None:
    cols = [f"f{q + 1}" for q in range(f.r)]
    load = pd.DataFrame(f.theta, columns=cols)
    load.insert(0, "index", list(f.labels))
    load.insert(0, "kind", "loading")
    fac = pd.DataFrame(f.psi, columns=cols)
    fac.insert(0, "index", [str(t) for t in range(1, f.psi.shape[0] + 1)])
    fac.insert(0, "kind", "factor")
    atomic_write_csv(pd.concat([load, fac], ignore_index=True), path)


def read_factors_csv(path) -> FactorStructure:
    df = pd.read_csv(path, dtype={"index": str, "kind": str}, keep_default_na=False,
                     float_precision="round_trip")
    cols = [c for c in df.columns if c not in ("kind", "index")]
    load = df[df["kind"] == "loading"]
    fac = df[df["kind"] == "factor"].copy()
    fac["t"] = fac["index"].astype(int)
    fac = fac.sort_values("t")
    theta = load[cols].to_numpy(dtype=float).reshape(len(load), len(cols))
    psi = fac[cols].to_numpy(dtype=float).reshape(len(fac), len(cols))
    return FactorStructure(theta, psi, tuple(load["index"]))
