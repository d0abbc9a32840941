"""Equality-constrained quadratic weight problems.

Two families of problems are solved here, both over weight vectors that sum
to one and neither with sign constraints:

* ridge balancing: ``min ||P w + w0 - y||^2 + eta^2 * sum_j d_j w_j^2`` with
  a free, unpenalised intercept ``w0``;
* exact balancing: ``min sum_j d_j w_j^2`` subject to ``M w = m`` where the
  first row of ``M`` is all ones.

Both are written as symmetric KKT systems and go through :func:`solve_kkt`.
"""

import functools
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg

from .errors import InfeasibleConstraints, NonFiniteInput, SingularSystem

INF = "inf"
"""Symbolic infinite regularisation (penalty-only weights)."""

RANK_RTOL = 1e-10
FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class RidgeBalanceProblem:
    predictors: np.ndarray  # (fit rows, weighted series)
    target: np.ndarray
    penalty_diag: np.ndarray
    eta: Union[float, str]

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.predictors, dtype=float))
        y = np.asarray(self.target, dtype=float).ravel()
        d = np.asarray(self.penalty_diag, dtype=float).ravel()
        if p.shape[0] != y.shape[0]:
            raise ValueError(f"predictors have {p.shape[0]} rows, target has {y.shape[0]}")
        if p.shape[1] < 1:
            raise ValueError("ridge problem needs at least one column")
        if d.shape[0] != p.shape[1]:
            raise ValueError("penalty_diag length must equal the number of columns")
        object.__setattr__(self, "predictors", p)
        object.__setattr__(self, "target", y)
        object.__setattr__(self, "penalty_diag", d)


@dataclass(frozen=True)
class ExactBalanceProblem:
    moment_matrix: np.ndarray  # (1 + r, columns); first row all ones
    moment_target: np.ndarray
    penalty_diag: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.moment_matrix, dtype=float))
        t = np.asarray(self.moment_target, dtype=float).ravel()
        d = np.asarray(self.penalty_diag, dtype=float).ravel()
        if m.shape[0] < 1 or t.shape[0] != m.shape[0]:
            raise ValueError("moment target length must equal the number of moment rows")
        if d.shape[0] != m.shape[1]:
            raise ValueError("penalty_diag length must equal the number of columns")
        object.__setattr__(self, "moment_matrix", m)
        object.__setattr__(self, "moment_target", t)
        object.__setattr__(self, "penalty_diag", d)

    @classmethod
    def sum_to_one(cls, features, target, penalty_diag):
        """Build the problem ``sum w = 1, features.T @ w = target``.

        ``features`` has one row per column of the problem (e.g. loadings of
        the control series) and may have zero columns.
        """
        f = np.asarray(features, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        n = f.shape[0]
        moments = np.vstack([np.ones((1, n)), f.T])
        rhs = np.concatenate([[1.0], np.asarray(target, dtype=float).ravel()])
        return cls(moments, rhs, penalty_diag)


@dataclass
class WeightSolution:
    weights: np.ndarray
    intercept: Optional[float]
    imbalance: float
    penalty_value: float


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("non-finite values in solver input")


def solve_kkt(A, b):
    """Solve the symmetric system ``A x = b``.

    Falls back to the minimum-norm least-squares solution when ``A`` is
    numerically singular, with singular values below ``1e-10`` times the
    largest diagonal magnitude treated as zero. ``b`` may be a matrix of
    right-hand sides.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_finite(A, b)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("KKT matrix must be square")
    scale = np.max(np.abs(np.diag(A))) if A.size else 0.0
    if scale == 0.0:
        scale = np.max(np.abs(A)) if A.size else 0.0
    if scale == 0.0:
        return np.zeros_like(b)
    tol = RANK_RTOL * scale
    with warnings.catch_warnings():
        # singular pivots are detected below and routed to the SVD path
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu))) > tol:
        return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)
    u, s, vt = np.linalg.svd(A)
    keep = s > tol
    if not np.any(keep):
        return np.zeros_like(b)
    ub = u[:, keep].T @ b
    ub = ub / (s[keep][:, None] if ub.ndim == 2 else s[keep])
    return vt[keep].T @ ub


@functools.lru_cache(maxsize=256)
def _sum_zero_basis(m):
    """Orthonormal basis (m, m-1) of the vectors summing to zero."""
    q, _ = np.linalg.qr(np.hstack([np.ones((m, 1)), np.eye(m)[:, : m - 1]]))
    basis = q[:, 1:]
    basis.setflags(write=False)
    return basis


def _stacked_singular(A, m):
    """Flag slices whose KKT system is numerically singular.

    The KKT matrix is nonsingular iff the Hessian block is positive definite
    on the sum-to-zero subspace, so the test runs a Cholesky factorisation of
    that reduced Hessian and compares its pivots with ``RANK_RTOL`` times the
    largest KKT diagonal.
    """
    N = _sum_zero_basis(m)
    H = np.matmul(np.matmul(N.T, A[:, :m, :m]), N)
    scale = np.max(np.abs(np.diagonal(A, axis1=1, axis2=2)), axis=1)
    try:
        piv = np.diagonal(np.linalg.cholesky(H), axis1=1, axis2=2) ** 2
        return np.min(piv, axis=1) <= RANK_RTOL * scale
    except np.linalg.LinAlgError:
        bad = np.zeros(A.shape[0], dtype=bool)
        for s in range(A.shape[0]):
            try:
                piv = np.diagonal(np.linalg.cholesky(H[s])) ** 2
                bad[s] = np.min(piv) <= RANK_RTOL * scale[s]
            except np.linalg.LinAlgError:
                bad[s] = True
        return bad


def solve_ridge_balance_stacked(predictors, targets, penalty_diag, eta):
    """Batched :func:`solve_ridge_balance_many` over a leading axis.

    Shapes: predictors (S, rows, m), targets (S, rows, q), penalty_diag
    (S, m). Returns ``(W, w0)`` with weights (S, m, q) and intercepts
    (S, q). Every slice solves the same centred KKT system as the unbatched
    solver; numerically singular slices go through :func:`solve_kkt` one at
    a time. Inputs are assumed finite.
    """
    # contiguous copies keep matmul on one code path whatever the stack size
    P = np.ascontiguousarray(predictors, dtype=float)
    Y = np.ascontiguousarray(targets, dtype=float)
    d = np.ascontiguousarray(penalty_diag, dtype=float)
    S, _, m = P.shape
    q = Y.shape[2]
    if isinstance(eta, str):
        if eta != INF:
            raise ValueError(f"unknown symbolic eta {eta!r}")
        inv = 1.0 / d
        W = np.repeat((inv / inv.sum(axis=1, keepdims=True))[:, :, None], q, axis=2)
        return W, (Y - np.matmul(P, W)).mean(axis=1)
    if not eta > 0:
        raise ValueError("eta must be positive or INF")
    if m == 1:
        W = np.ones((S, 1, q))
        return W, (Y - P).mean(axis=1)
    # Under sum(w) = 1 the objective is unchanged by subtracting a common
    # vector from every column and the target; the free intercept is
    # profiled out by centring over fit rows. Both only improve conditioning.
    common = P.mean(axis=2, keepdims=True)
    Pc = P - common
    Yc = Y - common
    Pc = Pc - Pc.mean(axis=1, keepdims=True)
    Yc = Yc - Yc.mean(axis=1, keepdims=True)
    A = np.zeros((S, m + 1, m + 1))
    A[:, :m, :m] = np.matmul(Pc.transpose(0, 2, 1), Pc)
    idx = np.arange(m)
    A[:, idx, idx] += float(eta) ** 2 * d
    A[:, :m, m] = 1.0
    A[:, m, :m] = 1.0
    rhs = np.ones((S, m + 1, q))
    rhs[:, :m] = np.matmul(Pc.transpose(0, 2, 1), Yc)
    bad = _stacked_singular(A, m)
    sol = np.empty_like(rhs)
    good = ~bad
    if good.any():
        sol[good] = np.linalg.solve(A[good], rhs[good])
    for s in np.flatnonzero(bad):
        sol[s] = solve_kkt(A[s], rhs[s])
    W = np.ascontiguousarray(sol[:, :m])
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-8:
        raise SingularSystem("ridge KKT solution violates the sum-to-one constraint")
    W = W + (1.0 - W.sum(axis=1, keepdims=True)) / m
    return W, (Y - np.matmul(P, W)).mean(axis=1)


def solve_ridge_balance_many(predictors, targets, penalty_diag, eta):
    """Solve ridge balancing for several targets sharing one design.

    ``targets`` has shape (fit rows, n_targets). Returns ``(W, w0)`` with
    ``W`` of shape (columns, n_targets); the KKT matrix is factored once.
    """
    P = np.asarray(predictors, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    d = np.asarray(penalty_diag, dtype=float)
    _check_finite(P, Y, d)
    W, w0 = solve_ridge_balance_stacked(P[None], Y[None], d[None], eta)
    return W[0], w0[0]


def solve_ridge_balance(p: RidgeBalanceProblem) -> WeightSolution:
    """Ridge-penalised balancing weights with a free intercept."""
    W, w0 = solve_ridge_balance_many(p.predictors, p.target[:, None], p.penalty_diag, p.eta)
    w = W[:, 0]
    intercept = float(w0[0])
    resid = p.predictors @ w + intercept - p.target
    return WeightSolution(
        weights=w,
        intercept=intercept,
        imbalance=float(np.linalg.norm(resid)),
        penalty_value=float(np.sum(p.penalty_diag * w**2)),
    )


def solve_exact_balance(p: ExactBalanceProblem) -> WeightSolution:
    """Minimum-penalty weights satisfying every moment equation exactly.

    Raises
    ------
    InfeasibleConstraints
        If the target lies outside the span of the moment columns (for the
        standard sum-to-one system: outside the affine hull of the columns).
    """
    M, m, d = p.moment_matrix, p.moment_target, p.penalty_diag
    _check_finite(M, m, d)
    if np.any(d <= 0):
        raise ValueError("exact balancing needs strictly positive penalties")
    q, n = M.shape
    # unit-norm moment rows keep the solve independent of the loadings' scale
    norms = np.linalg.norm(M, axis=1)
    norms[norms == 0] = 1.0
    Ms, ms = M / norms[:, None], m / norms
    K = np.zeros((n + q, n + q))
    K[:n, :n] = 2.0 * np.diag(d)
    K[:n, n:] = Ms.T
    K[n:, :n] = Ms
    rhs = np.concatenate([np.zeros(n), ms])
    sol = solve_kkt(K, rhs)
    w = sol[:n]
    imbalance = float(np.linalg.norm(M @ w - m))
    if np.linalg.norm(Ms @ w - ms) > FEASIBILITY_TOL * max(1.0, np.linalg.norm(ms)):
        raise InfeasibleConstraints(
            "moment target outside the affine span of the columns", residual=imbalance
        )
    return WeightSolution(
        weights=w,
        intercept=None,
        imbalance=imbalance,
        penalty_value=float(np.sum(d * w**2)),
    )
