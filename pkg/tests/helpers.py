"""Independent reference implementations and instance generators for tests.

None of these call into the package's solvers; they exist so the package can
be checked against code written a different way.
"""

import numpy as np

from seqsdid.oracle import FactorStructure, tightest_bounds
from seqsdid.panel import NEVER, CohortPanel


def gauss_solve(A, b):
    """Gaussian elimination with partial pivoting, in plain Python loops."""
    n = len(A)
    M = [list(map(float, A[i])) + [float(b[i])] for i in range(n)]
    for c in range(n):
        p = max(range(c, n), key=lambda i: abs(M[i][c]))
        M[c], M[p] = M[p], M[c]
        for i in range(c + 1, n):
            f = M[i][c] / M[c][c]
            for j in range(c, n + 1):
                M[i][j] -= f * M[c][j]
    x = [0.0] * n
    for i in range(n - 1, -1, -1):
        s = M[i][n] - sum(M[i][j] * x[j] for j in range(i + 1, n))
        x[i] = s / M[i][i]
    return np.array(x)


def brute_ridge(P, y, d, eta):
    """Ridge balancing by eliminating the sum-to-one constraint.

    Writes ``w = e_m + E v`` with ``E = [I; -1']`` and solves the normal
    equations of the unconstrained problem in ``(v, w0)``.
    """
    P = np.asarray(P, float)
    y = np.asarray(y, float)
    d = np.asarray(d, float)
    rows, m = P.shape
    E = np.vstack([np.eye(m - 1), -np.ones((1, m - 1))])
    em = np.zeros(m)
    em[-1] = 1.0
    X = np.hstack([P @ E, np.ones((rows, 1))])
    D = np.diag(d)
    H = X.T @ X
    H[: m - 1, : m - 1] += eta**2 * E.T @ D @ E
    g = X.T @ (y - P @ em)
    g[: m - 1] -= eta**2 * E.T @ D @ em
    z = gauss_solve(H, g)
    return em + E @ z[: m - 1], z[m - 1]


def pinv_exact(M, m, d):
    """Minimum ``sum d w^2`` subject to ``M w = m`` via a pseudo-inverse."""
    s = 1.0 / np.sqrt(np.asarray(d, float))
    return s * (np.linalg.pinv(np.asarray(M, float) * s[None, :]) @ np.asarray(m, float))


def imputation_did(Y, adoption, pi, a_min, a_max, K):
    """Sequential plain DiD with imputation, written with scalar loops.

    Unit weights are proportional to the row shares and time weights are
    uniform over the pre-periods. A later row adopting inside ``(a, t]`` is
    used as a control only when it is itself in range (and so imputed).
    Cells past the last period are skipped. Returns ``{(row, k): tau}``.
    """
    W = [list(map(float, row)) for row in Y]
    R, T = len(W), len(W[0])
    out = {}
    for k in range(K + 1):
        for a in sorted({int(x) for x in adoption if a_min <= x <= a_max}):
            t = a + k
            if t > T:
                continue
            ctrl = [j for j in range(R) if adoption[j] > a and (adoption[j] > t or adoption[j] <= a_max)]
            tot = sum(pi[j] for j in ctrl)
            rows = [i for i in range(R) if adoption[i] == a]
            est = {}
            for i in rows:
                def gap(col):
                    return W[i][col] - sum(pi[j] / tot * W[j][col] for j in ctrl)
                pre = sum(gap(col) for col in range(t - 1)) / (t - 1)
                est[i] = gap(t - 1) - pre
            for i in rows:
                W[i][t - 1] -= est[i]
                out[(i, k)] = est[i]
    return out


def random_ife_panel(rng, r, n_cohorts, T, noise_sd=0.0, effects=True, extra_never=None,
                     loading_scale=1.0):
    """Random aggregate panel with a planted rank-``r`` factor structure.

    ``n_cohorts`` counts adoption times including never-treated, whose
    cohort is split into ``r + 1`` or more rows so the loadings can span.
    Returns ``(panel, factors, truth)`` with ``truth[(row, t)]`` the planted
    effect on treated cells.
    """
    n_treated = n_cohorts - 1
    adopts = sorted(int(x) for x in rng.choice(np.arange(2, T + 1), size=n_treated, replace=False))
    n_never = r + 1 + (int(rng.integers(0, 2)) if extra_never is None else extra_never)
    adoption = adopts + [NEVER] * n_never
    labels = [str(a) for a in adopts] + [f"inf:{i}" for i in range(n_never)]
    R = len(adoption)
    theta = loading_scale * rng.normal(size=(R, r))
    psi = rng.normal(size=(T, r))
    Y = rng.normal(size=(R, 1)) + rng.normal(size=(1, T)) + theta @ psi.T
    if noise_sd:
        Y = Y + noise_sd * rng.normal(size=(R, T))
    truth = {}
    for i, a in enumerate(adoption):
        if a != NEVER and effects:
            eff = rng.normal(size=T - a + 1)
            Y[i, a - 1:] += eff
            truth.update({(labels[i], a + k): eff[k] for k in range(T - a + 1)})
        elif a != NEVER:
            truth.update({(labels[i], t): 0.0 for t in range(a, T + 1)})
    pi = rng.uniform(0.5, 2.0, size=R)
    panel = CohortPanel.from_matrix(Y, adoption, pi, labels=labels, n_units=1000 * R)
    return panel, FactorStructure(theta, psi, labels), truth


def identified_instance(rng, r, n_cohorts, T, noise_sd=0.0, effects=True, tries=200,
                        loading_scale=1.0):
    """Like :func:`random_ife_panel` but redrawn until the oracle range is nonempty."""
    for _ in range(tries):
        panel, f, truth = random_ife_panel(rng, r, n_cohorts, T, noise_sd, effects,
                                           loading_scale=loading_scale)
        cfg = tightest_bounds(f, panel)
        if cfg is None:
            continue
        in_range = (panel.adoption >= cfg.t_star) & (panel.adoption <= cfg.a_star)
        if in_range.any():
            return panel, f, truth, cfg
    raise RuntimeError("no identified instance found")


def two_way_panel(rng, adoption, T, tau=2.0, pi=None):
    """Noiseless additive panel plus a constant effect on treated cells."""
    R = len(adoption)
    Y = rng.normal(size=(R, 1)) + rng.normal(size=(1, T))
    periods = np.arange(1, T + 1)
    adoption = np.asarray(adoption, dtype=np.int64)
    Y = Y + tau * (periods[None, :] >= adoption[:, None])
    return CohortPanel.from_matrix(Y, adoption, pi)
