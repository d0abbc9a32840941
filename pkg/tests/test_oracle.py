import numpy as np
import pytest
import scipy.linalg

from helpers import identified_instance, two_way_panel
from seqsdid.balancing import INF
from seqsdid.errors import InfeasibleConstraints
from seqsdid.oracle import (
    FactorStructure,
    OracleConfig,
    check_affine_hull,
    factor_diagnostics,
    joint_ols_design,
    read_factors_csv,
    run_joint_ols,
    run_sequential_ols,
    tightest_bounds,
    write_factors_csv,
)
from seqsdid.panel import NEVER, CohortPanel
from seqsdid.ssdid import SsdidConfig, run_sequential


def max_diff(g1, g2):
    both = np.isfinite(g1.tau) & np.isfinite(g2.tau)
    assert both.any()
    np.testing.assert_array_equal(np.isfinite(g1.tau), np.isfinite(g2.tau))
    return float(np.max(np.abs(g1.tau[both] - g2.tau[both])))


def test_affine_hull_examples():
    panel = CohortPanel.from_matrix(np.zeros((4, 6)), [3, NEVER, NEVER, NEVER], labels=list("abcd"))
    assert check_affine_hull(FactorStructure.zero(panel), panel, OracleConfig(4, 3)).ok
    flat = FactorStructure(np.ones((4, 1)), np.arange(6.0)[:, None], list("abcd"))
    rep = check_affine_hull(flat, panel, OracleConfig(4, 3))
    assert not rep.ok and rep.reason == "affine_hull.loadings_rank" and rep.loadings_gap == 1


def test_affine_hull_generic_rank_two():
    rng = np.random.default_rng(0)
    panel = CohortPanel.from_matrix(np.zeros((4, 7)), [5, NEVER, NEVER, NEVER], labels=list("abcd"))
    theta, psi = rng.normal(size=(4, 2)), rng.normal(size=(7, 2))
    f = FactorStructure(theta, psi, list("abcd"))
    rep = check_affine_hull(f, panel, OracleConfig(5, 4))
    # independent rank check of the demeaned points
    ctrl = theta[1:] - theta[1:].mean(axis=0)
    pre = psi[:3] - psi[:3].mean(axis=0)
    assert np.linalg.matrix_rank(ctrl) == 2 and np.linalg.matrix_rank(pre) == 2
    assert rep.ok and rep.loadings_rank == 2 and rep.factors_rank == 2


def test_factor_free_oracle_equals_inf_ssdid():
    rng = np.random.default_rng(1)
    panel = two_way_panel(rng, [3, 4, 6, NEVER, NEVER], T=9)
    panel = panel.with_Y(panel.Y + 0.3 * rng.normal(size=panel.Y.shape))
    f = FactorStructure.zero(panel)
    ocfg = tightest_bounds(f, panel)
    seq = run_sequential_ols(panel, f, ocfg)
    did = run_sequential(panel, SsdidConfig(K=3, a_min=3, a_max=6, eta=INF))
    for i, a in enumerate(did.adoption):
        for k in range(4):
            assert did.tau[i, k] == pytest.approx(seq.cell(int(a), k), abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_noiseless_oracles_are_exact(seed):
    rng = np.random.default_rng(seed)
    panel, f, truth, ocfg = identified_instance(rng, r=seed % 3 + 1, n_cohorts=5, T=11)
    for grid in (run_sequential_ols(panel, f, ocfg), run_joint_ols(panel, f, ocfg)):
        for i, a in enumerate(grid.adoption):
            for k in range(grid.K + 1):
                if np.isfinite(grid.tau[i, k]):
                    assert abs(grid.tau[i, k] - truth[(grid.labels[i], a + k)]) <= 1e-10


@pytest.mark.parametrize("seed", range(6))
def test_sequential_equals_joint_on_noisy_instances(seed):
    rng = np.random.default_rng(100 + seed)
    panel, f, _, ocfg = identified_instance(rng, r=seed % 4, n_cohorts=3 + seed % 4, T=8 + seed, noise_sd=0.5)
    assert max_diff(run_sequential_ols(panel, f, ocfg), run_joint_ols(panel, f, ocfg)) <= 1e-8


def test_joint_ols_invariant_to_column_order():
    rng = np.random.default_rng(7)
    panel, f, _, ocfg = identified_instance(rng, r=2, n_cohorts=5, T=10, noise_sd=1.0)
    base = run_joint_ols(panel, f, ocfg)
    n_cols = joint_ols_design(panel, f)[0].shape[1]
    perm = run_joint_ols(panel, f, ocfg, column_order=rng.permutation(n_cols))
    assert max_diff(base, perm) <= 1e-8


def test_unit_weights_do_not_depend_on_horizon():
    rng = np.random.default_rng(8)
    panel, f, _, ocfg = identified_instance(rng, r=1, n_cohorts=4, T=10, noise_sd=0.2)
    grid = run_sequential_ols(panel, f, ocfg)
    by_row = {}
    for cell in grid.cells:
        by_row.setdefault(cell.row, []).append(cell.omega.weights)
    for ws in by_row.values():
        for w in ws[1:]:
            np.testing.assert_allclose(w, ws[0], atol=1e-12)


def test_infeasible_balance_raises():
    panel = CohortPanel.from_matrix(np.zeros((3, 6)), [4, NEVER, NEVER], labels=list("abc"))
    f = FactorStructure(np.array([[5.0], [1.0], [1.0]]), np.arange(6.0)[:, None], list("abc"))
    with pytest.raises(InfeasibleConstraints):
        run_sequential_ols(panel, f, OracleConfig(4, 3))


def test_factor_diagnostics_examples():
    panel = CohortPanel.from_matrix(np.zeros((3, 4)), [3, NEVER, NEVER], labels=list("abc"))
    d0 = factor_diagnostics(FactorStructure.zero(panel), panel, 3, 0)
    assert d0.no_factors and d0.sigma_tilde == 0.0 and not d0.L.any()
    # demeaned control loadings (1, -1) and pre-period factors (2, -2)
    f = FactorStructure(np.array([[0.0], [2.0], [0.0]]), np.array([[5.0], [1.0], [9.0], [9.0]]),
                        list("abc"))
    d = factor_diagnostics(f, panel, 3, 0)
    np.testing.assert_allclose(d.L, [[2.0, -2.0], [-2.0, 2.0]])
    assert d.sigma_tilde == pytest.approx(4.0)


def test_factor_diagnostics_matches_svd_oracle():
    rng = np.random.default_rng(9)
    R, T = 6, 9
    panel = CohortPanel.from_matrix(np.zeros((R, T)), [4, 5, NEVER, NEVER, NEVER, NEVER],
                                    labels=list("abcdef"))
    theta, psi = rng.normal(size=(R, 2)), rng.normal(size=(T, 2))
    d = factor_diagnostics(FactorStructure(theta, psi, list("abcdef")), panel, 4, 2)
    ctrl = [j for j in range(R) if panel.adoption[j] > 4]
    tb = sum(theta[j] for j in ctrl) / len(ctrl)
    pb = sum(psi[l] for l in range(5)) / 5
    L = np.array([[(theta[j] - tb) @ (psi[l] - pb) for l in range(5)] for j in ctrl])
    s = scipy.linalg.svdvals(L)
    assert d.sigma_tilde == pytest.approx(s[1], abs=1e-10)


def test_factors_csv_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    f = FactorStructure(rng.normal(size=(3, 2)), rng.normal(size=(5, 2)), ["3", "inf", "g01"])
    write_factors_csv(f, tmp_path / "f.csv")
    g = read_factors_csv(tmp_path / "f.csv")
    assert g.labels == f.labels
    np.testing.assert_array_equal(g.theta, f.theta)
    np.testing.assert_array_equal(g.psi, f.psi)
    z = FactorStructure(np.zeros((2, 0)), np.zeros((4, 0)), ["2", "inf"])
    write_factors_csv(z, tmp_path / "z.csv")
    assert read_factors_csv(tmp_path / "z.csv").r == 0
