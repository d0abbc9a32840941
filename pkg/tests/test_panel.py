import numpy as np
import pandas as pd
import pytest

from seqsdid.errors import (
    DuplicateCell,
    EmptyPanel,
    GroupAdoptionMismatch,
    InconsistentAdoption,
    InvalidConfig,
    ShiftOutOfRange,
    UnbalancedPanel,
)
from seqsdid.panel import (
    NEVER,
    CohortPanel,
    CovariateScheme,
    PanelRecord,
    ValidatedPanel,
    aggregate,
    panel_to_frame,
    parse_adoption,
    read_panel_csv,
    shift_adoption,
    validate,
)


def records(n_periods=3, drop=None, adoption=(2, NEVER)):
    out = []
    for u, a in enumerate(adoption, start=1):
        for t in range(1, n_periods + 1):
            if drop == (u, t):
                continue
            out.append(PanelRecord(u, t, float(10 * u + t), a))
    return out


def test_validate_minimal_panel():
    p = validate(records())
    assert (p.T, p.n) == (3, 2)
    assert p.cohorts == [2, NEVER]
    assert p.cohort_counts == {2: 1, NEVER: 1}


def test_validate_errors():
    with pytest.raises(UnbalancedPanel):
        validate(records(drop=(1, 3)))
    bad = records()
    bad[1] = PanelRecord(1, 2, 0.0, 3)
    with pytest.raises(InconsistentAdoption):
        validate(bad)
    with pytest.raises(DuplicateCell):
        validate(records() + [PanelRecord(1, 1, 0.0, 2)])
    with pytest.raises(EmptyPanel):
        validate([])


def test_parse_adoption_sentinels():
    for v in ("", "inf", "INF", None, float("inf"), "never"):
        assert parse_adoption(v) == NEVER
    assert parse_adoption("7") == 7
    assert parse_adoption(3.0) == 3


def test_aggregate_arithmetic_mean():
    Y = np.array([[1.0, 0], [3.0, 0], [5.0, 0], [7.0, 0]])
    p = ValidatedPanel.from_arrays(Y, [2, 2, NEVER, NEVER])
    cp = aggregate(p)
    assert cp.Y[cp.row("2"), 0] == 2.0
    assert cp.pi[cp.row("2")] == 0.5


def test_aggregate_weighted_mean():
    Y = np.array([[1.0, 0], [3.0, 0], [5.0, 0], [7.0, 0]])
    p = ValidatedPanel.from_arrays(Y, [2, 2, NEVER, NEVER], weight=[1, 3, 1, 1])
    cp = aggregate(p)
    assert cp.Y[cp.row("2"), 0] == pytest.approx(2.5)
    assert cp.pi[cp.row("2")] == pytest.approx(4 / 6)


def test_hybrid_split_rows():
    Y = np.zeros((6, 3))
    p = ValidatedPanel.from_arrays(Y, [2, 2, NEVER, NEVER, NEVER, NEVER],
                                   group=["x", "y", "x", "x", "y", "y"])
    cp = aggregate(p, CovariateScheme("hybrid", never_treated_split=True))
    assert len(cp.labels) == 3
    assert list(cp.adoption) == [2, NEVER, NEVER]
    assert aggregate(p, CovariateScheme("hybrid")).labels == aggregate(p).labels


def test_grouped_rows_and_mismatch():
    Y = np.arange(12, dtype=float).reshape(4, 3)
    p = ValidatedPanel.from_arrays(Y, [2, 2, NEVER, NEVER], group=["a", "a", "b", "c"])
    cp = aggregate(p, CovariateScheme("grouped"))
    assert cp.labels == ("a", "b", "c")
    np.testing.assert_allclose(cp.Y[0], Y[:2].mean(axis=0))
    bad = ValidatedPanel.from_arrays(Y, [2, 3, NEVER, NEVER], group=["a", "a", "b", "c"])
    with pytest.raises(GroupAdoptionMismatch):
        aggregate(bad, CovariateScheme("grouped"))


def test_shares_are_counts_when_unweighted():
    rng = np.random.default_rng(0)
    adoption = rng.choice([3, 5, NEVER], size=40)
    cp = aggregate(ValidatedPanel.from_arrays(rng.normal(size=(40, 6)), adoption))
    for lab, pi, n in zip(cp.labels, cp.pi, cp.n_by_row):
        assert pi == pytest.approx(n / 40, abs=1e-15)
    assert abs(cp.pi.sum() - 1) <= 1e-12


def test_aggregation_is_linear():
    rng = np.random.default_rng(1)
    Y = rng.normal(size=(30, 5))
    adoption = rng.choice([2, 4, NEVER], size=30)
    w = rng.uniform(0.5, 2, size=30)
    base = aggregate(ValidatedPanel.from_arrays(Y, adoption, weight=w))
    moved = aggregate(ValidatedPanel.from_arrays(2.5 * Y - 1.0, adoption, weight=w))
    np.testing.assert_allclose(moved.Y, 2.5 * base.Y - 1.0, atol=1e-12)


def test_shift_adoption():
    p = ValidatedPanel.from_arrays(np.zeros((3, 8)), [5, 7, NEVER])
    assert list(shift_adoption(p, 2).adoption) == [3, 5, NEVER]
    with pytest.raises(ShiftOutOfRange):
        shift_adoption(ValidatedPanel.from_arrays(np.zeros((2, 4)), [2, NEVER]), 2)
    with pytest.raises(InvalidConfig):
        shift_adoption(p, 0)


def test_shift_preserves_outcomes_per_period():
    rng = np.random.default_rng(2)
    p = ValidatedPanel.from_arrays(rng.normal(size=(12, 6)), rng.choice([4, 5, NEVER], size=12))
    s = shift_adoption(p, 1)
    for t in range(6):
        assert sorted(s.Y[:, t]) == sorted(p.Y[:, t])


def test_csv_round_trip(tmp_path):
    p = ValidatedPanel.from_arrays(np.arange(6.0).reshape(2, 3), [2, NEVER], weight=[1.0, 2.0],
                                   group=["x", "y"])
    path = tmp_path / "panel.csv"
    panel_to_frame(p).to_csv(path, index=False)
    q = read_panel_csv(path)
    np.testing.assert_array_equal(q.Y, p.Y)
    np.testing.assert_array_equal(q.adoption, p.adoption)
    np.testing.assert_array_equal(q.weight, p.weight)
    assert list(q.group) == ["x", "y"]


def test_csv_empty_adoption_is_never(tmp_path):
    df = pd.DataFrame({"unit": [1, 1, 2, 2], "period": [1, 2, 1, 2], "outcome": [0.0, 1, 2, 3],
                       "adoption": ["2", "2", "", ""]})
    path = tmp_path / "p.csv"
    df.to_csv(path, index=False)
    assert list(read_panel_csv(path).adoption) == [2, NEVER]


def test_cohort_panel_invariants():
    cp = CohortPanel.from_matrix(np.zeros((3, 4)), [NEVER, 3, 2], pi=[2, 1, 1])
    assert list(cp.adoption) == [2, 3, NEVER]
    assert cp.pi.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(UnbalancedPanel):
        CohortPanel.from_matrix(np.array([[np.nan, 0.0]]), [NEVER])
