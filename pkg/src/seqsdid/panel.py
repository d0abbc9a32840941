"""Panel ingestion, validation and cohort aggregation.

Long-format unit-period records are validated into a balanced
:class:`ValidatedPanel` (a units x periods outcome matrix plus per-unit
attributes) and aggregated into a :class:`CohortPanel`, the row-level series
the estimators consume. Periods are 1-based in the public API and stored in
column ``t - 1``.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Optional, Union

import numpy as np
import pandas as pd
import scipy.sparse

from .errors import (
    DuplicateCell,
    EmptyPanel,
    GroupAdoptionMismatch,
    InconsistentAdoption,
    InvalidConfig,
    ShiftOutOfRange,
    SsdidError,
    UnbalancedPanel,
)

NEVER = np.iinfo(np.int64).max
"""Adoption sentinel for never-treated units; sorts after every period."""

CSV_COLUMNS = ("unit", "period", "outcome", "adoption", "weight", "group")


class InvalidAdoption(SsdidError):
    code = "panel.invalid_adoption"


class InconsistentUnitAttribute(SsdidError):
    code = "panel.inconsistent_unit_attribute"


def parse_adoption(value) -> int:
    """Map a raw adoption value to an int, with empty/``inf`` meaning never."""
    if value is None:
        return NEVER
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("", "inf", "+inf", "infinity", "never", "nan"):
            return NEVER
        value = float(v)
    if isinstance(value, (float, np.floating)):
        if math.isnan(value) or math.isinf(value):
            return NEVER
        if value != int(value):
            raise InvalidAdoption(f"adoption {value!r} is not an integer")
    value = int(value)
    return NEVER if value == NEVER else value


def format_adoption(a) -> str:
    return "inf" if int(a) == NEVER else str(int(a))


@dataclass(frozen=True)
class PanelRecord:
    unit_id: Any
    period: int
    outcome: float
    adoption: int = NEVER
    agg_weight: float = 1.0
    group: Optional[Any] = None


@dataclass(frozen=True)
class CovariateScheme:
    """How units map to aggregate rows.

    ``none`` gives one row per adoption cohort. ``hybrid`` is the same for
    treated cohorts (cohort means already average the covariate cells), and
    with ``never_treated_split`` each never-treated covariate cell becomes a
    separate control row. ``grouped`` averages within covariate groups
    instead of cohorts and requires adoption to be constant within a group.
    """

    mode: str = "none"
    never_treated_split: bool = False

    def __post_init__(self):
        if self.mode not in ("none", "hybrid", "grouped"):
            raise InvalidConfig(f"unknown covariate mode {self.mode!r}")


@dataclass(frozen=True)
class ValidatedPanel:
    """Balanced unit-level panel.

    Attributes
    ----------
    unit_ids : np.ndarray
        Unit identifiers, sorted.
    Y : np.ndarray
        Outcomes, shape ``(n, T)``.
    adoption : np.ndarray
        Adoption period per unit, ``NEVER`` for never treated.
    weight : np.ndarray
        Nonnegative aggregation weights.
    group : np.ndarray or None
        Discrete covariate label per unit.
    """

    unit_ids: np.ndarray
    Y: np.ndarray
    adoption: np.ndarray
    weight: np.ndarray
    group: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def cohorts(self) -> list:
        return sorted(int(a) for a in np.unique(self.adoption))

    @property
    def cohort_counts(self) -> dict:
        vals, counts = np.unique(self.adoption, return_counts=True)
        return {int(a): int(c) for a, c in zip(vals, counts)}

    def treated_mask(self) -> np.ndarray:
        periods = np.arange(1, self.T + 1)
        return periods[None, :] >= self.adoption[:, None]

    @classmethod
    def from_arrays(cls, Y, adoption, weight=None, group=None, unit_ids=None):
        Y = np.array(Y, dtype=float)
        if Y.ndim != 2 or Y.size == 0:
            raise EmptyPanel("outcome matrix must be a nonempty (n, T) array")
        n, T = Y.shape
        if not np.all(np.isfinite(Y)):
            raise UnbalancedPanel("outcome matrix has missing or non-finite cells")
        adoption = np.array([parse_adoption(a) for a in np.asarray(adoption, dtype=object).ravel()],
                            dtype=np.int64)
        if adoption.shape[0] != n:
            raise ValueError("adoption must have one entry per unit")
        finite = adoption != NEVER
        if np.any(adoption[finite] < 1) or np.any(adoption[finite] > T):
            raise InvalidAdoption(f"adoption times must lie in 1..{T} or be never-treated")
        weight = np.ones(n) if weight is None else np.array(weight, dtype=float).ravel()
        if weight.shape[0] != n or np.any(~np.isfinite(weight)) or np.any(weight < 0):
            raise ValueError("weights must be finite, nonnegative, one per unit")
        if group is not None:
            group = np.asarray(group, dtype=object).ravel()
            if group.shape[0] != n:
                raise ValueError("group must have one entry per unit")
        if unit_ids is None:
            unit_ids = np.arange(1, n + 1)
        unit_ids = np.asarray(unit_ids)
        return cls(unit_ids=unit_ids, Y=Y, adoption=adoption, weight=weight, group=group)


def _records_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        df = records.copy()
        if "weight" not in df.columns and "agg_weight" in df.columns:
            df = df.rename(columns={"agg_weight": "weight"})
        if "unit" not in df.columns and "unit_id" in df.columns:
            df = df.rename(columns={"unit_id": "unit"})
        return df
    rows = [
        (r.unit_id, r.period, r.outcome, r.adoption, r.agg_weight, r.group) for r in records
    ]
    return pd.DataFrame(rows, columns=list(CSV_COLUMNS))


def validate(records: Union[Iterable[PanelRecord], pd.DataFrame]) -> ValidatedPanel:
    """Validate long-format records and pivot them into a balanced panel.

    Raises
    ------
    EmptyPanel, DuplicateCell, UnbalancedPanel, InconsistentAdoption
    """
    df = _records_frame(records)
    if df.empty:
        raise EmptyPanel("no records")
    for col in ("unit", "period", "outcome"):
        if col not in df.columns:
            raise ValueError(f"missing column {col!r}")
    if "adoption" not in df.columns:
        df["adoption"] = None
    if "weight" not in df.columns:
        df["weight"] = 1.0
    df["weight"] = pd.to_numeric(df["weight"]).fillna(1.0)
    has_group = "group" in df.columns and df["group"].notna().any()

    period = pd.to_numeric(df["period"])
    if np.any(period != np.round(period)) or np.any(period < 1):
        raise UnbalancedPanel("periods must be positive integers")
    df["period"] = period.astype(np.int64)
    df["adoption"] = [parse_adoption(a) for a in df["adoption"].tolist()]

    dup = df.duplicated(subset=["unit", "period"], keep=False)
    if dup.any():
        first = df.loc[dup, ["unit", "period"]].iloc[0]
        raise DuplicateCell(
            f"unit {first['unit']!r} has several records for period {first['period']}",
            unit=str(first["unit"]), period=int(first["period"]),
        )
    per_unit = df.groupby("unit", sort=True)
    n_adopt = per_unit["adoption"].nunique()
    if (n_adopt > 1).any():
        bad = n_adopt[n_adopt > 1].index[0]
        raise InconsistentAdoption(f"unit {bad!r} has more than one adoption value", unit=str(bad))
    if (per_unit["weight"].nunique() > 1).any():
        raise InconsistentUnitAttribute("aggregation weight varies within a unit")
    if has_group and (per_unit["group"].nunique(dropna=False) > 1).any():
        raise InconsistentUnitAttribute("group label varies within a unit")

    T = int(df["period"].max())
    counts = per_unit["period"].count()
    if (counts != T).any():
        bad = counts[counts != T].index[0]
        raise UnbalancedPanel(
            f"unit {bad!r} has {int(counts[bad])} of {T} periods", unit=str(bad)
        )
    wide = df.pivot(index="unit", columns="period", values="outcome").sort_index()
    wide = wide.reindex(columns=range(1, T + 1))
    if wide.isna().to_numpy().any():
        raise UnbalancedPanel("panel has missing unit-period cells")
    first = per_unit.first().loc[wide.index]
    group = first["group"].to_numpy(dtype=object) if has_group else None
    return ValidatedPanel.from_arrays(
        wide.to_numpy(dtype=float),
        first["adoption"].to_numpy(),
        weight=first["weight"].to_numpy(dtype=float),
        group=group,
        unit_ids=wide.index.to_numpy(),
    )


@dataclass(frozen=True)
class CohortPanel:
    """Aggregated row-level panel.

    Rows are adoption cohorts, covariate-split never-treated series, or
    covariate groups, depending on the aggregation scheme. Rows are ordered
    by adoption time (never-treated last) and then by label.
    """

    labels: tuple
    adoption: np.ndarray
    Y: np.ndarray
    pi: np.ndarray
    n_units: int
    n_by_row: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != len(self.labels):
            raise ValueError("Y must have one row per label")
        if not np.all(np.isfinite(Y)):
            raise UnbalancedPanel("aggregated panel has missing cells")
        if abs(float(np.sum(self.pi)) - 1.0) > 1e-12:
            raise ValueError("row shares must sum to one")

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def cohorts(self) -> list:
        return sorted(int(a) for a in np.unique(self.adoption))

    @property
    def series_labels(self) -> tuple:
        return self.labels

    def with_Y(self, Y) -> "CohortPanel":
        return replace(self, Y=np.array(Y, dtype=float))

    def with_pi(self, pi) -> "CohortPanel":
        pi = np.asarray(pi, dtype=float)
        return replace(self, pi=pi / pi.sum())

    def row(self, label) -> int:
        return self.labels.index(label)

    @classmethod
    def from_matrix(cls, Y, adoption, pi=None, labels=None, n_units=None, n_by_row=None):
        """Build a panel directly from row series (rows = cohorts or units)."""
        Y = np.array(Y, dtype=float)
        R = Y.shape[0]
        adoption = np.array([parse_adoption(a) for a in np.asarray(adoption, dtype=object)],
                            dtype=np.int64)
        pi = np.full(R, 1.0 / R) if pi is None else np.asarray(pi, dtype=float)
        if np.any(pi < 0) or pi.sum() <= 0:
            raise ValueError("row shares must be nonnegative with positive total")
        pi = pi / pi.sum()
        if labels is None:
            if len(np.unique(adoption)) == R:
                labels = tuple(format_adoption(a) for a in adoption)
            else:
                labels = tuple(f"r{i}" for i in range(R))
        order = np.lexsort((np.array(labels, dtype=object).astype(str), adoption))
        n_by_row = np.ones(R, dtype=np.int64) if n_by_row is None else np.asarray(n_by_row)
        return cls(
            labels=tuple(labels[i] for i in order),
            adoption=adoption[order],
            Y=Y[order],
            pi=pi[order],
            n_units=int(n_units if n_units is not None else n_by_row.sum()),
            n_by_row=n_by_row[order],
        )


@dataclass(frozen=True)
class RowLayout:
    """Unit-to-row membership for one aggregation scheme.

    Precomputing the membership lets bootstrap replicates re-aggregate with
    new unit weights without repeating the grouping logic.
    """

    labels: tuple
    adoption: np.ndarray
    row_of_unit: np.ndarray
    membership: Any  # sparse (rows x units) indicator

    @property
    def n_rows(self) -> int:
        return len(self.labels)


def row_layout(panel: ValidatedPanel, scheme: Optional[CovariateScheme] = None) -> RowLayout:
    scheme = scheme or CovariateScheme()
    n = panel.n
    if scheme.mode == "grouped" or scheme.never_treated_split:
        if panel.group is None:
            raise InvalidConfig(f"covariate mode {scheme.mode!r} needs a group column")
    keys = []
    if scheme.mode == "grouped":
        frame = pd.DataFrame({"g": panel.group.astype(str), "a": panel.adoption})
        spread = frame.groupby("g")["a"].nunique()
        if (spread > 1).any():
            bad = spread[spread > 1].index[0]
            raise GroupAdoptionMismatch(
                f"adoption varies within group {bad!r}", group=str(bad)
            )
        keys = [(int(a), str(g)) for a, g in zip(panel.adoption, panel.group)]
    else:
        split = scheme.mode == "hybrid" and scheme.never_treated_split
        for i in range(n):
            a = int(panel.adoption[i])
            if a == NEVER and split:
                keys.append((a, f"inf:{panel.group[i]}"))
            else:
                keys.append((a, format_adoption(a)))
    uniq = sorted(set(keys))
    index = {k: j for j, k in enumerate(uniq)}
    row_of_unit = np.array([index[k] for k in keys], dtype=np.int64)
    membership = scipy.sparse.csr_matrix(
        (np.ones(n), (row_of_unit, np.arange(n))), shape=(len(uniq), n)
    )
    return RowLayout(
        labels=tuple(k[1] for k in uniq),
        adoption=np.array([k[0] for k in uniq], dtype=np.int64),
        row_of_unit=row_of_unit,
        membership=membership,
    )


def aggregate_with_layout(panel: ValidatedPanel, layout: RowLayout, unit_weights=None) -> CohortPanel:
    """Weighted row means and weight shares under a fixed layout.

    ``unit_weights`` multiplies the panel's aggregation weights (the
    bootstrap passes its exponential draws here).
    """
    w = panel.weight if unit_weights is None else panel.weight * np.asarray(unit_weights, float)
    tot = layout.membership @ w
    if np.any(tot <= 0):
        bad = layout.labels[int(np.argmin(tot))]
        raise ValueError(f"row {bad!r} has zero total weight")
    sums = layout.membership @ (w[:, None] * panel.Y)
    Y = sums / tot[:, None]
    counts = np.bincount(layout.row_of_unit, minlength=layout.n_rows)
    return CohortPanel(
        labels=layout.labels,
        adoption=layout.adoption.copy(),
        Y=Y,
        pi=tot / tot.sum(),
        n_units=panel.n,
        n_by_row=counts,
    )


def aggregate(panel: ValidatedPanel, scheme: Optional[CovariateScheme] = None) -> CohortPanel:
    """Aggregate a validated panel into row-level series.

    Raises
    ------
    GroupAdoptionMismatch
        In grouped mode when adoption varies within a group.
    """
    return aggregate_with_layout(panel, row_layout(panel, scheme))


def shift_adoption(panel: ValidatedPanel, P: int) -> ValidatedPanel:
    """Backdate every finite adoption time by ``P`` periods.

    Raises
    ------
    ShiftOutOfRange
        If any treated unit would be left without a pre-period.
    """
    if isinstance(P, bool) or int(P) != P or P < 1:
        raise InvalidConfig(f"placebo shift must be a positive integer, got {P!r}")
    P = int(P)
    finite = panel.adoption != NEVER
    shifted = panel.adoption.copy()
    shifted[finite] -= P
    if np.any(shifted[finite] < 2):
        raise ShiftOutOfRange(
            f"shifting by {P} leaves a treated unit with no pre-period "
            f"(earliest adoption {int(panel.adoption[finite].min())})",
            P=P,
        )
    return replace(panel, adoption=shifted)


def read_panel_csv(path) -> ValidatedPanel:
    df = pd.read_csv(path, dtype={"adoption": str, "group": str}, keep_default_na=False,
                     na_values={"outcome": [""], "weight": [""]}, float_precision="round_trip")
    if "group" in df.columns:
        df["group"] = df["group"].replace("", np.nan)
    return validate(df)


def panel_to_frame(panel: ValidatedPanel) -> pd.DataFrame:
    n, T = panel.Y.shape
    df = pd.DataFrame({
        "unit": np.repeat(panel.unit_ids, T),
        "period": np.tile(np.arange(1, T + 1), n),
        "outcome": panel.Y.ravel(),
        "adoption": np.repeat([format_adoption(a) for a in panel.adoption], T),
        "weight": np.repeat(panel.weight, T),
    })
    if panel.group is not None:
        df["group"] = np.repeat(panel.group, T)
    return df
