"""Simulated staggered-adoption panels with interactive fixed effects.

Units belong to groups (think states); unit effects, loadings and adoption
dates are drawn per group, and every unit carries its own idiosyncratic
noise. The fixed structure (effects, loadings, factors) comes from
``structure_seed`` while noise and adoption come from ``seed``, so a Monte
Carlo run can hold the structure fixed and redraw only the randomness.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd

from .errors import InfeasibleSpec
from .inference import bootstrap
from .io import atomic_write_csv
from .oracle import FactorStructure, run_sequential_ols, tightest_bounds, write_factors_csv
from .panel import NEVER, CovariateScheme, ValidatedPanel, aggregate, panel_to_frame, row_layout
from .ssdid import default_mu


@dataclass(frozen=True)
class IidNoise:
    sd: float = 1.0

    @property
    def variance(self) -> float:
        return self.sd**2

    def draw(self, rng, n, T):
        return rng.normal(scale=self.sd, size=(n, T))


@dataclass(frozen=True)
class Ar2Noise:
    """``e_t = rho1 e_{t-1} + rho2 e_{t-2} + u_t``, started from stationarity."""

    rho1: float = 0.5
    rho2: float = 0.2
    innovation_sd: float = 1.0

    def __post_init__(self):
        # stationarity triangle for AR(2)
        r1, r2 = self.rho1, self.rho2
        if not (abs(r2) < 1 and r2 + r1 < 1 and r2 - r1 < 1):
            raise InfeasibleSpec(f"AR(2) coefficients ({r1}, {r2}) are not stationary")

    @property
    def variance(self) -> float:
        r1, r2 = self.rho1, self.rho2
        return self.innovation_sd**2 * (1 - r2) / ((1 + r2) * ((1 - r2) ** 2 - r1**2))

    def draw(self, rng, n, T, burn=50):
        u = rng.normal(scale=self.innovation_sd, size=(n, T + burn))
        e = np.zeros_like(u)
        for t in range(T + burn):
            e[:, t] = u[:, t]
            if t >= 1:
                e[:, t] += self.rho1 * e[:, t - 1]
            if t >= 2:
                e[:, t] += self.rho2 * e[:, t - 2]
        return e[:, burn:]


@dataclass(frozen=True)
class Independent:
    """Adoption independent of the loadings: uniform over ``[start, end]``."""

    start: Optional[int] = None
    end: Optional[int] = None
    never_share: float = 0.25


@dataclass(frozen=True)
class Confounded:
    """Adoption driven by each group's first loading.

    The ever-treated probability is logistic in the standardised first
    loading ``z`` (intercept set so that ``never_share`` of groups stay
    untreated at ``z = 0``); the date is a rounded normal draw with mean
    ``date_mean + slope * z``, clamped to ``[adopt_start, adopt_end]``.
    """

    adopt_start: int = 20
    adopt_end: Optional[int] = None
    never_share: float = 0.2
    slope: float = 3.0
    link: float = 1.0
    date_mean: Optional[float] = None
    date_sd: float = 3.0


@dataclass(frozen=True)
class DgpSpec:
    n_units: int = 2500
    T: int = 40
    r: int = 4
    signal: float = 0.8
    tau_truth: Union[float, dict, Callable] = 1.0
    noise: Union[IidNoise, Ar2Noise] = IidNoise()
    assignment: Union[Independent, Confounded] = Independent()
    seed: int = 0
    n_groups: Optional[int] = 50
    structure_seed: Optional[int] = None
    unit_effect_sd: float = 1.0
    period_effect_sd: float = 1.0
    loading_dev_sd: float = 0.0

    def __post_init__(self):
        if not 0 <= self.signal <= 0.8:
            raise InfeasibleSpec("signal must lie in [0, 0.8]")
        if self.n_units < 1 or self.T < 2 or self.r < 0:
            raise InfeasibleSpec("need n_units >= 1, T >= 2, r >= 0")
        if self.n_groups is not None and not 1 <= self.n_groups <= self.n_units:
            raise InfeasibleSpec("n_groups must lie in [1, n_units]")

    def tau(self, a: int, k: int) -> float:
        tt = self.tau_truth
        if callable(tt):
            return float(tt(a, k))
        if isinstance(tt, dict):
            return float(tt.get((a, k), 0.0))
        return float(tt)

    def window(self):
        asg = self.assignment
        if isinstance(asg, Confounded):
            lo, hi = asg.adopt_start, asg.adopt_end if asg.adopt_end is not None else self.T
        else:
            lo = asg.start if asg.start is not None else min(self.r + 3, self.T)
            hi = asg.end if asg.end is not None else self.T
        if not 2 <= lo <= hi <= self.T:
            raise InfeasibleSpec(f"adoption window [{lo}, {hi}] does not fit in 2..{self.T}")
        return lo, hi


@dataclass
class SimulatedPanel:
    panel: ValidatedPanel
    spec: DgpSpec
    components: dict
    group_of_unit: np.ndarray

    def factors(self, scheme: Optional[CovariateScheme] = None) -> FactorStructure:
        """True loadings averaged over each aggregate row, with the factors."""
        layout = row_layout(self.panel, scheme)
        w = self.panel.weight
        tot = layout.membership @ w
        theta = (layout.membership @ (w[:, None] * self.components["theta"])) / tot[:, None]
        return FactorStructure(theta, self.components["psi"], layout.labels)

    def truths_frame(self, K: Optional[int] = None) -> pd.DataFrame:
        T = self.spec.T
        recs = []
        for a in sorted({int(x) for x in self.panel.adoption if x != NEVER}):
            kmax = T - a if K is None else min(K, T - a)
            recs += [(a, k, self.spec.tau(a, k)) for k in range(kmax + 1)]
        return pd.DataFrame(recs, columns=["a", "k", "tau"])

    def to_frame(self) -> pd.DataFrame:
        return panel_to_frame(self.panel)


def _structure(spec: DgpSpec, n_groups: int):
    """Fixed components: effects, group loadings and factors (unscaled)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed if spec.structure_seed is None else spec.structure_seed, 1])
    )
    T, r = spec.T, spec.r
    alpha_g = rng.normal(scale=spec.unit_effect_sd, size=n_groups)
    beta = np.cumsum(rng.normal(scale=spec.period_effect_sd, size=T))
    theta_g = rng.normal(size=(n_groups, r))
    psi = np.zeros((T, r))
    if r:
        t = np.arange(T, dtype=float)
        psi[:, 0] = (t - t.mean()) / max(t.std(), 1e-12)
        for q in range(1, r):
            x = np.zeros(T)
            x[0] = rng.normal()
            for s in range(1, T):
                x[s] = 0.8 * x[s - 1] + rng.normal()
            psi[:, q] = (x - x.mean()) / max(x.std(), 1e-12)
    return alpha_g, beta, theta_g, psi


def _assign(spec: DgpSpec, rng, z):
    """Group-level adoption times given standardised first loadings ``z``."""
    G = z.size
    lo, hi = spec.window()
    asg = spec.assignment
    if isinstance(asg, Confounded):
        share = min(max(1.0 - asg.never_share, 1e-6), 1 - 1e-6)
        p = 1.0 / (1.0 + np.exp(-(math.log(share / (1 - share)) + asg.link * z)))
        ever = rng.random(G) < p
        centre = (lo + hi) / 2 if asg.date_mean is None else asg.date_mean
        dates = np.rint(rng.normal(centre + asg.slope * z, asg.date_sd))
        dates = np.clip(dates, lo, hi).astype(np.int64)
    else:
        p = np.full(G, 1.0 - asg.never_share)
        ever = rng.random(G) < p
        dates = rng.integers(lo, hi + 1, size=G)
    if ever.all() and G > 1:
        ever[int(np.argmin(p))] = False
    return np.where(ever, dates, NEVER).astype(np.int64)


def simulate(spec: DgpSpec) -> SimulatedPanel:
    """Draw one panel.

    The interactive component is rescaled so its variance is
    ``signal / (1 - signal)`` times the stationary noise variance.
    """
    spec.window()
    n, T, r = spec.n_units, spec.T, spec.r
    G = n if spec.n_groups is None else spec.n_groups
    alpha_g, beta, theta_g, psi = _structure(spec, G)
    group = np.arange(n) % G

    ss = np.random.SeedSequence([spec.seed, 2])
    rng_assign, rng_unit, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))

    if r:
        z = theta_g[:, 0]
        z = (z - z.mean()) / z.std() if G > 1 and z.std() > 0 else np.zeros(G)
    else:
        z = np.zeros(G)
    adoption_g = _assign(spec, rng_assign, z)

    alpha = alpha_g[group] + rng_unit.normal(scale=spec.unit_effect_sd, size=n)
    theta = theta_g[group]
    if spec.loading_dev_sd > 0 and r:
        theta = theta + rng_unit.normal(scale=spec.loading_dev_sd, size=(n, r))
    ife = theta @ psi.T
    noise_var = spec.noise.variance
    if r and spec.signal > 0 and ife.var() > 0:
        scale = math.sqrt(spec.signal / (1 - spec.signal) * noise_var / ife.var())
    else:
        scale = 0.0
    theta = theta * scale
    ife = ife * scale

    adoption = adoption_g[group]
    periods = np.arange(1, T + 1)
    effects = np.zeros((n, T))
    for a in np.unique(adoption[adoption != NEVER]):
        vals = np.array([spec.tau(int(a), int(t - a)) for t in periods[a - 1:]])
        effects[np.ix_(adoption == a, periods[a - 1:] - 1)] = vals
    noise = spec.noise.draw(rng_noise, n, T)
    Y = alpha[:, None] + beta[None, :] + ife + effects + noise

    panel = ValidatedPanel.from_arrays(
        Y, adoption, group=np.array([f"g{g:04d}" for g in group], dtype=object),
        unit_ids=np.arange(1, n + 1),
    )
    return SimulatedPanel(
        panel=panel,
        spec=spec,
        components={"alpha": alpha, "beta": beta, "theta": theta, "psi": psi,
                    "ife": ife, "effects": effects, "noise": noise, "ife_scale": scale},
        group_of_unit=group,
    )


def parse_design_spec(text: str) -> DgpSpec:
    """Flat ``key = value`` text to a :class:`DgpSpec`.

    Recognised keys: ``n_units, T, r, signal, tau, seed, structure_seed,
    n_groups`` (``none`` for one group per unit), ``unit_effect_sd,
    period_effect_sd, loading_dev_sd``; ``noise = iid | ar2`` with ``noise_sd``
    or ``rho1, rho2, innovation_sd``; ``assignment = independent |
    confounded`` with ``start, end, never_share`` or ``adopt_start,
    adopt_end, never_share, slope, link, date_mean, date_sd``.
    """
    kv = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InfeasibleSpec(f"design-spec line is not key = value: {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v

    def num(key, cast=float, default=None):
        if key not in kv:
            return default
        v = kv.pop(key)
        if v.lower() in ("none", ""):
            return None
        return cast(float(v)) if cast is int else cast(v)

    noise_kind = kv.pop("noise", "iid").lower()
    if noise_kind == "iid":
        noise = IidNoise(sd=num("noise_sd", default=1.0))
    elif noise_kind == "ar2":
        noise = Ar2Noise(rho1=num("rho1", default=0.5), rho2=num("rho2", default=0.2),
                         innovation_sd=num("innovation_sd", default=1.0))
    else:
        raise InfeasibleSpec(f"unknown noise {noise_kind!r}")
    asg_kind = kv.pop("assignment", "independent").lower()
    if asg_kind == "independent":
        asg = Independent(start=num("start", int), end=num("end", int),
                          never_share=num("never_share", default=0.25))
    elif asg_kind == "confounded":
        asg = Confounded(adopt_start=num("adopt_start", int, 20), adopt_end=num("adopt_end", int),
                         never_share=num("never_share", default=0.2), slope=num("slope", default=3.0),
                         link=num("link", default=1.0), date_mean=num("date_mean"),
                         date_sd=num("date_sd", default=3.0))
    else:
        raise InfeasibleSpec(f"unknown assignment {asg_kind!r}")
    spec = DgpSpec(
        n_units=num("n_units", int, 2500), T=num("T", int, 40), r=num("r", int, 4),
        signal=num("signal", default=0.8), tau_truth=num("tau", default=1.0),
        noise=noise, assignment=asg, seed=num("seed", int, 0),
        n_groups=num("n_groups", int, 50) if "n_groups" in kv else 50,
        structure_seed=num("structure_seed", int),
        unit_effect_sd=num("unit_effect_sd", default=1.0),
        period_effect_sd=num("period_effect_sd", default=1.0),
        loading_dev_sd=num("loading_dev_sd", default=0.0),
    )
    kv.pop("aggregation", None)
    if kv:
        raise InfeasibleSpec(f"unknown design-spec keys: {sorted(kv)}")
    return spec


def format_design_spec(spec: DgpSpec) -> str:
    """Inverse of :func:`parse_design_spec` for constant-effect specs."""
    lines = [f"n_units = {spec.n_units}", f"T = {spec.T}", f"r = {spec.r}",
             f"signal = {spec.signal!r}", f"tau = {spec.tau(0, 0)!r}", f"seed = {spec.seed}",
             f"n_groups = {spec.n_groups}", f"structure_seed = {spec.structure_seed}",
             f"unit_effect_sd = {spec.unit_effect_sd!r}",
             f"period_effect_sd = {spec.period_effect_sd!r}",
             f"loading_dev_sd = {spec.loading_dev_sd!r}"]
    if isinstance(spec.noise, IidNoise):
        lines += ["noise = iid", f"noise_sd = {spec.noise.sd!r}"]
    else:
        lines += ["noise = ar2", f"rho1 = {spec.noise.rho1!r}", f"rho2 = {spec.noise.rho2!r}",
                  f"innovation_sd = {spec.noise.innovation_sd!r}"]
    asg = spec.assignment
    if isinstance(asg, Independent):
        lines += ["assignment = independent", f"start = {asg.start}", f"end = {asg.end}",
                  f"never_share = {asg.never_share!r}"]
    else:
        lines += ["assignment = confounded", f"adopt_start = {asg.adopt_start}",
                  f"adopt_end = {asg.adopt_end}", f"never_share = {asg.never_share!r}",
                  f"slope = {asg.slope!r}", f"link = {asg.link!r}",
                  f"date_mean = {asg.date_mean}", f"date_sd = {asg.date_sd!r}"]
    return "\n".join(lines) + "\n"


@dataclass
class MonteCarloResult:
    """Per-replication records and the summary tables built from them.

    ``records`` has one row per (rep, estimator, horizon) with columns
    ``rep, estimator, k, estimate, truth, se, covered, t``. ``se``,
    ``covered`` and ``t`` are NaN for estimators run without a bootstrap.
    """

    records: pd.DataFrame
    reps: int

    def _pivot(self, values):
        return values.unstack("k").sort_index()

    @property
    def rmse(self) -> pd.DataFrame:
        err2 = (self.records["estimate"] - self.records["truth"]) ** 2
        return self._pivot(err2.groupby([self.records["estimator"], self.records["k"]]).mean() ** 0.5)

    @property
    def bias(self) -> pd.DataFrame:
        err = self.records["estimate"] - self.records["truth"]
        return self._pivot(err.groupby([self.records["estimator"], self.records["k"]]).mean())

    @property
    def coverage(self) -> pd.DataFrame:
        rec = self.records.dropna(subset=["covered"])
        return self._pivot(rec.groupby(["estimator", "k"])["covered"].mean())

    @property
    def tstats(self) -> pd.DataFrame:
        return self.records.dropna(subset=["t"])[["rep", "estimator", "k", "t"]].reset_index(drop=True)

    def t_summary(self) -> pd.DataFrame:
        return self.tstats.groupby(["estimator", "k"])["t"].agg(["mean", "std"])

    def write(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        for name, df in (("rmse", self.rmse), ("coverage", self.coverage)):
            long = df.stack().rename(name).reset_index()
            atomic_write_csv(long, os.path.join(outdir, f"{name}.csv"))
        atomic_write_csv(self.tstats, os.path.join(outdir, "tstats.csv"))


def rep_seed(seed: int, rep: int) -> int:
    """Independent 63-bit seed for replication ``rep``."""
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _horizon_truth(spec: DgpSpec, grid) -> np.ndarray:
    mu = grid.mu if grid.mu is not None else default_mu(grid)
    return np.array([sum(w * spec.tau(a, k) for a, w in mu.items()) for k in range(grid.K + 1)])


def monte_carlo(
    spec: DgpSpec,
    reps: int,
    estimator_cfgs: dict,
    bcfg,
    scheme: Optional[CovariateScheme] = None,
    oracle: bool = False,
    n_jobs: int = 1,
) -> MonteCarloResult:
    """Repeated simulate / estimate / bootstrap with the structure held fixed.

    ``estimator_cfgs`` maps a name to an :class:`~seqsdid.ssdid.SsdidConfig`.
    The structure seed defaults to ``spec.seed`` and stays fixed across
    replications; noise and adoption are redrawn with per-replication seeds.
    With ``oracle`` the Sequential OLS estimator with the true (row-averaged)
    factors is added as ``"SEQ_OLS"``, point estimates only.
    """
    if int(reps) != reps or reps < 2:
        raise InfeasibleSpec("monte_carlo needs reps >= 2")
    base = replace(spec, structure_seed=spec.seed if spec.structure_seed is None else spec.structure_seed)

    def one(rep):
        s = rep_seed(spec.seed, rep)
        sim = simulate(replace(base, seed=s))
        rows = []
        for name, cfg in estimator_cfgs.items():
            res = bootstrap(sim.panel, cfg, replace(bcfg, seed=s), scheme=scheme)
            truth = _horizon_truth(spec, res.point)
            lo, hi = res.ci_horizon
            for k in range(truth.size):
                est, se = res.point.tau_by_horizon[k], res.se_horizon[k]
                rows.append((rep, name, k, est, truth[k], se, float(lo[k] <= truth[k] <= hi[k]),
                             (est - truth[k]) / se if se > 0 else np.nan))
        if oracle:
            cp = aggregate(sim.panel, scheme)
            f = sim.factors(scheme)
            ocfg = tightest_bounds(f, cp)
            grid = None if ocfg is None else run_sequential_ols(cp, f, ocfg, keep_cells=False)
            if grid is not None and grid.tau_by_horizon is not None:
                truth = _horizon_truth(spec, grid)
                for k in range(truth.size):
                    if np.isfinite(grid.tau_by_horizon[k]):
                        rows.append((rep, "SEQ_OLS", k, grid.tau_by_horizon[k], truth[k],
                                     np.nan, np.nan, np.nan))
        return rows

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(one, range(int(reps))))
    else:
        parts = [one(r) for r in range(int(reps))]
    records = pd.DataFrame([r for p in parts for r in p],
                           columns=["rep", "estimator", "k", "estimate", "truth", "se", "covered", "t"])
    return MonteCarloResult(records=records, reps=int(reps))


def write_simulation(sim: SimulatedPanel, outdir, K: Optional[int] = None,
                     scheme: Optional[CovariateScheme] = None) -> None:
    """Write ``panel.csv``, ``truths.csv`` and ``factors.csv`` into ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    atomic_write_csv(sim.to_frame(), os.path.join(outdir, "panel.csv"))
    atomic_write_csv(sim.truths_frame(K), os.path.join(outdir, "truths.csv"))
    write_factors_csv(sim.factors(scheme), os.path.join(outdir, "factors.csv"))
