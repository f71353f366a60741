"""Gap tables, BA-CA fits, significance tests, mortality regression and survival analysis."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .analysis import UndefinedStatisticError, pearson
from .cohort import (
    HEALTHY,
    ILLNESS,
    NORMAL,
    OVERALL_AVERAGE,
    OVERALL_HEALTHY,
    OVERALL_UNHEALTHY,
    PRE,
    WITH_DISEASE,
    population_admits,
)
from .schema import DISEASES, TRISTATE_DISEASES

log = logging.getLogger(__name__)

GROUPINGS = ("overall",) + DISEASES
MORTALITY_MODES = ("ca_only", "ba_univariate", "ca_plus_gap")
STRATA = ("healthy", "average", "unhealthy")


def group_states(group: str) -> tuple[str, ...]:
    """Morbidity states of a grouping, ordered from healthiest to sickest."""
    if group == "overall":
        return (OVERALL_HEALTHY, OVERALL_AVERAGE, OVERALL_UNHEALTHY)
    if group in TRISTATE_DISEASES:
        return (NORMAL, PRE, ILLNESS)
    if group in DISEASES:
        return (HEALTHY, WITH_DISEASE)
    raise ValueError(f"unknown grouping {group!r}")


# --------------------------------------------------------------------------
# gap tables


def ordering_flag(means) -> bool:
    """Means strictly increase from healthiest to sickest state; absent cells fail."""
    m = np.asarray(means, dtype=float)
    return bool(np.isfinite(m).all() and np.all(np.diff(m) > 0))


def bold_flag(means) -> bool:
    """Healthiest mean below 0, sickest above 0 and, for three states, |middle| < 1."""
    m = np.asarray(means, dtype=float)
    if not np.isfinite(m).all():
        return False
    ok = m[0] < 0 and m[-1] > 0
    if len(m) == 3:
        ok = ok and abs(m[1]) < 1
    return bool(ok)


@dataclass
class GapTable:
    """Mean gap per morbidity state.

    ``cells`` is long format with columns ``population, model, feature_set,
    group, state, mean, n, ood``; absent states have ``n == 0`` and NaN mean.
    """

    cells: pd.DataFrame

    KEYS = ["population", "model", "feature_set", "group"]

    def flags(self) -> pd.DataFrame:
        rows = []
        for key, part in self.cells.groupby(self.KEYS, sort=False):
            order = {s: i for i, s in enumerate(group_states(key[-1]))}
            means = part.assign(o=part["state"].map(order)).sort_values("o")["mean"].to_numpy()
            rows.append(dict(zip(self.KEYS, key), ordering=ordering_flag(means), bold=bold_flag(means)))
        return pd.DataFrame(rows, columns=self.KEYS + ["ordering", "bold"])

    def mean(self, group: str, state: str, **key) -> float:
        c = self.cells
        sel = (c["group"] == group) & (c["state"] == state)
        for k, v in key.items():
            sel &= c[k] == v
        vals = c.loc[sel, "mean"]
        if len(vals) != 1:
            raise KeyError(f"{len(vals)} cells match {group}/{state} {key}")
        return float(vals.iloc[0])

    def wide(self) -> pd.DataFrame:
        """One row per grouping with ``<state>``, ``<state>_n`` and ``<state>_ood`` columns."""
        out = []
        flags = self.flags().set_index(self.KEYS)
        for key, part in self.cells.groupby(self.KEYS, sort=False):
            row = dict(zip(self.KEYS, key))
            for _, c in part.iterrows():
                row[c["state"]] = c["mean"]
                row[f"{c['state']}_n"] = int(c["n"])
                row[f"{c['state']}_ood"] = bool(c["ood"])
            row.update(flags.loc[key].to_dict())
            out.append(row)
        return pd.DataFrame(out)

    def to_csv(self, path) -> None:
        self.cells.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")

    @classmethod
    def from_csv(cls, path) -> "GapTable":
        cells = pd.read_csv(path, keep_default_na=False, na_values=[""])
        for k in ("population", "model", "feature_set"):
            cells[k] = cells[k].astype(str)
        return cls(cells)


def gap_by_morbidity(
    estimates: pd.DataFrame,
    labels: pd.DataFrame,
    population: str = "whole",
    model: str = "",
    feature_set: str = "",
    grouping=GROUPINGS,
    exclude_indeterminate: bool = False,
) -> GapTable:
    """Mean gap for every state of every grouping.

    ``labels`` is row-aligned with ``estimates``. Cells whose state cannot
    occur in the training ``population`` are flagged out-of-distribution.
    """
    if len(estimates) != len(labels):
        raise ValueError("estimates and labels must be aligned")
    gap = estimates["gap"].to_numpy(dtype=float)
    keep = np.ones(len(gap), dtype=bool)
    if exclude_indeterminate and "indeterminate" in labels:
        keep &= ~labels["indeterminate"].to_numpy(dtype=bool)
    rows = []
    for group in grouping:
        states = labels[group].to_numpy()
        for state in group_states(group):
            sel = keep & (states == state)
            n = int(sel.sum())
            rows.append({
                "population": population, "model": model, "feature_set": feature_set, "group": group,
                "state": state, "mean": float(gap[sel].mean()) if n else np.nan, "n": n,
                "ood": not population_admits(population, group, state),
            })
    return GapTable(pd.DataFrame(rows))


def concat_tables(tables) -> GapTable:
    tables = list(tables)
    if not tables:
        return GapTable(pd.DataFrame(columns=GapTable.KEYS + ["state", "mean", "n", "ood"]))
    return GapTable(pd.concat([t.cells for t in tables], ignore_index=True))


# --------------------------------------------------------------------------
# fits and tests


def fit_ba_ca_line(estimates: pd.DataFrame) -> tuple[float, float]:
    """Least-squares ``BA = a * CA + b``."""
    ca = estimates["ca"].to_numpy(dtype=float)
    ba = estimates["ba"].to_numpy(dtype=float)
    if len(ca) < 2 or np.ptp(ca) == 0:
        raise ValueError("need at least two distinct chronological ages")
    dc = ca - ca.mean()
    a = float(np.dot(dc, ba - ba.mean()) / np.dot(dc, dc))
    return a, float(ba.mean() - a * ca.mean())


def welch_ttest(group_a, group_b) -> tuple[float, float]:
    """Unequal-variance two-sample t statistic and two-sided p-value."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        raise UndefinedStatisticError("both groups have zero variance")
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return float(t), float(2 * stats.t.sf(abs(t), df))


def paired_difference_test(original, corrected) -> tuple[float, float, float]:
    """Mean of ``original - corrected``, paired t statistic and one-sided p for a positive mean."""
    d = np.asarray(original, dtype=float) - np.asarray(corrected, dtype=float)
    if len(d) < 2:
        raise ValueError("need at least two pairs")
    sd = d.std(ddof=1)
    if sd == 0:
        t = 0.0 if d.mean() == 0 else math.copysign(math.inf, d.mean())
    else:
        t = d.mean() / (sd / math.sqrt(len(d)))
    return float(d.mean()), float(t), float(stats.t.sf(t, len(d) - 1))


@dataclass
class MortalityRow:
    population: str
    feature_set: str
    model: str
    mode: str
    slope: float
    r2: float
    pcc: float
    p_value: float
    n: int
    coefficients: tuple = field(default=(), repr=False)


def _ols(X: np.ndarray, y: np.ndarray):
    """Coefficients, R^2 and coefficient standard errors of ``y ~ 1 + X``."""
    A = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    sse = float(resid @ resid)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - sse / sst if sst > 0 else np.nan
    dof = len(y) - A.shape[1]
    if dof > 0:
        cov = sse / dof * np.linalg.inv(A.T @ A)
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
    else:
        se = np.full(len(coef), np.nan)
    return coef, r2, se, dof


def mortality_regression(
    estimates: pd.DataFrame,
    days_to_death,
    mode: str,
    population: str = "",
    feature_set: str = "",
    model: str = "",
    on_degenerate: str = "raise",
) -> MortalityRow:
    """Linear regression of days to death among deceased subjects.

    ``days_to_death`` is row-aligned with ``estimates`` and NaN for
    survivors. ``slope`` is the coefficient of CA (``ca_only``), BA
    (``ba_univariate``) or gap (``ca_plus_gap``); ``pcc`` correlates that
    same predictor with days to death. A constant gap in ``ca_plus_gap``
    raises unless ``on_degenerate="reduce"``, which falls back to the CA
    fit with a zero gap coefficient.
    """
    if mode not in MORTALITY_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    days = np.asarray(days_to_death, dtype=float)
    dead = ~np.isnan(days)
    if dead.sum() < 3:
        raise ValueError("mortality regression needs at least three deceased subjects")
    y = days[dead]
    ca = estimates["ca"].to_numpy(dtype=float)[dead]
    gap = estimates["gap"].to_numpy(dtype=float)[dead]
    ba = estimates["ba"].to_numpy(dtype=float)[dead]
    if mode == "ca_plus_gap":
        X, focus, idx = np.column_stack([ca, gap]), gap, 2
        degenerate = np.ptp(gap) == 0 or (np.ptp(ca) > 0 and abs(np.corrcoef(ca, gap)[0, 1]) > 1 - 1e-12)
        if degenerate:
            if on_degenerate != "reduce" or np.ptp(gap) != 0:
                raise ValueError("CA and gap are collinear; multivariate regression refused")
            coef, r2, _, _ = _ols(ca[:, None], y)
            return MortalityRow(population, feature_set, model, mode, 0.0, float(r2), np.nan, np.nan,
                                int(dead.sum()), (float(coef[0]), float(coef[1]), 0.0))
    elif mode == "ba_univariate":
        X, focus, idx = ba[:, None], ba, 1
    else:
        X, focus, idx = ca[:, None], ca, 1
    if np.ptp(focus) == 0:
        raise ValueError("predictor has zero variance")
    coef, r2, se, dof = _ols(X, y)
    slope = float(coef[idx])
    p = float(2 * stats.t.sf(abs(slope / se[idx]), dof)) if dof > 0 and se[idx] > 0 else np.nan
    if dof > 0 and se[idx] == 0:
        p = 0.0
    try:
        r = pearson(focus, y)
    except UndefinedStatisticError:
        r = np.nan
    return MortalityRow(population, feature_set, model, mode, slope, float(r2), r, p, int(dead.sum()),
                        tuple(float(c) for c in coef))


def mortality_rows_frame(rows) -> pd.DataFrame:
    cols = ["population", "feature_set", "model", "mode", "slope", "r2", "pcc", "p_value", "n"]
    return pd.DataFrame([{c: getattr(r, c) for c in cols} for r in rows], columns=cols)


# --------------------------------------------------------------------------
# survival


@dataclass
class KMCurve:
    """Product-limit survival at the distinct event times."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    n: int

    def at(self, t) -> np.ndarray:
        """S(t), right-continuous; 1 before the first event."""
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.times, t, side="right")
        s = np.concatenate([[1.0], self.survival])
        return s[i]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "time": np.concatenate([[0.0], self.times]),
            "survival": np.concatenate([[1.0], self.survival]),
            "at_risk": np.concatenate([[self.n], self.at_risk]).astype(int),
        })


def _survival_input(times, events) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if t.shape != e.shape:
        raise ValueError("times and events must be aligned")
    if len(t) == 0:
        raise ValueError("empty survival input")
    if not np.all(t > 0):
        raise ValueError("survival times must be positive")
    return t, e


def kaplan_meier(times, events) -> KMCurve:
    t, e = _survival_input(times, events)
    ev_times = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in ev_times], dtype=float)
    deaths = np.array([(e & (t == u)).sum() for u in ev_times], dtype=float)
    surv = np.cumprod(1 - deaths / at_risk) if len(ev_times) else np.empty(0)
    return KMCurve(ev_times, surv, at_risk.astype(int), deaths.astype(int), len(t))


def logrank_test(group_a, group_b) -> tuple[float, float]:
    """Two-group log-rank chi-square (1 df) and p-value.

    Each group is a ``(times, events)`` pair.
    """
    ta, ea = _survival_input(*group_a)
    tb, eb = _survival_input(*group_b)
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(len(ta), bool), np.zeros(len(tb), bool)])
    ev_times = np.unique(t[e])
    if not len(ev_times):
        raise UndefinedStatisticError("log-rank test undefined without events")
    o_minus_e = var = 0.0
    for u in ev_times:
        risk = t >= u
        n = risk.sum()
        na = (risk & in_a).sum()
        d = (e & (t == u)).sum()
        da = (e & (t == u) & in_a).sum()
        o_minus_e += da - d * na / n
        if n > 1:
            var += d * (na / n) * (1 - na / n) * (n - d) / (n - 1)
    if var == 0:
        raise UndefinedStatisticError("log-rank variance is zero")
    chi2 = o_minus_e**2 / var
    return float(chi2), float(stats.chi2.sf(chi2, 1))


def stratify_by_gap(estimates: pd.DataFrame | np.ndarray, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """``healthy`` below ``low``, ``unhealthy`` above ``high``, ``average`` otherwise (bounds included)."""
    gap = estimates["gap"].to_numpy(dtype=float) if isinstance(estimates, pd.DataFrame) else np.asarray(estimates)
    out = np.full(gap.shape, "average", dtype=object)
    out[gap < low] = "healthy"
    out[gap > high] = "unhealthy"
    return out


@dataclass
class SurvivalCurves:
    curves: dict[str, KMCurve]
    counts: dict[str, int]
    chi2: float
    p_value: float
    excess_ratio: float  # (observed / expected deaths) unhealthy over healthy

    def to_frame(self) -> pd.DataFrame:
        parts = [c.to_frame().assign(group=g) for g, c in self.curves.items()]
        return pd.concat(parts, ignore_index=True)[["group", "time", "survival", "at_risk"]]


def _observed_expected(t, e, in_a) -> tuple[float, float]:
    obs = float((e & in_a).sum())
    exp = 0.0
    for u in np.unique(t[e]):
        risk = t >= u
        exp += (e & (t == u)).sum() * (risk & in_a).sum() / risk.sum()
    return obs, exp


def survival_by_gap(estimates: pd.DataFrame, times, events, low: float = -1.0, high: float = 1.0) -> SurvivalCurves:
    """Kaplan-Meier curves per gap stratum and the healthy-vs-unhealthy log-rank test."""
    t, e = _survival_input(times, events)
    strata = stratify_by_gap(estimates, low, high)
    curves = {s: kaplan_meier(t[strata == s], e[strata == s]) for s in STRATA if (strata == s).any()}
    counts = {s: int((strata == s).sum()) for s in STRATA}
    h, u = strata == "healthy", strata == "unhealthy"
    chi2 = p = ratio = np.nan
    if h.any() and u.any():
        try:
            chi2, p = logrank_test((t[h], e[h]), (t[u], e[u]))
            both = h | u
            o_u, e_u = _observed_expected(t[both], e[both], u[both])
            o_h, e_h = _observed_expected(t[both], e[both], h[both])
            ratio = (o_u / e_u) / (o_h / e_h) if e_u > 0 and e_h > 0 and o_h > 0 else np.inf
        except UndefinedStatisticError as exc:
            log.warning("log-rank test skipped: %s", exc)
    return SurvivalCurves(curves, counts, chi2, p, ratio)


def age_binned_gap_curves(estimates: pd.DataFrame, states, bin_width: float = 5,
                          quantiles: tuple[float, float] = (0.25, 0.75)) -> pd.DataFrame:
    """Mean gap and quantile band per (state, CA bin); bins labelled by their lower edge."""
    df = pd.DataFrame({
        "state": np.asarray(states),
        "bin": np.floor(estimates["ca"].to_numpy(dtype=float) / bin_width) * bin_width,
        "gap": estimates["gap"].to_numpy(dtype=float),
    })
    g = df.groupby(["state", "bin"], sort=True)["gap"]
    out = pd.DataFrame({
        "n": g.size(),
        "mean": g.mean(),
        "q_low": g.quantile(quantiles[0]),
        "q_high": g.quantile(quantiles[1]),
    }).reset_index()
    return out


# --------------------------------------------------------------------------
# distribution check


def mmd2_unbiased(x, y, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD of two 1-D samples, Gaussian kernel, median-heuristic bandwidth."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if len(x) < 2 or len(y) < 2:
        raise ValueError("MMD needs at least two samples per side")
    if bandwidth is None:
        pooled = np.concatenate([x, y])
        d2 = (pooled[:, None] - pooled[None, :]) ** 2
        bandwidth = float(np.median(d2[np.triu_indices(len(pooled), 1)]))
    h = max(bandwidth, 1e-12)
    k = lambda a, b: np.exp(-((a[:, None] - b[None, :]) ** 2) / (2 * h))
    kxx, kyy = k(x, x), k(y, y)
    m, n = len(x), len(y)
    return float((kxx.sum() - np.trace(kxx)) / (m * (m - 1)) + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
                 - 2 * k(x, y).mean())


def mmd_normal_test(sample, scale: float = 1.0, seed: int = 0, n_permutations: int = 200) -> tuple[float, float]:
    """Permutation two-sample MMD test of ``sample`` against ``N(0, scale^2)`` draws of equal size.

    The bandwidth is fixed from the pooled sample before permuting.
    """
    x = np.asarray(sample, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    y = scale * rng.standard_normal(len(x))
    pooled = np.concatenate([x, y])
    d2 = (pooled[:, None] - pooled[None, :]) ** 2
    h = float(np.median(d2[np.triu_indices(len(pooled), 1)]))
    stat = mmd2_unbiased(x, y, h)
    hits = 0
    for _ in range(n_permutations):
        p = rng.permutation(len(pooled))
        hits += mmd2_unbiased(pooled[p[: len(x)]], pooled[p[len(x):]], h) >= stat
    return stat, (hits + 1) / (n_permutations + 1)
