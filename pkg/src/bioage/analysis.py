"""Age-correlation statistics and the three modelling feature sets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .cohort import CohortTable, PopulationGroup
from .schema import Schema

BASE_FEATURES = ("RBC", "MCV", "WC", "BMI", "SMM", "BFM", "FFM", "hsCRP", "Cr", "FEV1", "FVC", "HbA1c", "Alb")
MORBIDITY_EXTRA = ("FBS", "SBP", "DBP", "LDLC", "TG", "HDLC")
FEATURE_SET_NAMES = ("base", "morbidity_related", "entire")


class UndefinedStatisticError(ValueError):
    """A correlation statistic is undefined for the given input."""


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if x.size < 2:
        raise ValueError("need at least two observations")
    return x, y


def pearson(x, y) -> float:
    """Pearson correlation, ``cov(x, y) / (sd_x * sd_y)``."""
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedStatisticError("pearson correlation undefined for constant input")
    r = np.dot(dx, dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = _pair(x, y)
    return pearson(rankdata(x), rankdata(y))


def mutual_information(x, y, bins: int = 16) -> float:
    """Plug-in mutual information (nats) of equal-width histograms."""
    x, y = _pair(x, y)
    if bins < 2:
        raise ValueError("bins must be at least 2")
    if x.size < bins:
        raise ValueError("need at least as many observations as bins")
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz]))
    return float(max(mi, 0.0))


@dataclass
class CorrelationReport:
    """Per-feature statistics against chronological age.

    ``table`` has one row per (feature, sex, group) with columns ``pcc,
    srocc, mi, missing_rate, excluded, top_pcc, top_srocc, top_mi, flagged``.
    """

    table: pd.DataFrame

    def flagged(self, sex: str = "all", group: str | None = None) -> list[str]:
        t = self.table
        rows = t[(t["sex"] == sex) & t["flagged"]]
        if group is not None:
            rows = rows[rows["group"] == group]
        return list(rows["feature"])

    def to_csv(self, path) -> None:
        cols = ["feature", "sex", "group", "pcc", "srocc", "mi", "missing_rate", "flags"]
        self.table.assign(flags=self.table.apply(_flag_string, axis=1))[cols].to_csv(
            path, index=False, float_format="%.6f", lineterminator="\n"
        )


def _flag_string(row) -> str:
    parts = [s for s in ("pcc", "srocc", "mi") if row[f"top_{s}"]]
    if row["excluded"]:
        parts = ["excluded"]
    return ";".join(parts)


def _top_flags(values: np.ndarray, fraction: float) -> np.ndarray:
    """Members of the top ``fraction``; ties at the cut are all included."""
    finite = np.isfinite(values)
    m = finite.sum()
    if m == 0:
        return np.zeros(values.shape, dtype=bool)
    k = max(1, math.ceil(fraction * m))
    cut = np.sort(values[finite])[::-1][k - 1]
    return finite & (values >= cut)


def select_age_correlated_features(
    cohort: CohortTable,
    group: PopulationGroup,
    top_fraction: float = 0.10,
    missing_threshold: float = 0.50,
    bins: int = 16,
    features: list[str] | None = None,
) -> CorrelationReport:
    """Rank features by |PCC|, |SROCC| and MI with chronological age.

    Statistics are reported for all subjects of ``group`` and per sex.
    Features missing in more than ``missing_threshold`` of the subjects are
    excluded before ranking.
    """
    if len(group) == 0:
        raise ValueError(f"population group {group.name!r} is empty")
    sub = cohort.subset(group.member_ids)
    names = features or [n for n in cohort.feature_names]
    rows = []
    for sex in ("all", "female", "male"):
        part = sub.frame if sex == "all" else sub.frame[sub.frame["sex"] == sex]
        if len(part) == 0:
            continue
        age = part["chronological_age"].to_numpy(dtype=float)
        stats = []
        for name in names:
            x = part[name].to_numpy(dtype=float)
            ok = ~np.isnan(x)
            miss = 1.0 - ok.mean()
            pcc = srocc = mi = np.nan
            if miss <= missing_threshold and ok.sum() >= max(bins, 2):
                try:
                    pcc = pearson(x[ok], age[ok])
                    srocc = spearman(x[ok], age[ok])
                except UndefinedStatisticError:
                    pass
                mi = mutual_information(x[ok], age[ok], bins=bins)
            stats.append((name, pcc, srocc, mi, miss, miss > missing_threshold))
        frame = pd.DataFrame(stats, columns=["feature", "pcc", "srocc", "mi", "missing_rate", "excluded"])
        usable = ~frame["excluded"].to_numpy()
        for stat, vals in (
            ("pcc", np.abs(frame["pcc"].to_numpy())),
            ("srocc", np.abs(frame["srocc"].to_numpy())),
            ("mi", frame["mi"].to_numpy()),
        ):
            vals = np.where(usable, vals, np.nan)
            frame[f"top_{stat}"] = _top_flags(vals, top_fraction)
        frame["flagged"] = frame[["top_pcc", "top_srocc", "top_mi"]].any(axis=1)
        frame.insert(1, "sex", sex)
        frame.insert(2, "group", group.name)
        rows.append(frame)
    return CorrelationReport(pd.concat(rows, ignore_index=True))


@dataclass(frozen=True)
class FeatureSet:
    name: str
    members: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.members)


def build_feature_set(name: str, schema: Schema, base: tuple[str, ...] = BASE_FEATURES) -> FeatureSet:
    """Ordered feature list for ``base``, ``morbidity_related`` or ``entire``.

    ``entire`` keeps every schema feature except those computed from
    chronological age or from bioelectrical impedance.
    """
    if name == "entire":
        return FeatureSet(name, tuple(f.name for f in schema if f.kind not in ("ca_derived", "impedance")))
    if name == "base":
        members = tuple(base)
    elif name == "morbidity_related":
        members = tuple(base) + tuple(m for m in MORBIDITY_EXTRA if m not in base)
    else:
        raise ValueError(f"unknown feature set {name!r}; expected one of {FEATURE_SET_NAMES}")
    for m in members:
        if m not in schema:
            raise KeyError(f"feature set {name!r} needs {m!r}, which is missing from the schema")
    return FeatureSet(name, members)
