"""Synthetic health check-up cohorts, morbidity labels, populations and splits.

Biomarkers follow a linear aging model: every feature ``j`` is drawn as
``x_j = k_j * BA_true + q_j + eps_j`` where ``BA_true`` is the subject's
hidden biological age. Disease clusters (glycemic, pressure, lipid) share a
subject-level trait inside ``eps_j`` so that the morbidity labels derived
from Table-1 style thresholds have realistic co-occurrence.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from .schema import BINARY_DISEASES, DISEASES, TRISTATE_DISEASES, Schema, default_schema

log = logging.getLogger(__name__)

SEXES = ("male", "female")
POPULATIONS = ("super_normal", "normal", "average", "whole")
AVERAGE_GROUP_FEATURES = ("HbA1c", "FBS", "SBP", "DBP", "LDLC", "TG", "HDLC", "WC")
MEDICATED = ("dm", "hbp", "dlp")
HISTORY = ("cancer", "cvd", "cva")

NORMAL, PRE, ILLNESS = "normal", "pre", "illness"
HEALTHY, WITH_DISEASE = "healthy", "withDisease"
OVERALL_HEALTHY, OVERALL_AVERAGE, OVERALL_UNHEALTHY = "healthy", "average", "unhealthy"

META_COLUMNS = (
    "id",
    "sex",
    "chronological_age",
    "med_dm",
    "med_hbp",
    "med_dlp",
    "hx_cancer",
    "hx_cvd",
    "hx_cva",
    "followup_days",
    "true_aging_rate",
    "true_biological_age",
)


# --------------------------------------------------------------------------
# records and labels


@dataclass
class SubjectRecord:
    id: str
    sex: str
    chronological_age: float
    biomarkers: dict[str, float]
    medication: dict[str, bool] = field(default_factory=dict)
    history: dict[str, bool] = field(default_factory=dict)
    days_to_death: int | None = None
    death_cause: str | None = None
    dm_onset: int | None = None
    followup_days: int | None = None
    true_aging_rate: float = float("nan")

    def value(self, name: str) -> float:
        v = self.biomarkers.get(name, float("nan"))
        return float("nan") if v is None else float(v)


@dataclass(frozen=True)
class MorbidityLabel:
    dm: str
    hbp: str
    dlp: str
    ms: str
    cancer: str
    cvd: str
    cva: str
    indeterminate: tuple[str, ...] = ()

    @property
    def overall(self) -> str:
        states = [getattr(self, d) for d in DISEASES]
        if any(s in (ILLNESS, WITH_DISEASE) for s in states):
            return OVERALL_UNHEALTHY
        if all(getattr(self, d) == NORMAL for d in TRISTATE_DISEASES):
            return OVERALL_HEALTHY
        return OVERALL_AVERAGE

    @property
    def illnesses(self) -> list[str]:
        return [d for d in DISEASES if getattr(self, d) in (ILLNESS, WITH_DISEASE)]

    def as_dict(self) -> dict[str, str]:
        out = {d: getattr(self, d) for d in DISEASES}
        out["overall"] = self.overall
        out["indeterminate"] = ";".join(self.indeterminate)
        return out


def _lt(v: float, thr: float) -> bool:
    return not math.isnan(v) and v < thr


def _ge(v: float, thr: float) -> bool:
    return not math.isnan(v) and v >= thr


def label_morbidity(record: SubjectRecord) -> MorbidityLabel:
    """Morbidity states from check-up values, medication and history flags.

    A disease whose biomarkers are all missing and whose medication flag is
    unset cannot be judged; it is labelled ``pre`` and listed in
    ``indeterminate``. Partially missing biomarkers only block the
    ``normal`` state, since normality needs every condition to hold.
    """
    v = record.value
    med = record.medication
    indeterminate = []

    def tri(illness: bool, normal: bool, names: tuple[str, ...], disease: str) -> str:
        if illness or med.get(disease, False):
            return ILLNESS
        if all(math.isnan(v(n)) for n in names):
            indeterminate.append(disease)
            return PRE
        return NORMAL if normal else PRE

    fbs, a1c = v("FBS"), v("HbA1c")
    dm = tri(_ge(fbs, 126) or _ge(a1c, 6.5), _lt(fbs, 100) and _lt(a1c, 5.7), ("FBS", "HbA1c"), "dm")

    sbp, dbp = v("SBP"), v("DBP")
    hbp = tri(_ge(sbp, 140) or _ge(dbp, 90), _lt(sbp, 120) and _lt(dbp, 80), ("SBP", "DBP"), "hbp")

    ldl, tg, hdl = v("LDLC"), v("TG"), v("HDLC")
    dlp = tri(
        _ge(ldl, 160) or _ge(tg, 200) or _lt(hdl, 40),
        _lt(ldl, 100) and _lt(tg, 150) and _ge(hdl, 60),
        ("LDLC", "TG", "HDLC"),
        "dlp",
    )

    male = record.sex == "male"
    wc = v("WC")
    conditions = [
        _ge(wc, 90 if male else 85),
        _ge(tg, 150),
        _lt(hdl, 40 if male else 50),
        _ge(sbp, 135) and _ge(dbp, 85),
        _ge(fbs, 100),
    ]
    ms = WITH_DISEASE if sum(conditions) >= 3 else HEALTHY

    hx = record.history
    binary = {d: WITH_DISEASE if hx.get(d, False) else HEALTHY for d in HISTORY}
    return MorbidityLabel(dm, hbp, dlp, ms, binary["cancer"], binary["cvd"], binary["cva"], tuple(indeterminate))


def label_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Vectorised :func:`label_morbidity` over a cohort frame.

    Returns one row per subject with columns ``dm, hbp, dlp, ms, cancer,
    cvd, cva, overall, indeterminate``; index aligned with ``frame``.
    """
    n = len(frame)

    def col(name):
        if name in frame:
            return frame[name].to_numpy(dtype=float)
        return np.full(n, np.nan)

    def flag(name):
        if name in frame:
            return frame[name].to_numpy(dtype=bool)
        return np.zeros(n, dtype=bool)

    with np.errstate(invalid="ignore"):
        ge = lambda a, t: ~np.isnan(a) & (a >= t)
        lt = lambda a, t: ~np.isnan(a) & (a < t)

        fbs, a1c, sbp, dbp = col("FBS"), col("HbA1c"), col("SBP"), col("DBP")
        ldl, tg, hdl, wc = col("LDLC"), col("TG"), col("HDLC"), col("WC")
        out = {}
        indeterminate = [[] for _ in range(n)]

        def tri(illness, normal, arrays, disease):
            illness = illness | flag(f"med_{disease}")
            allmiss = np.all([np.isnan(a) for a in arrays], axis=0) & ~illness
            state = np.where(illness, ILLNESS, np.where(normal & ~allmiss, NORMAL, PRE))
            for i in np.flatnonzero(allmiss):
                indeterminate[i].append(disease)
            return state

        out["dm"] = tri(ge(fbs, 126) | ge(a1c, 6.5), lt(fbs, 100) & lt(a1c, 5.7), (fbs, a1c), "dm")
        out["hbp"] = tri(ge(sbp, 140) | ge(dbp, 90), lt(sbp, 120) & lt(dbp, 80), (sbp, dbp), "hbp")
        out["dlp"] = tri(
            ge(ldl, 160) | ge(tg, 200) | lt(hdl, 40),
            lt(ldl, 100) & lt(tg, 150) & ge(hdl, 60),
            (ldl, tg, hdl),
            "dlp",
        )
        male = frame["sex"].to_numpy() == "male"
        count = (
            ge(wc, np.where(male, 90, 85)).astype(int)
            + ge(tg, 150)
            + lt(hdl, np.where(male, 40, 50))
            + (ge(sbp, 135) & ge(dbp, 85))
            + ge(fbs, 100)
        )
        out["ms"] = np.where(count >= 3, WITH_DISEASE, HEALTHY)
    for d in HISTORY:
        out[d] = np.where(flag(f"hx_{d}"), WITH_DISEASE, HEALTHY)

    labels = pd.DataFrame(out, index=frame.index)
    sick = np.zeros(n, dtype=bool)
    for d in DISEASES:
        sick |= labels[d].isin([ILLNESS, WITH_DISEASE]).to_numpy()
    allnormal = np.all([labels[d].to_numpy() == NORMAL for d in TRISTATE_DISEASES], axis=0)
    labels["overall"] = np.where(sick, OVERALL_UNHEALTHY, np.where(allnormal, OVERALL_HEALTHY, OVERALL_AVERAGE))
    labels["indeterminate"] = [";".join(x) for x in indeterminate]
    return labels


# --------------------------------------------------------------------------
# generator


@dataclass
class BiomarkerModel:
    """Linear aging model of one biomarker.

    ``center_*`` is the expected value at ``GeneratorConfig.reference_age``;
    the intercept is ``center - slope * reference_age``.
    """

    slope: float
    center_male: float
    center_female: float
    noise: float
    trait: str | None = None
    trait_loading: float = 0.0
    floor: float | None = None


def _bm(slope, cm, cf, noise, trait=None, loading=0.0, floor=None):
    return BiomarkerModel(slope, cm, cf, noise, trait, loading, floor)


def default_biomarker_models() -> dict[str, BiomarkerModel]:
    return {
        "FBS": _bm(0.30, 95.0, 91.0, 6.0, "glycemic", 9.0, 50.0),
        "HbA1c": _bm(0.008, 5.55, 5.45, 0.20, "glycemic", 0.55, 3.5),
        "SBP": _bm(0.45, 121.0, 113.0, 8.0, "pressure", 9.0, 70.0),
        "DBP": _bm(0.22, 78.0, 73.0, 5.0, "pressure", 6.0, 40.0),
        "LDLC": _bm(0.35, 112.0, 108.0, 22.0, "lipid", 16.0, 20.0),
        "TG": _bm(0.60, 125.0, 95.0, 35.0, "lipid", 30.0, 20.0),
        "HDLC": _bm(-0.06, 53.0, 63.0, 8.0, "lipid", -6.0, 15.0),
        "WC": _bm(0.15, 85.0, 76.0, 6.0, "lipid", 2.5, 50.0),
        "RBC": _bm(-0.012, 5.00, 4.40, 0.25, None, 0.0, 2.0),
        "MCV": _bm(0.08, 91.0, 90.0, 3.5, None, 0.0, 60.0),
        "BMI": _bm(0.02, 24.5, 22.0, 2.8, None, 0.0, 14.0),
        "SMM": _bm(-0.08, 32.0, 22.0, 3.0, None, 0.0, 10.0),
        "BFM": _bm(0.08, 17.0, 18.0, 4.5, None, 0.0, 2.0),
        "FFM": _bm(-0.12, 57.0, 40.0, 4.5, None, 0.0, 20.0),
        "hsCRP": _bm(0.02, 1.20, 1.00, 0.80, None, 0.0, 0.02),
        "Cr": _bm(0.005, 0.98, 0.72, 0.10, None, 0.0, 0.3),
        "FEV1": _bm(-0.030, 3.60, 2.60, 0.25, None, 0.0, 0.5),
        "FVC": _bm(-0.030, 4.40, 3.20, 0.35, None, 0.0, 0.8),
        "Alb": _bm(-0.008, 4.55, 4.45, 0.18, None, 0.0, 2.5),
        "Height": _bm(-0.15, 172.0, 159.0, 5.5, None, 0.0, 130.0),
        "BUN": _bm(0.08, 14.0, 12.5, 3.5, None, 0.0, 3.0),
        "Hb": _bm(-0.010, 15.0, 13.0, 1.0, None, 0.0, 7.0),
        "WBC": _bm(0.0, 6.0, 5.6, 1.5, None, 0.0, 2.0),
        "PLT": _bm(-0.6, 240.0, 255.0, 50.0, None, 0.0, 60.0),
        "TChol": _bm(0.4, 195.0, 195.0, 28.0, "lipid", 14.0, 80.0),
        "AST": _bm(0.05, 24.0, 20.0, 8.0, None, 0.0, 5.0),
        "ALT": _bm(0.0, 26.0, 17.0, 12.0, None, 0.0, 3.0),
        "GGT": _bm(0.2, 38.0, 20.0, 22.0, None, 0.0, 5.0),
        "UricAcid": _bm(0.0, 6.0, 4.5, 1.1, None, 0.0, 1.0),
        "Calcium": _bm(-0.005, 9.4, 9.3, 0.35, None, 0.0, 7.0),
        "FEV1_FVC": _bm(-0.20, 81.0, 83.0, 5.0, None, 0.0, 40.0),
        "Pulse": _bm(0.0, 68.0, 72.0, 9.0, None, 0.0, 35.0),
        "CEA": _bm(0.02, 1.8, 1.4, 0.9, None, 0.0, 0.1),
        "AFP": _bm(0.0, 3.0, 2.8, 1.2, None, 0.0, 0.1),
        "VisualAcuity": _bm(-0.006, 1.0, 1.0, 0.2, None, 0.0, 0.05),
        "VFA": _bm(1.0, 90.0, 85.0, 25.0, None, 0.0, 10.0),
        "AbdominalFatness": _bm(0.002, 0.90, 0.85, 0.05, None, 0.0, 0.6),
        "ICF": _bm(-0.06, 26.0, 19.0, 3.0, None, 0.0, 8.0),
        "Mineral": _bm(-0.01, 3.6, 2.6, 0.35, None, 0.0, 1.0),
        "Protein": _bm(-0.03, 11.4, 8.2, 1.0, None, 0.0, 3.0),
    }


@dataclass
class HazardModel:
    """Gompertz hazard ``exp(log_scale + rate * (BA_true + t))`` with t in years."""

    log_scale: float
    rate: float


@dataclass
class GeneratorConfig:
    n_subjects: int = 10_000
    male_fraction: float = 0.52
    age_distribution: str = "normal"  # "normal" (truncated) or "uniform"
    age_mean: float = 46.0
    age_sd: float = 12.5
    age_min: float = 20.0
    age_max: float = 90.0
    reference_age: float = 45.0
    # BA_true = CA + aging_scale * rate * (CA - age_min), rate ~ N(0, aging_rate_sd)
    aging_rate_sd: float = 0.2
    aging_scale: float = 1.0
    noise_scale: float = 1.0
    apply_missing: bool = True
    biomarkers: dict[str, BiomarkerModel] = field(default_factory=default_biomarker_models)
    death: HazardModel = field(default_factory=lambda: HazardModel(-13.5, 0.16))
    dm_onset: HazardModel = field(default_factory=lambda: HazardModel(-8.2, 0.05))
    dm_onset_trait_effect: float = 1.2
    followup_min_days: int = 1825
    followup_max_days: int = 2555
    medication_rate: float = 0.4
    # logistic history models: logit = intercept + slope * (BA_true - reference_age)
    history: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"cancer": (-3.6, 0.06), "cvd": (-4.0, 0.08), "cva": (-4.6, 0.08)}
    )
    hpylori_rate: float = 0.4

    def validate(self, schema: Schema) -> None:
        if self.n_subjects <= 0:
            raise ValueError("n_subjects must be positive")
        for name in ("male_fraction", "medication_rate", "hpylori_rate"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        for name in ("aging_rate_sd", "noise_scale", "age_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.age_min < self.age_max:
            raise ValueError("age_min must be below age_max")
        if self.age_distribution not in ("normal", "uniform"):
            raise ValueError(f"unknown age_distribution {self.age_distribution!r}")
        if not 0 < self.followup_min_days <= self.followup_max_days:
            raise ValueError("follow-up window must be positive and ordered")
        for name, bm in self.biomarkers.items():
            if name not in schema:
                raise ValueError(f"biomarker model for {name!r} has no schema entry")
            if bm.noise < 0 or bm.trait_loading != bm.trait_loading:
                raise ValueError(f"biomarker {name!r}: negative noise scale")
        for feat in schema:
            if feat.kind in ("measured", "impedance", "tumor_marker", "eyesight") and feat.name not in self.biomarkers:
                raise ValueError(f"schema feature {feat.name!r} has no biomarker model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "GeneratorConfig":
        data = dict(data)
        if "biomarkers" in data:
            base = default_biomarker_models()
            for name, spec in data["biomarkers"].items():
                if isinstance(spec, BiomarkerModel):
                    base[name] = spec
                elif name in base:
                    base[name] = replace(base[name], **spec)
                else:
                    base[name] = BiomarkerModel(**spec)
            data["biomarkers"] = base
        for key in ("death", "dm_onset"):
            if key in data and isinstance(data[key], Mapping):
                data[key] = HazardModel(**data[key])
        if "history" in data:
            data["history"] = {k: tuple(v) for k, v in data["history"].items()}
        return cls(**data)


@dataclass
class CohortTable:
    """Subjects as a columnar frame plus aligned labels, events and schema.

    ``frame`` holds one row per subject with :data:`META_COLUMNS` followed by
    one column per schema feature (NaN for missing). ``events`` has columns
    ``id, event_type, days`` with event types ``death`` and ``dm_onset``.
    """

    frame: pd.DataFrame
    labels: pd.DataFrame
    schema: Schema
    events: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["id", "event_type", "days"]))

    def __post_init__(self):
        if len(self.frame) != len(self.labels):
            raise ValueError("records and labels differ in length")
        missing = [c for c in self.frame.columns if c not in META_COLUMNS and c not in self.schema]
        if missing:
            raise ValueError(f"biomarker columns not in schema: {missing}")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def ids(self) -> np.ndarray:
        return self.frame["id"].to_numpy()

    @property
    def feature_names(self) -> list[str]:
        return [n for n in self.schema.names if n in self.frame.columns]

    def subset(self, ids) -> "CohortTable":
        """Rows whose id is in ``ids``, in the order given."""
        pos = pd.Index(self.frame["id"]).get_indexer(list(ids))
        if (pos < 0).any():
            raise KeyError("unknown subject ids in subset")
        keep = set(ids)
        return CohortTable(
            self.frame.iloc[pos].reset_index(drop=True),
            self.labels.iloc[pos].reset_index(drop=True),
            self.schema,
            self.events[self.events["id"].isin(keep)].reset_index(drop=True),
        )

    def by_sex(self, sex: str) -> "CohortTable":
        return self.subset(self.frame.loc[self.frame["sex"] == sex, "id"])

    def event_days(self, event_type: str = "death") -> np.ndarray:
        """Days to ``event_type`` per subject, NaN when not observed."""
        ev = self.events[self.events["event_type"] == event_type].set_index("id")["days"]
        return self.frame["id"].map(ev).to_numpy(dtype=float)

    def survival_data(self, event_type: str = "death") -> tuple[np.ndarray, np.ndarray]:
        """(time, event) pairs with censoring at the follow-up horizon."""
        days = self.event_days(event_type)
        observed = ~np.isnan(days)
        times = np.where(observed, days, self.frame["followup_days"].to_numpy(dtype=float))
        return times, observed

    def record(self, i: int) -> SubjectRecord:
        row = self.frame.iloc[i]
        sid = row["id"]
        ev = self.events[self.events["id"] == sid]
        death = ev.loc[ev["event_type"] == "death", "days"]
        onset = ev.loc[ev["event_type"] == "dm_onset", "days"]
        return SubjectRecord(
            id=sid,
            sex=row["sex"],
            chronological_age=float(row["chronological_age"]),
            biomarkers={n: float(row[n]) for n in self.feature_names},
            medication={d: bool(row[f"med_{d}"]) for d in MEDICATED},
            history={d: bool(row[f"hx_{d}"]) for d in HISTORY},
            days_to_death=int(death.iloc[0]) if len(death) else None,
            death_cause="all_cause" if len(death) else None,
            dm_onset=int(onset.iloc[0]) if len(onset) else None,
            followup_days=int(row["followup_days"]),
            true_aging_rate=float(row["true_aging_rate"]),
        )

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(len(self)):
            yield self.record(i)

    # serialization --------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        """Write ``cohort.csv``, ``schema.json`` and ``events.csv`` into ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(out / "cohort.csv", index=False, float_format="%.10g", lineterminator="\n")
        self.schema.save(out / "schema.json")
        self.events.to_csv(out / "events.csv", index=False, lineterminator="\n")

    @classmethod
    def load(cls, directory: str | Path) -> "CohortTable":
        src = Path(directory)
        schema = Schema.load(src / "schema.json")
        frame = pd.read_csv(src / "cohort.csv", dtype={"id": str})
        events = pd.read_csv(src / "events.csv", dtype={"id": str})
        return cls(frame, label_frame(frame), schema, events)


def _derived_features(frame: pd.DataFrame, ca: np.ndarray, male: np.ndarray, cfg: GeneratorConfig) -> dict:
    """Formulas that use chronological age, computed from generated values."""
    cr = frame["Cr"].to_numpy()
    kappa = np.where(male, 0.9, 0.7)
    alpha = np.where(male, -0.411, -0.329)
    ratio = cr / kappa
    ckd = 141 * np.minimum(ratio, 1) ** alpha * np.maximum(ratio, 1) ** -1.209 * 0.993**ca
    ckd = ckd * np.where(male, 1.0, 1.018)
    mdrd = 175 * cr**-1.154 * ca**-0.203 * np.where(male, 1.0, 0.742)
    out = {"eGFR_CKDEPI": ckd, "eGFR_MDRD": mdrd}
    for name in ("FVC", "FEV1"):
        bm = cfg.biomarkers[name]
        center = np.where(male, bm.center_male, bm.center_female)
        predicted = center + bm.slope * (ca - cfg.reference_age)
        out[f"{name}_pct"] = 100 * frame[name].to_numpy() / predicted
    return out


def generate_cohort(config: GeneratorConfig | None = None, seed: int = 0, schema: Schema | None = None) -> CohortTable:
    """Draw a synthetic cohort; deterministic given ``(config, seed)``."""
    cfg = config or GeneratorConfig()
    schema = schema or default_schema()
    cfg.validate(schema)
    rng = np.random.default_rng(seed)
    n = cfg.n_subjects

    male = rng.random(n) < cfg.male_fraction
    if cfg.age_distribution == "uniform":
        ca = rng.uniform(cfg.age_min, cfg.age_max, n)
    else:
        ca = cfg.age_mean + cfg.age_sd * rng.standard_normal(n)
        bad = (ca < cfg.age_min) | (ca > cfg.age_max)
        while bad.any():
            ca[bad] = cfg.age_mean + cfg.age_sd * rng.standard_normal(bad.sum())
            bad = (ca < cfg.age_min) | (ca > cfg.age_max)
    rate = cfg.aging_rate_sd * rng.standard_normal(n)
    ba = ca + cfg.aging_scale * rate * (ca - cfg.age_min)

    traits = {t: rng.standard_normal(n) for t in ("glycemic", "pressure", "lipid")}
    values: dict[str, np.ndarray] = {}
    for feat in schema:
        if feat.name not in cfg.biomarkers:
            continue
        bm = cfg.biomarkers[feat.name]
        center = np.where(male, bm.center_male, bm.center_female)
        x = bm.slope * (ba - cfg.reference_age) + center
        eps = bm.noise * rng.standard_normal(n)
        if bm.trait:
            eps = eps + bm.trait_loading * traits[bm.trait]
        x = x + cfg.noise_scale * eps
        if bm.floor is not None:
            x = np.maximum(x, bm.floor)
        values[feat.name] = x
    if "HPylori" in schema:
        values["HPylori"] = (rng.random(n) < cfg.hpylori_rate).astype(float)

    frame = pd.DataFrame(values)
    if "Cr" in frame and "FVC" in frame and "FEV1" in frame:
        for name, col in _derived_features(frame, ca, male, cfg).items():
            if name in schema:
                frame[name] = col

    # medication: a share of subjects whose values reach the illness range are treated
    pre_labels = label_frame(frame.assign(sex=np.where(male, "male", "female")))
    meds = {}
    for d in MEDICATED:
        ill = (pre_labels[d] == ILLNESS).to_numpy()
        meds[d] = ill & (rng.random(n) < cfg.medication_rate)
    hist = {}
    for d in HISTORY:
        intercept, slope = cfg.history.get(d, (-np.inf, 0.0))
        p = 1.0 / (1.0 + np.exp(-(intercept + slope * (ba - cfg.reference_age))))
        hist[d] = rng.random(n) < p

    followup = rng.integers(cfg.followup_min_days, cfg.followup_max_days + 1, n)
    death_days = _gompertz_days(rng, cfg.death, ba, np.zeros(n))
    dm_ill = ((pre_labels["dm"] == ILLNESS).to_numpy()) | meds["dm"]
    onset_shift = cfg.dm_onset_trait_effect * traits["glycemic"] / cfg.dm_onset.rate
    onset_days = _gompertz_days(rng, cfg.dm_onset, ba, onset_shift)

    # missingness last so that labels above see complete data
    if cfg.apply_missing:
        for feat in schema:
            if feat.name in frame and feat.missing_rate > 0:
                drop = rng.random(n) < feat.missing_rate
                frame.loc[drop, feat.name] = np.nan

    ids = np.array([f"S{seed:04d}-{i:06d}" for i in range(n)])
    meta = pd.DataFrame(
        {
            "id": ids,
            "sex": np.where(male, "male", "female"),
            "chronological_age": ca,
            **{f"med_{d}": meds[d] for d in MEDICATED},
            **{f"hx_{d}": hist[d] for d in HISTORY},
            "followup_days": followup,
            "true_aging_rate": rate,
            "true_biological_age": ba,
        }
    )
    frame = pd.concat([meta, frame[[f.name for f in schema if f.name in frame]]], axis=1)

    died = death_days <= followup
    onset = (onset_days <= np.minimum(followup, death_days)) & ~dm_ill
    events = pd.concat(
        [
            pd.DataFrame({"id": ids[died], "event_type": "death", "days": death_days[died]}),
            pd.DataFrame({"id": ids[onset], "event_type": "dm_onset", "days": onset_days[onset]}),
        ],
        ignore_index=True,
    )
    events["days"] = events["days"].astype(int)
    return CohortTable(frame, label_frame(frame), schema, events)


def _gompertz_days(rng, hazard: HazardModel, ba: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Event days under h(t) = exp(a + b (ba + shift + t)); at least one day."""
    e = rng.exponential(size=len(ba))
    b = hazard.rate
    level = np.exp(hazard.log_scale + b * (ba + shift))
    years = np.log1p(b * e / level) / b
    return np.maximum(1, np.ceil(years * 365.25)).astype(np.int64)


# --------------------------------------------------------------------------
# populations, splits, imputation


@dataclass(frozen=True)
class PopulationGroup:
    name: str
    member_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.member_ids)


def assign_population_groups(
    cohort: CohortTable, features: tuple[str, ...] = AVERAGE_GROUP_FEATURES, width: float = 2.0
) -> dict[str, PopulationGroup]:
    """The four nested study populations.

    The average group keeps subjects whose disease-related features all lie
    within ``mean +/- width * std`` of their own sex in the whole cohort.
    A missing value does not exclude a subject.
    """
    frame, labels = cohort.frame, cohort.labels
    ids = frame["id"].to_numpy()
    overall = labels["overall"].to_numpy()
    super_normal = overall == OVERALL_HEALTHY
    normal = overall != OVERALL_UNHEALTHY

    inside = np.ones(len(frame), dtype=bool)
    for sex in SEXES:
        rows = (frame["sex"] == sex).to_numpy()
        for name in features:
            if name not in frame:
                continue
            x = frame.loc[rows, name].to_numpy(dtype=float)
            if np.isnan(x).all():
                continue
            mu, sd = np.nanmean(x), np.nanstd(x)
            ok = np.isnan(x) | ((x >= mu - width * sd) & (x <= mu + width * sd))
            inside[rows] &= ok
    return {
        "super_normal": PopulationGroup("super_normal", tuple(ids[super_normal])),
        "normal": PopulationGroup("normal", tuple(ids[normal])),
        "average": PopulationGroup("average", tuple(ids[inside])),
        "whole": PopulationGroup("whole", tuple(ids)),
    }


def population_admits(population: str, disease: str, state: str) -> bool:
    """Whether a training population can contain subjects in ``state``.

    ``disease`` may be ``"overall"``. States outside the population mark
    out-of-distribution test cells.
    """
    if population in ("whole", "average"):
        return True
    if population == "normal":
        return state not in (ILLNESS, WITH_DISEASE, OVERALL_UNHEALTHY)
    if population == "super_normal":
        return state in (NORMAL, HEALTHY, OVERALL_HEALTHY)
    raise ValueError(f"unknown population {population!r}")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    repeat_index: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValueError("split ratios must be three non-negative numbers summing to 1")


def split_cohort(group: PopulationGroup | list, spec: SplitSpec) -> tuple[list, list, list]:
    """Uniform random train/val/test partition of a group's members."""
    members = list(group.member_ids if isinstance(group, PopulationGroup) else group)
    n = len(members)
    if n < 10:
        raise ValueError(f"refusing to split a group of {n} subjects (minimum 10)")
    rng = np.random.default_rng([spec.seed, spec.repeat_index])
    order = rng.permutation(n)
    n_train = int(round(spec.ratios[0] * n))
    n_val = int(round(spec.ratios[1] * n))
    shuffled = [members[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def training_means(features: np.ndarray) -> np.ndarray:
    """Column means ignoring NaN; NaN for columns never observed."""
    features = np.asarray(features, dtype=float)
    observed = ~np.isnan(features)
    counts = observed.sum(axis=0)
    sums = np.where(observed, features, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def impute_and_mask(features, train_stats, schema: Schema | None = None, names: list[str] | None = None):
    """Mean-impute missing cells and build the token mask.

    Parameters
    ----------
    features : (n, N) array with NaN for missing cells.
    train_stats : length-N training means; NaN marks a feature never
        observed in training, which is dropped.
    names : feature names aligned with the columns; required to report
        which features were kept.

    Returns
    -------
    imputed : (n, N') array with no NaN
    mask : (n, N' + 2) int array, 1 where imputed; the two leading token
        positions are always 0
    kept : names (or column indices) of the N' retained features
    """
    features = np.asarray(features, dtype=float)
    stats = np.asarray(train_stats, dtype=float)
    if features.ndim != 2 or features.shape[1] != stats.shape[0]:
        raise ValueError("features and train_stats disagree in width")
    names = list(names) if names is not None else list(range(features.shape[1]))
    keep = ~np.isnan(stats)
    for j in np.flatnonzero(~keep):
        log.info("dropping feature %s: no observed training values", names[j])
    if schema is not None:
        for j in np.flatnonzero(keep):
            if isinstance(names[j], str) and names[j] not in schema:
                raise KeyError(f"feature {names[j]!r} is not in the schema registry")
    x = features[:, keep]
    missing = np.isnan(x)
    imputed = np.where(missing, stats[keep][None, :], x)
    mask = np.zeros((x.shape[0], x.shape[1] + 2), dtype=np.int64)
    mask[:, 2:] = missing
    return imputed, mask, [names[j] for j in np.flatnonzero(keep)]


def save_generator_config(config: GeneratorConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
