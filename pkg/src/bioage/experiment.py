"""Experiment grid: sex x population x feature set x model x seed, with averaging and report emission."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import yaml

from . import __version__
from .analysis import FEATURE_SET_NAMES, build_feature_set
from .baselines import MODEL_NAMES, DnnConfig, cac_fit, dnn_fit, kdm_fit, load_estimator
from .cohort import (
    POPULATIONS,
    SEXES,
    CohortTable,
    GeneratorConfig,
    SplitSpec,
    assign_population_groups,
    generate_cohort,
    split_cohort,
)
from .evaluation import (
    GapTable,
    MORTALITY_MODES,
    age_binned_gap_curves,
    concat_tables,
    fit_ba_ca_line,
    gap_by_morbidity,
    mortality_regression,
    mortality_rows_frame,
    survival_by_gap,
)
from .model.losses import LossWeights
from .model.training import TrainConfig, train

log = logging.getLogger(__name__)

# small enough for the full default grid on a single CPU core
DESK_TRAIN = TrainConfig(batch_size=512, max_epochs=30, patience=10, n_layers=1, n_heads=4, d_ff=64, d_model=32,
                         head_hidden=32)
DESK_WEIGHTS = LossWeights(dist=10.0)
DESK_DNN = DnnConfig(batch_size=512, max_epochs=60, patience=10)

MANIFEST = "manifest.json"


@dataclass
class ExperimentConfig:
    generator: dict = field(default_factory=dict)
    cohort: str | None = None  # directory of a saved cohort; overrides ``generator``
    cohort_seed: int = 0
    populations: list[str] = field(default_factory=lambda: list(POPULATIONS))
    feature_sets: list[str] = field(default_factory=lambda: list(FEATURE_SET_NAMES))
    models: list[str] = field(default_factory=lambda: list(MODEL_NAMES))
    sexes: list[str] = field(default_factory=lambda: list(SEXES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    weights: LossWeights = field(default_factory=lambda: dataclasses.replace(DESK_WEIGHTS))
    train: TrainConfig = field(default_factory=lambda: dataclasses.replace(DESK_TRAIN))
    dnn: DnnConfig = field(default_factory=lambda: dataclasses.replace(DESK_DNN))
    kdm: dict = field(default_factory=lambda: {"variant": "without_ca"})
    cac: dict = field(default_factory=lambda: {"bin_width_years": 5.0, "k_neighbors": 3, "eps": 1e-6})
    split_ratios: tuple = (0.70, 0.15, 0.15)
    deterministic: bool = True
    workers: int = 1
    out: str = "results"

    # fields that do not change any result
    UNHASHED = ("out", "workers")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, allowed in (("populations", POPULATIONS), ("feature_sets", FEATURE_SET_NAMES),
                              ("models", MODEL_NAMES), ("sexes", SEXES)):
            bad = [v for v in getattr(self, name) if v not in allowed]
            if bad:
                raise ValueError(f"unknown {name} {bad}; expected names from {allowed}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for k in ("weights", "train", "dnn"):
            d[k] = d[k].to_dict()
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "weights" in data:
            data["weights"] = LossWeights(**{**DESK_WEIGHTS.to_dict(), **data["weights"]})
        if "train" in data:
            data["train"] = TrainConfig.from_dict({**DESK_TRAIN.to_dict(), **data["train"]})
        if "dnn" in data:
            data["dnn"] = DnnConfig.from_dict({**DESK_DNN.to_dict(), **data["dnn"]})
        for key, default in (("kdm", {"variant": "without_ca"}),
                             ("cac", {"bin_width_years": 5.0, "k_neighbors": 3, "eps": 1e-6})):
            if key in data:
                data[key] = {**default, **data[key]}
        if "split_ratios" in data:
            data["split_ratios"] = tuple(data["split_ratios"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self.UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# single runs


def cell_name(sex: str, population: str, feature_set: str, model: str) -> str:
    return f"{sex}_{population}_{feature_set}_{model}"


def load_or_generate_cohort(config: ExperimentConfig) -> CohortTable:
    if config.cohort:
        return CohortTable.load(config.cohort)
    return generate_cohort(GeneratorConfig.from_dict(config.generator), seed=config.cohort_seed)


def population_splits(cohort: CohortTable, population: str, seed: int, repeat_index: int = 0,
                      ratios=(0.70, 0.15, 0.15)) -> tuple[CohortTable, CohortTable, CohortTable]:
    """Train/val restricted to ``population``; test is the whole-cohort test split.

    The whole cohort is partitioned once per seed so that every population's
    models are scored on the same test subjects, including states the
    training population never contains.
    """
    groups = assign_population_groups(cohort)
    tr, va, te = split_cohort(groups["whole"], SplitSpec(tuple(ratios), seed, repeat_index))
    members = set(groups[population].member_ids)
    tr = [i for i in tr if i in members]
    va = [i for i in va if i in members]
    return cohort.subset(tr), cohort.subset(va), cohort.subset(te)


def fit_estimator(model: str, train_split: CohortTable, val_split: CohortTable, feature_set, config: ExperimentConfig,
                  seed: int):
    """Fit one estimator; returns it together with an optional training history."""
    if model == "kdm":
        return kdm_fit(train_split, feature_set, **config.kdm), None
    if model == "cac":
        return cac_fit(train_split, feature_set, **config.cac), None
    if model == "dnn":
        est = dnn_fit(train_split, val_split, feature_set, dataclasses.replace(config.dnn, seed=seed))
        return est, est.history
    if model == "proposed":
        return train(train_split, val_split, feature_set, config.weights, dataclasses.replace(config.train, seed=seed))
    raise ValueError(f"unknown model {model!r}")


@dataclass
class RunRecord:
    sex: str
    population: str
    feature_set: str
    model: str
    seed: int
    repeat_index: int
    status: str = "pending"
    seconds: float = 0.0
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def cell(self) -> str:
        return cell_name(self.sex, self.population, self.feature_set, self.model)

    @property
    def key(self) -> str:
        return f"{self.cell}/seed{self.seed}"


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    out_dir: str
    version: str = __version__
    runs: list[RunRecord] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "config": self.config, "out_dir": self.out_dir,
                "version": self.version, "seconds": self.seconds,
                "runs": [dataclasses.asdict(r) for r in self.runs]}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["config_hash"], d["config"], d["out_dir"], d.get("version", ""),
                   [RunRecord(**r) for r in d.get("runs", [])], d.get("seconds", 0.0))

    def save(self, path=None) -> Path:
        path = Path(path or Path(self.out_dir) / MANIFEST)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        return cls.from_dict(json.loads(path.read_text()))

    @property
    def failures(self) -> list[RunRecord]:
        return [r for r in self.runs if r.status == "failed"]


def _execute(record: RunRecord, cohort: CohortTable, config: ExperimentConfig, run_dir: Path) -> RunRecord:
    t0 = time.perf_counter()
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    try:
        sub = cohort.by_sex(record.sex)
        tr, va, te = population_splits(sub, record.population, record.seed, record.repeat_index, config.split_ratios)
        fs = build_feature_set(record.feature_set, cohort.schema)
        est, history = fit_estimator(record.model, tr, va, fs, config, record.seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        estimates = est.estimate(te)
        table = gap_by_morbidity(estimates, te.labels, record.population, record.model, record.feature_set)
        days = te.event_days("death")
        rows = []
        for mode in MORTALITY_MODES:
            try:
                rows.append(mortality_regression(estimates, days, mode, record.population, record.feature_set,
                                                 record.model))
            except ValueError as exc:
                log.warning("%s: %s regression skipped: %s", record.key, mode, exc)
        times, events = te.survival_data("death")
        survival = survival_by_gap(estimates, times, events)
        binned = age_binned_gap_curves(estimates, te.labels["overall"])
        a, b = fit_ba_ca_line(estimates)

        art = {
            "estimates": "estimates.csv", "gap_table": "gap_table.csv", "mortality": "mortality.csv",
            "survival": "survival.csv", "binned": "binned.csv", "summary": "summary.json",
            "checkpoint": "model.pt",
        }
        out = estimates.assign(state=te.labels["overall"].to_numpy(), days_to_death=days,
                               time=times, event=events.astype(int))
        out.to_csv(run_dir / art["estimates"], index=False, float_format="%.6f", lineterminator="\n")
        table.to_csv(run_dir / art["gap_table"])
        mortality_rows_frame(rows).to_csv(run_dir / art["mortality"], index=False, float_format="%.6f",
                                          lineterminator="\n")
        survival.to_frame().to_csv(run_dir / art["survival"], index=False, float_format="%.6f", lineterminator="\n")
        binned.to_csv(run_dir / art["binned"], index=False, float_format="%.6f", lineterminator="\n")
        summary = {"slope": a, "intercept": b, "logrank_chi2": survival.chi2, "logrank_p": survival.p_value,
                   "strata": survival.counts, "n_train": len(tr), "n_val": len(va), "n_test": len(te)}
        (run_dir / art["summary"]).write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
        est.save(run_dir / art["checkpoint"])
        if history is not None:
            art["history"] = "history.csv"
            history.to_csv(run_dir / art["history"], index=False, float_format="%.6f", lineterminator="\n")
        record.artifacts = {k: str(run_dir / v) for k, v in art.items()}
        record.status = "ok"
        record.error = None
    except Exception as exc:  # a failed cell must not stop the grid
        log.error("%s failed: %s", record.key, exc)
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
    record.seconds = time.perf_counter() - t0
    return record


def run_experiment(config: ExperimentConfig, resume: bool = True) -> RunManifest:
    """Run every grid cell for every seed; completed runs of an identical config are skipped."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.hash()
    previous = {}
    if resume and (out / MANIFEST).exists():
        old = RunManifest.load(out / MANIFEST)
        if old.config_hash == chash:
            previous = {r.key: r for r in old.runs if r.status == "ok"}
        else:
            log.info("config changed (%s -> %s); not resuming", old.config_hash, chash)
    config.save(out / "config.yaml")
    manifest = RunManifest(chash, config.to_dict(), str(out))
    t0 = time.perf_counter()
    cohort = load_or_generate_cohort(config)

    todo = []
    for sex in config.sexes:
        for population in config.populations:
            for fs in config.feature_sets:
                for model in config.models:
                    for i, seed in enumerate(config.seeds):
                        rec = RunRecord(sex, population, fs, model, seed, i)
                        if rec.key in previous:
                            manifest.runs.append(previous[rec.key])
                        else:
                            todo.append(rec)
                            manifest.runs.append(rec)
    log.info("%d runs to do, %d resumed", len(todo), len(manifest.runs) - len(todo))
    if config.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            futures = [pool.submit(_execute, r, cohort, config, out / "runs" / r.cell / f"seed{r.seed}") for r in todo]
            done = [f.result() for f in futures]
        by_key = {r.key: r for r in done}
        manifest.runs = [by_key.get(r.key, r) for r in manifest.runs]
    else:
        for rec in todo:
            _execute(rec, cohort, config, out / "runs" / rec.cell / f"seed{rec.seed}")
            manifest.save()
    manifest.seconds = time.perf_counter() - t0
    manifest.save()
    return manifest


# --------------------------------------------------------------------------
# averaging and report


def average_gap_tables(tables: list[GapTable]) -> GapTable:
    """Arithmetic mean of per-seed cell means (absent cells ignored) and of counts."""
    cells = concat_tables(tables).cells
    keys = GapTable.KEYS + ["state"]
    g = cells.groupby(keys, sort=False)
    avg = g.agg(mean=("mean", "mean"), n=("n", "mean"), ood=("ood", "first")).reset_index()
    return GapTable(avg[keys + ["mean", "n", "ood"]])


def average_mortality(frames: list[pd.DataFrame]) -> pd.DataFrame:
    cat = pd.concat(frames, ignore_index=True)
    keys = ["population", "feature_set", "model", "mode"]
    return cat.groupby(keys, sort=False)[["slope", "r2", "pcc", "p_value", "n"]].mean().reset_index()


def emit_report(manifest: RunManifest, out_dir=None, plots: bool = True) -> Path:
    """Write averaged tables, curves and plots per cell, plus the manifest."""
    from .plots import plot_ba_vs_ca, plot_binned_curves, plot_survival
    from .evaluation import SurvivalCurves, kaplan_meier

    out = Path(out_dir or manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells: dict[str, list[RunRecord]] = {}
    for r in manifest.runs:
        if r.status == "ok":
            cells.setdefault(r.cell, []).append(r)
    for cell, runs in sorted(cells.items()):
        runs = sorted(runs, key=lambda r: r.seed)
        tables_dir, curves_dir, plots_dir = out / "tables", out / "curves", out / "plots"
        for d in (tables_dir, curves_dir, plots_dir if plots else None):
            if d is not None:
                d.mkdir(parents=True, exist_ok=True)
        gap = average_gap_tables([GapTable.from_csv(r.artifacts["gap_table"]) for r in runs])
        gap.wide().to_csv(tables_dir / f"gap_{cell}.csv", index=False, float_format="%.6f", lineterminator="\n")
        morts = [pd.read_csv(r.artifacts["mortality"]) for r in runs]
        morts = [m for m in morts if len(m)]
        mort = average_mortality(morts) if morts else pd.DataFrame(
            columns=["population", "feature_set", "model", "mode", "slope", "r2", "pcc", "p_value", "n"])
        mort.to_csv(tables_dir / f"mortality_{cell}.csv", index=False, float_format="%.6f", lineterminator="\n")

        surv = pd.concat([pd.read_csv(r.artifacts["survival"]).assign(seed=r.seed) for r in runs], ignore_index=True)
        surv.to_csv(curves_dir / f"survival_{cell}.csv", index=False, float_format="%.6f", lineterminator="\n")
        binned = pd.concat([pd.read_csv(r.artifacts["binned"]).assign(seed=r.seed) for r in runs], ignore_index=True)
        binned.to_csv(curves_dir / f"binned_{cell}.csv", index=False, float_format="%.6f", lineterminator="\n")
        if plots:
            first = pd.read_csv(runs[0].artifacts["estimates"])
            plot_ba_vs_ca(first, plots_dir / f"ba_ca_{cell}.png", cell)
            summary = json.loads(Path(runs[0].artifacts["summary"]).read_text())
            strata = np.select([first["gap"] < -1, first["gap"] > 1], ["healthy", "unhealthy"], "average")
            curves = {s: kaplan_meier(first.loc[strata == s, "time"], first.loc[strata == s, "event"].astype(bool))
                      for s in ("healthy", "average", "unhealthy") if (strata == s).any()}
            plot_survival(SurvivalCurves(curves, summary["strata"], summary["logrank_chi2"],
                                         summary["logrank_p"], np.nan), plots_dir / f"km_{cell}.png", cell)
            plot_binned_curves(pd.read_csv(runs[0].artifacts["binned"]), plots_dir / f"binned_{cell}.png", cell)
    manifest.save(out / MANIFEST)
    return out
