"""Command-line entry point: generate, analyze, train, evaluate, run, report."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .analysis import FEATURE_SET_NAMES, build_feature_set, select_age_correlated_features
from .baselines import MODEL_NAMES, load_estimator
from .cohort import POPULATIONS, SEXES, CohortTable, GeneratorConfig, assign_population_groups, generate_cohort
from .evaluation import (
    MORTALITY_MODES,
    fit_ba_ca_line,
    gap_by_morbidity,
    mortality_regression,
    mortality_rows_frame,
    survival_by_gap,
)
from .experiment import (
    ExperimentConfig,
    RunManifest,
    emit_report,
    fit_estimator,
    load_or_generate_cohort,
    population_splits,
    run_experiment,
)

log = logging.getLogger("bioage")


def _config(args) -> ExperimentConfig:
    """File keys over defaults, then flags over file keys."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    updates = {}
    if getattr(args, "cohort", None):
        updates["cohort"] = str(args.cohort)
    if args.out:
        updates["out"] = str(args.out)
    for flag, key in (("population", "populations"), ("features", "feature_sets"), ("model", "models"),
                      ("sex", "sexes")):
        if getattr(args, flag, None):
            updates[key] = [getattr(args, flag)]
    return dataclasses.replace(cfg, **updates)


def _cohort(args, cfg: ExperimentConfig) -> CohortTable:
    if getattr(args, "cohort", None):
        return CohortTable.load(args.cohort)
    if args.seed is not None and args.command == "generate":
        cfg = dataclasses.replace(cfg, cohort_seed=args.seed)
    return load_or_generate_cohort(cfg)


def cmd_generate(args) -> int:
    cfg = _config(args)
    seed = cfg.cohort_seed if args.seed is None else args.seed
    cohort = generate_cohort(GeneratorConfig.from_dict(cfg.generator), seed=seed)
    out = Path(cfg.out)
    cohort.save(out)
    print(f"wrote {len(cohort)} subjects to {out}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    cohort = _cohort(args, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = assign_population_groups(cohort)
    for name in cfg.populations:
        report = select_age_correlated_features(cohort, groups[name])
        path = out / f"correlation_{name}.csv"
        report.to_csv(path)
        print(f"{name}: flagged {', '.join(report.flagged('all', name))} -> {path}")
    return 0


def _single(cfg: ExperimentConfig, what: str) -> tuple[str, str, str, str]:
    picks = []
    for key, flag in (("sexes", "sex"), ("populations", "population"), ("feature_sets", "features"),
                      ("models", "model")):
        vals = getattr(cfg, key)
        if len(vals) != 1:
            raise SystemExit(f"{what} needs exactly one value of {key}; pass --{flag}")
        picks.append(vals[0])
    return tuple(picks)


def cmd_train(args) -> int:
    cfg = _config(args)
    sex, population, fs_name, model = _single(cfg, "train")
    seed = cfg.seeds[0] if args.seed is None else args.seed
    cohort = _cohort(args, cfg).by_sex(sex)
    tr, va, _ = population_splits(cohort, population, seed, 0, cfg.split_ratios)
    est, history = fit_estimator(model, tr, va, build_feature_set(fs_name, cohort.schema), cfg, seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{sex}_{population}_{fs_name}_{model}_seed{seed}.pt"
    est.save(ckpt)
    if history is not None:
        history.to_csv(ckpt.with_suffix(".history.csv"), index=False, float_format="%.6f")
    print(f"wrote {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise SystemExit("evaluate needs --checkpoint")
    est = load_estimator(args.checkpoint)
    sex = cfg.sexes[0] if len(cfg.sexes) == 1 else None
    population = cfg.populations[0] if len(cfg.populations) == 1 else "whole"
    seed = cfg.seeds[0] if args.seed is None else args.seed
    cohort = _cohort(args, cfg)
    if sex:
        cohort = cohort.by_sex(sex)
    _, _, te = population_splits(cohort, population, seed, 0, cfg.split_ratios)
    estimates = est.estimate(te)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    table = gap_by_morbidity(estimates, te.labels, population, est.kind, est.feature_set)
    table.wide().to_csv(out / "gap_table.csv", index=False, float_format="%.6f")
    days = te.event_days("death")
    rows = []
    for mode in MORTALITY_MODES:
        try:
            rows.append(mortality_regression(estimates, days, mode, population, est.feature_set, est.kind))
        except ValueError as exc:
            log.warning("%s regression skipped: %s", mode, exc)
    mortality_rows_frame(rows).to_csv(out / "mortality.csv", index=False, float_format="%.6f")
    times, events = te.survival_data("death")
    surv = survival_by_gap(estimates, times, events)
    surv.to_frame().to_csv(out / "survival.csv", index=False, float_format="%.6f")
    estimates.to_csv(out / "estimates.csv", index=False, float_format="%.6f")
    a, b = fit_ba_ca_line(estimates)
    summary = {"slope": a, "intercept": b, "logrank_p": surv.p_value, "strata": surv.counts, "n_test": len(te)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    print(json.dumps(summary, default=float))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed + i for i in range(len(cfg.seeds))])
    manifest = run_experiment(cfg, resume=not args.no_resume)
    emit_report(manifest, plots=not args.no_plots)
    n_fail = len(manifest.failures)
    print(f"{len(manifest.runs)} runs, {n_fail} failed, report in {manifest.out_dir}")
    return 1 if n_fail else 0


def cmd_report(args) -> int:
    src = Path(args.out or "results")
    manifest = RunManifest.load(src)
    emit_report(manifest, src, plots=not args.no_plots)
    print(f"report written to {src}")
    return 0


COMMANDS = {
    "generate": (cmd_generate, "draw a synthetic cohort"),
    "analyze": (cmd_analyze, "age-correlation report per population"),
    "train": (cmd_train, "fit one estimator and save its checkpoint"),
    "evaluate": (cmd_evaluate, "score a checkpoint on the test split"),
    "run": (cmd_run, "run the experiment grid and emit the report"),
    "report": (cmd_report, "re-emit the report from a manifest"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bioage", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--population", choices=POPULATIONS)
        p.add_argument("--features", choices=FEATURE_SET_NAMES)
        p.add_argument("--model", choices=MODEL_NAMES)
        p.add_argument("--sex", choices=SEXES)
        p.add_argument("--cohort", type=Path, help="directory of a saved cohort")
        if name == "evaluate":
            p.add_argument("--checkpoint", type=Path)
        if name in ("run", "report"):
            p.add_argument("--no-plots", action="store_true")
        if name == "run":
            p.add_argument("--no-resume", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return COMMANDS[args.command][0](args)


if __name__ == "__main__":
    sys.exit(main())
