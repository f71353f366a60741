"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is echoed in the
terminal summary. Criteria 4-7 and 10 share one set of trained models
(five seeds, both sexes, n=20,000 synthetic subjects).
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np
import pandas as pd
import pytest
import torch
from scipy import stats

import oracles
from bioage.analysis import build_feature_set, mutual_information, pearson, spearman
from bioage.baselines import cac_fit, dnn_fit, kdm_fit
from bioage.cli import main as cli_main
from bioage.cohort import SEXES, BiomarkerModel, CohortTable, GeneratorConfig, generate_cohort
from bioage.evaluation import (
    GapTable,
    fit_ba_ca_line,
    kaplan_meier,
    logrank_test,
    mmd_normal_test,
    paired_difference_test,
    survival_by_gap,
    welch_ttest,
)
from bioage.experiment import DESK_DNN, DESK_TRAIN, DESK_WEIGHTS, ExperimentConfig, population_splits
from bioage.model.losses import (
    ca_loss,
    consistency_loss,
    contrastive_loss,
    mmd_loss,
    mortality_loss,
    reconstruction_loss,
)
from bioage.model.pairs import correct_frame, normal_reference
from bioage.model.training import train
from bioage.schema import default_schema

SEEDS = (0, 1, 2, 3, 4)
N_SUBJECTS = 20_000


# --------------------------------------------------------------------------
# 1. statistics oracles


def test_criterion_01_statistics_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(60):
        n = int(rng.integers(5, 40))
        x = rng.normal(size=n)
        y = 0.5 * x + rng.normal(size=n)
        if rng.random() < 0.3:  # ties
            x = np.round(x, 1)
            y = np.round(y, 1)
        track("pearson", abs(pearson(x, y) - oracles.pearson(list(x), list(y))))
        track("spearman", abs(spearman(x, y) - oracles.spearman(list(x), list(y))))
        m = int(rng.integers(40, 120))
        u = rng.normal(size=m)
        v = u**2 + rng.normal(size=m)
        track("mi", abs(mutual_information(u, v, 16) - oracles.mutual_information(list(u), list(v), 16)))
        a = rng.normal(0, 1, int(rng.integers(3, 30)))
        b = rng.normal(0.5, 2, int(rng.integers(3, 30)))
        t, p = welch_ttest(a, b)
        to, po = oracles.welch(list(a), list(b))
        track("welch", max(abs(t - to), abs(p - po)))
        k = int(rng.integers(4, 30))
        times = rng.integers(1, 20, k).astype(float)
        events = rng.random(k) < 0.6
        events[0] = True
        curve = kaplan_meier(times, events)
        table = oracles.kaplan_meier_table(list(times), list(events))
        track("kaplan_meier", max(abs(s - float(curve.at(t))) for t, s in table))
        split = rng.random(k) < 0.5
        split[0], split[-1] = True, False
        chi2, p = logrank_test((times[split], events[split]), (times[~split], events[~split]))
        co, po = oracles.logrank(times[split], events[split], times[~split], events[~split])
        track("logrank", max(abs(chi2 - co), abs(p - po)))
    elapsed = time.perf_counter() - t0
    ok = all(v < (1e-3 if k == "mi" else 1e-8) for k, v in worst.items()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    criterion(1, "statistics match brute-force oracles on 60 fixtures", ok, detail)
    assert ok


# --------------------------------------------------------------------------
# 2. loss gradients


def _probe(theta: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Ten-parameter scalar-to-scalar network applied elementwise."""
    h = torch.tanh(u.unsqueeze(-1) * theta[0:3] + theta[3:6])
    return h @ theta[6:9] + theta[9]


def _loss_probes():
    g = torch.Generator().manual_seed(7)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    X, U, Y = r(4, 5, 3), r(16), 40 + 10 * r(16)
    Z, perm = r(4, 5, 3), torch.tensor([2, 0, 3, 1])
    ref, u2 = r(16), r(16)
    days = 300 + 200 * torch.rand(16, generator=g, dtype=torch.float64)
    return {
        "recon": lambda th: reconstruction_loss(_probe(th, X), X),
        "ca": lambda th: ca_loss(40 + 10 * _probe(th, U), Y, r2_weight=1.0),
        "dist": lambda th: mmd_loss(_probe(th, U), reference=ref, clamp=False),
        "consist": lambda th: consistency_loss(_probe(th, Z), lambda z: _probe(th, z), lambda z: torch.sin(z),
                                               lambda z: z.sum(-1) * th[0], perm=perm),
        "contrast": lambda th: contrastive_loss(_probe(th, U), _probe(th, u2), margin=5.0),
        "mort": lambda th: mortality_loss(_probe(th, U), days),
    }


def test_criterion_02_loss_gradients(criterion):
    t0 = time.perf_counter()
    theta0 = np.random.default_rng(3).normal(size=10)
    errs = {}
    for name, f in _loss_probes().items():
        th = torch.tensor(theta0, requires_grad=True)
        f(th).backward()
        analytic = th.grad.numpy()
        numeric = oracles.finite_difference_grad(lambda p: float(f(torch.tensor(p))), theta0, 1e-4)
        errs[name] = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in errs.values()) and elapsed < 120
    criterion(2, "six losses match central differences", ok,
              ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. KDM recovery


def _linear_cohort(noise_scale: float, seed: int) -> CohortTable:
    cfg = GeneratorConfig(n_subjects=4000, age_distribution="uniform", aging_rate_sd=0.0, noise_scale=noise_scale,
                          apply_missing=False)
    # traits sit inside the noise term; a pure noise model needs them off
    cfg.biomarkers = {k: dataclasses.replace(v, trait=None, trait_loading=0.0, floor=None)
                      for k, v in cfg.biomarkers.items()}
    return generate_cohort(cfg, seed=seed).by_sex("male")


def test_criterion_03_kdm_recovery(criterion):
    t0 = time.perf_counter()
    fs = build_feature_set("base", default_schema())
    clean = _linear_cohort(0.0, 1)
    ids = clean.ids
    train, test = clean.subset(ids[:2000]), clean.subset(ids[2000:])
    est = kdm_fit(train, fs).estimate(test)
    exact_err = float(np.max(np.abs(est["ba"] - est["ca"])))

    noisy = _linear_cohort(1.0, 2)
    ids = noisy.ids
    model = kdm_fit(noisy.subset(ids[:2000]), fs)
    test = noisy.subset(ids[2000:])
    est = model.estimate(test)
    mae = float(np.mean(np.abs(est["ba"] - est["ca"])))
    # error propagation: BA_E - CA = sum(eps_j k_j / s_j^2) / sum(k_j^2 / s_j^2) with eps_j ~ N(0, s_j^2)
    bms = GeneratorConfig().biomarkers
    k = np.array([bms[n].slope for n in model.features])
    s = np.array([bms[n].noise for n in model.features])
    sigma_ba = 1 / np.sqrt(np.sum(k**2 / s**2))
    n = len(test)
    bound = sigma_ba * np.sqrt(2 / np.pi) + 3 * sigma_ba * np.sqrt(1 - 2 / np.pi) / np.sqrt(n)
    elapsed = time.perf_counter() - t0
    ok = exact_err < 1e-6 and mae <= bound and elapsed < 60
    criterion(3, "KDM exact on noiseless cohort, MAE within propagation bound", ok,
              f"max err {exact_err:.1e}; MAE {mae:.3f} <= bound {bound:.3f}; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# shared trained models for 4-7 and 10


@dataclasses.dataclass
class SexRun:
    model: object
    train: CohortTable
    test: CohortTable
    estimates: pd.DataFrame
    dnn_estimates: pd.DataFrame


@pytest.fixture(scope="module")
def trained():
    runs = {}
    t0 = time.perf_counter()
    fs_cache = {}
    for seed in SEEDS:
        cohort = generate_cohort(GeneratorConfig(n_subjects=N_SUBJECTS), seed=seed)
        fs = fs_cache.setdefault("base", build_feature_set("base", cohort.schema))
        runs[seed] = {}
        for sex in SEXES:
            tr, va, te = population_splits(cohort.by_sex(sex), "whole", seed)
            model, _ = train(tr, va, fs, DESK_WEIGHTS, dataclasses.replace(DESK_TRAIN, seed=seed))
            dnn = dnn_fit(tr, va, fs, dataclasses.replace(DESK_DNN, seed=seed))
            runs[seed][sex] = SexRun(model, tr, te, model.estimate(te), dnn.estimate(te))
        runs[seed]["mortality_rate"] = float((cohort.events["event_type"] == "death").sum() / len(cohort))
    runs["seconds"] = time.perf_counter() - t0
    return runs


def _pooled(run: dict, attr: str = "estimates"):
    est = pd.concat([getattr(run[s], attr) for s in SEXES], ignore_index=True)
    labels = pd.concat([run[s].test.labels for s in SEXES], ignore_index=True)
    surv = [run[s].test.survival_data("death") for s in SEXES]
    times = np.concatenate([t for t, _ in surv])
    events = np.concatenate([e for _, e in surv])
    return est, labels, times, events


def test_criterion_04_morbidity_ordering(trained, criterion):
    ordered, pvals, notes = 0, [], []
    for seed in SEEDS:
        est, labels, _, _ = _pooled(trained[seed])
        g, ov = est["gap"].to_numpy(), labels["overall"].to_numpy()
        means = [g[ov == s].mean() for s in ("healthy", "average", "unhealthy")]
        ordered += means[0] < means[1] < means[2]
        pvals.append(welch_ttest(g[ov == "healthy"], g[ov == "unhealthy"])[1])
        notes.append("/".join(f"{m:+.2f}" for m in means))
    ok = ordered >= 4 and max(pvals) < 0.01
    criterion(4, "healthy < average < unhealthy mean gaps, Welch p < 0.01", ok,
              f"ordered in {ordered}/5 seeds ({'; '.join(notes)}); max Welch p {max(pvals):.1e}; "
              f"training {trained['seconds'] / 60:.1f} min")
    assert ok


def test_criterion_05_mortality_correlation(trained, criterion):
    pccs = []
    for seed in SEEDS:
        est, _, times, events = _pooled(trained[seed])
        pccs.append(pearson(est["gap"].to_numpy()[events], times[events]))
    ok = max(pccs) <= -0.1
    criterion(5, "test PCC(gap, days to death) <= -0.1 among deceased", ok,
              "PCC per seed " + ", ".join(f"{p:+.3f}" for p in pccs))
    assert ok


def _dm_pair_effect(run: dict) -> tuple[float, float]:
    orig, corr = [], []
    for sex in SEXES:
        r = run[sex]
        ill = (r.test.labels["dm"] == "illness").to_numpy()
        fixed = correct_frame(r.test.frame, r.test.labels, normal_reference(r.train))
        mu_corr, _ = r.model.gap_params(fixed)
        orig.append(r.estimates["gap"].to_numpy()[ill])
        corr.append(mu_corr[ill])
    mean, _, p = paired_difference_test(np.concatenate(orig), np.concatenate(corr))
    return mean, p


def test_criterion_06_contrastive_effect(trained, criterion):
    seed = SEEDS[0]
    mean_on, p_on = _dm_pair_effect(trained[seed])
    ablation = {}
    cohort = generate_cohort(GeneratorConfig(n_subjects=N_SUBJECTS), seed=seed)
    fs = build_feature_set("base", cohort.schema)
    for sex in SEXES:
        tr, va, te = population_splits(cohort.by_sex(sex), "whole", seed)
        model, _ = train(tr, va, fs, dataclasses.replace(DESK_WEIGHTS, contrast=0.0),
                         dataclasses.replace(DESK_TRAIN, seed=seed))
        ablation[sex] = SexRun(model, tr, te, model.estimate(te), None)
    mean_off, p_off = _dm_pair_effect(ablation)
    on_ok = mean_on > 0 and p_on < 0.05
    off_ok = not (mean_off > 0 and p_off < 0.05)
    criterion(6, "DM gap(original) - gap(corrected) > 0 with contrast, not with it ablated", on_ok and off_ok,
              f"with: {mean_on:+.3f} y (p={p_on:.1e}); ablated: {mean_off:+.3f} y (p={p_off:.1e})")
    assert on_ok and off_ok


def _separates(est, times, events) -> tuple[bool, float, float]:
    s = survival_by_gap(est, times, events)
    return bool(s.p_value < 0.05 and s.excess_ratio > 1), s.p_value, s.excess_ratio


def test_criterion_07_survival_separation(trained, criterion):
    rates = [trained[s]["mortality_rate"] for s in SEEDS]
    proposed, dnn, notes = [], [], []
    for seed in SEEDS:
        est, _, times, events = _pooled(trained[seed])
        ok_p, p_p, r_p = _separates(est, times, events)
        est_d, _, _, _ = _pooled(trained[seed], "dnn_estimates")
        ok_d, p_d, r_d = _separates(est_d, times, events)
        proposed.append(ok_p)
        dnn.append(ok_d)
        notes.append(f"s{seed}: model p={p_p:.0e} x{r_p:.1f}, dnn p={p_d:.0e} x{r_d:.1f}")
    ok = all(proposed) and sum(not d for d in dnn) >= 3 and all(0.08 <= r <= 0.12 for r in rates)
    criterion(7, "log-rank separates gap strata for the model, not for the DNN", ok,
              f"mortality {np.mean(rates):.1%}; model {sum(proposed)}/5, dnn fails {sum(not d for d in dnn)}/5; "
              + "; ".join(notes))
    assert ok


def test_criterion_08_cac_regression_to_mean(criterion):
    cfg = GeneratorConfig(n_subjects=6000, age_distribution="uniform", age_min=20, age_max=80)
    cohort = generate_cohort(cfg, seed=8).by_sex("female")
    ids = cohort.ids
    train_split, test_split = cohort.subset(ids[: len(ids) // 2]), cohort.subset(ids[len(ids) // 2:])
    model = cac_fit(train_split, build_feature_set("base", cohort.schema))
    est = model.estimate(test_split)
    a, b = fit_ba_ca_line(est)
    bounded = est["ba"].between(model.mean_ca.min(), model.mean_ca.max()).all()
    ok = a < 1 and bool(bounded)
    criterion(8, "CAC BA-vs-CA slope below 1 on ages 20-80", ok, f"a={a:.3f}, b={b:.2f}, bounded={bounded}")
    assert ok


def test_criterion_09_pipeline_reproducibility(tmp_path, criterion):
    cfg = ExperimentConfig(generator={"n_subjects": 3000}, populations=["whole"], feature_sets=["base"],
                           models=["kdm", "cac", "proposed"], sexes=["male"], seeds=[0],
                           train=dataclasses.replace(DESK_TRAIN, max_epochs=3))
    path = tmp_path / "config.yaml"
    cfg.save(path)
    for name in ("a", "b"):
        assert cli_main(["run", "--config", str(path), "--out", str(tmp_path / name), "--no-plots"]) == 0
    same = {}
    for model in ("kdm", "cac"):
        for kind in ("gap", "mortality"):
            f = f"tables/{kind}_male_whole_base_{model}.csv"
            same[f"{kind}/{model}"] = (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    runs = [tmp_path / n / "runs/male_whole_base_proposed/seed0/gap_table.csv" for n in ("a", "b")]
    ma, mb = (GapTable.from_csv(p).cells["mean"].to_numpy() for p in runs)
    diff = float(np.nanmax(np.abs(ma - mb)))
    ok = all(same.values()) and diff < 1e-4 and np.array_equal(np.isnan(ma), np.isnan(mb))
    criterion(9, "identical config gives identical tables", ok,
              f"kdm/cac byte-identical: {all(same.values())}; proposed max mean diff {diff:.1e}")
    assert ok


def test_criterion_10_mmd_behavior(trained, criterion):
    pvals = {}
    for sex in SEXES:
        r = trained[SEEDS[0]][sex]
        gaps = r.model.sample_gaps(r.test, seed=10)
        _, pvals[sex] = mmd_normal_test(gaps, scale=r.model.config.gap_prior_std, seed=10, n_permutations=200)
    ok = all(p >= 0.05 for p in pvals.values())
    criterion(10, "sampled test gaps pass MMD test against the training target", ok,
              ", ".join(f"{k} p={v:.3f}" for k, v in pvals.items()))
    assert ok
