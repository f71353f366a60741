"""Train the token transformer gap model and check what it has learned.

The model predicts a gap distribution per subject; BA is CA plus the gap.
We check that the gap orders health states, that it tracks time to death,
and that the gap strata separate on Kaplan-Meier curves.
Run with ``python demos/03_gap_model.py``; takes a few minutes on one core.
"""
import dataclasses

import numpy as np

from bioage.analysis import build_feature_set, pearson
from bioage.cohort import GeneratorConfig, generate_cohort
from bioage.evaluation import gap_by_morbidity, survival_by_gap
from bioage.experiment import DESK_TRAIN, DESK_WEIGHTS, population_splits
from bioage.model.training import train

cohort = generate_cohort(GeneratorConfig(n_subjects=10000), seed=2).by_sex("female")
tr, va, te = population_splits(cohort, "whole", seed=0)
fs = build_feature_set("base", cohort.schema)
model, history = train(tr, va, fs, DESK_WEIGHTS, dataclasses.replace(DESK_TRAIN, max_epochs=20))
print(f"trained {len(history)} epochs, best at {model.best_epoch}")
print(history[["epoch", "train_total", "val_total", "val_ca", "val_mort"]].round(3).to_string(index=False))

est = model.estimate(te)
table = gap_by_morbidity(est, te.labels, "whole", "proposed", "base")
wide = table.wide().set_index("group")
print("\nmean gap by overall state")
print(wide.loc[["overall"], ["healthy", "average", "unhealthy", "ordering"]].round(2).to_string())
print("\nmean gap by disease state")
print(wide.loc[["dm", "hbp", "dlp"], ["normal", "pre", "illness", "ordering"]].round(2).to_string())

days = te.event_days("death")
dead = np.isfinite(days)
print(f"\nPCC(gap, days to death) among {dead.sum()} deceased: {pearson(est['gap'][dead], days[dead]):+.3f}")

times, events = te.survival_data("death")
surv = survival_by_gap(est, times, events)
print(f"log-rank healthy vs unhealthy: chi2={surv.chi2:.2f}, p={surv.p_value:.1e}, strata {surv.counts}")
