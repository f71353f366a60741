"""Fit the KDM and CAC baselines and look at how their estimates relate to chronological age.

CAC averages the mean ages of nearby clusters, so its estimates are pulled toward
the middle of the age range; the fitted BA-vs-CA slope comes out below one.
Run with ``python demos/02_baselines.py``; takes under a minute.
"""
from bioage.analysis import build_feature_set
from bioage.baselines import cac_fit, kdm_fit
from bioage.cohort import GeneratorConfig, generate_cohort
from bioage.evaluation import fit_ba_ca_line, gap_by_morbidity
from bioage.experiment import population_splits

cohort = generate_cohort(GeneratorConfig(n_subjects=8000), seed=1).by_sex("male")
train, _, test = population_splits(cohort, "normal", seed=0)
fs = build_feature_set("base", cohort.schema)

for name, model in (("kdm", kdm_fit(train, fs)), ("cac", cac_fit(train, fs))):
    est = model.estimate(test)
    a, b = fit_ba_ca_line(est)
    print(f"\n{name}: BA = {a:.3f} * CA + {b:.2f}")
    table = gap_by_morbidity(est, test.labels, "normal", name, "base")
    print(table.wide()[["group", "healthy", "average", "unhealthy", "ordering", "bold"]]
          .query("group == 'overall'").to_string(index=False))
