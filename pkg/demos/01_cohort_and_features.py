"""Draw a synthetic check-up cohort, label morbidity, and screen features for age correlation.

Run with ``python demos/01_cohort_and_features.py``; takes a few seconds.
"""
import numpy as np

from bioage.analysis import build_feature_set, select_age_correlated_features
from bioage.cohort import GeneratorConfig, assign_population_groups, generate_cohort

cohort = generate_cohort(GeneratorConfig(n_subjects=5000), seed=0)
print(f"{len(cohort)} subjects, {len(cohort.feature_names)} features")
print(f"deaths during follow-up: {np.isfinite(cohort.event_days('death')).mean():.1%}")

# every subject gets a tri-state per disease and an overall health state
print("\noverall health states")
print(cohort.labels["overall"].value_counts().to_string())
print("\ndiabetes states")
print(cohort.labels["dm"].value_counts().to_string())

# training populations are nested: super normal within normal within average within whole
groups = assign_population_groups(cohort)
print("\npopulation sizes")
for name, group in groups.items():
    print(f"  {name:<13}{len(group):>6}")

# features that track age in the whole cohort; a lung volume marker should be among them
report = select_age_correlated_features(cohort, groups["whole"])
print("\nage-correlated features (whole cohort):", ", ".join(report.flagged("all", "whole")))

for name in ("base", "morbidity_related"):
    fs = build_feature_set(name, cohort.schema)
    print(f"{name} feature set: {len(fs)} features")
