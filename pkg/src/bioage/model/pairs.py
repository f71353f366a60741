"""Corrected counterparts of diseased subjects for the contrastive loss."""
from __future__ import annotations

import logging
from copy import deepcopy

import numpy as np
import pandas as pd

from ..cohort import (
    HEALTHY,
    HISTORY,
    ILLNESS,
    MEDICATED,
    NORMAL,
    SEXES,
    WITH_DISEASE,
    CohortTable,
    MorbidityLabel,
    SubjectRecord,
)
from ..schema import DISEASES, Schema

log = logging.getLogger(__name__)

# metabolic syndrome first so the disease-specific normal means win on shared biomarkers
CORRECTION_ORDER = ("ms", "dm", "hbp", "dlp", "cancer", "cvd", "cva")

NormalReference = dict  # {(disease, sex): {feature: value}}


def normal_reference(train: CohortTable) -> NormalReference:
    """Sex-specific means of each disease's tagged biomarkers among subjects normal for it.

    Falls back to the midpoint of the schema normal range when a sex has no
    normal subjects or no observed values.
    """
    frame, labels, schema = train.frame, train.labels, train.schema
    ref: NormalReference = {}
    for disease in DISEASES:
        tagged = [n for n in schema.tagged(disease) if n in frame]
        normal_state = NORMAL if disease in ("dm", "hbp", "dlp") else HEALTHY
        for sex in SEXES:
            rows = (frame["sex"] == sex).to_numpy() & (labels[disease] == normal_state).to_numpy()
            values = {}
            for name in tagged:
                x = frame.loc[rows, name].to_numpy(dtype=float)
                x = x[~np.isnan(x)]
                if len(x):
                    values[name] = float(x.mean())
                else:
                    feat = schema[name]
                    values[name] = 0.5 * (feat.normal_low + feat.normal_high)
            ref[(disease, sex)] = values
    return ref


def make_corrected_pair(record: SubjectRecord, label: MorbidityLabel, reference: NormalReference) -> SubjectRecord:
    """Copy of ``record`` with every illness's tagged biomarkers set to normal means.

    Medication and history flags of the corrected diseases are cleared so
    that the counterpart is normal for them. A subject without illness is
    returned unchanged.
    """
    corrected = deepcopy(record)
    illnesses = label.illnesses
    if not illnesses:
        log.debug("subject %s has no illness; corrected pair is the identity", record.id)
        return corrected
    for disease in (d for d in CORRECTION_ORDER if d in illnesses):
        for name, value in reference.get((disease, record.sex), {}).items():
            corrected.biomarkers[name] = value
        if disease in MEDICATED:
            corrected.medication[disease] = False
        if disease in HISTORY:
            corrected.history[disease] = False
    return corrected


def correct_frame(frame: pd.DataFrame, labels: pd.DataFrame, reference: NormalReference) -> pd.DataFrame:
    """Vectorised :func:`make_corrected_pair` over a cohort frame."""
    out = frame.copy()
    for disease in CORRECTION_ORDER:
        ill = labels[disease].isin([ILLNESS, WITH_DISEASE]).to_numpy()
        for sex in SEXES:
            rows = ill & (frame["sex"] == sex).to_numpy()
            if not rows.any():
                continue
            for name, value in reference.get((disease, sex), {}).items():
                if name in out:
                    out.loc[rows, name] = value
            if disease in MEDICATED and f"med_{disease}" in out:
                out.loc[rows, f"med_{disease}"] = False
            if disease in HISTORY and f"hx_{disease}" in out:
                out.loc[rows, f"hx_{disease}"] = False
    return out


def reference_to_json(reference: NormalReference) -> dict:
    return {f"{d}|{s}": v for (d, s), v in reference.items()}


def reference_from_json(data: dict) -> NormalReference:
    return {tuple(k.split("|")): dict(v) for k, v in data.items()}
