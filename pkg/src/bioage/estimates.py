"""Shared pieces of every BA estimator: results, preprocessing, checkpoints."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .cohort import CohortTable, SubjectRecord, impute_and_mask, training_means

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class BaEstimate:
    id: str
    ca: float
    gap: float
    ba: float

    @classmethod
    def from_gap(cls, id: str, ca: float, gap: float) -> "BaEstimate":
        # store the gap actually realised by ba - ca so the identity is exact in floating point
        ba = float(ca) + float(gap)
        return cls(id, float(ca), ba - float(ca), ba)

    @classmethod
    def from_ba(cls, id: str, ca: float, ba: float) -> "BaEstimate":
        return cls(id, float(ca), float(ba) - float(ca), float(ba))


def estimates_frame(ids, ca, gap=None, ba=None) -> pd.DataFrame:
    """Columns ``id, ca, gap, ba`` with ``ba - ca == gap`` exactly."""
    ca = np.asarray(ca, dtype=float)
    if ba is None:
        ba = ca + np.asarray(gap, dtype=float)
    ba = np.asarray(ba, dtype=float)
    return pd.DataFrame({"id": np.asarray(ids), "ca": ca, "gap": ba - ca, "ba": ba})


def record_frame(record: SubjectRecord) -> pd.DataFrame:
    """One-row cohort-style frame built from a single record."""
    row = {"id": record.id, "sex": record.sex, "chronological_age": record.chronological_age}
    row.update(record.biomarkers)
    return pd.DataFrame([row])


@dataclass
class FeaturePipeline:
    """Mean imputation with mask, then z-scoring by training statistics."""

    names: list[str]
    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, train: CohortTable | pd.DataFrame, features) -> "FeaturePipeline":
        frame = train.frame if isinstance(train, CohortTable) else train
        names = [n for n in features if n in frame]
        raw = frame[names].to_numpy(dtype=float)
        means = training_means(raw)
        keep = ~np.isnan(means)
        raw = raw[:, keep]
        kept = [n for n, k in zip(names, keep) if k]
        stds = np.nanstd(raw, axis=0)
        stds = np.where(stds > 1e-12, stds, 1.0)
        return cls(kept, means[keep], stds)

    def transform(self, data: CohortTable | pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
        frame = data.frame if isinstance(data, CohortTable) else data
        unknown = [n for n in self.names if n not in frame]
        if unknown:
            raise KeyError(f"input lacks fitted features {unknown}")
        imputed, mask, _ = impute_and_mask(frame[self.names].to_numpy(dtype=float), self.means, names=self.names)
        return (imputed - self.means) / self.stds, mask

    def state(self) -> dict:
        return {"names": list(self.names), "means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "FeaturePipeline":
        return cls(list(state["names"]), np.asarray(state["means"], float), np.asarray(state["stds"], float))


def save_checkpoint(path: str | Path, kind: str, schema_hash: str, feature_set: str, pipeline: FeaturePipeline,
                    payload: dict) -> None:
    """Self-describing container shared by the proposed model and the baselines."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "schema_hash": schema_hash,
        "feature_set": feature_set,
        "pipeline": pipeline.state(),
        "payload": payload,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    if kind is not None and blob["kind"] != kind:
        raise ValueError(f"{path}: checkpoint holds a {blob['kind']!r} estimator, expected {kind!r}")
    return blob


class SchemaMismatchError(ValueError):
    pass


def check_schema(expected_hash: str, cohort: CohortTable) -> None:
    if cohort.schema.hash() != expected_hash:
        raise SchemaMismatchError(
            f"cohort schema hash {cohort.schema.hash()} differs from the fitted schema {expected_hash}"
        )
