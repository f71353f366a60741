"""Comparison estimators: Klemera-Doubal (KDM), age-cluster centroids (CAC) and a CA-regression DNN."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn

from .analysis import FeatureSet
from .cohort import CohortTable, SubjectRecord
from .estimates import (
    BaEstimate,
    FeaturePipeline,
    check_schema,
    estimates_frame,
    load_checkpoint,
    record_frame,
    save_checkpoint,
)
from .schema import Schema

log = logging.getLogger(__name__)

KDM_EXCLUDED_KINDS = ("categorical", "ca_derived", "tumor_marker", "eyesight")
MODEL_NAMES = ("proposed", "kdm", "cac", "dnn")


def kdm_screen(features, schema: Schema) -> list[str]:
    """Drop tumour markers, eyesight, categorical and CA-derived features."""
    return [n for n in features if n in schema and schema[n].kind not in KDM_EXCLUDED_KINDS]


class _Estimator:
    """Shared scoring helpers; subclasses implement ``_ba(frame)``."""

    kind = ""
    schema_hash: str
    feature_set: str

    def _ba(self, frame: pd.DataFrame) -> np.ndarray:
        raise NotImplementedError

    def estimate(self, cohort: CohortTable) -> pd.DataFrame:
        """BA estimates for every subject: columns ``id, ca, gap, ba``."""
        check_schema(self.schema_hash, cohort)
        ba = self._ba(cohort.frame)
        return estimates_frame(cohort.frame["id"], cohort.frame["chronological_age"], ba=ba)

    def estimate_record(self, record: SubjectRecord) -> BaEstimate:
        ba = self._ba(record_frame(record))
        return BaEstimate.from_ba(record.id, record.chronological_age, float(ba[0]))


def _raw(frame: pd.DataFrame, names: list[str]) -> np.ndarray:
    unknown = [n for n in names if n not in frame]
    if unknown:
        raise KeyError(f"input lacks fitted features {unknown}")
    return frame[names].to_numpy(dtype=float)


# --------------------------------------------------------------------------
# KDM


@dataclass
class KdmModel(_Estimator):
    """Per-biomarker lines ``x_j = k_j * CA + q_j`` with residual scale ``s_j``.

    ``s_ba2`` is the variance of the BA-CA deviation used by the
    ``with_ca_term`` variant.
    """

    features: list[str]
    k: np.ndarray
    q: np.ndarray
    s: np.ndarray
    variant: str = "without_ca"
    s_ba2: float = float("nan")
    schema_hash: str = ""
    feature_set: str = ""
    kind = "kdm"

    def _ba(self, frame: pd.DataFrame) -> np.ndarray:
        x = _raw(frame, self.features)
        obs = ~np.isnan(x)
        if not obs.any(axis=1).all():
            raise ValueError("every KDM biomarker is missing for at least one subject; refusing to estimate")
        w = np.where(obs, self.k / self.s**2, 0.0)
        num = np.sum(np.where(obs, x - self.q, 0.0) * w, axis=1)
        den = np.sum(np.where(obs, (self.k / self.s) ** 2, 0.0), axis=1)
        if self.variant == "with_ca_term":
            ca = frame["chronological_age"].to_numpy(dtype=float)
            num = num + ca / self.s_ba2
            den = den + 1.0 / self.s_ba2
        return num / den

    def save(self, path: str | Path) -> None:
        payload = {"k": self.k.tolist(), "q": self.q.tolist(), "s": self.s.tolist(), "variant": self.variant,
                   "s_ba2": self.s_ba2}
        pipeline = FeaturePipeline(list(self.features), np.zeros(len(self.features)), np.ones(len(self.features)))
        save_checkpoint(path, self.kind, self.schema_hash, self.feature_set, pipeline, payload)

    @classmethod
    def load(cls, path: str | Path) -> "KdmModel":
        blob = load_checkpoint(path, cls.kind)
        p = blob["payload"]
        return cls(blob["pipeline"]["names"], np.asarray(p["k"]), np.asarray(p["q"]), np.asarray(p["s"]),
                   p["variant"], p["s_ba2"], blob["schema_hash"], blob["feature_set"])


def kdm_fit(train: CohortTable, feature_set: FeatureSet, variant: str = "without_ca", screen: bool = True,
            r_tol: float = 1e-8, s_floor: float = 1e-9) -> KdmModel:
    """Least-squares age lines per biomarker, on each biomarker's observed rows.

    Biomarkers with zero variance or |corr(x, CA)| below ``r_tol`` are
    dropped. Residual scales are floored at ``s_floor`` times the biomarker's
    standard deviation so noiseless data stay finite.
    """
    if variant not in ("without_ca", "with_ca_term"):
        raise ValueError(f"unknown KDM variant {variant!r}")
    frame = train.frame
    ca = frame["chronological_age"].to_numpy(dtype=float)
    if len(np.unique(ca)) < 2:
        raise ValueError("KDM needs at least two distinct chronological ages")
    names = kdm_screen(feature_set.members, train.schema) if screen else list(feature_set.members)
    kept, ks, qs, ss, rs = [], [], [], [], []
    for name in names:
        x = frame[name].to_numpy(dtype=float)
        ok = ~np.isnan(x)
        if ok.sum() < 3 or len(np.unique(ca[ok])) < 2:
            log.info("KDM: %s has too few observations; dropped", name)
            continue
        xo, co = x[ok], ca[ok]
        sx = xo.std()
        if sx == 0:
            log.info("KDM: %s has zero variance; dropped", name)
            continue
        k, q = np.polyfit(co, xo, 1)
        r = np.corrcoef(co, xo)[0, 1]
        if abs(r) < r_tol:
            log.info("KDM: %s is unrelated to age (r=%.2e); dropped", name, r)
            continue
        resid = xo - (k * co + q)
        s = max(resid.std(ddof=2) if ok.sum() > 2 else 0.0, s_floor * sx)
        kept.append(name)
        ks.append(k)
        qs.append(q)
        ss.append(s)
        rs.append(min(abs(r), 1 - 1e-12))
    if not kept:
        raise ValueError("no usable KDM biomarkers")
    model = KdmModel(kept, np.array(ks), np.array(qs), np.array(ss), "without_ca", float("nan"),
                     train.schema.hash(), feature_set.name)
    if variant == "with_ca_term":
        model.s_ba2 = _kdm_s_ba2(model, frame, ca, np.array(rs))
        model.variant = variant
    return model


def _kdm_s_ba2(model: KdmModel, frame: pd.DataFrame, ca: np.ndarray, r: np.ndarray) -> float:
    """Variance of the true BA-CA deviation.

    The variance of ``BA_E - CA`` minus the part explained by estimation
    error of ``BA_E``, approximated through the characteristic correlation
    of the biomarker set.
    """
    diff = model._ba(frame) - ca
    rchar = np.sum(r**2 / np.sqrt(1 - r**2)) / np.sum(r / np.sqrt(1 - r**2))
    m = len(r)
    span = ca.max() - ca.min()
    s2 = diff.var(ddof=1) - (1 - rchar**2) / rchar**2 * span**2 / (12 * m)
    if not s2 > 0:
        log.warning("KDM: estimated s_BA^2 is not positive (%.3g); using var(BA_E - CA)", s2)
        s2 = diff.var(ddof=1)
    return float(max(s2, 1e-12))


def kdm_estimate(model: KdmModel, record: SubjectRecord) -> BaEstimate:
    return model.estimate_record(record)


# --------------------------------------------------------------------------
# CAC


@dataclass
class CacModel(_Estimator):
    """Age-bin centroids in globally z-scored feature space."""

    pipeline: FeaturePipeline
    edges: np.ndarray  # bin edges, len = n_bins + 1
    centroids: np.ndarray  # (n_bins, n_features)
    spreads: np.ndarray  # per-bin feature std
    mean_ca: np.ndarray  # (n_bins,)
    k_neighbors: int = 3
    eps: float = 1e-6
    schema_hash: str = ""
    feature_set: str = ""
    kind = "cac"

    def _ba(self, frame: pd.DataFrame) -> np.ndarray:
        raw = _raw(frame, self.pipeline.names)
        if np.isnan(raw).all(axis=1).any():
            raise ValueError("every CAC feature is missing for at least one subject; refusing to estimate")
        z, _ = self.pipeline.transform(frame)
        d = np.sqrt(((z[:, None, :] - self.centroids[None]) ** 2).sum(-1))
        k = min(self.k_neighbors, len(self.mean_ca))
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        dn = np.take_along_axis(d, nearest, axis=1)
        w = 1.0 / (dn + self.eps)
        return (w * self.mean_ca[nearest]).sum(1) / w.sum(1)

    def save(self, path: str | Path) -> None:
        payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in {
            "edges": self.edges, "centroids": self.centroids, "spreads": self.spreads, "mean_ca": self.mean_ca,
            "k_neighbors": self.k_neighbors, "eps": self.eps}.items()}
        save_checkpoint(path, self.kind, self.schema_hash, self.feature_set, self.pipeline, payload)

    @classmethod
    def load(cls, path: str | Path) -> "CacModel":
        blob = load_checkpoint(path, cls.kind)
        p = blob["payload"]
        return cls(FeaturePipeline.from_state(blob["pipeline"]), np.asarray(p["edges"]), np.asarray(p["centroids"]),
                   np.asarray(p["spreads"]), np.asarray(p["mean_ca"]), p["k_neighbors"], p["eps"],
                   blob["schema_hash"], blob["feature_set"])


def age_bins(ca: np.ndarray, width: float, min_count: int = 1) -> np.ndarray:
    """Bin edges of ``width`` years covering ``ca``; sparse bins merged into a neighbour."""
    lo = math.floor(ca.min() / width) * width
    hi = lo + width * max(1, math.ceil((ca.max() - lo) / width + 1e-12))
    if hi <= ca.max():
        hi += width
    edges = list(np.arange(lo, hi + width / 2, width))
    while len(edges) > 2:
        counts = np.histogram(ca, bins=edges)[0]
        sparse = np.flatnonzero(counts < min_count)
        if not len(sparse):
            break
        i = int(sparse[0])
        # merge with the next bin, or with the previous one at the upper end
        del edges[i + 1 if i + 1 < len(edges) - 1 else i]
    return np.asarray(edges, dtype=float)


def cac_fit(train: CohortTable, feature_set: FeatureSet, bin_width_years: float = 5.0, k_neighbors: int = 3,
            eps: float = 1e-6, min_bin_count: int = 1) -> CacModel:
    """Per-age-bin feature centroids and mean CA."""
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be at least 1")
    frame = train.frame
    ca = frame["chronological_age"].to_numpy(dtype=float)
    edges = age_bins(ca, bin_width_years, min_bin_count)
    if len(edges) < 3:
        raise ValueError("CAC needs at least two non-empty age bins")
    pipeline = FeaturePipeline.fit(train, feature_set.members)
    z, _ = pipeline.transform(train)
    which = np.clip(np.searchsorted(edges, ca, side="right") - 1, 0, len(edges) - 2)
    n_bins = len(edges) - 1
    centroids = np.stack([z[which == b].mean(0) for b in range(n_bins)])
    spreads = np.stack([z[which == b].std(0) for b in range(n_bins)])
    mean_ca = np.array([ca[which == b].mean() for b in range(n_bins)])
    return CacModel(pipeline, edges, centroids, spreads, mean_ca, k_neighbors, eps, train.schema.hash(),
                    feature_set.name)


def cac_estimate(model: CacModel, record: SubjectRecord) -> BaEstimate:
    return model.estimate_record(record)


# --------------------------------------------------------------------------
# DNN


@dataclass
class DnnConfig:
    hidden: tuple[int, ...] = (512, 512, 512)
    batch_size: int = 2000
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError("hidden widths must be positive")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DnnConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def _mlp(n_in: int, hidden: tuple[int, ...]) -> nn.Sequential:
    layers, width = [], n_in
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ReLU()]
        width = h
    layers.append(nn.Linear(width, 1))
    return nn.Sequential(*layers)


@dataclass
class DnnModel(_Estimator):
    """Feed-forward CA regressor; its prediction is taken as BA."""

    network: nn.Sequential
    pipeline: FeaturePipeline
    ca_center: float
    ca_scale: float
    config: DnnConfig = field(default_factory=DnnConfig)
    schema_hash: str = ""
    feature_set: str = ""
    history: pd.DataFrame | None = None
    kind = "dnn"

    @torch.no_grad()
    def _ba(self, frame: pd.DataFrame) -> np.ndarray:
        z, _ = self.pipeline.transform(frame)
        self.network.eval()
        out = self.network(torch.as_tensor(z, dtype=torch.float32)).squeeze(-1).double().numpy()
        return self.ca_center + self.ca_scale * out

    def save(self, path: str | Path) -> None:
        payload = {"state_dict": self.network.state_dict(), "ca_center": self.ca_center, "ca_scale": self.ca_scale,
                   "config": self.config.to_dict()}
        save_checkpoint(path, self.kind, self.schema_hash, self.feature_set, self.pipeline, payload)

    @classmethod
    def load(cls, path: str | Path) -> "DnnModel":
        blob = load_checkpoint(path, cls.kind)
        p = blob["payload"]
        cfg = DnnConfig.from_dict(p["config"])
        pipeline = FeaturePipeline.from_state(blob["pipeline"])
        net = _mlp(len(pipeline.names), cfg.hidden)
        net.load_state_dict(p["state_dict"])
        return cls(net, pipeline, p["ca_center"], p["ca_scale"], cfg, blob["schema_hash"], blob["feature_set"])


def dnn_fit(train: CohortTable, val: CohortTable, feature_set: FeatureSet, config: DnnConfig | None = None) -> DnnModel:
    """Supervised CA regression with early stopping on validation MSE."""
    cfg = config or DnnConfig()
    y_tr = train.frame["chronological_age"].to_numpy(dtype=float)
    if len(y_tr) < 2 or y_tr.std() == 0:
        raise ValueError("DNN training needs a non-constant chronological-age target")
    pipeline = FeaturePipeline.fit(train, feature_set.members)
    center, scale = float(y_tr.mean()), float(y_tr.std())
    to_t = lambda a: torch.as_tensor(a, dtype=torch.float32)
    x_tr = to_t(pipeline.transform(train)[0])
    x_va = to_t(pipeline.transform(val)[0])
    t_tr = to_t((y_tr - center) / scale)
    t_va = to_t((val.frame["chronological_age"].to_numpy(dtype=float) - center) / scale)

    torch.manual_seed(cfg.seed)
    net = _mlp(x_tr.shape[1], cfg.hidden)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    best, best_state, waited, rows = math.inf, copy.deepcopy(net.state_dict()), 0, []
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        order = torch.randperm(len(t_tr), generator=gen)
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss = ((net(x_tr[idx]).squeeze(-1) - t_tr[idx]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        net.eval()
        with torch.no_grad():
            val_mse = float(((net(x_va).squeeze(-1) - t_va) ** 2).mean()) * scale**2
        train_mse = total / len(order) * scale**2
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise FloatingPointError(f"DNN training diverged at epoch {epoch}")
        rows.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        if val_mse < best:
            best, best_state, waited = val_mse, copy.deepcopy(net.state_dict()), 0
        else:
            waited += 1
            if waited >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return DnnModel(net, pipeline, center, scale, cfg, train.schema.hash(), feature_set.name, pd.DataFrame(rows))


def dnn_estimate(model: DnnModel, record: SubjectRecord) -> BaEstimate:
    return model.estimate_record(record)


def load_estimator(path: str | Path):
    """Load any checkpoint written by this package, dispatching on its kind tag."""
    from .model.training import TrainedGapModel

    kind = load_checkpoint(path)["kind"]
    classes = {"kdm": KdmModel, "cac": CacModel, "dnn": DnnModel, TrainedGapModel.kind: TrainedGapModel}
    if kind not in classes:
        raise ValueError(f"{path}: unknown estimator kind {kind!r}")
    return classes[kind].load(path)
