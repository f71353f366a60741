"""Joint optimisation of the gap model and BA estimation with a trained model."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from ..analysis import FeatureSet
from ..cohort import CohortTable, SubjectRecord
from ..estimates import (
    BaEstimate,
    FeaturePipeline,
    check_schema,
    estimates_frame,
    load_checkpoint,
    record_frame,
    save_checkpoint,
)
from .losses import (
    LOSS_NAMES,
    LossWeights,
    ca_loss,
    consistency_loss,
    contrastive_loss,
    mmd_loss,
    mortality_loss,
    reconstruction_loss,
    total_loss,
)
from .network import GapModel, sample_gap
from .pairs import correct_frame, normal_reference

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "gap_model"


@dataclass
class TrainConfig:
    batch_size: int = 2000
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 100
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int = 1024
    d_model: int = 128
    head_hidden: int = 64
    dropout: float = 0.0
    attention: str = "softmax"
    gap_prior_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "n_layers", "n_heads", "d_ff", "d_model", "head_hidden"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be a positive integer")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        if not self.gap_prior_std > 0:
            raise ValueError("gap_prior_std must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def network_kwargs(self) -> dict:
        return dict(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
                    dropout=self.dropout, head_hidden=self.head_hidden, attention=self.attention)


@dataclass
class _Tensors:
    x: torch.Tensor
    mask: torch.Tensor
    ca: torch.Tensor
    days: torch.Tensor  # days to death, NaN when censored
    x_corr: torch.Tensor
    mask_corr: torch.Tensor
    paired: torch.Tensor  # rows whose corrected counterpart differs on the modelled features

    def __len__(self) -> int:
        return len(self.ca)


def _tensors(split: CohortTable, pipeline: FeaturePipeline, reference) -> _Tensors:
    x, mask = pipeline.transform(split)
    corrected = correct_frame(split.frame, split.labels, reference)
    xc, mc = pipeline.transform(corrected)
    paired = np.any(np.abs(xc - x) > 1e-9, axis=1)
    days = split.event_days("death")
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)
    return _Tensors(
        as_t(x), as_t(mask), as_t(split.frame["chronological_age"].to_numpy(float)), as_t(days),
        as_t(xc), as_t(mc), torch.as_tensor(paired),
    )


def _batch_losses(model: GapModel, t: _Tensors, idx: torch.Tensor, weights: LossWeights, cfg: TrainConfig,
                  gen: torch.Generator) -> dict:
    """The six loss parts for one batch; disabled parts are skipped (``None``)."""
    out = model(t.x[idx], t.mask[idx])
    parts: dict = dict.fromkeys(LOSS_NAMES)
    # target detached so the embedding cannot shrink itself towards the reconstruction
    parts["recon"] = reconstruction_loss(out["recon"], out["embedded"].detach())
    if weights.ca > 0:
        parts["ca"] = ca_loss(out["ca"], t.ca[idx], weights.ca_r2, weights.penalize_low_r2)
    mu, logvar = out["gap_mu"], out["gap_logvar"]
    eps = torch.randn(mu.shape, generator=gen)
    g = sample_gap(mu, logvar, eps=eps)
    if weights.dist > 0 and len(idx) >= 2:
        ref = torch.randn(mu.shape, generator=gen)
        parts["dist"] = mmd_loss(g / cfg.gap_prior_std, reference=ref)
    if weights.consist > 0:
        perm = torch.randperm(len(idx), generator=gen)
        parts["consist"] = consistency_loss(
            out["latents"].z, lambda z: model.encode(z).z, model.decode, model.gap_mean, perm=perm
        )
    paired = t.paired[idx]
    if weights.contrast > 0 and paired.any():
        sel = idx[paired]
        z_corr = model.encode(model.embed(t.x_corr[sel], t.mask_corr[sel]))
        mu_c, lv_c = model.gap_params(z_corr.z_gap)
        g_c = sample_gap(mu_c, lv_c, eps=torch.randn(mu_c.shape, generator=gen))
        parts["contrast"] = contrastive_loss(g[paired], g_c, weights.margin, weights.literal_contrast)
    if weights.mort > 0:
        days = t.days[idx]
        dead = ~torch.isnan(days)
        parts["mort"] = mortality_loss(g[dead], days[dead])
    return parts


def _run_epoch(model, t: _Tensors, weights, cfg, gen, optimizer=None) -> tuple[dict, float]:
    n = len(t)
    order = torch.randperm(n, generator=gen) if optimizer is not None else torch.arange(n)
    sums = dict.fromkeys(LOSS_NAMES, 0.0)
    counts = dict.fromkeys(LOSS_NAMES, 0)
    total_sum = 0.0
    skipped = 0  # batches whose mortality term was undefined
    processed = 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        if len(idx) < 2:
            continue
        with torch.set_grad_enabled(optimizer is not None):
            parts = _batch_losses(model, t, idx, weights, cfg, gen)
            total = total_loss(parts, weights)
        if optimizer is not None and total.requires_grad:
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
        skipped += weights.mort > 0 and parts["mort"] is None
        k = len(idx)
        processed += k
        total_sum += float(total.detach()) * k
        for name, part in parts.items():
            if part is not None:
                sums[name] += float(part.detach()) * k
                counts[name] += k
    means = {name: (sums[name] / counts[name] if counts[name] else float("nan")) for name in LOSS_NAMES}
    means["mort_skipped"] = skipped
    return means, total_sum / max(processed, 1)


def train(
    train_split: CohortTable,
    val_split: CohortTable,
    feature_set: FeatureSet,
    weights: LossWeights | None = None,
    config: TrainConfig | None = None,
) -> tuple["TrainedGapModel", pd.DataFrame]:
    """Fit the gap model with early stopping on the validation total loss.

    Returns the best-validation model and a per-epoch history with the six
    training loss parts (NaN for disabled parts), the number of batches whose
    mortality term was skipped, the training total, the validation parts
    (``val_`` prefix) and the validation total.
    """
    weights = weights or LossWeights()
    cfg = config or TrainConfig()
    overlap = set(train_split.frame["id"]) & set(val_split.frame["id"])
    if overlap:
        raise ValueError(f"train and validation splits share {len(overlap)} subjects")
    if len(train_split) < 2 or len(val_split) < 2:
        raise ValueError("train and validation splits need at least two subjects each")

    pipeline = FeaturePipeline.fit(train_split, feature_set.members)
    dropped = set(feature_set.members) - set(pipeline.names)
    if dropped:
        log.warning("dropping features never observed in training: %s", sorted(dropped))
    reference = normal_reference(train_split)
    tr = _tensors(train_split, pipeline, reference)
    va = _tensors(val_split, pipeline, reference)

    torch.manual_seed(cfg.seed)
    model = GapModel(len(pipeline.names), **cfg.network_kwargs())
    model.ca_center.fill_(float(tr.ca.mean()))
    model.ca_scale.fill_(float(tr.ca.std()) if len(tr) > 1 and tr.ca.std() > 0 else 1.0)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)

    history = []
    best_val, best_state, best_epoch, waited = math.inf, copy.deepcopy(model.state_dict()), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        try:
            means, train_total = _run_epoch(model, tr, weights, cfg, gen, optimizer)
            model.eval()
            # fixed generator so validation noise is identical every epoch
            val_means, val_total = _run_epoch(model, va, weights, cfg, torch.Generator().manual_seed(cfg.seed + 1))
        except FloatingPointError as exc:
            raise FloatingPointError(f"training diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(train_total) or not math.isfinite(val_total):
            raise FloatingPointError(f"training diverged at epoch {epoch}: total loss is not finite")
        history.append({"epoch": epoch, **means, "train_total": train_total,
                        **{f"val_{k}": v for k, v in val_means.items() if k in LOSS_NAMES}, "val_total": val_total})
        if val_total < best_val:
            best_val, best_epoch, waited = val_total, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            waited += 1
            if waited >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    trained = TrainedGapModel(model, pipeline, feature_set.name, train_split.schema.hash(), cfg, weights,
                              best_epoch=best_epoch)
    return trained, pd.DataFrame(history)


class TrainedGapModel:
    """A fitted gap network together with its preprocessing and provenance."""

    kind = CHECKPOINT_KIND

    def __init__(self, network: GapModel, pipeline: FeaturePipeline, feature_set: str, schema_hash: str,
                 config: TrainConfig, weights: LossWeights | None = None, best_epoch: int | None = None):
        self.network = network.eval()
        self.pipeline = pipeline
        self.feature_set = feature_set
        self.schema_hash = schema_hash
        self.config = config
        self.weights = weights or LossWeights()
        self.best_epoch = best_epoch

    @property
    def features(self) -> list[str]:
        return list(self.pipeline.names)

    @torch.no_grad()
    def gap_params(self, frame: pd.DataFrame, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation-mode gap mean and log-variance per row of ``frame``."""
        x, mask = self.pipeline.transform(frame)
        self.network.eval()
        mus, lvs = [], []
        for s in range(0, len(x), chunk):
            xb = torch.as_tensor(x[s : s + chunk], dtype=torch.float32)
            mb = torch.as_tensor(mask[s : s + chunk], dtype=torch.float32)
            z = self.network.encode(self.network.embed(xb, mb))
            mu, lv = self.network.gap_params(z.z_gap)
            mus.append(mu.double().numpy())
            lvs.append(lv.double().numpy())
        if not mus:
            return np.empty(0), np.empty(0)
        return np.concatenate(mus), np.concatenate(lvs)

    def estimate(self, cohort: CohortTable) -> pd.DataFrame:
        """BA estimates for every subject: columns ``id, ca, gap, ba``."""
        check_schema(self.schema_hash, cohort)
        mu, _ = self.gap_params(cohort.frame)
        return estimates_frame(cohort.frame["id"], cohort.frame["chronological_age"], gap=mu)

    def estimate_record(self, record: SubjectRecord) -> BaEstimate:
        mu, _ = self.gap_params(record_frame(record))
        return BaEstimate.from_gap(record.id, record.chronological_age, float(mu[0]))

    def sample_gaps(self, cohort: CohortTable, seed: int) -> np.ndarray:
        """One reparameterised gap draw per subject."""
        mu, lv = self.gap_params(cohort.frame)
        rng = np.random.default_rng(seed)
        return mu + np.exp(0.5 * lv) * rng.standard_normal(len(mu))

    def save(self, path: str | Path) -> None:
        payload = {
            "state_dict": self.network.state_dict(),
            "n_features": self.network.n_features,
            "config": self.config.to_dict(),
            "weights": self.weights.to_dict(),
            "best_epoch": self.best_epoch,
        }
        save_checkpoint(path, self.kind, self.schema_hash, self.feature_set, self.pipeline, payload)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedGapModel":
        blob = load_checkpoint(path, cls.kind)
        p = blob["payload"]
        cfg = TrainConfig.from_dict(p["config"])
        net = GapModel(p["n_features"], **cfg.network_kwargs())
        net.load_state_dict(p["state_dict"])
        return cls(net, FeaturePipeline.from_state(blob["pipeline"]), blob["feature_set"], blob["schema_hash"],
                   cfg, LossWeights(**p["weights"]), p["best_epoch"])


def estimate_ba(model: TrainedGapModel, record: SubjectRecord) -> BaEstimate:
    return model.estimate_record(record)
