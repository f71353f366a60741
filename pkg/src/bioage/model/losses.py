"""The six training losses and their weighted sum."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch

log = logging.getLogger(__name__)

LOSS_NAMES = ("recon", "ca", "dist", "consist", "contrast", "mort")


@dataclass
class LossWeights:
    recon: float = 1.0
    ca: float = 0.05
    dist: float = 1.0
    consist: float = 1.0
    contrast: float = 1.0
    mort: float = 1.0
    ca_r2: float = 1.0
    margin: float = 1.0
    penalize_low_r2: bool = False
    literal_contrast: bool = False

    def __post_init__(self):
        for name in LOSS_NAMES + ("ca_r2", "margin"):
            val = getattr(self, name)
            if not math.isfinite(val):
                raise ValueError(f"loss weight {name} must be finite")
        for name in LOSS_NAMES:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over samples, token positions and embedding width."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    return ((recon - target) ** 2).mean()


def ca_loss(pred: torch.Tensor, target: torch.Tensor, r2_weight: float = 0.0,
            penalize_low_r2: bool = False) -> torch.Tensor:
    """MSE plus ``r2_weight * (1 - SSE/SST)``.

    With ``penalize_low_r2`` the second term becomes ``r2_weight * SSE/SST``
    so that a poor R-squared raises the loss. For a constant target the
    R-squared term is dropped.
    """
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.numel() < 2:
        raise ValueError("need at least two samples")
    sq = (pred - target) ** 2
    mse = sq.mean()
    if r2_weight == 0:
        return mse
    sst = ((target - target.mean()) ** 2).sum()
    if sst == 0:
        log.warning("constant CA target in batch; R-squared term dropped")
        return mse
    ratio = sq.sum() / sst
    return mse + r2_weight * (ratio if penalize_low_r2 else 1 - ratio)


def median_bandwidth(pooled: torch.Tensor) -> torch.Tensor:
    """Median pairwise squared distance of a 1-D pooled sample."""
    d2 = (pooled[:, None] - pooled[None, :]) ** 2
    iu = torch.triu_indices(len(pooled), len(pooled), offset=1)
    return d2[iu[0], iu[1]].median()


def mmd2_unbiased(x: torch.Tensor, y: torch.Tensor, bandwidth: torch.Tensor | float | None = None) -> torch.Tensor:
    """Unbiased squared MMD with a Gaussian kernel ``exp(-d^2 / (2 h))``.

    ``h`` defaults to the median pairwise squared distance of the pooled sample.
    """
    x, y = x.reshape(-1), y.reshape(-1)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("MMD needs at least two samples per side")
    h = median_bandwidth(torch.cat([x, y])) if bandwidth is None else torch.as_tensor(bandwidth, dtype=x.dtype)
    h = torch.clamp(h, min=1e-12)
    k = lambda a, b: torch.exp(-((a[:, None] - b[None, :]) ** 2) / (2 * h))
    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    sxx = (kxx.sum() - kxx.diagonal().sum()) / (m * (m - 1))
    syy = (kyy.sum() - kyy.diagonal().sum()) / (n * (n - 1))
    return sxx + syy - 2 * kxy.mean()


def mmd_loss(g: torch.Tensor, seed: int | None = None, reference: torch.Tensor | None = None,
             bandwidth=None, clamp: bool = True) -> torch.Tensor:
    """MMD between gap draws and as many fresh standard-normal draws."""
    if g.numel() < 2:
        raise ValueError("MMD loss needs at least two gap values")
    if reference is None:
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        reference = torch.randn(g.numel(), generator=gen, dtype=g.dtype)
    val = mmd2_unbiased(g, reference, bandwidth)
    return torch.clamp(val, min=0.0) if clamp else val


def consistency_loss(
    latents: torch.Tensor,
    encode: Callable[[torch.Tensor], torch.Tensor],
    decode: Callable[[torch.Tensor], torch.Tensor],
    gap_mean: Callable[[torch.Tensor], torch.Tensor],
    perm: torch.Tensor | None = None,
    seed: int | None = None,
) -> torch.Tensor:
    """Gap-mean agreement between ``Z`` and ``E(D(Z'))``.

    ``Z'`` is ``Z`` with the [CA] latents permuted across the batch.
    ``encode``/``decode`` map (B, N+2, d) tensors to the same shape.
    """
    b = latents.shape[0]
    if b < 2:
        log.info("consistency loss on a batch of one is identically zero")
        return latents.sum() * 0.0
    if perm is None:
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        perm = torch.randperm(b, generator=gen)
    shuffled = torch.cat([latents[perm, :1], latents[:, 1:]], dim=1)
    restored = encode(decode(shuffled))
    diff = gap_mean(latents[:, 1]).reshape(-1) - gap_mean(restored[:, 1]).reshape(-1)
    return (diff**2).mean()


def contrastive_loss(g_org: torch.Tensor, g_corr: torch.Tensor, margin: float, literal: bool = False) -> torch.Tensor:
    """Hinge on the batch mean of ``margin - (g_org - g_corr)``.

    ``literal`` uses ``margin - g_org - g_corr`` instead.
    """
    if g_org.shape != g_corr.shape:
        raise ValueError("original and corrected gaps must be aligned")
    if g_org.numel() == 0:
        return g_org.sum() * 0.0
    inner = margin - g_org - g_corr if literal else margin - (g_org - g_corr)
    return torch.clamp(inner.mean(), min=0.0)


def mortality_loss(g: torch.Tensor, days_to_death: torch.Tensor) -> torch.Tensor | None:
    """``1 + PCC(g, days_to_death)``; ``None`` when the batch cannot support it."""
    if g.numel() < 2:
        return None
    dg = g - g.mean()
    dd = days_to_death.to(g.dtype) - days_to_death.to(g.dtype).mean()
    sdd = (dd**2).sum()
    sgg = (dg**2).sum()
    if sdd == 0 or sgg == 0:
        return None
    r = (dg * dd).sum() / torch.sqrt(sgg * sdd)
    return 1 + r


def total_loss(parts: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the six parts; missing parts count as zero."""
    total = None
    for name in LOSS_NAMES:
        part = parts.get(name)
        if part is None:
            continue
        if not torch.isfinite(torch.as_tensor(part)).all():
            raise FloatingPointError(f"loss part {name!r} is not finite")
        term = getattr(weights, name) * part
        total = term if total is None else total + term
    if total is None:
        return torch.tensor(0.0)
    return total
