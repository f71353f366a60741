"""Token-based encoder-decoder with [CA] and [GAP] heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

CA_TOKEN, GAP_TOKEN = 0, 1
N_SPECIAL = 2


@dataclass
class LatentBundle:
    """Encoder output for a batch, ``z`` of shape (B, N+2, d).

    Position 0 is the [CA] token, position 1 the [GAP] token and the rest
    follow feature order.
    """

    z: torch.Tensor

    @property
    def z_ca(self) -> torch.Tensor:
        return self.z[:, CA_TOKEN]

    @property
    def z_gap(self) -> torch.Tensor:
        return self.z[:, GAP_TOKEN]

    @property
    def z_features(self) -> torch.Tensor:
        return self.z[:, N_SPECIAL:]


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, kind: str = "softmax"):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if kind not in ("softmax", "linear"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.n_heads = n_heads
        self.kind = kind
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        if self.kind == "softmax":
            scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
            y = torch.softmax(scores, dim=-1) @ v
        else:
            # kernelised attention, linear in sequence length
            q, k = F.elu(q) + 1, F.elu(k) + 1
            kv = k.transpose(-2, -1) @ v
            norm = q @ k.sum(dim=-2, keepdim=True).transpose(-2, -1)
            y = (q @ kv) / norm
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm attention block: ``x + attn(ln(x))`` then ``x + ff(ln(x))``."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0, attention: str = "softmax"):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, attention)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ff(self.norm2(x)))


class Stack(nn.Sequential):
    def __init__(self, n_layers: int, *args, **kwargs):
        super().__init__(*[Block(*args, **kwargs) for _ in range(n_layers)])


def _head(d_in: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, 1))


class GapModel(nn.Module):
    """Embedding, encoder E, decoder D, CA head and GAP mean/log-variance heads.

    Feature values share one affine scalar-to-vector map; position identity
    comes from the position table. The CA head predicts in standardised
    units and is rescaled to years with ``ca_center``/``ca_scale``.
    """

    def __init__(
        self,
        n_features: int,
        d_model: int = 128,
        n_layers: int = 3,
        n_heads: int = 4,
        d_ff: int = 1024,
        dropout: float = 0.0,
        head_hidden: int = 64,
        attention: str = "softmax",
    ):
        super().__init__()
        self.n_features = n_features
        self.d_model = d_model
        self.value_proj = nn.Linear(1, d_model)
        self.token_values = nn.Parameter(0.02 * torch.randn(N_SPECIAL, d_model))
        self.mask_emb = nn.Embedding(2, d_model)
        self.pos_emb = nn.Embedding(n_features + N_SPECIAL, d_model)
        self.encoder = Stack(n_layers, d_model, n_heads, d_ff, dropout, attention)
        self.decoder = Stack(n_layers, d_model, n_heads, d_ff, dropout, attention)
        self.ca_head = _head(d_model, head_hidden)
        self.gap_mean = _head(d_model, head_hidden)
        self.gap_logvar = _head(d_model, head_hidden)
        self.register_buffer("ca_center", torch.tensor(0.0))
        self.register_buffer("ca_scale", torch.tensor(1.0))

    def embed(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        if mask.shape[-1] != self.n_features + N_SPECIAL:
            raise ValueError("mask must cover the two special tokens and every feature")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite feature values; impute before embedding")
        b = x.shape[0]
        values = self.value_proj(x.unsqueeze(-1))
        tokens = self.token_values.unsqueeze(0).expand(b, -1, -1)
        seq = torch.cat([tokens, values], dim=1)
        positions = torch.arange(self.n_features + N_SPECIAL, device=x.device)
        return seq + self.mask_emb(mask.long()) + self.pos_emb(positions)

    def _check(self, t: torch.Tensor) -> None:
        if t.dim() != 3 or t.shape[1:] != (self.n_features + N_SPECIAL, self.d_model):
            raise ValueError(f"expected (B, {self.n_features + N_SPECIAL}, {self.d_model}), got {tuple(t.shape)}")

    def encode(self, embedded: torch.Tensor) -> LatentBundle:
        self._check(embedded)
        return LatentBundle(self.encoder(embedded))

    def decode(self, latents: LatentBundle | torch.Tensor) -> torch.Tensor:
        z = latents.z if isinstance(latents, LatentBundle) else latents
        self._check(z)
        return self.decoder(z)

    def predict_ca(self, z_ca: torch.Tensor) -> torch.Tensor:
        return self.ca_center + self.ca_scale * self.ca_head(z_ca).squeeze(-1)

    def gap_params(self, z_gap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.gap_mean(z_gap).squeeze(-1), self.gap_logvar(z_gap).squeeze(-1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> dict:
        embedded = self.embed(x, mask)
        latents = self.encode(embedded)
        mu, logvar = self.gap_params(latents.z_gap)
        return {
            "embedded": embedded,
            "latents": latents,
            "recon": self.decode(latents),
            "ca": self.predict_ca(latents.z_ca),
            "gap_mu": mu,
            "gap_logvar": logvar,
        }


def sample_gap(mu: torch.Tensor, logvar: torch.Tensor, seed: int | None = None, eps: torch.Tensor | None = None,
               training: bool = True) -> torch.Tensor:
    """Reparameterised draw ``mu + exp(logvar / 2) * eps``; ``mu`` when not training."""
    # logvar = -inf is the collapsed limit and allowed
    if not torch.isfinite(mu).all() or torch.isnan(logvar).any() or torch.isposinf(logvar).any():
        raise ValueError("non-finite gap distribution parameters")
    if not training:
        return mu
    if eps is None:
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps
