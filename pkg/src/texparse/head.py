"""Class-agnostic mask prediction head.

A small feature pyramid turns the backbone feature map into per-pixel mask
features plus coarse-to-fine pyramid levels; a query-based transformer decoder
cross-attends over the levels in turn and emits one mask per query. Each mask
is turned into an embedding by mask-weighted pooling of the backbone features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import sinusoidal_2d

POOL_EPS = 1e-6


@dataclass
class HeadConfig:
    num_queries: int = 100
    hidden_dim: int = 32
    embed_dim: int = 32
    dec_layers: int = 9
    heads: int = 8
    ffn_dim: int = 64
    strides: tuple[int, ...] = (4, 2, 1)
    output_stride: int = 1  # f_Pm grid relative to the backbone feature grid
    aux_loss: bool = True
    masked_attention: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "strides" in known:
            known["strides"] = tuple(known["strides"])
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d


@dataclass
class PyramidFeatures:
    levels: list[torch.Tensor]  # coarse -> fine, each B x hidden x h x w
    mask_features: torch.Tensor  # B x hidden x H x W


@dataclass
class MaskSet:
    logits: torch.Tensor  # (B x) N x H x W

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.sigmoid()

    @property
    def num_masks(self) -> int:
        return self.logits.shape[-3]


@dataclass
class HeadOutput:
    masks: MaskSet
    z: torch.Tensor  # B x N x embed_dim
    aux: list[tuple[MaskSet, torch.Tensor]] = field(default_factory=list)


def masked_average_pool(f: torch.Tensor, mask_probs: torch.Tensor, eps: float = POOL_EPS) -> torch.Tensor:
    """Mask-weighted mean of ``f``.

    ``f`` is ``C x H x W`` (or batched ``B x C x H x W``); ``mask_probs`` is
    ``H x W``, ``N x H x W`` or ``B x N x H x W``. Masks are bilinearly resampled
    to the feature grid when sizes differ. An all-zero mask pools to zeros.
    """
    batched = f.dim() == 4
    if not batched:
        f = f[None]
    m = mask_probs
    single = m.dim() == 2
    if single:
        m = m[None]
    if m.dim() == 3:
        m = m[None]
    if m.shape[-2:] != f.shape[-2:]:
        m = F.interpolate(m, size=f.shape[-2:], mode="bilinear", align_corners=False)
    num = torch.einsum("bnhw,bchw->bnc", m, f)
    den = m.sum(dim=(-2, -1)).clamp_min(eps)[..., None]
    out = num / den
    if single:
        out = out[:, 0]
    return out if batched else out[0]


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, c), c)


class PixelDecoder(nn.Module):
    """Lateral projections at each stride and top-down fusion.

    The mask features live on the output grid: the finest pyramid level is
    upsampled there and fused with a 1x1 skip from the projected input.
    """

    def __init__(self, in_channels: int, cfg: HeadConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.strides = tuple(cfg.strides)
        self.output_stride = cfg.output_stride
        self.input_proj = nn.Sequential(nn.Conv2d(in_channels, d, 1), _norm(d), nn.GELU())
        self.lateral = nn.ModuleList(nn.Conv2d(d, d, 1) for _ in self.strides)
        self.output = nn.ModuleList(
            nn.Sequential(nn.Conv2d(d, d, 3, padding=1), _norm(d), nn.GELU()) for _ in self.strides
        )
        self.skip = nn.Conv2d(d, d, 1)
        self.mask_feature = nn.Conv2d(d, d, 3, padding=1)

    def forward(self, f: torch.Tensor) -> PyramidFeatures:
        if self.output_stride > 1:
            f = F.avg_pool2d(f, self.output_stride)
        x = self.input_proj(f)
        levels = []
        prev = None
        for s, lat, out in zip(self.strides, self.lateral, self.output):
            y = lat(F.avg_pool2d(x, s) if s > 1 else x)
            if prev is not None:
                y = y + F.interpolate(prev, size=y.shape[-2:], mode="bilinear", align_corners=False)
            prev = out(y)
            levels.append(prev)
        top = levels[-1]
        if top.shape[-2:] != x.shape[-2:]:
            top = F.interpolate(top, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return PyramidFeatures(levels, self.mask_feature(F.gelu(top + self.skip(x))))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.cross = nn.MultiheadAttention(d, heads, batch_first=True)
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Linear(ffn, d))
        self.n1, self.n2, self.n3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)

    def forward(self, q, qpos, mem, mpos, attn_mask=None):
        out, _ = self.cross(q + qpos, mem + mpos, mem, attn_mask=attn_mask, need_weights=False)
        q = self.n1(q + out)
        out, _ = self.self_attn(q + qpos, q + qpos, q, need_weights=False)
        q = self.n2(q + out)
        return self.n3(q + self.ffn(q))


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        d = cfg.hidden_dim
        heads = math.gcd(cfg.heads, d)
        self.num_heads = heads
        self.num_levels = len(cfg.strides)
        self.masked = cfg.masked_attention
        self.query_feat = nn.Embedding(cfg.num_queries, d)
        self.query_pos = nn.Embedding(cfg.num_queries, d)
        self.level_embed = nn.Embedding(self.num_levels, d)
        self.layers = nn.ModuleList(DecoderLayer(d, heads, cfg.ffn_dim) for _ in range(cfg.dec_layers))
        self.out_norm = nn.LayerNorm(d)
        self.mask_embed = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def predict(self, q, mask_features):
        emb = self.mask_embed(self.out_norm(q))
        return torch.einsum("bnc,bchw->bnhw", emb, mask_features)

    def _attn_mask(self, logits, size):
        m = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        blocked = (m.sigmoid() < 0.5).flatten(2)  # B, N, L
        blocked[blocked.all(-1)] = False
        return blocked.repeat_interleave(self.num_heads, dim=0).detach()

    def forward(self, pyr: PyramidFeatures) -> list[torch.Tensor]:
        """Returns mask logits after the initial queries and after every layer."""
        b = pyr.mask_features.shape[0]
        mems, pos = [], []
        for i, lvl in enumerate(pyr.levels):
            seq = lvl.flatten(2).transpose(1, 2)
            p = sinusoidal_2d(lvl.shape[1], lvl.shape[2], lvl.shape[3]).to(lvl).flatten(1).T[None]
            mems.append(seq + self.level_embed.weight[i][None, None])
            pos.append(p)
        q = self.query_feat.weight[None].expand(b, -1, -1)
        qpos = self.query_pos.weight[None].expand(b, -1, -1)
        preds = [self.predict(q, pyr.mask_features)]
        for i, layer in enumerate(self.layers):
            lvl = i % self.num_levels
            mask = self._attn_mask(preds[-1], pyr.levels[lvl].shape[-2:]) if self.masked else None
            q = layer(q, qpos, mems[lvl], pos[lvl], mask)
            preds.append(self.predict(q, pyr.mask_features))
        return preds


class ParsingHead(nn.Module):
    def __init__(self, in_channels: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.pixel_decoder = PixelDecoder(in_channels, cfg)
        self.decoder = TransformerDecoder(cfg)
        self.embed_proj = nn.Sequential(
            nn.Linear(in_channels, cfg.hidden_dim), nn.GELU(), nn.Linear(cfg.hidden_dim, cfg.embed_dim)
        )

    def pixel_decode(self, f: torch.Tensor) -> PyramidFeatures:
        return self.pixel_decoder(f)

    def embed(self, f: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        pooled = masked_average_pool(f, logits.sigmoid())
        return self.embed_proj(pooled)

    def forward(self, f: torch.Tensor) -> HeadOutput:
        """``f``: B x C x H x W backbone features."""
        pyr = self.pixel_decode(f)
        preds = self.decoder(pyr)
        if pyr.mask_features.shape[-2:] != f.shape[-2:]:
            f = F.interpolate(f, size=pyr.mask_features.shape[-2:], mode="bilinear", align_corners=False)
        final = preds[-1]
        out = HeadOutput(MaskSet(final), self.embed(f, final))
        if self.cfg.aux_loss:
            out.aux = [(MaskSet(p), self.embed(f, p)) for p in preds[:-1]]
        return out


def transformer_decode(head: ParsingHead, pyr: PyramidFeatures) -> MaskSet:
    return MaskSet(head.decoder(pyr)[-1])


def forward_head(head: ParsingHead, f: torch.Tensor) -> tuple[MaskSet, torch.Tensor]:
    """Single-image convenience wrapper: ``f`` is C x H x W; returns (N masks, N x d_emb)."""
    out = head(f[None])
    return MaskSet(out.masks.logits[0]), out.z[0]


def build_head(in_channels: int, cfg: HeadConfig, seed: int = 0) -> ParsingHead:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ParsingHead(in_channels, cfg)
