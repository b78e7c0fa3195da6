"""Single-pass texture-aligned feature extraction.

A frozen image-to-texture diffusion stack is run once: an image encoder and a
context head turn the image into context tokens ``C`` plus a CLS token, the
latent encoder produces encoder features and a latent code, the latent is
optionally noised, and denoiser and decoder activations are concatenated with
the encoder features on a common grid.

The networks here are small CPU stand-ins that keep every edge of that dataflow.
Real weights can be dropped in through ``archive:<path>`` providers, as long as
the parameter names and shapes match the configured stand-in.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora_merge import TensorArchive

MIN_IMAGE_SIZE = 8
DEFAULT_SEED = 777


class FeatureError(ValueError):
    pass


@dataclass
class BackboneConfig:
    patch_size: int = 4
    vis_dim: int = 32
    ctx_tokens: int = 8
    ctx_dim: int = 32
    ctx_depth: int = 1
    ctx_heads: int = 4
    enc_channels: int = 16
    unet_channels: int = 32
    dec_channels: int = 16
    latent_dim: int = 256
    latent_stride: int = 2
    max_timestep: int = 1000
    schedule: str = "linear(0.00085,0.012)"

    @property
    def feature_channels(self) -> int:
        return self.enc_channels + self.unet_channels + self.dec_channels

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """``alphas[k-1]`` holds alpha_k for k = 1..T_max; ``alpha_bars[t]`` is the product up to t."""

    alphas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size == 0:
            raise FeatureError("alphas must be a non-empty 1-D sequence")
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise FeatureError("alphas must lie in (0, 1]")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.concatenate([[1.0], np.cumprod(alphas)]))

    @property
    def max_timestep(self) -> int:
        return self.alphas.size

    @classmethod
    def from_spec(cls, spec: str, max_timestep: int) -> "NoiseSchedule":
        m = re.fullmatch(r"\s*linear\(\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*\)\s*", spec)
        if m is None:
            raise FeatureError(f"unsupported schedule {spec!r}; expected linear(beta_start,beta_end)")
        betas = np.linspace(float(m.group(1)), float(m.group(2)), max_timestep, dtype=np.float64)
        return cls(1.0 - betas)


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= schedule.max_timestep:
        raise FeatureError(f"timestep {t} outside [0, {schedule.max_timestep}]")
    return float(schedule.alpha_bars[t])


def noisy_latent(x_e, t: int, schedule: NoiseSchedule, eps):
    """``sqrt(abar_t) * x_e + sqrt(1 - abar_t) * eps``; the end points return copies of the inputs."""
    if tuple(x_e.shape) != tuple(eps.shape):
        raise FeatureError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(x_e.shape)}")
    ab = alpha_bar(schedule, t)
    if ab == 1.0:
        return x_e.clone() if isinstance(x_e, torch.Tensor) else np.array(x_e, copy=True)
    if ab == 0.0:
        return eps.clone() if isinstance(eps, torch.Tensor) else np.array(eps, copy=True)
    return math.sqrt(ab) * x_e + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# toy sub-networks


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    groups = math.gcd(4, cout)
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(groups, cout), nn.SiLU())


def sinusoidal_2d(channels: int, h: int, w: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position code, shape (channels, h, w)."""
    quarter = max(channels // 4, 1)
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float32) / quarter)
    ys = torch.linspace(0, 1, h)[:, None] * freqs[None] * 2 * math.pi
    xs = torch.linspace(0, 1, w)[:, None] * freqs[None] * 2 * math.pi
    pe = torch.zeros(4 * quarter, h, w)
    pe[0:quarter] = torch.sin(ys).T[:, :, None].expand(quarter, h, w)
    pe[quarter : 2 * quarter] = torch.cos(ys).T[:, :, None].expand(quarter, h, w)
    pe[2 * quarter : 3 * quarter] = torch.sin(xs).T[:, None, :].expand(quarter, h, w)
    pe[3 * quarter :] = torch.cos(xs).T[:, None, :].expand(quarter, h, w)
    return pe[:channels] if channels <= pe.shape[0] else F.pad(pe, (0, 0, 0, 0, 0, channels - pe.shape[0]))


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = float(t) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)])
    return F.pad(emb, (0, dim - emb.numel()))


class PatchEncoder(nn.Module):
    """phi_CV: strided convolutional patch embedding."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Conv2d(3, cfg.vis_dim, cfg.patch_size, stride=cfg.patch_size)
        self.norm = nn.LayerNorm(cfg.vis_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(x).flatten(2).transpose(1, 2)  # B, L, vis_dim
        return self.norm(tokens)


class ContextHead(nn.Module):
    """phi_I2C: linear projection followed by learned queries attending over the visual tokens."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.vis_dim, cfg.ctx_dim)
        self.queries = nn.Parameter(torch.randn(cfg.ctx_tokens + 1, cfg.ctx_dim) * 0.5)
        self.layers = nn.ModuleList(
            nn.TransformerDecoderLayer(
                cfg.ctx_dim, cfg.ctx_heads, dim_feedforward=2 * cfg.ctx_dim, dropout=0.0, batch_first=True
            )
            for _ in range(cfg.ctx_depth)
        )

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mem = self.proj(tokens)
        q = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        for layer in self.layers:
            q = layer(q, mem)
        return q[:, 1:], q[:, 0]


class LatentEncoder(nn.Module):
    """phi_E: returns (encoder features, latent code)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.stem = _block(3, cfg.enc_channels)
        self.down = _block(cfg.enc_channels, cfg.enc_channels, stride=cfg.latent_stride)
        self.to_latent = nn.Conv2d(cfg.enc_channels, cfg.latent_dim, 1)

    def forward(self, x):
        h = self.down(self.stem(x))
        return h, self.to_latent(h)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        heads = math.gcd(heads, channels)
        self.attn = nn.MultiheadAttention(channels, heads, kdim=ctx_dim, vdim=ctx_dim, batch_first=True)
        self.norm = nn.LayerNorm(channels)

    def forward(self, h, ctx):
        b, c, hh, ww = h.shape
        seq = h.flatten(2).transpose(1, 2)
        out, _ = self.attn(self.norm(seq), ctx, ctx, need_weights=False)
        return (seq + out).transpose(1, 2).reshape(b, c, hh, ww)


class Denoiser(nn.Module):
    """phi_SD: two-level UNet with cross-attention over [C; CLS] at the bottleneck."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.unet_channels
        self.conv_in = nn.Conv2d(cfg.latent_dim, c, 3, padding=1)
        self.time_proj = nn.Linear(c, c)
        self.enc = _block(c, c)
        self.down = _block(c, c, stride=2)
        self.mid = _block(c, c)
        self.cross = CrossAttention(c, cfg.ctx_dim)
        self.up = _block(c, c)
        self.fuse = _block(2 * c, c)
        self.conv_out = nn.Conv2d(c, cfg.latent_dim, 3, padding=1)

    def forward(self, x_t, context, cls, t: int):
        h = self.conv_in(x_t)
        h = h + sinusoidal_2d(h.shape[1], h.shape[2], h.shape[3]).to(h)[None]
        h = h + self.time_proj(timestep_embedding(t, h.shape[1]).to(h))[None, :, None, None]
        skip = self.enc(h)
        low = self.mid(self.down(skip))
        low = self.cross(low, torch.cat([context, cls[:, None]], dim=1))
        up = self.up(F.interpolate(low, size=skip.shape[-2:], mode="nearest"))
        hidden = self.fuse(torch.cat([up, skip], dim=1))
        return hidden, self.conv_out(hidden)


class LatentDecoder(nn.Module):
    """phi_D: latent back to image resolution."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.scale = cfg.latent_stride
        self.conv_in = _block(cfg.latent_dim, cfg.dec_channels)
        self.refine = _block(cfg.dec_channels, cfg.dec_channels)
        self.to_rgb = nn.Conv2d(cfg.dec_channels, 3, 3, padding=1)

    def forward(self, x_t):
        h = self.conv_in(x_t)
        h = self.refine(F.interpolate(h, scale_factor=self.scale, mode="nearest"))
        return h, self.to_rgb(h)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = PatchEncoder(cfg)
        self.context_head = ContextHead(cfg)
        self.latent_encoder = LatentEncoder(cfg)
        self.denoiser = Denoiser(cfg)
        self.latent_decoder = LatentDecoder(cfg)
        self.schedule = NoiseSchedule.from_spec(cfg.schedule, cfg.max_timestep)
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_seed(cls, cfg: BackboneConfig, seed: int = DEFAULT_SEED) -> "Backbone":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(cfg)

    @classmethod
    def from_archive(cls, cfg: BackboneConfig, archive: TensorArchive) -> "Backbone":
        model = cls.from_seed(cfg, 0)
        state = model.state_dict()
        missing = sorted(set(state) - set(archive.entries))
        if missing:
            raise FeatureError(f"archive lacks backbone parameters: {missing[:5]}")
        loaded = {}
        for name, ref in state.items():
            arr = archive.entries[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise FeatureError(f"{name}: archive shape {arr.shape} != expected {tuple(ref.shape)}")
            loaded[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
        model.load_state_dict(loaded)
        return model

    def to_archive(self) -> TensorArchive:
        return TensorArchive({k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()})


def load_backbone(provider: str, cfg: BackboneConfig) -> Backbone:
    """Resolve ``toy:<seed>`` or ``archive:<path>``."""
    kind, _, arg = provider.partition(":")
    if kind == "toy":
        return Backbone.from_seed(cfg, int(arg) if arg else DEFAULT_SEED)
    if kind == "archive":
        return Backbone.from_archive(cfg, TensorArchive.load(Path(arg)))
    raise FeatureError(f"unknown backbone provider {provider!r}")


# ---------------------------------------------------------------------------
# public operations


@dataclass
class ContextEmbedding:
    C: torch.Tensor  # T_ctx x d_ctx
    cls: torch.Tensor  # d_ctx


@dataclass
class FeatureBundle:
    f_E: torch.Tensor
    f_U: torch.Tensor
    f_D: torch.Tensor
    f: torch.Tensor
    x_e: torch.Tensor
    x_t: torch.Tensor

    @property
    def channels(self) -> int:
        return self.f.shape[0]


def check_image(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise FeatureError(f"expected an H x W x 3 image, got shape {x.shape}")
    if min(x.shape[:2]) < MIN_IMAGE_SIZE:
        raise FeatureError(f"image {x.shape[:2]} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise FeatureError("pixel values must lie in [0, 1]")
    return x


def _to_batch(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1)[None]


def compute_context(backbone: Backbone, x) -> ContextEmbedding:
    x = check_image(x)
    p = backbone.cfg.patch_size
    if x.shape[0] < p or x.shape[1] < p:
        raise FeatureError(f"image {x.shape[:2]} smaller than one {p}x{p} patch")
    with torch.no_grad():
        C, cls = backbone.context_head(backbone.image_encoder(_to_batch(x)))
    return ContextEmbedding(C[0], cls[0])


def extract_features(backbone: Backbone, x, t: int = 0, seed: int = DEFAULT_SEED) -> FeatureBundle:
    ctx = compute_context(backbone, x)
    x = check_image(x)
    schedule = backbone.schedule
    alpha_bar(schedule, t)  # range check before any work
    s = backbone.cfg.latent_stride
    if x.shape[0] % s or x.shape[1] % s:
        raise FeatureError(f"image size {x.shape[:2]} must be divisible by the latent stride {s}")
    with torch.no_grad():
        f_E, x_e = backbone.latent_encoder(_to_batch(x))
        gen = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(x_e.shape, generator=gen, dtype=x_e.dtype)
        x_t = noisy_latent(x_e, t, schedule, eps)
        f_U, _ = backbone.denoiser(x_t, ctx.C[None], ctx.cls[None], t)
        f_D, _ = backbone.latent_decoder(x_t)
        streams = [f_E, f_U, f_D]
        size = max((s.shape[-2:] for s in streams), key=lambda hw: hw[0] * hw[1])
        streams = [
            s if s.shape[-2:] == size else F.interpolate(s, size=size, mode="bilinear", align_corners=False)
            for s in streams
        ]
        f = torch.cat(streams, dim=1)
    return FeatureBundle(streams[0][0], streams[1][0], streams[2][0], f[0], x_e[0], x_t[0])
