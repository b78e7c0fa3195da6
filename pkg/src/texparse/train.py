"""Training on frozen backbone features: example preparation, the optimizer step and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import LabeledSample, flip_sample, resize_sample
from .features import Backbone, extract_features, load_backbone
from .head import ParsingHead, build_head
from .lora_merge import TensorArchive
from .losses import GroundTruthMasks, Temperature, layer_losses, total_loss
from .prompts import PromptSet, TextEmbedder, embed_prompts, extract_phrases, link_phrases

log = logging.getLogger(__name__)


def make_embedder(cfg: RunConfig) -> TextEmbedder:
    if cfg.text.mode == "archive":
        return TextEmbedder.from_archive(cfg.text.archive)
    return TextEmbedder(mode="toy", dim=cfg.text.dim, seed=cfg.text.seed)


@dataclass
class TrainExample:
    name: str
    features: torch.Tensor  # C x H x W
    gt: GroundTruthMasks
    prompts: PromptSet

    @property
    def prompt_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.prompts.embeddings, dtype=torch.float32)


def prepare_example(
    sample: LabeledSample, backbone: Backbone, embedder: TextEmbedder, cfg: RunConfig
) -> TrainExample:
    sample = resize_sample(sample, cfg.resize)
    phrases = extract_phrases(sample.caption, cfg.text.k_phrase)
    if not phrases:
        phrases = [inst.label for inst in sample.instances][: cfg.text.k_phrase] or ["person"]
    prompts = embed_prompts(phrases, embedder, cfg.text.template, sample.caption)
    h, w = sample.image.shape[:2]
    masks = np.stack([i.mask for i in sample.instances]) if sample.instances else np.zeros((0, h, w), np.uint8)
    labels = [i.label for i in sample.instances]
    gt = GroundTruthMasks(masks, labels, link_phrases(labels, phrases))
    feats = extract_features(backbone, sample.image, cfg.timestep, cfg.feature_seed).f
    return TrainExample(sample.name, feats, gt, prompts)


@dataclass
class TrainState:
    head: ParsingHead
    tau: Temperature
    optimizer: torch.optim.Optimizer
    step: int = 0
    backbone: Backbone | None = None
    embedder: TextEmbedder | None = None
    history: list[float] = field(default_factory=list)

    def parameters(self):
        return list(self.head.parameters()) + list(self.tau.parameters())


def build_state(cfg: RunConfig, in_channels: int, backbone: Backbone | None = None) -> TrainState:
    head = build_head(in_channels, cfg.head, seed=cfg.seed)
    tau = Temperature(cfg.loss.tau_init)
    # the temperature is exempt from weight decay
    opt = torch.optim.AdamW(
        [
            {"params": list(head.parameters()), "weight_decay": cfg.optim.weight_decay},
            {"params": list(tau.parameters()), "weight_decay": 0.0},
        ],
        lr=cfg.optim.lr,
    )
    return TrainState(head, tau, opt, backbone=backbone, embedder=None)


def point_seed(run_seed: int, step: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, step, index]).generate_state(1)[0])


def compute_loss(state: TrainState, batch: list[TrainExample], cfg: RunConfig, step: int):
    feats = torch.stack([ex.features for ex in batch])
    out = state.head(feats)
    tau = state.tau()
    gts = [ex.gt for ex in batch]
    prompts = [ex.prompt_tensor for ex in batch]
    seeds = [point_seed(cfg.seed, step, i) for i in range(len(batch))]
    comp = layer_losses(out.masks.probs, out.z, gts, prompts, tau, cfg.loss, seeds)
    aux = [layer_losses(m.probs, z, gts, prompts, tau, cfg.loss, seeds) for m, z in out.aux]
    return total_loss(comp, cfg.loss, aux), comp


def train_step(state: TrainState, batch: list, cfg: RunConfig) -> tuple[TrainState, float]:
    """One forward pass, per-image matching, the weighted loss and one AdamW update.

    ``batch`` holds :class:`TrainExample` or raw :class:`LabeledSample` items; the
    latter are featurized with ``state.backbone``.
    """
    if not batch:
        raise ValueError("empty batch")
    if any(isinstance(b, LabeledSample) for b in batch):
        if state.backbone is None:
            raise ValueError("raw samples need a backbone on the train state")
        embedder = state.embedder or make_embedder(cfg)
        batch = [b if isinstance(b, TrainExample) else prepare_example(b, state.backbone, embedder, cfg) for b in batch]
    state.head.train()
    loss, _ = compute_loss(state, batch, cfg, state.step + 1)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.history.append(value)
    return state, value


class _ExamplePool:
    """Featurized examples per (sample, flip) variant, computed on first use."""

    def __init__(self, samples, backbone, embedder, cfg):
        self.samples, self.backbone, self.embedder, self.cfg = samples, backbone, embedder, cfg
        self.cache: dict[tuple[int, bool, bool], TrainExample] = {}

    def get(self, idx: int, hflip: bool = False, vflip: bool = False) -> TrainExample:
        key = (idx, hflip, vflip)
        if key not in self.cache:
            s = flip_sample(self.samples[idx], hflip, vflip) if (hflip or vflip) else self.samples[idx]
            self.cache[key] = prepare_example(s, self.backbone, self.embedder, self.cfg)
        return self.cache[key]


def batch_schedule(n: int, cfg: RunConfig, step: int) -> list[tuple[int, bool, bool]]:
    """Deterministic (index, hflip, vflip) triples for one step."""
    bs = min(cfg.optim.batch_size, n)
    steps_per_epoch = -(-n // bs)
    epoch, pos = divmod(step - 1, steps_per_epoch)
    rng = np.random.default_rng([cfg.seed, epoch])
    order = np.arange(n) if bs == n else rng.permutation(n)
    idx = order[pos * bs : (pos + 1) * bs]
    frng = np.random.default_rng([cfg.seed, step, 1])
    out = []
    for i in idx.tolist():
        h = bool(cfg.optim.hflip and frng.random() < 0.5)
        v = bool(cfg.optim.vflip and frng.random() < 0.5)
        out.append((i, h, v))
    return out


def train(
    samples: list[LabeledSample],
    cfg: RunConfig,
    backbone: Backbone | None = None,
    state: TrainState | None = None,
    steps: int | None = None,
) -> TrainState:
    if not samples:
        raise ValueError("no training samples")
    backbone = backbone or load_backbone(cfg.backbone_provider, cfg.backbone)
    embedder = make_embedder(cfg)
    pool = _ExamplePool(samples, backbone, embedder, cfg)
    if state is None:
        state = build_state(cfg, pool.get(0).features.shape[0], backbone)
    state.backbone, state.embedder = backbone, embedder
    total = cfg.optim.steps if steps is None else steps
    t0 = time.time()
    for _ in range(total):
        batch = [pool.get(*key) for key in batch_schedule(len(samples), cfg, state.step + 1)]
        _, loss = train_step(state, batch, cfg)
        if cfg.optim.log_every and state.step % cfg.optim.log_every == 0:
            log.info("step %d loss %.4f tau %.4f (%.1fs)", state.step, loss, float(state.tau().detach()), time.time() - t0)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, cfg: RunConfig, path: str | Path) -> None:
    entries = {f"head.{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in state.head.state_dict().items()}
    entries["tau.log_tau"] = state.tau.log_tau.detach().cpu().numpy().astype(np.float32).reshape(1)
    params = state.parameters()
    for i, p in enumerate(params):
        st = state.optimizer.state.get(p)
        if not st:
            continue
        entries[f"optim.{i}.exp_avg"] = st["exp_avg"].numpy().astype(np.float32)
        entries[f"optim.{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float32)
        entries[f"optim.{i}.step"] = np.asarray([float(st["step"])], dtype=np.float32)
    meta = {
        "run_config": cfg.to_json(),
        "step": str(state.step),
        "history": json.dumps(state.history),
        "in_channels": str(state.head.pixel_decoder.input_proj[0].in_channels),
    }
    TensorArchive(entries, meta).save(path)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[TrainState, RunConfig]:
    arch = TensorArchive.load(path)
    meta = arch.metadata
    cfg = cfg or RunConfig.from_dict(json.loads(meta["run_config"]))
    state = build_state(cfg, int(meta["in_channels"]))
    head_sd = {k[len("head.") :]: torch.from_numpy(np.array(v)) for k, v in arch.entries.items() if k.startswith("head.")}
    state.head.load_state_dict(head_sd)
    with torch.no_grad():
        state.tau.log_tau.copy_(torch.from_numpy(np.array(arch.entries["tau.log_tau"])).reshape(()))
    for i, p in enumerate(state.parameters()):
        key = f"optim.{i}.exp_avg"
        if key in arch.entries:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(arch.entries[f"optim.{i}.step"][0])),
                "exp_avg": torch.from_numpy(np.array(arch.entries[key])).reshape(p.shape),
                "exp_avg_sq": torch.from_numpy(np.array(arch.entries[f"optim.{i}.exp_avg_sq"])).reshape(p.shape),
            }
    state.step = int(meta.get("step", 0))
    state.history = json.loads(meta.get("history", "[]"))
    return state, cfg
