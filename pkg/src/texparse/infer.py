"""Inference: prompt universe, label assignment, semantic map reduction, FPP merging and prediction files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .config import RunConfig
from .data import DataError, LabeledSample, resize_sample
from .evaluation import ImagePrediction, PredInstance, gamma_correct
from .features import Backbone, extract_features
from .head import ParsingHead
from .prompts import EnsembleTable, TextEmbedder, default_ensembles, ebp_labels, extract_phrases


@dataclass
class PromptUniverse:
    """Candidate labels, each scored by the best of its expansion prompts."""

    labels: list[str]
    owners: np.ndarray  # owning label index per expansion row
    embeddings: np.ndarray  # rows: unit prompt embeddings

    def __len__(self) -> int:
        return len(self.labels)


def build_prompt_universe(
    labels: list[str],
    embedder: TextEmbedder,
    template: str,
    ensembles: EnsembleTable | None = None,
    use_ebp: bool = True,
) -> PromptUniverse:
    names: list[str] = []
    for l in list(labels) + (ebp_labels() if use_ebp else []):
        l = l.strip().lower()
        if l and l not in names:
            names.append(l)
    rows, owners = [], []
    for k, name in enumerate(names):
        terms = [name] + [t for t in (ensembles or {}).get(name, []) if t != name]
        for t in terms:
            rows.append(embedder.embed(template.format(t)))
            owners.append(k)
    emb = np.stack(rows) if rows else np.zeros((0, embedder.dim))
    return PromptUniverse(names, np.asarray(owners, dtype=np.int64), emb)


def label_scores(z: np.ndarray, universe: PromptUniverse) -> np.ndarray:
    """N x L matrix: per mask and label, the max cosine similarity over the label's expansion."""
    z = np.asarray(z, dtype=np.float64)
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    sims = z @ universe.embeddings.T
    out = np.full((z.shape[0], len(universe)), -np.inf)
    for col, owner in enumerate(universe.owners):
        out[:, owner] = np.maximum(out[:, owner], sims[:, col])
    return out


def assign_from_scores(scores: np.ndarray, threshold: float) -> list[tuple[int | None, float]]:
    """Argmax label per row (ties to the lowest index); None when the best score is below threshold."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise ValueError("empty prompt set")
    best = scores.argmax(1)
    out = []
    for i, k in enumerate(best):
        s = float(scores[i, k])
        out.append((int(k), s) if s >= threshold else (None, s))
    return out


def assign_labels(z, universe: PromptUniverse, threshold: float = 0.5) -> list[tuple[str | None, float]]:
    if len(universe) == 0:
        raise ValueError("empty prompt set")
    return [(None if k is None else universe.labels[k], s) for k, s in assign_from_scores(label_scores(z, universe), threshold)]


def merge_fpp(parts: list[PredInstance], groups: list[int] | None = None) -> list[PredInstance]:
    """One mask per person: the union of its parts.

    Without explicit ``groups`` each 8-connected component of the union of all
    part masks is a person. Scores are the best part score in the group.
    """
    if not parts:
        return []
    shape = parts[0].mask.shape
    if groups is not None:
        if len(groups) != len(parts):
            raise ValueError("one group id per part required")
        out = []
        for g in sorted(set(groups)):
            members = [p for p, gg in zip(parts, groups) if gg == g]
            mask = np.zeros(shape, dtype=bool)
            for p in members:
                mask |= p.mask.astype(bool)
            if mask.any():
                out.append(PredInstance(mask, "person", max(p.score for p in members)))
        return out
    union = np.zeros(shape, dtype=bool)
    for p in parts:
        union |= p.mask.astype(bool)
    comp, n = ndimage.label(union, structure=np.ones((3, 3), dtype=bool))
    out = []
    for c in range(1, n + 1):
        mask = comp == c
        score = max(p.score for p in parts if (p.mask.astype(bool) & mask).any())
        out.append(PredInstance(mask, "person", score))
    return out


def predict_image(
    head: ParsingHead,
    features: torch.Tensor,
    universe: PromptUniverse,
    cfg: RunConfig,
    name: str = "",
    size: tuple[int, int] | None = None,
) -> ImagePrediction:
    """Label the head's masks, drop unlabeled or empty ones and reduce the rest to a label map."""
    head.eval()
    with torch.no_grad():
        out = head(features[None])
    logits = out.masks.logits
    size = size or tuple(features.shape[-2:])
    if tuple(logits.shape[-2:]) != tuple(size):
        logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
    probs = logits[0].sigmoid().double().numpy()
    assigned = assign_labels(out.z[0].double().numpy(), universe, cfg.infer.threshold)
    keep = [
        i for i, (label, _) in enumerate(assigned) if label is not None and (probs[i] >= cfg.infer.mask_threshold).any()
    ]
    keep = sorted(keep, key=lambda i: -assigned[i][1])[: cfg.infer.max_predictions]
    keep.sort()
    labels = [assigned[i][0] for i in keep]
    semantic = np.full(size, -1, dtype=np.int64)
    if keep:
        stack = probs[keep]
        top = stack.argmax(0)
        semantic = np.where(stack.max(0) >= cfg.infer.mask_threshold, top, -1)
    instances = [PredInstance(probs[i] >= cfg.infer.mask_threshold, assigned[i][0], assigned[i][1]) for i in keep]
    return ImagePrediction(name, labels, semantic, instances)


def caption_labels(sample: LabeledSample, cfg: RunConfig, extra: list[str] | None = None) -> list[str]:
    return extract_phrases(sample.caption, cfg.text.k_phrase) + list(extra or [])


def run_inference(
    samples: list[LabeledSample],
    head: ParsingHead,
    backbone: Backbone,
    embedder: TextEmbedder,
    cfg: RunConfig,
    gamma: float = 1.0,
    extra_labels: list[str] | None = None,
) -> tuple[list[LabeledSample], list[ImagePrediction]]:
    """Predict every sample at evaluation resolution; returns the resized samples alongside."""
    ensembles = default_ensembles() if cfg.infer.use_ensembles else None
    resized, preds = [], []
    for s in samples:
        s = resize_sample(s, cfg.resize, keep_aspect=True)
        image = gamma_correct(s.image, gamma) if gamma != 1.0 else s.image
        feats = extract_features(backbone, image, cfg.timestep, cfg.feature_seed).f
        universe = build_prompt_universe(
            caption_labels(s, cfg, extra_labels), embedder, cfg.text.template, ensembles, cfg.infer.use_ebp
        )
        preds.append(predict_image(head, feats, universe, cfg, s.name, s.image.shape[:2]))
        resized.append(s)
    return resized, preds


# ---------------------------------------------------------------------------
# prediction files
#
#   predictions.jsonl                       {"image", "labels", "instances": [{"file", "label", "score"}]}
#   <image>/semantic.png                    uint8, 0 = background, k + 1 = labels[k]
#   <image>/<k>_<label>.png                 binary instance masks


def save_predictions(preds: list[ImagePrediction], root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for p in preds:
        d = root / p.name
        d.mkdir(parents=True, exist_ok=True)
        if len(p.labels) > 254:
            raise ValueError("too many labels for an 8-bit semantic map")
        Image.fromarray((p.semantic + 1).astype(np.uint8)).save(d / "semantic.png")
        recs = []
        for k, inst in enumerate(p.instances):
            fname = f"{k:03d}_{quote(inst.label, safe='-')}.png"
            Image.fromarray(inst.mask.astype(np.uint8) * 255).save(d / fname)
            recs.append({"file": fname, "label": inst.label, "score": round(float(inst.score), 6)})
        lines.append(json.dumps({"image": p.name, "labels": p.labels, "instances": recs}, sort_keys=True))
    (root / "predictions.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_predictions(root: str | Path) -> dict[str, ImagePrediction]:
    root = Path(root)
    index = root / "predictions.jsonl"
    if not index.exists():
        raise DataError(f"{root}: missing predictions.jsonl")
    out = {}
    for line in index.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        d = root / rec["image"]
        semantic = np.asarray(Image.open(d / "semantic.png"), dtype=np.int64) - 1
        insts = [
            PredInstance(np.asarray(Image.open(d / r["file"])) > 127, r["label"], float(r["score"]))
            for r in rec["instances"]
        ]
        out[rec["image"]] = ImagePrediction(rec["image"], list(rec["labels"]), semantic, insts)
    return out
