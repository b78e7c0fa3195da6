"""Parsing protocols, semantic and instance metrics, the unseen/seen split and the exposure transform.

Label maps are integer arrays indexing a category list, with -1 for background.
All metrics are returned as percentages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSample
from .losses import GroundTruthMasks
from .prompts import EnsembleTable, canonical_label, default_ensembles, default_unification

BHP_CATEGORIES = frozenset({"face", "hair", "hand", "leg"})
CCP_CATEGORIES = frozenset({"backpack", "umbrella", "shoe", "eye glasses", "handbag", "tie", "suitcase"})
BODY_TERMS = BHP_CATEGORIES | {"torso"}
PERSON_WORDS = frozenset(
    {"person", "people", "man", "men", "woman", "women", "boy", "girl", "child", "baby", "lady", "gentleman"}
)
PROTOCOL_KINDS = ("FPP", "BHP", "CCP", "COP")
IOU_THRESHOLDS = tuple(range(50, 100, 5))  # percent
MAX_DETECTIONS = 100
CONVENTIONS = {
    "mIoU": "dataset-accumulated intersection/union per class, mean over classes with nonzero union",
    "mAcc": "dataset-accumulated pixel recall per class, mean over classes present in ground truth",
    "mAP_SS": "per (image, class) IoU; score 1 when IoU >= threshold, thresholds 0.50:0.05:0.95; mean over thresholds",
    "mAP_IS": "score-sorted greedy one-to-one matching per class, 101-point interpolated AP, mean over thresholds and classes with ground truth",
    "AR_100": "recall with at most 100 predictions per image, mean over thresholds and images with ground truth",
    "ignore": "pixels of classes the evaluated model was never trained on are excluded from intersection and union",
    "FPP": "one mask per person; predictions grouped by connected components of the union of part masks",
}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class UnificationMap:
    mapping: dict

    @classmethod
    def default(cls) -> "UnificationMap":
        return cls(default_unification())

    def __call__(self, label: str) -> str:
        return canonical_label(label, self.mapping)

    def is_idempotent(self, labels) -> bool:
        return all(self(self(l)) == self(l) for l in labels)


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str
    unification: UnificationMap = field(default_factory=UnificationMap.default)
    trained: frozenset | None = None  # canonical labels the model can name; None = all

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ProtocolError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOL_KINDS}")

    def includes(self, canonical: str) -> bool:
        """Whether a canonical part label belongs to this protocol (FPP takes every part)."""
        if canonical in PERSON_WORDS:
            return False
        if self.kind == "BHP":
            return canonical in BHP_CATEGORIES
        if self.kind == "CCP":
            return canonical in CCP_CATEGORIES
        if self.kind == "COP":
            return canonical not in BODY_TERMS
        return canonical not in BODY_TERMS - BHP_CATEGORIES

    def ignored(self, canonical: str) -> bool:
        return self.trained is not None and canonical not in self.trained


def build_protocol_gt(sample: LabeledSample, spec: ProtocolSpec) -> GroundTruthMasks:
    h, w = sample.image.shape[:2]
    ignore = np.zeros((h, w), dtype=bool)
    masks, labels = [], []
    if spec.kind == "FPP":
        people: dict[int, np.ndarray] = {}
        for inst in sample.instances:
            if spec.includes(spec.unification(inst.label)):
                people.setdefault(inst.person, np.zeros((h, w), dtype=bool))
                people[inst.person] |= inst.mask
        for pid in sorted(people):
            masks.append(people[pid])
            labels.append("person")
    else:
        for inst in sample.instances:
            c = spec.unification(inst.label)
            if not spec.includes(c):
                continue
            if spec.ignored(c):
                ignore |= inst.mask
                continue
            masks.append(inst.mask)
            labels.append(c)
    arr = np.stack(masks).astype(np.uint8) if masks else np.zeros((0, h, w), np.uint8)
    return GroundTruthMasks(arr, labels, ignore=ignore)


def label_map(masks, labels: list[str], categories: list[str]) -> np.ndarray:
    """Paint masks in order onto a -1 background; later masks win where they overlap."""
    masks = np.asarray(masks)
    out = np.full(masks.shape[1:], -1, dtype=np.int64)
    index = {c: i for i, c in enumerate(categories)}
    for m, l in zip(masks, labels):
        out[m.astype(bool)] = index[l]
    return out


# ---------------------------------------------------------------------------
# semantic metrics


@dataclass
class SemanticResult:
    mIoU: float | None
    mAcc: float | None
    per_class: dict[str, float]
    empty: bool = False


class SemanticAccumulator:
    """Pixel counts accumulated over a dataset."""

    def __init__(self, categories: list[str]):
        self.categories = list(categories)
        k = len(self.categories)
        self.inter = np.zeros(k, dtype=np.int64)
        self.union = np.zeros(k, dtype=np.int64)
        self.gt = np.zeros(k, dtype=np.int64)
        self.image_ious: list[float] = []  # per (image, class) for mAP_SS

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None) -> None:
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
        valid = np.ones(gt.shape, dtype=bool) if ignore is None else ~ignore
        k = len(self.categories)
        p = np.where(valid, pred, -1).ravel()
        g = np.where(valid, gt, -1).ravel()
        pc = np.bincount(p[p >= 0], minlength=k)[:k]
        gc = np.bincount(g[g >= 0], minlength=k)[:k]
        both = (p == g) & (g >= 0)
        ic = np.bincount(g[both], minlength=k)[:k]
        uc = pc + gc - ic
        self.inter += ic
        self.union += uc
        self.gt += gc
        present = uc > 0
        self.image_ious.extend((ic[present] / uc[present]).tolist())

    def result(self, subset: set[str] | None = None) -> SemanticResult:
        sel = np.array([subset is None or c in subset for c in self.categories], dtype=bool)
        present = (self.union > 0) & sel
        per_class = {c: 100.0 * self.inter[i] / self.union[i] for i, c in enumerate(self.categories) if present[i]}
        if not present.any():
            return SemanticResult(None, None, {}, empty=True)
        in_gt = (self.gt > 0) & sel
        miou = 100.0 * float(np.mean(self.inter[present] / self.union[present]))
        macc = 100.0 * float(np.mean(self.inter[in_gt] / self.gt[in_gt])) if in_gt.any() else None
        return SemanticResult(miou, macc, per_class)


def semantic_metrics(pred, gt, categories: list[str], ignore=None) -> SemanticResult:
    """mIoU and mAcc for one label map pair, or for lists of pairs accumulated over a dataset."""
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    ignores = ignore if isinstance(ignore, (list, tuple)) else [ignore] * len(gts)
    acc = SemanticAccumulator(categories)
    for p, g, ig in zip(preds, gts, ignores, strict=True):
        acc.update(np.asarray(p), np.asarray(g), ig)
    return acc.result()


def _passes(iou: float, thr: int) -> bool:
    return 100.0 * iou >= thr - 1e-9


def semantic_ap(per_image_class_ious) -> float | None:
    """Mean over thresholds 0.50..0.95 of the fraction of (image, class) IoUs reaching the threshold."""
    ious = list(per_image_class_ious)
    if not ious:
        return None
    return 100.0 * float(np.mean([np.mean([_passes(v, t) for v in ious]) for t in IOU_THRESHOLDS]))


# ---------------------------------------------------------------------------
# instance metrics


@dataclass
class PredInstance:
    mask: np.ndarray  # H x W bool
    label: str
    score: float


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _iou_matrix(preds: list[np.ndarray], gts: list[np.ndarray], valid: np.ndarray | None) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    P = np.stack([p.astype(bool) for p in preds]).reshape(len(preds), -1)
    G = np.stack([g.astype(bool) for g in gts]).reshape(len(gts), -1)
    if valid is not None:
        P = P & valid.reshape(1, -1)
        G = G & valid.reshape(1, -1)
    inter = P.astype(np.int64) @ G.T.astype(np.int64)
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)


def _greedy_match(ious: np.ndarray, thr: int) -> np.ndarray:
    """Predictions (rows) in score order take the best still-free GT at IoU >= thr; returns matched flags."""
    taken = np.zeros(ious.shape[1], dtype=bool)
    hit = np.zeros(ious.shape[0], dtype=bool)
    for i in range(ious.shape[0]):
        best, best_j = -1.0, -1
        for j in range(ious.shape[1]):
            if not taken[j] and _passes(ious[i, j], thr) and ious[i, j] > best:
                best, best_j = ious[i, j], j
        if best_j >= 0:
            taken[best_j] = True
            hit[i] = True
    return hit


def _interp_ap(hits: np.ndarray, num_gt: int) -> float:
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = 0.0
    for r in np.linspace(0, 1, 101):
        idx = np.searchsorted(recall, r, side="left")
        total += precision[idx] if idx < len(precision) else 0.0
    return total / 101


def instance_metrics(
    preds: list[list[PredInstance]],
    gts: list[tuple[list[np.ndarray], list[str]]],
    ignores: list[np.ndarray | None] | None = None,
    max_det: int = MAX_DETECTIONS,
) -> tuple[float | None, float | None]:
    """(mAP_IS, AR_100) for per-image predictions against per-image (masks, labels)."""
    if len(preds) != len(gts):
        raise ValueError("one prediction list per image required")
    ignores = ignores or [None] * len(gts)
    # keep the top-scoring detections; stable order breaks ties by index
    kept = []
    for plist in preds:
        order = sorted(range(len(plist)), key=lambda i: -plist[i].score)[:max_det]
        kept.append([plist[i] for i in order])
    cats = sorted({l for _, labels in gts for l in labels})
    if not cats:
        return None, None
    aps = []
    for c in cats:
        # per image IoUs between this class's predictions and gts
        per_img = []
        num_gt = 0
        for plist, (gmasks, glabels), ig in zip(kept, gts, ignores):
            pi = [p for p in plist if p.label == c]
            gm = [m for m, l in zip(gmasks, glabels) if l == c]
            num_gt += len(gm)
            per_img.append((pi, _iou_matrix([p.mask for p in pi], gm, None if ig is None else ~ig)))
        for thr in IOU_THRESHOLDS:
            scored = []
            for img, (pi, ious) in enumerate(per_img):
                hit = _greedy_match(ious, thr)
                scored.extend((-p.score, img, k, bool(hit[k])) for k, p in enumerate(pi))
            scored.sort(key=lambda t: (t[0], t[1], t[2]))
            aps.append(_interp_ap(np.array([s[3] for s in scored], dtype=bool), num_gt))
    recalls = []
    for plist, (gmasks, glabels), ig in zip(kept, gts, ignores):
        if not gmasks:
            continue
        for thr in IOU_THRESHOLDS:
            found = 0
            for c in set(glabels):
                pi = [p for p in plist if p.label == c]
                gm = [m for m, l in zip(gmasks, glabels) if l == c]
                found += int(_greedy_match(_iou_matrix([p.mask for p in pi], gm, None if ig is None else ~ig), thr).sum())
            recalls.append(found / len(gmasks))
    ar = 100.0 * float(np.mean(recalls)) if recalls else None
    return 100.0 * float(np.mean(aps)), ar


# ---------------------------------------------------------------------------
# unseen split and exposure


def normalize_label(label: str, mapping: dict | None = None) -> str:
    return canonical_label(label.strip().lower(), default_unification() if mapping is None else mapping)


def unseen_split(
    train_labels, test_labels, ensembles: EnsembleTable | None = None, mapping: dict | None = None
) -> tuple[set[str], set[str]]:
    """(unseen, seen): a test label is seen when its normalized form matches a training label or an expansion."""
    ensembles = default_ensembles() if ensembles is None else ensembles
    known = set()
    for t in train_labels:
        for term in [t] + list(ensembles.get(t, [])) + list(ensembles.get(normalize_label(t, mapping), [])):
            known.add(normalize_label(term, mapping))
    seen = {l for l in test_labels if normalize_label(l, mapping) in known}
    return set(test_labels) - seen, seen


def gamma_correct(x, gamma: float) -> np.ndarray:
    """Under-exposure transform ``x ** (1 / gamma)``; gamma < 1 darkens."""
    if not np.isfinite(gamma) or gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.power(x, 1.0 / gamma)


# ---------------------------------------------------------------------------
# reports


def _round(v):
    return None if v is None else round(float(v), 6)


@dataclass
class ProtocolReport:
    mIoU: float | None
    mAcc: float | None
    mAP_SS: float | None
    mAP_IS: float | None
    AR_100: float | None
    per_class: dict[str, float]
    num_images: int
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "mIoU": _round(self.mIoU),
            "mAcc": _round(self.mAcc),
            "mAP_SS": _round(self.mAP_SS),
            "mAP_IS": _round(self.mAP_IS),
            "AR_100": _round(self.AR_100),
            "per_class": {k: _round(v) for k, v in sorted(self.per_class.items())},
            "num_images": self.num_images,
            "empty": self.empty,
        }


@dataclass
class MetricReport:
    protocols: dict[str, ProtocolReport]
    unseen: dict | None = None
    seen: dict | None = None
    missing: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: v.to_dict() for k, v in self.protocols.items()}
        out["unseen"] = self.unseen
        out["seen"] = self.seen
        out["missing_predictions"] = sorted(self.missing)
        out["conventions"] = dict(CONVENTIONS)
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        return format_table({k: v.to_dict() for k, v in self.protocols.items()}, self.unseen, self.seen)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:6.2f}"


def format_table(rows: dict[str, dict], unseen: dict | None = None, seen: dict | None = None) -> str:
    cols = ("mIoU", "mAcc", "mAP_SS", "mAP_IS", "AR_100")
    lines = [f"{'':10s}" + "".join(f"{c:>9s}" for c in cols)]
    for name, r in rows.items():
        lines.append(f"{name:10s}" + "".join(f"{_fmt(r.get(c)):>9s}" for c in cols))
    for name, r in (("unseen", unseen), ("seen", seen)):
        if r:
            lines.append(f"{name:10s}" + "".join(f"{_fmt(r.get(c)):>9s}" for c in cols))
    return "\n".join(lines) + "\n"


def evaluate_protocol(
    samples: list[LabeledSample],
    predictions: list["ImagePrediction | None"],
    spec: ProtocolSpec,
    subset: set[str] | None = None,
) -> ProtocolReport:
    """Score one protocol. ``subset`` restricts every metric to those canonical categories."""
    gts = [build_protocol_gt(s, spec) for s in samples]
    views = [protocol_view(p, spec, s.image.shape[:2]) for p, s in zip(predictions, samples)]
    cats = set()
    for g in gts:
        cats.update(g.labels)
    for v in views:
        cats.update(i.label for i in v)
    if subset is not None:
        cats &= subset
    categories = sorted(cats)
    acc = SemanticAccumulator(categories)
    for g, p, s in zip(gts, predictions, samples):
        keep_g = [k for k, l in enumerate(g.labels) if l in cats]
        gmap = label_map(g.masks[keep_g], [g.labels[k] for k in keep_g], categories)
        acc.update(protocol_semantic(p, spec, gmap.shape, categories), gmap, g.ignore)
    sem = acc.result()
    inst_gts = []
    inst_preds = []
    for g, v in zip(gts, views):
        keep_g = [k for k, l in enumerate(g.labels) if l in cats]
        inst_gts.append(([g.masks[k] for k in keep_g], [g.labels[k] for k in keep_g]))
        inst_preds.append([i for i in v if i.label in cats])
    ap, ar = instance_metrics(inst_preds, inst_gts, [g.ignore for g in gts])
    return ProtocolReport(sem.mIoU, sem.mAcc, semantic_ap(acc.image_ious), ap, ar, sem.per_class, len(samples), sem.empty)


# ---------------------------------------------------------------------------
# predictions as seen by a protocol


@dataclass
class ImagePrediction:
    """Inference output for one image.

    ``semantic`` is the non-overlapping label map (indices into ``labels``);
    ``instances`` keep their own, possibly overlapping masks.
    """

    name: str
    labels: list[str]
    semantic: np.ndarray
    instances: list[PredInstance]


def protocol_semantic(pred: ImagePrediction | None, spec: ProtocolSpec, shape, categories: list[str]) -> np.ndarray:
    """The prediction's label map restricted to the protocol, re-indexed into ``categories``."""
    if pred is None:
        return np.full(shape, -1, dtype=np.int64)
    if pred.semantic.shape != tuple(shape):
        raise ValueError(f"{pred.name}: prediction size {pred.semantic.shape} != ground truth {tuple(shape)}")
    index = {c: i for i, c in enumerate(categories)}
    lut = np.full(len(pred.labels) + 1, -1, dtype=np.int64)  # last slot serves background (-1)
    for k, label in enumerate(pred.labels):
        c = spec.unification(label)
        if spec.includes(c):
            lut[k] = index.get("person" if spec.kind == "FPP" else c, -1)
    return lut[pred.semantic]


def protocol_view(pred: ImagePrediction | None, spec: ProtocolSpec, shape) -> list[PredInstance]:
    """Per-protocol prediction instances with canonical labels (person groups for FPP)."""
    from .infer import merge_fpp

    if pred is None:
        return []
    if spec.kind == "FPP":
        parts = [i for i in pred.instances if spec.includes(spec.unification(i.label))]
        return merge_fpp(parts)
    out = []
    for inst in pred.instances:
        c = spec.unification(inst.label)
        if spec.includes(c):
            out.append(PredInstance(inst.mask, c, inst.score))
    return out
