"""Hungarian matching, point-sampled mask losses, the batch grounding loss and the weighted objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

EPS_BCE = 1e-7
MIN_TAU = 0.01


@dataclass
class LossConfig:
    lambda_bce: float = 2.0
    lambda_dice: float = 5.0
    lambda_g: float = 1.0
    num_points: int = 12544
    tau_init: float = 0.07
    eps_bce: float = EPS_BCE
    link_phrases: bool = False

    def __post_init__(self):
        if min(self.lambda_bce, self.lambda_dice, self.lambda_g) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.num_points < 1:
            raise ValueError("num_points must be >= 1")
        if not self.tau_init > 0:
            raise ValueError("tau_init must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruthMasks:
    masks: np.ndarray  # G x H x W, {0, 1}
    labels: list[str]
    phrase_index: list[int | None] = field(default_factory=list)
    ignore: np.ndarray | None = None  # H x W bool, excluded from metrics

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.masks.ndim != 3:
            raise ValueError(f"masks must be G x H x W, got {self.masks.shape}")
        if len(self.labels) != self.masks.shape[0]:
            raise ValueError("one label per mask required")
        if not self.phrase_index:
            self.phrase_index = [None] * len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float


# ---------------------------------------------------------------------------
# points and per-vector losses


def sample_points(height: int, width: int, num_points: int, seed: int) -> np.ndarray:
    """``num_points`` uniform (y, x) coordinates in [0, H) x [0, W), drawn with replacement."""
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    rng = np.random.default_rng(seed)
    pts = rng.random((num_points, 2)) * np.array([height, width], dtype=np.float64)
    # guard the open upper bound against rounding
    return np.minimum(pts, np.nextafter(np.array([height, width], dtype=np.float64), 0))


def point_sample(maps: torch.Tensor, points: np.ndarray, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly sample ``maps`` (K x h x w) at pixel coordinates given on a ``size`` grid -> K x P."""
    h, w = size
    grid = torch.from_numpy(points[:, ::-1] / np.array([w, h]) * 2 - 1).to(maps.dtype)
    out = F.grid_sample(maps[None], grid[None, None], mode="bilinear", padding_mode="border", align_corners=False)
    return out[0, :, 0]


def nearest_sample(masks: np.ndarray | torch.Tensor, points: np.ndarray) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(masks))
    iy = np.floor(points[:, 0]).astype(np.int64)
    ix = np.floor(points[:, 1]).astype(np.int64)
    return m[:, iy, ix]


def _check_lengths(p, y):
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")


def bce_loss(pred_probs: torch.Tensor, target: torch.Tensor, eps_bce: float = EPS_BCE) -> torch.Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps]."""
    pred_probs, target = torch.as_tensor(pred_probs), torch.as_tensor(target)
    _check_lengths(pred_probs, target)
    target = target.to(pred_probs.dtype)
    p = pred_probs.clamp(eps_bce, 1 - eps_bce)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def dice_loss(pred_probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - (2 y.p + 1) / (sum y + sum p + 1)``."""
    pred_probs, target = torch.as_tensor(pred_probs), torch.as_tensor(target)
    _check_lengths(pred_probs, target)
    target = target.to(pred_probs.dtype)
    return 1 - (2 * (target * pred_probs).sum() + 1) / (target.sum() + pred_probs.sum() + 1)


def _pairwise_bce(p: torch.Tensor, y: torch.Tensor, eps: float) -> torch.Tensor:
    p = p.clamp(eps, 1 - eps)
    pos, neg = torch.log(p), torch.log1p(-p)
    return -(pos @ y.T + neg @ (1 - y).T) / p.shape[1]


def _pairwise_dice(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    num = 2 * p @ y.T + 1
    den = p.sum(1)[:, None] + y.sum(1)[None, :] + 1
    return 1 - num / den


# ---------------------------------------------------------------------------
# matching


def hungarian_match(cost) -> Assignment:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size == 0:
        return Assignment([], 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return Assignment(pairs, math.fsum(cost[rows, cols].tolist()))


def match_cost(pred_probs: torch.Tensor, gt: GroundTruthMasks, cfg: LossConfig, seed: int) -> np.ndarray:
    """N x G cost ``lambda_bce * BCE + lambda_dice * Dice`` on one shared point sample."""
    n = pred_probs.shape[0]
    if len(gt) == 0:
        return np.zeros((n, 0))
    h, w = gt.masks.shape[-2:]
    pts = sample_points(h, w, cfg.num_points, seed)
    with torch.no_grad():
        p = point_sample(pred_probs, pts, (h, w))
        y = nearest_sample(gt.masks, pts).to(p.dtype)
        cost = cfg.lambda_bce * _pairwise_bce(p, y, cfg.eps_bce) + cfg.lambda_dice * _pairwise_dice(p, y)
    return cost.double().numpy()


# ---------------------------------------------------------------------------
# grounding


def _stack_ragged(items: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a list of ``n_b x d`` tensors to ``B x n_max x d`` plus a ``B x n_max`` validity mask."""
    n_max = max(t.shape[0] for t in items)
    d = items[0].shape[1]
    out = items[0].new_zeros((len(items), n_max, d))
    valid = torch.zeros((len(items), n_max), dtype=torch.bool)
    for b, t in enumerate(items):
        out[b, : t.shape[0]] = t
        valid[b, : t.shape[0]] = True
    return out, valid


def grounding_scores(
    z: list[torch.Tensor] | torch.Tensor,
    prompts: list[torch.Tensor],
    tau,
    links: list[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """B x B matrix ``g[m, n]`` between the masks of image m and the phrases of caption n.

    For each phrase the mask weights are a softmax over masks of ``<z_i, T(p_k)> / tau``;
    ``g`` averages the weighted similarities over the caption's phrases.

    ``links[m]`` optionally replaces the weights on the matching pair (m, m) with an
    ``N x K`` 0/1 matrix marking the mask matched to each phrase's instance;
    phrases without an instance then carry no weight on their own image.
    """
    z = list(z)
    if len(z) != len(prompts):
        raise ValueError("one prompt set per image required")
    if any(t.shape[0] == 0 for t in prompts):
        raise ValueError("every caption needs at least one phrase")
    Z, zvalid = _stack_ragged(z)
    T, tvalid = _stack_ragged([t.to(Z.dtype) for t in prompts])
    s = torch.einsum("mid,nkd->mnik", Z, T)  # B x B x N x K
    logits = (s / tau).masked_fill(~zvalid[:, None, :, None], float("-inf"))
    p = torch.softmax(logits, dim=2)
    if links is not None:
        b, n_max, k_max = len(z), Z.shape[1], T.shape[1]
        hard = Z.new_zeros((b, b, n_max, k_max))
        use = torch.zeros((b, b, 1, 1), dtype=torch.bool)
        for m, w in enumerate(links):
            if w is None:
                continue
            w = torch.as_tensor(w, dtype=Z.dtype)
            hard[m, m, : w.shape[0], : w.shape[1]] = w
            use[m, m] = True
        p = torch.where(use, hard, p)
    g = (p * s).sum(2)  # B x B x K
    tv = tvalid.to(Z.dtype)[None]
    return (g * tv).sum(-1) / tv.sum(-1)


def grounding_from_scores(g: torch.Tensor, tau) -> torch.Tensor:
    g = torch.as_tensor(g)
    logits = g / tau
    diag = torch.diagonal(logits)
    return -(2 * diag - torch.logsumexp(logits, dim=1) - torch.logsumexp(logits, dim=0)).mean()


def grounding_loss(z, prompts: list[torch.Tensor], tau, links=None) -> torch.Tensor:
    return grounding_from_scores(grounding_scores(z, prompts, tau, links), tau)


def total_loss(components: dict, cfg: LossConfig, aux: list[dict] | None = None):
    """Weighted sum of the bce/dice/grounding terms; each auxiliary layer adds its own weighted sum."""

    def weighted(c):
        return (
            cfg.lambda_bce * c.get("bce", 0.0)
            + cfg.lambda_dice * c.get("dice", 0.0)
            + cfg.lambda_g * c.get("grounding", 0.0)
        )

    out = weighted(components)
    for c in aux or []:
        out = out + weighted(c)
    return out


class Temperature(torch.nn.Module):
    """Learnable positive temperature, stored as a log."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_tau = torch.nn.Parameter(torch.tensor(math.log(init)))

    def forward(self) -> torch.Tensor:
        return self.log_tau.exp().clamp_min(MIN_TAU)


# ---------------------------------------------------------------------------
# batch criterion


def layer_losses(
    probs: torch.Tensor,
    z: torch.Tensor,
    gts: list[GroundTruthMasks],
    prompt_embeds: list[torch.Tensor],
    tau: torch.Tensor,
    cfg: LossConfig,
    seeds: list[int],
) -> dict:
    """Loss components for one decoder layer over a batch.

    Each image is matched independently. The BCE term averages over all N queries,
    with unmatched queries supervised toward the empty mask; the Dice term averages
    over matched pairs. With ``cfg.link_phrases`` the image's own caption uses hard
    weights instead of the softmax: each phrase named by a GT instance points at the
    query matched to that instance, and phrases naming no instance get no weight.
    """
    if len(gts) == 0:
        raise ValueError("empty batch")
    bce_terms, p_matched, y_matched, links = [], [], [], []
    for b, gt in enumerate(gts):
        pb = probs[b]
        n = pb.shape[0]
        h, w = gt.masks.shape[-2:]
        pts = sample_points(h, w, cfg.num_points, seeds[b])
        p = point_sample(pb, pts, (h, w))
        targets = torch.zeros_like(p)
        link = None
        if len(gt):
            y = nearest_sample(gt.masks, pts).to(p.dtype)
            with torch.no_grad():
                cost = cfg.lambda_bce * _pairwise_bce(p, y, cfg.eps_bce) + cfg.lambda_dice * _pairwise_dice(p, y)
            assign = hungarian_match(cost.double().numpy())
            rows = [i for i, _ in assign.pairs]
            cols = [j for _, j in assign.pairs]
            targets[rows] = y[cols]
            p_matched.append(p[rows])
            y_matched.append(y[cols])
            if cfg.link_phrases and b < len(prompt_embeds):
                k = prompt_embeds[b].shape[0]
                link = torch.zeros((n, k), dtype=p.dtype)
                for i, j in assign.pairs:
                    idx = gt.phrase_index[j]
                    if idx is not None and 0 <= idx < k:
                        link[i, idx] = 1.0
        links.append(link)
        pc = p.clamp(cfg.eps_bce, 1 - cfg.eps_bce)
        per_query = -(targets * torch.log(pc) + (1 - targets) * torch.log1p(-pc)).mean(1)
        bce_terms.append(per_query.mean())
    out = {"bce": torch.stack(bce_terms).mean()}
    if p_matched:
        pm, ym = torch.cat(p_matched), torch.cat(y_matched)
        out["dice"] = (1 - (2 * (pm * ym).sum(1) + 1) / (pm.sum(1) + ym.sum(1) + 1)).mean()
    else:
        out["dice"] = probs.sum() * 0
    if cfg.lambda_g > 0:
        zn = F.normalize(z, dim=-1)
        out["grounding"] = grounding_loss(list(zn), prompt_embeds, tau, links if cfg.link_phrases else None)
    else:
        out["grounding"] = probs.sum() * 0
    return out
