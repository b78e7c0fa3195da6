"""High-level steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

from .config import RunConfig
from .data import LabeledSample, resize_sample
from .evaluation import (
    MetricReport,
    ProtocolSpec,
    UnificationMap,
    build_protocol_gt,
    evaluate_protocol,
    unseen_split,
)
from .features import Backbone
from .head import ParsingHead
from .infer import run_inference
from .prompts import BASE_CATEGORIES, TextEmbedder


def test_labels(samples: list[LabeledSample], unification: UnificationMap) -> set[str]:
    spec = ProtocolSpec("COP", unification)
    return {l for s in samples for l in build_protocol_gt(s, spec).labels}


def evaluate_predictions(
    samples: list[LabeledSample],
    predictions: dict,
    cfg: RunConfig,
    train_labels=BASE_CATEGORIES,
    unification: UnificationMap | None = None,
) -> MetricReport:
    """Score stored predictions (keyed by image name) under every configured protocol.

    Images without a prediction count as all-miss and are listed in the report.
    """
    unification = unification or UnificationMap.default()
    samples = [resize_sample(s, cfg.resize, keep_aspect=True) for s in samples]
    preds = [predictions.get(s.name) for s in samples]
    missing = [s.name for s, p in zip(samples, preds) if p is None]
    protocols = {
        kind: evaluate_protocol(samples, preds, ProtocolSpec(kind, unification)) for kind in cfg.eval.protocols
    }
    report = MetricReport(protocols, missing=missing)
    if cfg.eval.unseen:
        trained = {unification(l) for l in train_labels}
        unseen, seen = unseen_split(trained, test_labels(samples, unification))
        cop = ProtocolSpec("COP", unification)
        for name, subset in (("unseen", unseen), ("seen", seen)):
            d = evaluate_protocol(samples, preds, cop, subset=subset).to_dict()
            d["labels"] = sorted(subset)
            setattr(report, name, d)
    return report


def evaluate_model(
    samples: list[LabeledSample],
    head: ParsingHead,
    backbone: Backbone,
    embedder: TextEmbedder,
    cfg: RunConfig,
    gammas=None,
    train_labels=BASE_CATEGORIES,
) -> MetricReport:
    """Infer and score in-process; each gamma in the grid adds one row of protocol metrics."""
    gammas = tuple(cfg.eval.gammas if gammas is None else gammas)
    base, preds = run_inference(samples, head, backbone, embedder, cfg)
    report = evaluate_predictions(base, {p.name: p for p in preds}, cfg, train_labels)
    if gammas and gammas != (1.0,):
        report.extra["gamma_ablation"] = gamma_ablation(samples, head, backbone, embedder, cfg, gammas, train_labels)
    return report


def gamma_ablation(samples, head, backbone, embedder, cfg: RunConfig, gammas, train_labels=BASE_CATEGORIES) -> list[dict]:
    """One row of protocol metrics per gamma, in the given order."""
    base = [resize_sample(s, cfg.resize, keep_aspect=True) for s in samples]
    rows = []
    for g in gammas:
        _, gp = run_inference(samples, head, backbone, embedder, cfg, gamma=g)
        r = evaluate_predictions(base, {p.name: p for p in gp}, cfg, train_labels)
        rows.append({"gamma": g, "protocols": {k: v.to_dict() for k, v in r.protocols.items()}})
    return rows
