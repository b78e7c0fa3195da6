"""Command line entry point: ``texparse [--config F] [--seed N] [--out DIR] <command> ...``.

Every command reads and writes under ``--out`` unless given explicit paths, so
``synth``, ``train``, ``infer``, ``eval`` and ``visualize`` chain with no extra
arguments. Exit codes: 0 success, 2 config error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import PROTOCOLS, ConfigError, RunConfig
from .data import DataError, generate_synthetic_dataset, load_dataset, load_meta, resize_sample, save_dataset
from .evaluation import ProtocolError, UnificationMap
from .features import FeatureError, load_backbone
from .infer import load_predictions, run_inference, save_predictions
from .lora_merge import ArchiveError, TensorArchive, adapters_from_archive, merge_model
from .pipeline import evaluate_predictions, gamma_ablation
from .prompts import default_unification
from .train import load_checkpoint, make_embedder, save_checkpoint, train
from .visualize import save_overlay, visualize_masks

log = logging.getLogger("texparse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _paths(args) -> dict[str, Path]:
    out = Path(args.out)
    return {
        "data": Path(getattr(args, "data", None) or out / "data"),
        "checkpoint": Path(getattr(args, "checkpoint", None) or out / "checkpoint.safetensors"),
        "predictions": Path(getattr(args, "predictions", None) or out / "predictions"),
    }


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        d["data"]["seed"] = args.seed
        cfg = RunConfig.from_dict(d)
    return cfg


def _csv(text: str, cast=str) -> tuple:
    return tuple(cast(t.strip()) for t in text.split(",") if t.strip())


# ---------------------------------------------------------------------------
# commands


def cmd_merge_lora(args, cfg: RunConfig) -> int:
    base = TensorArchive.load(args.base)
    adapters = adapters_from_archive(TensorArchive.load(args.adapters), args.alpha, args.rank)
    merged = merge_model(base, adapters)
    dest = Path(args.output or Path(args.out) / "merged.safetensors")
    dest.parent.mkdir(parents=True, exist_ok=True)
    merged.save(dest)
    print(f"merged {len(adapters)} adapters into {dest}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    d = cfg.data
    samples = generate_synthetic_dataset(
        args.n or d.n,
        d.seed,
        size=d.size,
        figures_per_image=d.figures_per_image,
        max_instances=d.max_instances,
        unseen_rate=d.unseen_rate,
    )
    dest = _paths(args)["data"]
    save_dataset(samples, dest)
    print(f"wrote {len(samples)} samples to {dest}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    p = _paths(args)
    samples = load_dataset(p["data"])
    if not samples:
        raise DataError(f"{p['data']}: no samples")
    torch.manual_seed(cfg.seed)
    state = train(samples, cfg, steps=args.steps)
    p["checkpoint"].parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, cfg, p["checkpoint"])
    print(f"step {state.step} loss {state.history[-1]:.4f} -> {p['checkpoint']}")
    return EXIT_OK


def _model(cfg: RunConfig, checkpoint: Path):
    if not checkpoint.exists():
        raise DataError(f"checkpoint not found: {checkpoint}")
    state, ck_cfg = load_checkpoint(checkpoint)
    # the architecture comes from the checkpoint, inference options from the current config
    d = ck_cfg.to_dict()
    cur = cfg.to_dict()
    for key in ("infer", "eval"):
        d[key] = cur[key]
    run_cfg = RunConfig.from_dict(d)
    backbone = load_backbone(run_cfg.backbone_provider, run_cfg.backbone)
    return state.head, backbone, make_embedder(run_cfg), run_cfg


def cmd_infer(args, cfg: RunConfig) -> int:
    p = _paths(args)
    samples = load_dataset(p["data"])
    head, backbone, embedder, run_cfg = _model(cfg, p["checkpoint"])
    _, preds = run_inference(samples, head, backbone, embedder, run_cfg, gamma=args.gamma)
    save_predictions(preds, p["predictions"])
    print(f"wrote predictions for {len(preds)} images to {p['predictions']}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    p = _paths(args)
    d = cfg.to_dict()
    if args.protocols:
        d["eval"]["protocols"] = list(_csv(args.protocols))
    if args.gammas:
        d["eval"]["gammas"] = list(_csv(args.gammas, float))
    if args.no_unseen:
        d["eval"]["unseen"] = False
    cfg = RunConfig.from_dict(d)
    samples = load_dataset(p["data"])
    unification = UnificationMap(load_meta(p["data"], "unification", default_unification()))
    preds = load_predictions(p["predictions"])
    report = evaluate_predictions(samples, preds, cfg, unification=unification)
    gammas = tuple(cfg.eval.gammas)
    if gammas != (1.0,):
        head, backbone, embedder, run_cfg = _model(cfg, p["checkpoint"])
        report.extra["gamma_ablation"] = gamma_ablation(samples, head, backbone, embedder, run_cfg, gammas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    if report.missing:
        print(f"warning: {len(report.missing)} images without predictions", file=sys.stderr)
    print(report.to_text())
    return EXIT_OK


def cmd_visualize(args, cfg: RunConfig) -> int:
    p = _paths(args)
    samples = {s.name: s for s in load_dataset(p["data"])}
    preds = load_predictions(p["predictions"])
    dest = Path(args.out) / "overlays"
    dest.mkdir(parents=True, exist_ok=True)
    legends = {}
    for name in sorted(preds):
        if name not in samples:
            raise DataError(f"prediction for unknown image {name}")
        image = resize_sample(samples[name], cfg.resize, keep_aspect=True).image
        pred = preds[name]
        overlay, legend = visualize_masks(image, [(i.mask, i.label) for i in pred.instances])
        save_overlay(dest / f"{name}.png", overlay)
        legends[name] = [{"label": l, "rgb": list(c)} for l, c in legend.entries]
    (dest / "legend.json").write_text(json.dumps(legends, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(legends)} overlays to {dest}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="texparse", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML run configuration")
    ap.add_argument("--seed", type=int, help="overrides the run and data seeds")
    ap.add_argument("--out", default="runs/default", help="working directory (default: %(default)s)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge-lora", help="fold LoRA adapters into a base weight archive")
    m.add_argument("--base", required=True)
    m.add_argument("--adapters", required=True, help="archive with <name>.lora_A / <name>.lora_B entries")
    m.add_argument("--alpha", type=float, required=True)
    m.add_argument("--rank", type=int)
    m.add_argument("--output")
    m.set_defaults(func=cmd_merge_lora)

    s = sub.add_parser("synth", help="write a procedural dataset")
    s.add_argument("--n", type=int, help="number of images (default: data.n)")
    s.add_argument("--data")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the parsing head on frozen features")
    t.add_argument("--data")
    t.add_argument("--checkpoint")
    t.add_argument("--steps", type=int, help="override optim.steps")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict labeled masks for a dataset")
    i.add_argument("--data")
    i.add_argument("--checkpoint")
    i.add_argument("--predictions")
    i.add_argument("--gamma", type=float, default=1.0, help="darken inputs with x^(1/gamma)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score stored predictions")
    e.add_argument("--data")
    e.add_argument("--predictions")
    e.add_argument("--checkpoint", help="model for the gamma grid")
    e.add_argument("--protocols", help=f"comma list from {','.join(PROTOCOLS)}")
    e.add_argument("--gammas", help="comma list, e.g. 1,0.75,0.5,0.25")
    e.add_argument("--no-unseen", action="store_true", help="skip the unseen/seen split")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="render colour overlays with legends")
    v.add_argument("--data")
    v.add_argument("--predictions")
    v.set_defaults(func=cmd_visualize)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except (ConfigError, ProtocolError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ArchiveError, FeatureError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
