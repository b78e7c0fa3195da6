"""Mask overlays with per-instance colours and a legend strip."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont

ALPHA = 0.55
LEGEND_HEIGHT = 16

# Kelly's colours of maximum contrast (white and black dropped)
PALETTE = (
    (243, 195, 0), (135, 86, 146), (243, 132, 0), (161, 202, 241), (190, 0, 50), (194, 178, 128),
    (132, 132, 130), (0, 136, 86), (230, 143, 172), (0, 103, 165), (249, 133, 121), (96, 78, 151),
    (246, 166, 0), (179, 68, 108), (220, 211, 0), (136, 45, 23), (141, 182, 0), (101, 69, 34),
    (226, 88, 34), (43, 61, 38),
)  # fmt: skip


@dataclass
class ColorLegend:
    entries: list[tuple[str, tuple[int, int, int]]] = field(default_factory=list)

    def colors(self) -> list[tuple[int, int, int]]:
        return [c for _, c in self.entries]


def _hash_index(label: str, ordinal: int, n: int) -> int:
    digest = hashlib.sha256(f"{label}\x00{ordinal}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % n


def assign_colors(labels: list[str]) -> ColorLegend:
    """Colour per mask from a hash of (label, ordinal among equal labels), probing past used colours."""
    legend = ColorLegend()
    used: set[tuple[int, int, int]] = set()
    seen: dict[str, int] = {}
    for label in labels:
        ordinal = seen.get(label, 0)
        seen[label] = ordinal + 1
        start = _hash_index(label, ordinal, len(PALETTE))
        color = None
        for k in range(len(PALETTE)):
            cand = PALETTE[(start + k) % len(PALETTE)]
            if cand not in used:
                color = cand
                break
        if color is None:  # palette exhausted: derive a fresh colour from the hash
            probe = 0
            while color is None or color in used:
                d = hashlib.sha256(f"{label}\x00{ordinal}\x00{probe}".encode()).digest()
                color = (d[0], d[1], d[2])
                probe += 1
        used.add(color)
        legend.entries.append((label, color))
    return legend


def _legend_strip(width: int, legend: ColorLegend) -> np.ndarray:
    strip = Image.new("RGB", (width, LEGEND_HEIGHT), (255, 255, 255))
    draw = ImageDraw.Draw(strip)
    font = ImageFont.load_default()
    x = 2
    sw = LEGEND_HEIGHT - 6
    for label, color in legend.entries:
        if x + sw >= width:
            break
        draw.rectangle([x, 3, x + sw, 3 + sw], fill=color)
        x += sw + 2
        draw.text((x, 2), label, fill=(0, 0, 0), font=font)
        x += int(draw.textlength(label, font=font)) + 6
    return np.asarray(strip, dtype=np.float64) / 255.0


def visualize_masks(image: np.ndarray, masks: list[tuple[np.ndarray, str]], alpha: float = ALPHA):
    """Alpha-blend each binary mask in its colour; returns (image with legend strip below, legend)."""
    image = np.asarray(image, dtype=np.float64)
    legend = assign_colors([label for _, label in masks])
    out = image.copy()
    for (mask, _), (_, color) in zip(masks, legend.entries):
        m = np.asarray(mask).astype(bool)
        out[m] = (1 - alpha) * out[m] + alpha * (np.asarray(color, dtype=np.float64) / 255.0)
    strip = _legend_strip(image.shape[1], legend)
    return np.concatenate([out, strip], axis=0), legend


def save_overlay(path, overlay: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(path)
