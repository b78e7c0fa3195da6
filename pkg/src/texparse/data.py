"""Labeled samples, the procedural figure generator and the on-disk dataset layout.

Layout::

    images/<name>.png
    masks/<name>/<instance>_<label>_<person>.png   (binary, label URL-quoted)
    captions.jsonl                                  {"image": name, "caption": text}
    meta/*.json                                     label maps, ensemble tables
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

import numpy as np
from PIL import Image

from .prompts import BASE_CATEGORIES, default_ensembles, default_unification


class DataError(Exception):
    pass


@dataclass
class Instance:
    mask: np.ndarray  # H x W bool
    label: str
    person: int = 0


@dataclass
class LabeledSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    caption: str
    instances: list[Instance] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for inst in self.instances:
            if inst.mask.shape != (h, w):
                raise DataError(f"{self.name}: mask shape {inst.mask.shape} != image {(h, w)}")
            if inst.person < 0:
                raise DataError(f"{self.name}: negative person id")


# ---------------------------------------------------------------------------
# procedural figures

COLORS = {
    "red": (0.85, 0.1, 0.1),
    "blue": (0.1, 0.2, 0.85),
    "green": (0.1, 0.65, 0.2),
    "yellow": (0.95, 0.85, 0.1),
    "purple": (0.55, 0.15, 0.7),
    "orange": (0.95, 0.5, 0.05),
    "pink": (0.95, 0.5, 0.7),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
    "gray": (0.5, 0.5, 0.5),
    "navy": (0.05, 0.08, 0.35),
    "teal": (0.0, 0.5, 0.5),
}
HAIR_COLORS = {"black": (0.08, 0.06, 0.05), "brown": (0.4, 0.25, 0.1), "blond": (0.9, 0.8, 0.45)}
SKIN = [(0.96, 0.8, 0.69), (0.82, 0.62, 0.48), (0.55, 0.38, 0.26)]
PEOPLE = ("man", "woman", "person")
UNSEEN_CLOTHING = ("saree", "hoodie", "camisole", "jersey")

TORSO = ("tops", "one-piece outfit", "special clothing")
OPTIONAL = (
    "face", "hair", "hat", "eyewear", "scarf", "belt", "bag", "bottoms",
    "left hand", "right hand", "left leg", "right leg", "left shoe", "right shoe",
)  # fmt: skip
PRESENCE = {
    "face": 0.75, "hair": 0.7, "hat": 0.4, "eyewear": 0.3, "scarf": 0.3, "belt": 0.3, "bag": 0.35,
    "bottoms": 0.8, "left hand": 0.6, "right hand": 0.6, "left leg": 0.6, "right leg": 0.6,
    "left shoe": 0.5, "right shoe": 0.5,
}  # fmt: skip
SKIN_PARTS = {"face", "left hand", "right hand", "left leg", "right leg"}
HEAD_ITEMS = {"hair", "hat", "eyewear"}


def _rect(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[max(int(round(y0)), 0) : max(int(round(y1)), 0), max(int(round(x0)), 0) : max(int(round(x1)), 0)] = True
    return m


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _figure_shapes(h, w, box, rng, parts: set[str], torso: str):
    """Shapes in painter's order (later shapes occlude earlier ones)."""
    x0, x1 = box
    bw = x1 - x0
    cx = (x0 + x1) / 2 + rng.uniform(-0.03, 0.03) * bw
    u = h / 64.0
    head_r = rng.uniform(6.5, 7.5) * u
    head_cy = rng.uniform(10, 12) * u
    torso_top = head_cy + head_r + 0.5 * u  # overlaps the chin so every figure is one connected blob
    torso_bot = torso_top + rng.uniform(17, 19) * u
    tw = rng.uniform(0.36, 0.44) * bw
    legs_bot = h - 5 * u
    shapes = []
    if "hair" in parts:
        shapes.append(("hair", _ellipse(h, w, head_cy - 1.5 * u, cx, head_r + 2 * u, head_r + 2 * u)))
    if "face" in parts:
        shapes.append(("face", _ellipse(h, w, head_cy + 1 * u, cx, head_r, head_r * 0.85)))
    if "hat" in parts:
        shapes.append(("hat", _rect(h, w, head_cy - head_r - 3 * u, head_cy - head_r + 3 * u, cx - head_r - 1.5 * u, cx + head_r + 1.5 * u)))
    if "eyewear" in parts:
        shapes.append(("eyewear", _rect(h, w, head_cy - 0.5 * u, head_cy + 3 * u, cx - head_r * 0.85, cx + head_r * 0.85)))
    leg_w = tw * 0.38
    lower_top = torso_bot if torso != "one-piece outfit" else torso_bot + 8 * u
    for side, sgn in (("left", -1), ("right", 1)):
        lx = cx + sgn * tw * 0.27
        if f"{side} leg" in parts:
            shapes.append((f"{side} leg", _rect(h, w, torso_bot, legs_bot, lx - leg_w / 2, lx + leg_w / 2)))
        if f"{side} shoe" in parts:
            shapes.append((f"{side} shoe", _rect(h, w, legs_bot - 4 * u, legs_bot + 1 * u, lx - leg_w / 2 - 1 * u, lx + leg_w / 2 + 1 * u)))
    if "bottoms" in parts and torso != "one-piece outfit":
        shapes.append(("bottoms", _rect(h, w, torso_bot - 1 * u, lower_top + 10 * u, cx - tw / 2, cx + tw / 2)))
    shapes.append((torso, _rect(h, w, torso_top, lower_top, cx - tw / 2, cx + tw / 2)))
    for side, sgn in (("left", -1), ("right", 1)):
        if f"{side} hand" in parts:
            hx = cx + sgn * (tw / 2 + 2 * u)
            shapes.append((f"{side} hand", _rect(h, w, torso_top + 4 * u, torso_bot + 2 * u, hx - 2.5 * u, hx + 2.5 * u)))
    if "scarf" in parts:
        shapes.append(("scarf", _rect(h, w, torso_top, torso_top + 4 * u, cx - tw / 2 + 1 * u, cx + tw / 2 - 1 * u)))
    if "belt" in parts:
        shapes.append(("belt", _rect(h, w, torso_bot - 3 * u, torso_bot, cx - tw / 2, cx + tw / 2)))
    if "bag" in parts:
        bx = cx + tw / 2 + 3 * u
        shapes.append(("bag", _rect(h, w, torso_bot - 4 * u, torso_bot + 7 * u, bx - 4 * u, bx + 4 * u)))
    return shapes


def _phrase(label: str, color: str | None) -> str:
    return f"{color} {label}" if color else label


def _article(phrase: str) -> str:
    return ("an " if phrase[0] in "aeiou" else "a ") + phrase


def _caption(person: str, garments: list[tuple[str, str]], body: list[tuple[str, str | None]]) -> str:
    def join(items):
        return items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]

    text = f"a {person}"
    if garments:
        text += " wearing " + join([_article(_phrase(l, c)) for l, c in garments])
    if body:
        text += " with " + join([_phrase(l, c) for l, c in body])
    return text


def generate_synthetic_dataset(
    n: int,
    seed: int = 0,
    vocab: tuple[str, ...] = BASE_CATEGORIES,
    size: int = 64,
    figures_per_image: int = 1,
    max_instances: int = 8,
    unseen_rate: float = 0.0,
    noise: float = 0.02,
) -> list[LabeledSample]:
    """Procedural people: head, hair, torso garment, lower garment, limbs and accessories.

    Every visible part becomes an instance whose label also appears, with its colour,
    in the caption. Categories not drawn yet are force-included in later samples so
    that small sets still cover the vocabulary. With ``unseen_rate > 0`` the torso
    garment is sometimes relabelled to a clothing term outside the base categories.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    vocab = tuple(vocab)
    pending = [c for c in vocab]
    samples = []
    for idx in range(n):
        h = w = size
        bg = np.array(rng.uniform(0.55, 0.8, size=3))
        img = np.broadcast_to(bg, (h, w, 3)).copy()
        label_map = np.full((h, w), -1, dtype=np.int64)
        records: list[tuple[str, int, str | None]] = []  # (label, person, colour name)
        people_words = []
        captions = []
        budget = max_instances
        for p in range(figures_per_image):
            per_fig = budget // (figures_per_image - p)
            torso_opts = [t for t in TORSO if t in vocab] or ["tops"]
            forced_torso = [t for t in pending if t in torso_opts]
            torso = forced_torso[0] if forced_torso else torso_opts[rng.integers(len(torso_opts))]
            parts = {c for c in OPTIONAL if c in vocab and rng.random() < PRESENCE[c]}
            if torso == "one-piece outfit":
                parts -= {"bottoms", "belt"}
            forced = [c for c in pending if c in OPTIONAL and not (torso == "one-piece outfit" and c in ("bottoms", "belt"))]
            keep = forced[: max(per_fig - 1, 0) // 2]
            parts |= set(keep)
            # shoes stand on their leg and head accessories need a face to sit on
            legs = {c.replace("shoe", "leg") for c in parts if c.endswith("shoe") and c.replace("shoe", "leg") in vocab}
            parts |= legs
            protected = set(keep) | {c.replace("shoe", "leg") for c in keep if c.endswith("shoe")} & legs
            if HEAD_ITEMS & set(keep) and "face" in vocab:
                parts.add("face")
            if "face" in parts and (HEAD_ITEMS & set(keep) or len(protected) + 2 <= per_fig):
                protected.add("face")
            if "face" not in parts:
                parts -= HEAD_ITEMS
            extra = sorted(parts - protected)
            rng.shuffle(extra)
            while len(parts) + 1 > per_fig and extra:
                c = extra.pop()
                if c not in parts:
                    continue
                parts.discard(c)
                parts.discard(c.replace("leg", "shoe") if c.endswith("leg") else c)
                if c == "face":
                    parts -= HEAD_ITEMS
            torso_label = torso
            if unseen_rate and rng.random() < unseen_rate and torso != "tops":
                torso_label = UNSEEN_CLOTHING[rng.integers(len(UNSEEN_CLOTHING))]
            box = (p * w / figures_per_image, (p + 1) * w / figures_per_image)
            skin = SKIN[rng.integers(len(SKIN))]
            color_names = list(COLORS)
            rng.shuffle(color_names)
            hair_color = list(HAIR_COLORS)[rng.integers(len(HAIR_COLORS))]
            garment_phr, body_phr = [], []
            for label, mask in _figure_shapes(h, w, box, rng, parts, torso):
                if label in SKIN_PARTS:
                    rgb, cname = skin, None
                elif label == "hair":
                    rgb, cname = HAIR_COLORS[hair_color], hair_color
                else:
                    cname = color_names.pop()
                    rgb = COLORS[cname]
                out_label = torso_label if label == torso else label
                img[mask] = rgb
                k = len(records)
                label_map[mask] = k
                records.append((out_label, p, cname))
                if label in SKIN_PARTS or label == "hair":
                    body_phr.append((out_label, cname))
                else:
                    garment_phr.append((out_label, cname))
                if label in pending:
                    pending.remove(label)
            budget -= len(parts) + 1
            word = PEOPLE[rng.integers(len(PEOPLE))]
            people_words.append(word)
            captions.append(_caption(word, garment_phr, body_phr))
        if noise:
            img = img + rng.normal(0, noise, size=img.shape)
        img = np.clip(img, 0, 1)
        instances = []
        for k, (label, person, _) in enumerate(records):
            m = label_map == k
            if m.any():
                instances.append(Instance(m, label, person))
        caption = "; ".join(captions)
        samples.append(LabeledSample(img, caption, instances, name=f"synth_{idx:04d}"))
    return samples


# ---------------------------------------------------------------------------
# transforms

_LR = re.compile(r"\b(left|right)\b")


def swap_sides(text: str) -> str:
    return _LR.sub(lambda m: "right" if m.group(1) == "left" else "left", text)


def flip_sample(sample: LabeledSample, horizontal: bool = False, vertical: bool = False) -> LabeledSample:
    """Mirror image and masks. A horizontal flip also swaps left/right in labels and caption."""
    img = sample.image
    insts = [Instance(i.mask, i.label, i.person) for i in sample.instances]
    caption = sample.caption
    if horizontal:
        img = img[:, ::-1]
        insts = [Instance(i.mask[:, ::-1], swap_sides(i.label), i.person) for i in insts]
        caption = swap_sides(caption)
    if vertical:
        img = img[::-1]
        insts = [Instance(i.mask[::-1], i.label, i.person) for i in insts]
    return LabeledSample(
        np.ascontiguousarray(img), caption, [Instance(np.ascontiguousarray(i.mask), i.label, i.person) for i in insts], sample.name
    )


def resize_sample(sample: LabeledSample, size: int, keep_aspect: bool = False) -> LabeledSample:
    """Square resize for training; with ``keep_aspect`` the shorter edge becomes ``size``.

    Images use bilinear resampling, masks nearest-neighbour.
    """
    h, w = sample.image.shape[:2]
    if keep_aspect:
        scale = size / min(h, w)
        out_h, out_w = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    else:
        out_h = out_w = size
    if (out_h, out_w) == (h, w):
        return sample
    img = np.stack(
        [
            np.asarray(Image.fromarray(sample.image[..., c].astype(np.float32), mode="F").resize((out_w, out_h), Image.BILINEAR))
            for c in range(3)
        ],
        axis=-1,
    ).astype(np.float64)
    img = np.clip(img, 0.0, 1.0)
    insts = [
        Instance(np.asarray(Image.fromarray(i.mask.astype(np.uint8)).resize((out_w, out_h), Image.NEAREST)) > 0, i.label, i.person)
        for i in sample.instances
    ]
    return LabeledSample(img, sample.caption, insts, sample.name)


# ---------------------------------------------------------------------------
# disk layout


def _to_png(arr: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8))


def save_dataset(samples: list[LabeledSample], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "meta").mkdir(exist_ok=True)
    lines = []
    for s in samples:
        _to_png(s.image).save(root / "images" / f"{s.name}.png")
        mdir = root / "masks" / s.name
        mdir.mkdir(parents=True, exist_ok=True)
        for k, inst in enumerate(s.instances):
            Image.fromarray(inst.mask.astype(np.uint8) * 255).save(
                mdir / f"{k:03d}_{quote(inst.label, safe='-')}_{inst.person}.png"
            )
        lines.append(json.dumps({"image": s.name, "caption": s.caption}, sort_keys=True))
    (root / "captions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "meta" / "unification.json").write_text(json.dumps(default_unification(), indent=1, sort_keys=True))
    (root / "meta" / "ensembles.json").write_text(json.dumps(default_ensembles(), indent=1, sort_keys=True))


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_dataset(root: str | Path) -> list[LabeledSample]:
    root = Path(root)
    cap_file = root / "captions.jsonl"
    if not cap_file.exists():
        raise DataError(f"{root}: missing captions.jsonl")
    samples = []
    for line in cap_file.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            name = rec["image"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"{cap_file}: malformed line {line[:60]!r}") from None
        img_path = root / "images" / f"{name}.png"
        if not img_path.exists():
            raise DataError(f"{root}: missing image for {name}")
        image = load_image(img_path)
        instances = []
        mdir = root / "masks" / name
        for mp in sorted(mdir.glob("*.png")) if mdir.exists() else []:
            try:
                _, rest = mp.stem.split("_", 1)
                label, person = rest.rsplit("_", 1)
                person = int(person)
            except ValueError:
                raise DataError(f"bad mask file name {mp.name}") from None
            mask = np.asarray(Image.open(mp).convert("L")) > 127
            instances.append(Instance(mask, unquote(label), person))
        samples.append(LabeledSample(image, rec.get("caption", ""), instances, name=name))
    return samples


def load_meta(root: str | Path, name: str, default):
    path = Path(root) / "meta" / f"{name}.json"
    return json.loads(path.read_text()) if path.exists() else default
