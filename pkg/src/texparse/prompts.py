"""Key-phrase extraction, prompt embedding, label ensembles and the extended body-part list."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

K_PHRASE = 9
DEFAULT_TEMPLATE = "a photo of a {}"
TEXT_DIM = 32

EBP_LABELS = (
    "face", "faces", "hand", "hands", "hair", "hairs", "wavy", "ponytail", "bob", "bald",
    "curly", "afro-hair", "leg", "legs", "back", "chest", "belly", "stomach", "feet",
)  # fmt: skip

BASE_CATEGORIES = (
    "face", "left hand", "right hand", "hair", "bag", "special clothing", "tops", "eyewear",
    "left leg", "right leg", "hat", "belt", "left shoe", "right shoe", "one-piece outfit",
    "scarf", "bottoms",
)  # fmt: skip

_TOKEN = re.compile(r"[a-z0-9][a-z0-9'/-]*|[^\sa-z0-9]")


def _load_json(name: str):
    return json.loads(resources.files("texparse.resources").joinpath(name).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Lexicon:
    nouns: frozenset[str]
    adjectives: frozenset[str]
    stopwords: frozenset[str]

    @classmethod
    def from_dict(cls, d: dict) -> "Lexicon":
        return cls(frozenset(d["nouns"]), frozenset(d["adjectives"]), frozenset(d["stopwords"]))

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def tag(self, token: str) -> str | None:
        """'ADJ', 'NOUN' or None (stopword / punctuation)."""
        if not token[0].isalnum() or token in self.stopwords:
            return None
        if token in self.adjectives and token not in self.nouns:
            return "ADJ"
        return "NOUN"


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    return Lexicon.from_dict(_load_json("lexicon.json"))


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def extract_phrases(caption: str, K: int = K_PHRASE, lexicon: Lexicon | None = None) -> list[str]:
    """Nouns and adjectives in order of appearance, with adjective runs fused onto the following noun.

    An adjective run that is not followed by a noun is kept as its own phrase.
    """
    lexicon = lexicon or default_lexicon()
    phrases: list[str] = []
    run: list[str] = []

    def emit(words):
        p = " ".join(words)
        if p and p not in phrases:
            phrases.append(p)

    for tok in tokenize(caption):
        tag = lexicon.tag(tok)
        if tag == "ADJ":
            run.append(tok)
        elif tag == "NOUN":
            emit(run + [tok])
            run = []
        else:
            emit(run)
            run = []
    emit(run)
    return phrases[:K]


# ---------------------------------------------------------------------------
# text embedding


class EmbeddingError(KeyError):
    pass


@dataclass
class TextEmbedder:
    """``toy``: seeded hashed bag of non-stopword tokens; ``archive``: lookup of precomputed vectors."""

    mode: str = "toy"
    dim: int = TEXT_DIM
    seed: int = 0
    table: dict[str, np.ndarray] = field(default_factory=dict)
    lexicon: Lexicon | None = None

    def __post_init__(self):
        if self.mode not in ("toy", "archive"):
            raise ValueError(f"unknown embedder mode {self.mode!r}")

    @classmethod
    def from_archive(cls, path: str | Path) -> "TextEmbedder":
        from .lora_merge import TensorArchive

        arch = TensorArchive.load(path)
        table = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in arch.entries.items()}
        dims = {v.size for v in table.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding widths in {path}: {sorted(dims)}")
        return cls(mode="archive", dim=dims.pop(), table=table)

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, prompt: str) -> np.ndarray:
        if self.mode == "archive":
            try:
                v = self.table[prompt]
            except KeyError:
                raise EmbeddingError(f"no precomputed embedding for prompt {prompt!r}") from None
        else:
            lex = self.lexicon or default_lexicon()
            toks = [t for t in tokenize(prompt) if lex.tag(t) is not None] or [prompt.lower()]
            v = np.sum([self._token_vector(t) for t in toks], axis=0)
        return v / np.linalg.norm(v)


@dataclass
class PromptSet:
    phrases: list[str]
    embeddings: np.ndarray  # K x d, unit rows
    caption: str = ""

    def __len__(self) -> int:
        return len(self.phrases)


def embed_prompts(
    phrases: list[str], embedder: TextEmbedder, template: str = DEFAULT_TEMPLATE, caption: str = ""
) -> PromptSet:
    if template.count("{}") != 1:
        raise ValueError(f"template must contain exactly one '{{}}' placeholder: {template!r}")
    if phrases:
        emb = np.stack([embedder.embed(template.format(p)) for p in phrases])
    else:
        emb = np.zeros((0, embedder.dim))
    return PromptSet(list(phrases), emb, caption)


# ---------------------------------------------------------------------------
# label tables


EnsembleTable = dict[str, list[str]]


@lru_cache(maxsize=1)
def _default_ensembles() -> tuple[tuple[str, tuple[str, ...]], ...]:
    return tuple((k, tuple(v)) for k, v in _load_json("ensembles.json").items())


def default_ensembles() -> EnsembleTable:
    return {k: list(v) for k, v in _default_ensembles()}


def expand_ensemble(label: str, table: EnsembleTable | None = None) -> list[str]:
    table = default_ensembles() if table is None else table
    return list(table.get(label, [label]))


def ebp_labels() -> list[str]:
    return list(EBP_LABELS)


@lru_cache(maxsize=1)
def _default_unification() -> tuple[tuple[str, str], ...]:
    return tuple(_load_json("unification.json").items())


def default_unification() -> dict[str, str]:
    return dict(_default_unification())


def unify(label: str, mapping: dict[str, str] | None = None) -> str:
    mapping = default_unification() if mapping is None else mapping
    label = label.strip().lower()
    return mapping.get(label, label)


def canonical_label(phrase: str, mapping: dict[str, str] | None = None, lexicon: Lexicon | None = None) -> str:
    """Map a free-form phrase ("red hat", "left hand") onto its unified category.

    The full phrase is tried first, then with leading adjectives dropped one at a time.
    """
    mapping = default_unification() if mapping is None else mapping
    lexicon = lexicon or default_lexicon()
    words = phrase.strip().lower().split()
    for i in range(len(words)):
        cand = " ".join(words[i:])
        if cand in mapping or cand in mapping.values():
            return mapping.get(cand, cand)
        if lexicon.tag(words[i]) != "ADJ":
            break
    while len(words) > 1 and lexicon.tag(words[0]) == "ADJ":
        words = words[1:]
    return unify(" ".join(words), mapping)


def link_phrases(labels: list[str], phrases: list[str], mapping: dict[str, str] | None = None) -> list[int | None]:
    """Index of the phrase that names each label, or None.

    Tried in order: exact match, a phrase ending with the label ("red hat" for
    "hat"), then equal canonical labels.
    """
    mapping = default_unification() if mapping is None else mapping
    canon = [canonical_label(p, mapping) for p in phrases]
    out: list[int | None] = []
    for label in labels:
        lab = label.strip().lower()
        idx = next((k for k, p in enumerate(phrases) if p == lab), None)
        if idx is None:
            idx = next((k for k, p in enumerate(phrases) if p.endswith(" " + lab)), None)
        if idx is None:
            c = canonical_label(lab, mapping)
            idx = next((k for k, pc in enumerate(canon) if pc == c), None)
        out.append(idx)
    return out
