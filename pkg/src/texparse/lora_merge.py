"""Low-rank adapter merging and the named-tensor archive used for weights and checkpoints.

Archives are safetensors files: an 8-byte little-endian header length, a UTF-8 JSON
header mapping each name to ``{dtype, shape, data_offsets}``, then the raw
little-endian payload. Free-form metadata (the merge manifest) lives under the
header's ``__metadata__`` key as JSON strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import safetensors.numpy

LORA_A_SUFFIX = ".lora_A"
LORA_B_SUFFIX = ".lora_B"
MANIFEST_KEY = "merge_manifest"

_SUPPORTED_DTYPES = (np.float32, np.float64)


class ArchiveError(ValueError):
    """Raised for malformed archives and shape/name mismatches during merging."""


@dataclass(frozen=True)
class WeightMatrix:
    name: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ArchiveError(f"{self.name}: expected a 2-D matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ArchiveError(f"{self.name}: non-finite entries")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LoraAdapter:
    """Rank-``r`` update ``B @ A`` for the matrix called ``name``, applied with scale ``alpha / r``."""

    name: str
    B: np.ndarray
    A: np.ndarray
    alpha: float

    def __post_init__(self):
        B, A = np.asarray(self.B), np.asarray(self.A)
        if B.ndim != 2 or A.ndim != 2:
            raise ArchiveError(f"{self.name}: adapter factors must be 2-D (B {B.shape}, A {A.shape})")
        if B.shape[1] != A.shape[0]:
            raise ArchiveError(
                f"{self.name}: rank mismatch, B has {B.shape[1]} columns but A has {A.shape[0]} rows"
            )
        if not self.alpha > 0:
            raise ArchiveError(f"{self.name}: alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class TensorArchive:
    entries: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def header(self) -> dict:
        head = {
            name: {"shape": list(arr.shape), "dtype": _dtype_tag(arr.dtype)}
            for name, arr in sorted(self.entries.items())
        }
        if self.metadata:
            head["__metadata__"] = dict(self.metadata)
        return head

    def matrix(self, name: str) -> WeightMatrix:
        return WeightMatrix(name, self.entries[name])

    def copy(self) -> "TensorArchive":
        return TensorArchive({k: v.copy() for k, v in self.entries.items()}, dict(self.metadata))

    def to_bytes(self) -> bytes:
        for name, arr in self.entries.items():
            if arr.dtype not in _SUPPORTED_DTYPES:
                raise ArchiveError(f"{name}: unsupported dtype {arr.dtype}")
        tensors = {k: np.ascontiguousarray(v) for k, v in self.entries.items()}
        return safetensors.numpy.save(tensors, metadata=self.metadata or None)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TensorArchive":
        if len(blob) < 8:
            raise ArchiveError("archive truncated before header length")
        n = int.from_bytes(blob[:8], "little")
        try:
            header = json.loads(blob[8 : 8 + n].decode("utf-8"))
            entries = safetensors.numpy.load(blob)
        except Exception as exc:  # safetensors raises its own error types
            raise ArchiveError(f"unreadable archive: {exc}") from exc
        for name, arr in entries.items():
            if list(arr.shape) != header[name]["shape"]:
                raise ArchiveError(f"{name}: header shape {header[name]['shape']} != payload {arr.shape}")
        return cls(dict(entries), dict(header.get("__metadata__", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TensorArchive":
        return cls.from_bytes(Path(path).read_bytes())

    def manifest(self) -> list[dict]:
        raw = self.metadata.get(MANIFEST_KEY)
        return json.loads(raw) if raw else []


def _dtype_tag(dtype) -> str:
    return {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}.get(np.dtype(dtype), str(dtype))


def merge_lora(W: WeightMatrix, adapter: LoraAdapter) -> WeightMatrix:
    """Return ``W + (alpha / r) * B @ A``; ``W`` itself is left untouched."""
    d, k = W.shape
    B, A = adapter.B, adapter.A
    if B.shape[0] != d:
        raise ArchiveError(f"{W.name}: adapter B has {B.shape[0]} rows but the target has d={d} rows")
    if A.shape[1] != k:
        raise ArchiveError(f"{W.name}: adapter A has {A.shape[1]} columns but the target has k={k} columns")
    if adapter.rank > min(d, k):
        raise ArchiveError(f"{W.name}: rank r={adapter.rank} exceeds min(d, k)={min(d, k)}")
    delta = adapter.scale * (B.astype(np.float64) @ A.astype(np.float64))
    if not delta.any():
        return WeightMatrix(W.name, W.data)
    merged = (W.data.astype(np.float64) + delta).astype(W.data.dtype)
    return WeightMatrix(W.name, merged)


def merge_model(base: TensorArchive, adapters: Iterable[LoraAdapter]) -> TensorArchive:
    adapters = list(adapters)
    seen: set[str] = set()
    for ad in adapters:
        if ad.name not in base.entries:
            raise ArchiveError(f"adapter targets unknown entry {ad.name!r}")
        if ad.name in seen:
            raise ArchiveError(f"duplicate adapter for entry {ad.name!r}")
        seen.add(ad.name)

    out = base.copy()
    if not adapters:
        return out
    manifest = out.manifest()
    for ad in adapters:
        out.entries[ad.name] = merge_lora(base.matrix(ad.name), ad).data.copy()
        manifest.append({"name": ad.name, "rank": ad.rank, "alpha": ad.alpha, "scale": ad.scale})
    out.metadata[MANIFEST_KEY] = json.dumps(manifest, sort_keys=True)
    return out


def adapters_from_archive(archive: TensorArchive, alpha: float, rank: int | None = None) -> list[LoraAdapter]:
    """Pair ``<name>.lora_A`` / ``<name>.lora_B`` entries into adapters sharing one ``alpha``."""
    names = sorted(
        {k[: -len(LORA_A_SUFFIX)] for k in archive.entries if k.endswith(LORA_A_SUFFIX)}
        | {k[: -len(LORA_B_SUFFIX)] for k in archive.entries if k.endswith(LORA_B_SUFFIX)}
    )
    adapters = []
    for name in names:
        try:
            A = archive.entries[name + LORA_A_SUFFIX]
            B = archive.entries[name + LORA_B_SUFFIX]
        except KeyError as exc:
            raise ArchiveError(f"{name}: adapter is missing factor {exc.args[0]!r}") from None
        ad = LoraAdapter(name, B, A, alpha)
        if rank is not None and ad.rank != rank:
            raise ArchiveError(f"{name}: stored rank {ad.rank} != requested rank {rank}")
        adapters.append(ad)
    return adapters


def archive_from_mapping(arrays: Mapping[str, np.ndarray], dtype=np.float32) -> TensorArchive:
    return TensorArchive({k: np.asarray(v, dtype=dtype) for k, v in arrays.items()})
