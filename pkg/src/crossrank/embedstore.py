"""Embedding sets on disk: a JSON manifest next to a raw f32le payload.

Manifest keys::

    count, dim      row count and vector width
    dtype           always "f32le" (row-major, little-endian float32)
    domain          "A" (query side, e.g. sketch) or "B" (gallery side)
    normalize       L2-normalize rows at load time
    payload         payload path, relative to the manifest
    labels          inline list of {"id", "class_id", "class_name"?}
                    or a path to an ``id,class_id[,class_name]`` CSV

Vectors are held in memory as float64; float32 -> float64 -> float32 is
exact, so a load/save cycle reproduces the payload bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

DTYPE = "f32le"
DOMAINS = ("A", "B")
NORM_TOL = 1e-5


class EmbedStoreError(ValueError):
    """Base class for embedding-set contract violations."""


class ManifestError(EmbedStoreError):
    pass


class PayloadSizeError(EmbedStoreError):
    pass


class DuplicateIdError(EmbedStoreError):
    pass


class LabelCountError(EmbedStoreError):
    pass


class ZeroNormError(EmbedStoreError):
    pass


class DimensionError(EmbedStoreError):
    pass


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable, labelled, domain-tagged matrix of feature vectors."""

    vectors: NDArray[np.float64]
    labels: NDArray[np.int64]
    ids: tuple[str, ...]
    domain: str = "B"
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise DimensionError(f"vectors must be 2-D, got shape {vectors.shape}")
        if vectors.shape[1] < 1:
            raise DimensionError("dim must be >= 1")
        if not np.all(np.isfinite(vectors)):
            raise EmbedStoreError("vectors contain non-finite values")
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        ids = tuple(str(i) for i in self.ids)
        if len(labels) != len(vectors):
            raise LabelCountError(
                f"label count mismatch: {len(labels)} labels for {len(vectors)} rows"
            )
        if len(ids) != len(vectors):
            raise LabelCountError(f"id count mismatch: {len(ids)} ids for {len(vectors)} rows")
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DuplicateIdError(f"duplicate id {dup!r}")
        if self.domain not in DOMAINS:
            raise ManifestError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        object.__setattr__(self, "vectors", _readonly(vectors))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "class_names", dict(self.class_names))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.count

    def is_normalized(self, tol: float = NORM_TOL) -> bool:
        norms = np.linalg.norm(self.vectors, axis=1)
        return bool(np.all(np.abs(norms - 1.0) < tol))


@dataclass(frozen=True)
class SplitManifest:
    """Train/test class partition; zero-shot means the two are disjoint."""

    train_classes: frozenset[int]
    test_classes: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "train_classes", frozenset(int(c) for c in self.train_classes))
        object.__setattr__(self, "test_classes", frozenset(int(c) for c in self.test_classes))
        overlap = self.train_classes & self.test_classes
        if overlap:
            raise EmbedStoreError(f"train and test classes overlap: {sorted(overlap)}")


def l2_normalize(es: EmbeddingSet) -> EmbeddingSet:
    norms = np.linalg.norm(es.vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormError(f"zero-norm row, id {es.ids[zero[0]]!r}")
    # already-unit rows are left untouched so the operation is idempotent bitwise
    unit = np.abs(norms - 1.0) <= np.finfo(np.float64).eps * 4
    scale = np.where(unit, 1.0, norms)
    return EmbeddingSet(
        vectors=es.vectors / scale[:, None],
        labels=es.labels,
        ids=es.ids,
        domain=es.domain,
        class_names=es.class_names,
    )


def validate_zero_shot(
    gallery: EmbeddingSet, query: EmbeddingSet, split: SplitManifest
) -> list[str]:
    """List every gallery/query class that also appears in the train split.

    An empty list means the zero-shot contract holds.
    """
    seen = set(gallery.labels.tolist()) | set(query.labels.tolist())
    return [f"class {c} leaks from train" for c in sorted(seen & split.train_classes)]


# --- labels CSV -------------------------------------------------------------


def read_labels_csv(path: str | Path) -> tuple[list[str], list[int], dict[int, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"labels file not found: {path}")
    ids: list[str] = []
    labels: list[int] = []
    names: dict[int, str] = {}
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0] == "id"):
                continue
            if len(row) not in (2, 3):
                raise ManifestError(f"{path}:{lineno}: expected id,class_id[,class_name]")
            try:
                cls = int(row[1])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: class_id {row[1]!r} is not an integer")
            ids.append(row[0])
            labels.append(cls)
            if len(row) == 3 and row[2]:
                names[cls] = row[2]
    return ids, labels, names


def write_labels_csv(path: str | Path, es: EmbeddingSet) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for item_id, cls in zip(es.ids, es.labels.tolist()):
            name = es.class_names.get(cls)
            writer.writerow([item_id, cls] if name is None else [item_id, cls, name])


def _parse_inline_labels(entries: Sequence) -> tuple[list[str], list[int], dict[int, str]]:
    ids, labels, names = [], [], {}
    for k, entry in enumerate(entries):
        if isinstance(entry, dict):
            item_id, cls, name = entry.get("id"), entry.get("class_id"), entry.get("class_name")
        elif isinstance(entry, (list, tuple)) and len(entry) in (2, 3):
            item_id, cls = entry[0], entry[1]
            name = entry[2] if len(entry) == 3 else None
        else:
            raise ManifestError(f"labels[{k}]: expected object or [id, class_id(, name)]")
        if item_id is None or cls is None:
            raise ManifestError(f"labels[{k}]: missing id or class_id")
        ids.append(str(item_id))
        labels.append(int(cls))
        if name:
            names[int(cls)] = str(name)
    return ids, labels, names


# --- manifest I/O -----------------------------------------------------------


def load_embedding_set(manifest_path: str | Path) -> EmbeddingSet:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from None

    for key in ("count", "dim", "payload", "labels"):
        if key not in manifest:
            raise ManifestError(f"{manifest_path}: missing key {key!r}")
    dtype = manifest.get("dtype", DTYPE)
    if dtype != DTYPE:
        raise ManifestError(f"unsupported dtype {dtype!r}, expected {DTYPE!r}")
    count, dim = int(manifest["count"]), int(manifest["dim"])
    if count < 0 or dim < 1:
        raise ManifestError(f"invalid shape count={count} dim={dim}")

    base = manifest_path.parent
    payload_path = base / manifest["payload"]
    if not payload_path.is_file():
        raise FileNotFoundError(f"payload not found: {payload_path}")
    raw = payload_path.read_bytes()
    expected = count * dim * 4
    if len(raw) != expected:
        raise PayloadSizeError(
            f"payload size mismatch: {len(raw)} bytes, expected {count}x{dim}x4 = {expected}"
        )
    vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float64)

    labels_spec = manifest["labels"]
    if isinstance(labels_spec, str):
        ids, labels, names = read_labels_csv(base / labels_spec)
    else:
        ids, labels, names = _parse_inline_labels(labels_spec)
    if len(labels) != count:
        raise LabelCountError(f"label count mismatch: {len(labels)} labels for count={count}")

    es = EmbeddingSet(
        vectors=vectors,
        labels=labels,
        ids=ids,
        domain=manifest.get("domain", "B"),
        class_names=names,
    )
    if manifest.get("normalize", False):
        es = l2_normalize(es)
    return es


def save_embedding_set(
    es: EmbeddingSet,
    manifest_path: str | Path,
    *,
    normalize_on_load: bool = False,
    inline_labels: bool = False,
) -> Path:
    """Write ``<stem>.f32`` (+ ``<stem>.labels.csv``) beside the manifest."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    stem = manifest_path.name.removesuffix(".json")
    payload_name = f"{stem}.f32"
    (manifest_path.parent / payload_name).write_bytes(es.vectors.astype("<f4").tobytes())

    if inline_labels:
        labels: list | str = []
        for item_id, cls in zip(es.ids, es.labels.tolist()):
            entry = {"id": item_id, "class_id": cls}
            if cls in es.class_names:
                entry["class_name"] = es.class_names[cls]
            labels.append(entry)
    else:
        labels = f"{stem}.labels.csv"
        write_labels_csv(manifest_path.parent / labels, es)

    manifest = {
        "count": es.count,
        "dim": es.dim,
        "dtype": DTYPE,
        "domain": es.domain,
        "normalize": bool(normalize_on_load),
        "payload": payload_name,
        "labels": labels,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def from_arrays(
    vectors,
    labels: Iterable[int],
    ids: Iterable[str] | None = None,
    domain: str = "B",
    prefix: str = "",
) -> EmbeddingSet:
    """Convenience constructor; ids default to ``f"{prefix}{row}"``."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if ids is None:
        ids = [f"{prefix}{k}" for k in range(len(vectors))]
    return EmbeddingSet(vectors=vectors, labels=list(labels), ids=tuple(ids), domain=domain)
