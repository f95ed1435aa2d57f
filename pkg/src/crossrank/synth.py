"""Deterministic two-domain embedding generator.

Gallery rows (domain B) are ``centroid + noise``; query rows (domain A)
are ``centroid + offset + noise`` where ``offset`` is one shared direction
scaled by ``domain_offset_scale``. Noise is isotropic Gaussian scaled so
its expected norm is ``intra_class_spread``. Every row is L2-normalized.

An optional chain class replaces the last ``length`` gallery members of
that class with points on a great-circle arc leaving the class centroid:
link k sits at arc angle ``k * link_spread``. The arc heads towards the
mean of the other centroids, so the far end of the chain is distant from
the chain class's queries yet close to the rest of the gallery.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingSet


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class ChainSpec:
    class_id: int
    length: int
    link_spread: float  # arc step between consecutive links, radians


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int
    per_class_gallery: int
    per_class_queries: int
    dim: int
    intra_class_spread: float = 0.0
    domain_offset_scale: float = 0.0
    chain: ChainSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.chain, dict):
            object.__setattr__(self, "chain", ChainSpec(**self.chain))
        for name in ("n_classes", "per_class_gallery", "per_class_queries"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be >= 1")
        if self.dim < 2:
            raise SynthError(f"dim={self.dim} too small to host separated class centroids (need >= 2)")
        if self.intra_class_spread < 0 or self.domain_offset_scale < 0:
            raise SynthError("spreads must be >= 0")
        c = self.chain
        if c is not None:
            if not 0 <= c.class_id < self.n_classes:
                raise SynthError(f"chain class {c.class_id} outside [0, {self.n_classes})")
            if not 1 <= c.length <= self.per_class_gallery:
                raise SynthError(f"chain length {c.length} must be in [1, {self.per_class_gallery}]")
            if c.link_spread < 0:
                raise SynthError("chain link_spread must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def chain_indices(self) -> list[int]:
        """Gallery row indices of the chain links, link 1 first."""
        if self.chain is None:
            return []
        end = (self.chain.class_id + 1) * self.per_class_gallery
        return list(range(end - self.chain.length, end))


# The desk-scale chain scenario used to demonstrate re-ranking.
CHAIN_SCENARIO = SynthSpec(
    n_classes=10,
    per_class_gallery=20,
    per_class_queries=2,
    dim=32,
    intra_class_spread=1.0,
    domain_offset_scale=0.5,
    chain=ChainSpec(class_id=0, length=4, link_spread=0.15),
    seed=0,
)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate(spec: SynthSpec) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Return ``(gallery, queries)``; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    C, n_g, n_q, dim = spec.n_classes, spec.per_class_gallery, spec.per_class_queries, spec.dim
    noise_scale = spec.intra_class_spread / np.sqrt(dim)

    centroids = _unit_rows(rng.normal(size=(C, dim)))
    gallery = np.repeat(centroids, n_g, axis=0) + noise_scale * rng.normal(size=(C * n_g, dim))
    gallery = _unit_rows(gallery)

    offset = spec.domain_offset_scale * _unit_rows(rng.normal(size=(1, dim)))
    queries = np.repeat(centroids, n_q, axis=0) + offset + noise_scale * rng.normal(size=(C * n_q, dim))
    queries = _unit_rows(queries)

    if spec.chain is not None:
        gallery[spec.chain_indices()] = _chain_points(centroids, spec.chain)

    g_labels = np.repeat(np.arange(C), n_g)
    q_labels = np.repeat(np.arange(C), n_q)
    gallery_set = EmbeddingSet(gallery, g_labels, tuple(f"g{k:05d}" for k in range(C * n_g)), domain="B")
    query_set = EmbeddingSet(queries, q_labels, tuple(f"q{k:05d}" for k in range(C * n_q)), domain="A")
    return gallery_set, query_set


def _chain_points(centroids: np.ndarray, chain: ChainSpec) -> np.ndarray:
    start = centroids[chain.class_id]
    others = np.delete(centroids, chain.class_id, axis=0)
    if len(others):
        target = others.mean(axis=0)
    else:
        target = np.roll(start, 1)
    direction = target - (target @ start) * start
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        # target parallel to start: any orthogonal direction will do
        direction = np.zeros_like(start)
        direction[np.argmin(np.abs(start))] = 1.0
        direction -= (direction @ start) * start
        norm = np.linalg.norm(direction)
    direction /= norm
    angles = chain.link_spread * np.arange(1, chain.length + 1)
    return np.cos(angles)[:, None] * start[None, :] + np.sin(angles)[:, None] * direction[None, :]


@dataclass(frozen=True)
class DiscriminationScenario:
    """Two gallery items, ``x`` and ``y``, tied in query distance.

    ``y`` is the nearest neighbour of every item ranked inside the top-K
    for the query; ``x`` is the nearest neighbour of every item ranked
    beyond K. Gallery-gallery distances to the respective neighbour are
    equal (``link``), so any difference in penalty comes from the
    query-rank scale.
    """

    query_row: np.ndarray
    gallery: np.ndarray
    x: int
    y: int
    near: list[int]
    far: list[int]


def discrimination_scenario(n_near: int = 14, n_far: int = 6, separation: float = 10.0,
                            link: float = 1.0) -> DiscriminationScenario:
    """Build the scenario in ``1 + n_near + n_far`` dimensions.

    ``y`` sits at the origin with the near items at ``link`` along their own
    axes; ``x`` sits ``separation`` away with the far items arranged the
    same way around it. Query distances put the near items first, then
    ``x`` and ``y`` (tied), then the far items.
    """
    dim = 1 + n_near + n_far
    x_pos = np.zeros(dim)
    x_pos[0] = separation
    y_pos = np.zeros(dim)
    near = [y_pos + link * np.eye(dim)[1 + k] for k in range(n_near)]
    far = [x_pos + link * np.eye(dim)[1 + n_near + k] for k in range(n_far)]
    gallery = np.vstack([x_pos, y_pos, *near, *far])
    near_idx = list(range(2, 2 + n_near))
    far_idx = list(range(2 + n_near, 2 + n_near + n_far))
    row = np.empty(len(gallery))
    row[near_idx] = 0.1 + 0.001 * np.arange(n_near)
    row[[0, 1]] = 0.5
    row[far_idx] = 1.0 + 0.001 * np.arange(n_far)
    return DiscriminationScenario(query_row=row, gallery=gallery, x=0, y=1, near=near_idx, far=far_idx)
