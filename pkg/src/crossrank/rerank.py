"""Iterative test-time re-ranking of a gallery against a single query.

Each step adds a non-negative penalty to every query-gallery distance::

    d_i <- d_i + beta * sum_{j in J} alpha[rho(j, i)] * gamma * r_ji * D_ji

where ``r_ji`` is the (1-based) rank of gallery item i in gallery item j's
list, ``D_ji`` their embedding distance, ``J`` the ``m_limit`` items
currently ranked nearest the query, and ``rho(j, i)`` the current query
rank of j (``QUERY_RANK_OF_J``) or of i (``QUERY_RANK_OF_I``). The scale
``alpha[r]`` is ``alpha_low_slope * r`` up to ``k_cut`` and 1.0 beyond.
Iteration stops once the ranking permutation repeats.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .embedstore import DimensionError, EmbeddingSet
from .ranking import (
    DistanceMatrix,
    RankMatrix,
    euclidean_distances,
    pairwise_distances,
    rank_rows,
    rank_vector,
)

ALL = "all"
MAX_ITERS_HIT = "max_iters_hit"


class RerankError(ValueError):
    pass


class AlphaVariant(str, enum.Enum):
    QUERY_RANK_OF_J = "query-j"
    QUERY_RANK_OF_I = "query-i"


@dataclass(frozen=True)
class RerankConfig:
    beta: float = 0.1
    gamma: float = 0.01
    k_cut: int = 16
    alpha_low_slope: float = 0.01
    # top-M under the current query ranking; "all" sums over the whole gallery.
    # Values above the gallery size are clamped to it.
    m_limit: int | str = 16
    max_iters: int = 1000
    alpha_arg_variant: AlphaVariant = AlphaVariant.QUERY_RANK_OF_J

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0 or self.alpha_low_slope < 0:
            raise RerankError("beta, gamma and alpha_low_slope must be >= 0")
        if int(self.k_cut) != self.k_cut or self.k_cut < 1:
            raise RerankError(f"k_cut must be an integer >= 1, got {self.k_cut!r}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise RerankError(f"max_iters must be an integer >= 1, got {self.max_iters!r}")
        m = self.m_limit
        if isinstance(m, str):
            if m.lower() != ALL:
                m = int(m)
            else:
                m = ALL
        if m != ALL and (isinstance(m, bool) or int(m) != m or m < 1):
            raise RerankError(f"m_limit must be 'all' or an integer >= 1, got {self.m_limit!r}")
        object.__setattr__(self, "m_limit", m if m == ALL else int(m))
        object.__setattr__(self, "alpha_arg_variant", AlphaVariant(self.alpha_arg_variant))

    def effective_m(self, gallery_size: int) -> int:
        return gallery_size if self.m_limit == ALL else min(self.m_limit, gallery_size)


def alpha(r: int, cfg: RerankConfig = RerankConfig()) -> float:
    """Scale for query rank ``r`` (1 = nearest)."""
    if r < 1:
        raise RerankError(f"rank must be >= 1, got {r}")
    return cfg.alpha_low_slope * r if r <= cfg.k_cut else 1.0


def alpha_vector(ranks: np.ndarray, cfg: RerankConfig) -> np.ndarray:
    ranks = np.asarray(ranks)
    return np.where(ranks <= cfg.k_cut, cfg.alpha_low_slope * ranks, 1.0)


@dataclass(frozen=True)
class RerankState:
    distances: NDArray[np.float64]
    iteration: int
    ranking: NDArray[np.int64]  # gallery indices, nearest first
    ranks: NDArray[np.int64]  # ranks[i] = 1-based position of item i


@dataclass(frozen=True)
class TraceSnapshot:
    iteration: int
    ranking: NDArray[np.int64] | None
    metric: float | None = None


@dataclass
class RerankTrace:
    snapshots: list[TraceSnapshot] = field(default_factory=list)
    converged_at: int | str = MAX_ITERS_HIT

    @property
    def iterations(self) -> list[int]:
        return [s.iteration for s in self.snapshots]

    def ranking_at(self, t: int) -> np.ndarray:
        """Ranking in force at iteration ``t`` (latest snapshot at or before t)."""
        best = None
        for snap in self.snapshots:
            if snap.iteration > t:
                break
            best = snap
        if best is None or best.ranking is None:
            raise KeyError(f"no ranking stored at or before iteration {t}")
        return best.ranking


@dataclass(frozen=True)
class TraceOptions:
    """Which iterations to keep: all up to ``dense_until``, then every
    ``every``-th (the final ranking is always kept)."""

    thin: bool = True
    dense_until: int = 32
    every: int = 8
    keep_rankings: bool = True
    metric: Callable[[np.ndarray], float] | None = None

    def keeps(self, t: int) -> bool:
        return not self.thin or t <= self.dense_until or t % self.every == 0


@dataclass(frozen=True)
class GalleryGraph:
    """Gallery-gallery distances and ranks, computed once and shared
    read-only by every query."""

    dist: NDArray[np.float64]
    ranks: NDArray[np.int64]
    weights: NDArray[np.float64]  # weights[j, i] = ranks[j, i] * dist[j, i]
    column_sums: NDArray[np.float64]
    ids: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.dist.shape[0]

    @classmethod
    def from_matrices(cls, gg_dist, gg_ranks, ids: Sequence[str] = ()) -> "GalleryGraph":
        dist = np.asarray(gg_dist.values if isinstance(gg_dist, DistanceMatrix) else gg_dist, dtype=np.float64)
        ranks = np.asarray(gg_ranks.ranks if isinstance(gg_ranks, RankMatrix) else gg_ranks, dtype=np.int64)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
            raise RerankError(f"gallery distance matrix must be square, got {dist.shape}")
        if ranks.shape != dist.shape:
            raise RerankError(f"rank matrix shape {ranks.shape} != distance shape {dist.shape}")
        weights = ranks * dist
        for arr in (dist, ranks, weights):
            arr.setflags(write=False)
        sums = weights.sum(axis=0)
        sums.setflags(write=False)
        if not ids and isinstance(gg_dist, DistanceMatrix):
            ids = gg_dist.col_ids
        return cls(dist=dist, ranks=ranks, weights=weights, column_sums=sums, ids=tuple(ids))

    @classmethod
    def from_gallery(cls, gallery) -> "GalleryGraph":
        dm = pairwise_distances(gallery)
        return cls.from_matrices(dm, rank_rows(dm))


def init_rerank(query_row) -> RerankState:
    d = np.array(query_row.values if isinstance(query_row, DistanceMatrix) else query_row, dtype=np.float64)
    d = d.reshape(-1)
    if d.size == 0:
        raise RerankError("empty gallery")
    order, ranks = rank_vector(d)
    return RerankState(distances=d, iteration=0, ranking=order, ranks=ranks)


def penalties(state: RerankState, graph: GalleryGraph, cfg: RerankConfig) -> np.ndarray:
    """Per-item increment ``d^(t+1) - d^(t)`` that one step adds."""
    G = graph.size
    if state.distances.shape[0] != G:
        raise RerankError(f"query row has {state.distances.shape[0]} entries, gallery has {G}")
    m = cfg.effective_m(G)
    scale = alpha_vector(state.ranks, cfg)
    if cfg.alpha_arg_variant is AlphaVariant.QUERY_RANK_OF_J:
        if m == G:
            acc = scale @ graph.weights
        else:
            top = state.ranking[:m]
            acc = scale[top] @ graph.weights[top]
    else:
        col = graph.column_sums if m == G else graph.weights[state.ranking[:m]].sum(axis=0)
        acc = scale * col
    return cfg.beta * cfg.gamma * acc


def _advance(state: RerankState, graph: GalleryGraph, cfg: RerankConfig) -> RerankState:
    d = state.distances + penalties(state, graph, cfg)
    order, ranks = rank_vector(d)
    return RerankState(distances=d, iteration=state.iteration + 1, ranking=order, ranks=ranks)


def rerank_step(
    state: RerankState,
    gg_dist: DistanceMatrix | np.ndarray | GalleryGraph,
    gg_ranks: RankMatrix | np.ndarray | None = None,
    cfg: RerankConfig = RerankConfig(),
) -> RerankState:
    graph = gg_dist if isinstance(gg_dist, GalleryGraph) else GalleryGraph.from_matrices(gg_dist, gg_ranks)
    return _advance(state, graph, cfg)


def rerank_until_converged(
    query_row,
    gg_dist: DistanceMatrix | np.ndarray | GalleryGraph,
    gg_ranks: RankMatrix | np.ndarray | None = None,
    cfg: RerankConfig = RerankConfig(),
    trace_opts: TraceOptions | None = None,
) -> tuple[RerankState, RerankTrace]:
    """Step until two consecutive rankings are identical or ``max_iters``
    steps have run. ``converged_at`` is the iteration whose ranking
    repeated its predecessor; snapshots stop at the last distinct ranking."""
    graph = gg_dist if isinstance(gg_dist, GalleryGraph) else GalleryGraph.from_matrices(gg_dist, gg_ranks)
    opts = trace_opts or TraceOptions()
    trace = RerankTrace()

    def record(s: RerankState) -> None:
        metric = opts.metric(s.ranking) if opts.metric is not None else None
        ranking = s.ranking if opts.keep_rankings else None
        trace.snapshots.append(TraceSnapshot(s.iteration, ranking, metric))

    state = init_rerank(query_row)
    if state.distances.shape[0] != graph.size:
        raise RerankError(f"query row has {state.distances.shape[0]} entries, gallery has {graph.size}")
    record(state)
    last = state
    for _ in range(cfg.max_iters):
        nxt = _advance(state, graph, cfg)
        if np.array_equal(nxt.ranking, state.ranking):
            trace.converged_at = nxt.iteration
            state = nxt
            break
        state = nxt
        if opts.keeps(state.iteration):
            record(state)
        last = state
    else:
        trace.converged_at = MAX_ITERS_HIT
        last = state
    if trace.snapshots[-1].iteration != last.iteration:
        record(last)
    return state, trace


@dataclass(frozen=True)
class QueryRerankResult:
    query_id: str
    ranking: NDArray[np.int64]
    distances: NDArray[np.float64]
    initial_ranking: NDArray[np.int64]
    trace: RerankTrace


def rerank_gallery_against_queries(
    queries: EmbeddingSet,
    gallery: EmbeddingSet,
    cfg: RerankConfig = RerankConfig(),
    trace_opts: TraceOptions | None = None,
    metric_for_query: Callable[[int], Callable[[np.ndarray], float]] | None = None,
    threads: int = 1,
    graph: GalleryGraph | None = None,
) -> list[QueryRerankResult]:
    """Re-rank the gallery for every query independently.

    ``metric_for_query(q)`` may supply a per-query metric recorded in the
    trace. Results follow query order regardless of ``threads``.
    """
    if gallery.count == 0:
        raise RerankError("empty gallery")
    if queries.dim != gallery.dim:
        raise DimensionError(f"dimension mismatch: queries {queries.dim} vs gallery {gallery.dim}")
    if graph is None:
        graph = GalleryGraph.from_gallery(gallery)
    qg = euclidean_distances(queries.vectors, gallery.vectors)
    base_opts = trace_opts or TraceOptions()

    def one(q: int) -> QueryRerankResult:
        opts = base_opts
        if metric_for_query is not None:
            opts = TraceOptions(
                thin=base_opts.thin,
                dense_until=base_opts.dense_until,
                every=base_opts.every,
                keep_rankings=base_opts.keep_rankings,
                metric=metric_for_query(q),
            )
        initial, _ = rank_vector(qg[q])
        state, trace = rerank_until_converged(qg[q], graph, cfg=cfg, trace_opts=opts)
        return QueryRerankResult(queries.ids[q], state.ranking, state.distances, initial, trace)

    if threads <= 1 or queries.count <= 1:
        return [one(q) for q in range(queries.count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(queries.count)))
