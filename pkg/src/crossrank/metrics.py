"""Average precision, mAP@k and Prec@k over ranked gallery lists."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ALL = "all"
AP_DENOMINATORS = ("min-k-r", "r")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    """One query's ranked list.

    ``n_relevant`` is the number of relevant items in the whole gallery;
    when omitted the list is assumed to be the full gallery and it is
    counted from ``relevance``.
    """

    query_id: str
    ranked_gallery_ids: tuple[str, ...]
    relevance: tuple[bool, ...]
    n_relevant: int | None = None

    def __post_init__(self):
        ids = tuple(self.ranked_gallery_ids)
        rel = tuple(bool(r) for r in self.relevance)
        if len(ids) != len(rel):
            raise MetricsError(f"{len(ids)} ids but {len(rel)} relevance flags")
        if len(set(ids)) != len(ids):
            raise MetricsError(f"query {self.query_id}: duplicate gallery ids in ranked list")
        object.__setattr__(self, "ranked_gallery_ids", ids)
        object.__setattr__(self, "relevance", rel)

    @property
    def total_relevant(self) -> int:
        return sum(self.relevance) if self.n_relevant is None else self.n_relevant


def _resolve_k(k, length: int) -> int:
    if k == ALL or k is None:
        return length
    k = int(k)
    if k < 1:
        raise MetricsError(f"k must be >= 1, got {k}")
    return k


def precision_at_k(result: RetrievalResult, k: int) -> float:
    n = len(result.relevance)
    k = _resolve_k(k, n)
    if not 1 <= k <= n:
        raise MetricsError(f"k={k} out of range for list of length {n}")
    return sum(result.relevance[:k]) / k


def average_precision(result: RetrievalResult, k=ALL, denominator: str = "min-k-r") -> float:
    """AP over the top ``k``, normalised by ``min(k, R)`` (or ``R``)."""
    if denominator not in AP_DENOMINATORS:
        raise MetricsError(f"denominator must be one of {AP_DENOMINATORS}")
    R = result.total_relevant
    if R == 0:
        raise MetricsError(f"query {result.query_id}: query class absent from gallery")
    rel = np.asarray(result.relevance, dtype=bool)
    k = min(_resolve_k(k, len(rel)), len(rel))
    return float(ap_of_relevance(rel[None, :k], np.array([R]), k, denominator)[0])


def ap_of_relevance(rel: np.ndarray, n_rel: np.ndarray, k: int, denominator: str = "min-k-r") -> np.ndarray:
    """Vectorised AP for a (queries x k) boolean relevance matrix, with
    ``n_rel`` relevant items per query in the whole gallery."""
    hits = np.cumsum(rel, axis=1)
    positions = np.arange(1, rel.shape[1] + 1)
    summed = np.where(rel, hits / positions, 0.0).sum(axis=1)
    denom = np.minimum(k, n_rel) if denominator == "min-k-r" else n_rel
    return summed / denom


def mean_average_precision(
    results: Sequence[RetrievalResult], k=ALL, denominator: str = "min-k-r"
) -> float:
    if not results:
        raise MetricsError("no results to average")
    return float(np.mean([average_precision(r, k, denominator) for r in results]))


def mean_precision_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    if not results:
        raise MetricsError("no results to average")
    return float(np.mean([precision_at_k(r, k) for r in results]))


def relevance_matrix(rankings: np.ndarray, query_labels, gallery_labels) -> np.ndarray:
    """``rel[q, p]``: is the gallery item at position p of query q's list
    of the query's class."""
    rankings = np.atleast_2d(np.asarray(rankings))
    gl = np.asarray(gallery_labels)
    return gl[rankings] == np.asarray(query_labels)[:, None]


def ap_from_rankings(
    rankings: np.ndarray, query_labels, gallery_labels, k=ALL, denominator: str = "min-k-r"
) -> np.ndarray:
    """Per-query AP for index rankings over the full gallery."""
    gl = np.asarray(gallery_labels)
    ql = np.asarray(query_labels)
    rel = relevance_matrix(rankings, ql, gl)
    n_rel = (gl[None, :] == ql[:, None]).sum(axis=1)
    if np.any(n_rel == 0):
        bad = int(np.flatnonzero(n_rel == 0)[0])
        raise MetricsError(f"query {bad}: query class absent from gallery")
    kk = min(_resolve_k(k, rel.shape[1]), rel.shape[1])
    return ap_of_relevance(rel[:, :kk], n_rel, kk, denominator)


def build_results(
    query_ids: Sequence[str],
    query_labels,
    ranked_ids: Sequence[Sequence[str]],
    gallery_label_of: dict[str, int],
) -> list[RetrievalResult]:
    """Attach relevance to ranked id lists using a gallery id -> class map."""
    counts: dict[int, int] = {}
    for cls in gallery_label_of.values():
        counts[cls] = counts.get(cls, 0) + 1
    out = []
    for qid, qcls, ids in zip(query_ids, query_labels, ranked_ids):
        try:
            rel = tuple(gallery_label_of[g] == qcls for g in ids)
        except KeyError as exc:
            raise MetricsError(f"gallery id {exc.args[0]!r} has no label") from None
        out.append(RetrievalResult(qid, tuple(ids), rel, n_relevant=counts.get(qcls, 0)))
    return out


def evaluate(
    results: Sequence[RetrievalResult],
    ks: Iterable = (ALL,),
    denominator: str = "min-k-r",
) -> dict:
    """Summary dict: ``{"mAP": {k: ...}, "prec": {k: ...}, "per_query": [...]}``."""
    ks = list(ks)
    summary: dict = {"mAP": {}, "prec": {}, "per_query": []}
    for k in ks:
        key = str(k)
        summary["mAP"][key] = mean_average_precision(results, k, denominator)
        summary["prec"][key] = mean_precision_at_k(results, _clip_k(k, results))
    for r in results:
        entry = {"query_id": r.query_id, "AP": {}, "prec": {}}
        for k in ks:
            entry["AP"][str(k)] = average_precision(r, k, denominator)
            entry["prec"][str(k)] = precision_at_k(r, min(_resolve_k(k, len(r.relevance)), len(r.relevance)))
        summary["per_query"].append(entry)
    return summary


def _clip_k(k, results: Sequence[RetrievalResult]):
    if k == ALL:
        return ALL
    shortest = min(len(r.relevance) for r in results)
    return min(int(k), shortest)
