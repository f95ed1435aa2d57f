"""Training objectives: cross-domain batch-hard triplet loss, cross-attention
distillation and cross-entropy, plus their weighted total.

These are reference implementations over numpy arrays; forward values and
the analytic gradients needed for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .attention import AttentionParams, cross_attention, self_attention

DOMAINS = ("A", "B")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_triplet: float = 1.0
    lambda_cad: float = 1.0
    lambda_ce: float = 1.0
    margin: float = 0.3
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("lambda_triplet", "lambda_cad", "lambda_ce", "margin"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise LossError("temperature must be > 0")


@dataclass(frozen=True)
class DomainBatch:
    embeddings_a: NDArray[np.float64]
    embeddings_b: NDArray[np.float64]
    labels_a: NDArray[np.int64]
    labels_b: NDArray[np.int64]
    logits_a: NDArray[np.float64] | None = None
    logits_b: NDArray[np.float64] | None = None

    def __post_init__(self):
        ea = np.atleast_2d(np.asarray(self.embeddings_a, dtype=np.float64))
        eb = np.atleast_2d(np.asarray(self.embeddings_b, dtype=np.float64))
        la = np.asarray(self.labels_a, dtype=np.int64).reshape(-1)
        lb = np.asarray(self.labels_b, dtype=np.int64).reshape(-1)
        if ea.shape[0] != la.shape[0] or eb.shape[0] != lb.shape[0]:
            raise LossError("row/label count mismatch within a domain")
        if ea.shape[1] != eb.shape[1]:
            raise LossError(f"feature dims differ: {ea.shape[1]} vs {eb.shape[1]}")
        object.__setattr__(self, "embeddings_a", ea)
        object.__setattr__(self, "embeddings_b", eb)
        object.__setattr__(self, "labels_a", la)
        object.__setattr__(self, "labels_b", lb)
        for name, n in (("logits_a", ea.shape[0]), ("logits_b", eb.shape[0])):
            value = getattr(self, name)
            if value is not None:
                value = np.atleast_2d(np.asarray(value, dtype=np.float64))
                if value.shape[0] != n:
                    raise LossError(f"{name} has {value.shape[0]} rows, expected {n}")
                object.__setattr__(self, name, value)

    def embeddings(self, m: str) -> np.ndarray:
        return self.embeddings_a if _domain(m) == "A" else self.embeddings_b

    def labels(self, m: str) -> np.ndarray:
        return self.labels_a if _domain(m) == "A" else self.labels_b

    def with_embeddings(self, ea, eb) -> "DomainBatch":
        return DomainBatch(ea, eb, self.labels_a, self.labels_b, self.logits_a, self.logits_b)


def _domain(m: str) -> str:
    m = str(m).upper()
    if m not in DOMAINS:
        raise LossError(f"domain must be 'A' or 'B', got {m!r}")
    return m


# --- triplet ----------------------------------------------------------------


def _euclidean(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # direct differences: the expansion trick loses precision that the
    # finite-difference checks would notice
    return np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2))


def triplet_term(m1: str, m2: str, batch: DomainBatch, eps: float = 0.3, return_grad: bool = False):
    """Batch-hard hinge for anchors from domain ``m1`` against positives and
    negatives from ``m2``, averaged over anchors.

    With ``return_grad`` also returns ``{"A": dL/dA, "B": dL/dB}``.
    """
    m1, m2 = _domain(m1), _domain(m2)
    x, y = batch.embeddings(m1), batch.embeddings(m2)
    lx, ly = batch.labels(m1), batch.labels(m2)
    d = _euclidean(x, y)
    pos = lx[:, None] == ly[None, :]
    if m1 == m2:
        np.fill_diagonal(pos, False)
    neg = lx[:, None] != ly[None, :]

    for i in range(len(lx)):
        if not pos[i].any():
            raise LossError(f"class {lx[i]}: anchor in {m1} has no positive in {m2}")
        if not neg[i].any():
            raise LossError(f"class {lx[i]}: anchor in {m1} has no negative in {m2}")

    hard_pos = np.argmax(np.where(pos, d, -np.inf), axis=1)
    hard_neg = np.argmin(np.where(neg, d, np.inf), axis=1)
    rows = np.arange(len(lx))
    d_pos, d_neg = d[rows, hard_pos], d[rows, hard_neg]
    hinge = np.maximum(d_pos - d_neg + eps, 0.0)
    loss = float(hinge.mean())
    if not return_grad:
        return loss

    grads = {"A": np.zeros_like(batch.embeddings_a), "B": np.zeros_like(batch.embeddings_b)}
    n = len(lx)
    for i in np.flatnonzero(hinge > 0):
        p, q = hard_pos[i], hard_neg[i]
        u_p = (x[i] - y[p]) / d_pos[i]
        u_n = (x[i] - y[q]) / d_neg[i]
        grads[m1][i] += (u_p - u_n) / n
        grads[m2][p] -= u_p / n
        grads[m2][q] += u_n / n
    return loss, grads


TRIPLET_COMBOS = (("A", "A"), ("B", "B"), ("A", "B"), ("B", "A"))


def cross_domain_triplet_loss(batch: DomainBatch, eps: float = 0.3, return_grad: bool = False):
    """Sum of the within-domain and between-domain batch-hard terms."""
    if not return_grad:
        return sum(triplet_term(m1, m2, batch, eps) for m1, m2 in TRIPLET_COMBOS)
    total = 0.0
    grads = {"A": np.zeros_like(batch.embeddings_a), "B": np.zeros_like(batch.embeddings_b)}
    for m1, m2 in TRIPLET_COMBOS:
        value, g = triplet_term(m1, m2, batch, eps, return_grad=True)
        total += value
        grads["A"] += g["A"]
        grads["B"] += g["B"]
    return total, grads


# --- distillation -----------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cad_loss(teacher, student, temperature: float = 1.0, form: str = "kl", return_grad: bool = False):
    """Distillation of one teacher/student feature pair, averaged over rows.

    ``form="kl"``: KL(softmax(teacher/T) || softmax(student/T)).
    ``form="mse"``: mean over rows of the squared feature difference.
    The teacher is a fixed target; the gradient is w.r.t. ``student`` only.
    """
    t = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    s = np.atleast_2d(np.asarray(student, dtype=np.float64))
    if t.shape != s.shape:
        raise LossError(f"teacher {t.shape} and student {s.shape} shapes differ")
    if temperature <= 0:
        raise LossError("temperature must be > 0")
    n = t.shape[0]
    if form == "kl":
        log_p = _log_softmax(t / temperature)
        log_q = _log_softmax(s / temperature)
        p = np.exp(log_p)
        loss = float((p * (log_p - log_q)).sum(axis=1).mean())
        grad = (np.exp(log_q) - p) / (temperature * n)
    elif form == "mse":
        diff = s - t
        loss = float((diff**2).sum(axis=1).mean())
        grad = 2.0 * diff / n
    else:
        raise LossError(f"unknown distillation form {form!r}")
    return (loss, grad) if return_grad else loss


@dataclass(frozen=True)
class AttentionFeatures:
    """Pooled features for the two distillation pairs: teacher F(B, A) with
    student F(A, A), and teacher F(A, B) with student F(B, B)."""

    teacher_ba: NDArray[np.float64]
    student_aa: NDArray[np.float64]
    teacher_ab: NDArray[np.float64]
    student_bb: NDArray[np.float64]


def distillation_features(tokens_a, tokens_b, teacher: AttentionParams, student: AttentionParams) -> AttentionFeatures:
    """Mean-over-tokens pooled attention outputs for a batch of image pairs.

    ``tokens_a`` and ``tokens_b`` are ``(pairs, n_tokens, dim_in)``.
    """
    ta = np.asarray(tokens_a, dtype=np.float64)
    tb = np.asarray(tokens_b, dtype=np.float64)
    if ta.ndim == 2:
        ta, tb = ta[None], tb[None]
    if ta.shape[0] != tb.shape[0]:
        raise LossError("tokens_a and tokens_b must hold the same number of pairs")
    rows: dict[str, list] = {"teacher_ba": [], "student_aa": [], "teacher_ab": [], "student_bb": []}
    for a, b in zip(ta, tb):
        rows["teacher_ba"].append(cross_attention(b, a, teacher).mean(axis=0))
        rows["student_aa"].append(self_attention(a, student).mean(axis=0))
        rows["teacher_ab"].append(cross_attention(a, b, teacher).mean(axis=0))
        rows["student_bb"].append(self_attention(b, student).mean(axis=0))
    return AttentionFeatures(**{k: np.vstack(v) for k, v in rows.items()})


def cad_total(features: AttentionFeatures, temperature: float = 1.0, form: str = "kl") -> float:
    return cad_loss(features.teacher_ba, features.student_aa, temperature, form) + cad_loss(
        features.teacher_ab, features.student_bb, temperature, form
    )


# --- classification ---------------------------------------------------------


def cross_entropy_loss(logits, labels, return_grad: bool = False):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise LossError(f"{y.shape[0]} labels for {z.shape[0]} rows of logits")
    n_classes = z.shape[1]
    if np.any((y < 0) | (y >= n_classes)):
        bad = int(y[(y < 0) | (y >= n_classes)][0])
        raise LossError(f"label {bad} out of range [0, {n_classes})")
    log_p = _log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = float(-log_p[rows, y].mean())
    if not return_grad:
        return loss
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    return loss, grad / z.shape[0]


# --- total ------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    terms: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"total": self.total, **self.terms}


def total_loss(
    batch: DomainBatch,
    features: AttentionFeatures | None,
    weights: LossWeights = LossWeights(),
    distill_form: str = "kl",
) -> LossBreakdown:
    """Weighted sum of triplet, distillation and cross-entropy terms.

    Terms with a zero weight are skipped entirely (their inputs may be
    absent). Cross-entropy sums over whichever domains carry logits.
    """
    terms = {"triplet": 0.0, "cad": 0.0, "ce": 0.0}
    if weights.lambda_triplet:
        terms["triplet"] = cross_domain_triplet_loss(batch, weights.margin)
    if weights.lambda_cad:
        if features is None:
            raise LossError("distillation weight is non-zero but no attention features were given")
        terms["cad"] = cad_total(features, weights.temperature, distill_form)
    if weights.lambda_ce:
        if batch.logits_a is None and batch.logits_b is None:
            raise LossError("cross-entropy weight is non-zero but the batch has no logits")
        if batch.logits_a is not None:
            terms["ce"] += cross_entropy_loss(batch.logits_a, batch.labels_a)
        if batch.logits_b is not None:
            terms["ce"] += cross_entropy_loss(batch.logits_b, batch.labels_b)
    total = (
        weights.lambda_triplet * terms["triplet"]
        + weights.lambda_cad * terms["cad"]
        + weights.lambda_ce * terms["ce"]
    )
    return LossBreakdown(total=float(total), terms=terms)
