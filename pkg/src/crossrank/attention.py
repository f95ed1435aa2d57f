"""Single-head cross-attention ``F(A, B)`` with an analytic backward pass.

Queries come from token sequence ``a``, keys and values from ``b``::

    Q = a W_q,  K = b W_k,  V = b W_v,  S = Q K^T / sqrt(d_k)
    F = softmax_rows(S) V        (use_softmax=True)
    F = S V                      (use_softmax=False)

Self-attention is ``F(A, A)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionParams:
    w_q: NDArray[np.float64]
    w_k: NDArray[np.float64]
    w_v: NDArray[np.float64]
    use_softmax: bool = True

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in (self.w_q, self.w_k, self.w_v)]
        if any(m.ndim != 2 for m in mats):
            raise AttentionError("projection matrices must be 2-D")
        if mats[0].shape != mats[1].shape:
            raise AttentionError(f"w_q {mats[0].shape} and w_k {mats[1].shape} must match")
        if mats[2].shape[0] != mats[0].shape[0]:
            raise AttentionError("w_v must share the input dimension of w_q")
        if mats[0].shape[1] < 1:
            raise AttentionError("d_k must be >= 1")
        if not all(np.all(np.isfinite(m)) for m in mats):
            raise AttentionError("projection matrices must be finite")
        for name, m in zip(("w_q", "w_k", "w_v"), mats):
            object.__setattr__(self, name, m)

    @property
    def dim_in(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def random(cls, dim_in: int, d_k: int, rng: np.random.Generator, use_softmax: bool = True,
               d_v: int | None = None) -> "AttentionParams":
        scale = 1.0 / np.sqrt(dim_in)
        d_v = d_k if d_v is None else d_v
        return cls(
            w_q=rng.normal(scale=scale, size=(dim_in, d_k)),
            w_k=rng.normal(scale=scale, size=(dim_in, d_k)),
            w_v=rng.normal(scale=scale, size=(dim_in, d_v)),
            use_softmax=use_softmax,
        )


@dataclass(frozen=True)
class AttentionGrads:
    a: NDArray[np.float64]
    b: NDArray[np.float64]
    w_q: NDArray[np.float64]
    w_k: NDArray[np.float64]
    w_v: NDArray[np.float64]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b, "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


def _tokens(x, p: AttentionParams, name: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[0] < 1:
        raise AttentionError(f"{name}: expected n x dim_in token matrix with n >= 1")
    if x.shape[1] != p.dim_in:
        raise AttentionError(f"{name}: token width {x.shape[1]} != dim_in {p.dim_in}")
    if not np.all(np.isfinite(x)):
        raise AttentionError(f"{name}: non-finite token values")
    return x


def softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(a, b, p):
    q, k, v = a @ p.w_q, b @ p.w_k, b @ p.w_v
    scores = (q @ k.T) / np.sqrt(p.d_k)
    weights = softmax_rows(scores) if p.use_softmax else scores
    return q, k, v, weights, weights @ v


def cross_attention(a, b, p: AttentionParams) -> np.ndarray:
    a = _tokens(a, p, "a")
    b = _tokens(b, p, "b")
    return _forward(a, b, p)[-1]


def self_attention(a, p: AttentionParams) -> np.ndarray:
    return cross_attention(a, a, p)


def attention_backward(a, b, p: AttentionParams, upstream) -> AttentionGrads:
    """Gradients of ``sum(upstream * F(a, b))``.

    When ``a`` and ``b`` are the same array (self-attention) the true input
    gradient is ``grads.a + grads.b``.
    """
    a = _tokens(a, p, "a")
    b = _tokens(b, p, "b")
    q, k, v, weights, out = _forward(a, b, p)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise AttentionError(f"upstream gradient shape {g.shape} != output shape {out.shape}")

    g_v = weights.T @ g
    g_w = g @ v.T
    if p.use_softmax:
        g_s = weights * (g_w - (g_w * weights).sum(axis=1, keepdims=True))
    else:
        g_s = g_w
    g_s = g_s / np.sqrt(p.d_k)
    g_q = g_s @ k
    g_k = g_s.T @ q

    return AttentionGrads(
        a=g_q @ p.w_q.T,
        b=g_k @ p.w_k.T + g_v @ p.w_v.T,
        w_q=a.T @ g_q,
        w_k=b.T @ g_k,
        w_v=b.T @ g_v,
    )


# --- finite-difference checking --------------------------------------------


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (not modified)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f(x)
        flat[idx] = orig - h
        fm = f(x)
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)


def gradcheck(seed: int, use_softmax: bool = True, n_a: int = 3, n_b: int = 4, dim_in: int = 5,
              d_k: int = 3, h: float = 1e-4) -> dict[str, float]:
    """Compare ``attention_backward`` with central differences on a random
    case. Returns the relative error per parameter plus ``"max"``."""
    rng = np.random.default_rng(seed)
    p = AttentionParams.random(dim_in, d_k, rng, use_softmax=use_softmax)
    a = rng.normal(size=(n_a, dim_in))
    b = rng.normal(size=(n_b, dim_in))
    up = rng.normal(size=(n_a, p.w_v.shape[1]))
    grads = attention_backward(a, b, p, up).as_dict()

    args = {"a": a, "b": b, "w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v}

    def loss(values: dict) -> float:
        pp = AttentionParams(values["w_q"], values["w_k"], values["w_v"], use_softmax=use_softmax)
        return float(np.sum(up * cross_attention(values["a"], values["b"], pp)))

    errors = {}
    for name, value in args.items():
        numeric = central_difference(lambda x, name=name: loss({**args, name: x}), value, h)
        errors[name] = relative_error(grads[name], numeric)
    errors["max"] = max(errors.values())
    return errors
