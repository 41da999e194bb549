"""Differentiable kernels built on :class:`Tensor` plus the PSD square root."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError, NotPSDError, NumericError, ParameterError, SupportError
from .tensor import Tensor, as_tensor

COSINE_EPS = 1e-8


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs [r x k] @ [k x c], got {a.shape} and {b.shape}")
    return a @ b


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._from_op(out, (x,), backward)


def kl_divergence(p: Tensor, q: Tensor, atol: float = 1e-9) -> Tensor:
    """Sum over rows of KL(p_row || q_row); each row along the last axis is a distribution.

    Uses 0 * ln 0 = 0. The gradient w.r.t. p is taken as 0 where p is exactly 0.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    if np.any(pd < 0) or np.any(qd < 0):
        raise InputError("kl_divergence inputs must be non-negative")
    if np.any(np.abs(pd.sum(axis=-1) - 1.0) > atol) or np.any(np.abs(qd.sum(axis=-1) - 1.0) > atol):
        raise InputError("kl_divergence inputs must each sum to 1")
    pos = pd > 0
    if np.any(pos & (qd == 0)):
        raise SupportError("q has zero mass where p is positive")
    safe_p = np.where(pos, pd, 1.0)
    safe_q = np.where(pos, qd, 1.0)
    log_ratio = np.where(pos, np.log(safe_p) - np.log(safe_q), 0.0)
    # inputs normalised only to rounding can push the sum a few ulps below zero
    value = max(np.sum(pd * log_ratio), 0.0)

    def backward(g):
        gp = np.where(pos, log_ratio + 1.0, 0.0) * g
        gq = -np.where(pos, pd / safe_q, 0.0) * g
        return gp, gq

    return Tensor._from_op(np.asarray(value), (p, q), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int | None = None, eps: float = COSINE_EPS) -> Tensor:
    """a.b / (|a| |b| + eps), over flattened inputs or along ``axis``.

    Two all-zero inputs give exactly 0 with a zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InputError("cosine_similarity of empty tensors")
    ad, bd = a.data, b.data
    if axis is None:
        ad, bd = ad.reshape(-1), bd.reshape(-1)
        red = -1
    else:
        red = axis
    dot = (ad * bd).sum(axis=red, keepdims=True)
    na = np.sqrt((ad * ad).sum(axis=red, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=red, keepdims=True))
    denom = na * nb + eps
    out = dot / denom
    shape_a = a.shape

    def backward(g):
        g = np.expand_dims(g, red) if axis is not None or g.ndim == 0 else g
        g = np.reshape(g, dot.shape)
        inv_na = np.where(na > 0, 1.0 / np.where(na > 0, na, 1.0), 0.0)
        inv_nb = np.where(nb > 0, 1.0 / np.where(nb > 0, nb, 1.0), 0.0)
        ga = g * (bd / denom - dot * nb * ad * inv_na / denom ** 2)
        gb = g * (ad / denom - dot * na * bd * inv_nb / denom ** 2)
        return ga.reshape(shape_a), gb.reshape(shape_a)

    result = out.reshape(()) if axis is None else np.squeeze(out, axis=red)
    return Tensor._from_op(result, (a, b), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def matrix_sqrt_psd(a, sym_tol: float = 1e-8, neg_tol: float = 1e-6) -> Tensor:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-neg_tol, 0) are clamped to zero; anything more negative
    is rejected.
    """
    m = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"matrix_sqrt_psd needs a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol * scale:
        raise InputError("matrix_sqrt_psd input is not symmetric")
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.size and vals.min() < -neg_tol * scale:
        raise NotPSDError(f"matrix has eigenvalue {vals.min():.3e} < 0")
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return Tensor(0.5 * (root + root.T))
