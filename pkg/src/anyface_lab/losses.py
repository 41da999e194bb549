"""Training objectives for the two streams.

All functions accept single examples or leading batch dimensions and return a
scalar (batch-mean) tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .ops import COSINE_EPS, cosine_similarity, kl_divergence, softmax
from .tensor import Tensor, as_tensor

ORIENTATIONS = ("prose", "as-written")


@dataclass
class LossWeights:
    lambda_cmt: float = 1.0
    lambda_clip: float = 1.0
    lambda_rec: float = 1.0
    margin: float = 0.2
    pair_norm_order: int = 2
    dt_orientation: str = "prose"

    def __post_init__(self):
        for name in ("lambda_cmt", "lambda_clip", "lambda_rec", "margin"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {value}")
        if self.pair_norm_order not in (1, 2):
            raise ParameterError(f"pair_norm_order must be 1 or 2, got {self.pair_norm_order}")
        if self.dt_orientation not in ORIENTATIONS:
            raise ParameterError(f"dt_orientation must be one of {ORIENTATIONS}")


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _rows(x: Tensor) -> Tensor:
    """Flatten trailing [L, d] (or [d]) into one vector per batch element."""
    if x.ndim <= 2:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def cmt_loss(h_a, h_b) -> Tensor:
    """KL(softmax(h_a) || softmax(h_b)) with ``h_b`` detached, averaged over rows."""
    h_a, h_b = as_tensor(h_a), as_tensor(h_b)
    _check_same(h_a, h_b, "cmt_loss")
    target = softmax(h_b.detach())
    p = softmax(h_a)
    rows = 1 if p.ndim == 1 else int(np.prod(p.shape[:-1]))
    return kl_divergence(p, target) * (1.0 / rows)


def pair_loss(w_t, w, order: int = 2) -> Tensor:
    """Mean over entries of |w_t - w|^order."""
    w_t, w = as_tensor(w_t), as_tensor(w)
    _check_same(w_t, w, "pair_loss")
    diff = w_t - w
    if order == 1:
        return diff.abs().mean()
    if order == 2:
        return (diff * diff).mean()
    raise ParameterError(f"order must be 1 or 2, got {order}")


def _ratio(x: Tensor, w: Tensor, w_bar: Tensor) -> Tensor:
    return cosine_similarity(x, w, axis=-1) / (cosine_similarity(x, w_bar, axis=-1) + COSINE_EPS)


def dt_loss(w_t, w_neg, w, w_bar, margin: float = 0.2, orientation: str = "prose") -> Tensor:
    """Diverse triplet hinge on cosine ratios, batch-averaged.

    ratio(x) = cos(x, w) / (cos(x, w_bar) + eps). The ``prose`` orientation
    penalises ratio(w_neg) - ratio(w_t) + margin, rewarding the positive code for
    a high ratio. ``as-written`` swaps the two ratios.
    """
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    if orientation not in ORIENTATIONS:
        raise ParameterError(f"unknown orientation {orientation!r}")
    w_t, w_neg, w = as_tensor(w_t), as_tensor(w_neg), as_tensor(w)
    w_bar = as_tensor(w_bar)
    _check_same(w_t, w_neg, "dt_loss")
    _check_same(w_t, w, "dt_loss")
    pos, neg, target = _rows(w_t), _rows(w_neg), _rows(w)
    anchor = w_bar.reshape(1, -1)
    if anchor.shape[-1] != pos.shape[-1]:
        raise DimensionError(f"dt_loss: w_bar has {anchor.shape[-1]} entries, codes have {pos.shape[-1]}")
    anchor = anchor + Tensor(np.zeros(pos.shape))
    r_pos = _ratio(pos, target, anchor)
    r_neg = _ratio(neg, target, anchor)
    if orientation == "prose":
        gap = r_neg - r_pos + margin
    else:
        gap = r_pos - r_neg + margin
    return gap.relu().mean()


def clip_loss(f_t, f_it) -> Tensor:
    """1 - cos(f_t, f_it) per row, averaged."""
    f_t, f_it = as_tensor(f_t), as_tensor(f_it)
    _check_same(f_t, f_it, "clip_loss")
    return (1.0 - cosine_similarity(f_t, f_it, axis=-1)).mean()


def rec_loss(i_hat, i) -> Tensor:
    """Mean absolute pixel difference."""
    i_hat, i = as_tensor(i_hat), as_tensor(i)
    _check_same(i_hat, i, "rec_loss")
    return (i_hat - i).abs().mean()


def mse_loss(w_i, w) -> Tensor:
    w_i, w = as_tensor(w_i), as_tensor(w)
    _check_same(w_i, w, "mse_loss")
    diff = w_i - w
    return (diff * diff).mean()


def synthesis_objective(parts: dict, weights: LossWeights):
    """L_S = dt + lambda_cmt * cmt_t + lambda_clip * clip."""
    return parts["dt"] + weights.lambda_cmt * parts["cmt_t"] + weights.lambda_clip * parts["clip"]


def reconstruction_objective(parts: dict, weights: LossWeights):
    """L_T = mse + lambda_cmt * cmt_i + lambda_rec * rec."""
    return parts["mse"] + weights.lambda_cmt * parts["cmt_i"] + weights.lambda_rec * parts["rec"]
