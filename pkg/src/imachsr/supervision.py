"""Output cross-entropy, per-tap mutual-information loss, per-tap negative entropy.

All losses accept a single image (``K x H x W`` logits, ``H x W`` labels) or a
batch (``B x K x H x W`` / ``B x H x W``).  Image-wise terms are averaged over
the batch.  Logs are natural and clamped at :data:`imachsr.tensor.EPS`.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_ALPHA = 0.4
DEFAULT_LAMBDA = 0.1


class LabelError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: list[float]
    lam: list[float]

    def __post_init__(self):
        self.alpha = [float(a) for a in self.alpha]
        self.lam = [float(v) for v in self.lam]
        if len(self.alpha) != len(self.lam):
            raise ValueError(f"alpha has {len(self.alpha)} entries, lambda has {len(self.lam)}")
        if any(a < 0 for a in self.alpha) or any(v < 0 for v in self.lam):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def uniform(cls, m: int, alpha: float = DEFAULT_ALPHA, lam: float = DEFAULT_LAMBDA) -> "LossWeights":
        return cls([alpha] * m, [lam] * m)

    def __len__(self) -> int:
        return len(self.alpha)


@dataclass
class LossBreakdown:
    ce: float
    mi: list[float] = field(default_factory=list)
    ne: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    total: float = 0.0

    def reconstruct(self) -> float:
        out = self.ce
        for a, mi, lam, ne in zip(self.alpha, self.mi, self.lam, self.ne):
            out = out + (a * mi + lam * ne)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def _labels_array(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size == 0:
        raise LabelError("empty label image")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes}); got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``(..., H, W)`` integer labels to ``(..., K, H, W)`` float indicators."""
    eye = np.eye(num_classes)
    return np.moveaxis(eye[labels], -1, -3)


def _batched(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    if logits.data.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
        labels = labels[None]
    if logits.data.ndim != 4:
        raise T.ShapeError(f"expected K x H x W or B x K x H x W logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise T.ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    return logits, labels


def ce_loss(logits, labels) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[label]``."""
    logits = T.as_tensor(logits)
    k = logits.shape[-3]
    y = _labels_array(labels, k)
    logits, y = _batched(logits, y)
    logp = T.log_softmax(logits, axis=1)
    picked = T.mul(logp, Tensor(one_hot(y, k)))
    n_pix = y.size
    return T.neg(T.tsum(picked)) / n_pix


def adapter_apply(z, adapter: dict[str, Tensor], H: int, W: int) -> Tensor:
    """1x1 conv to K channels followed by bilinear upsampling to ``H x W``."""
    mixed = T.conv1x1(z, adapter["weight"], adapter["bias"])
    return T.upsample_bilinear(mixed, H, W)


def mi_loss(adapted, labels) -> Tensor:
    """Negative mutual information between soft predicted class and label.

    Per image: ``p(c|pixel)`` is a softmax over the K adapted channels, the joint
    is ``J[c, k] = (1/N) * sum over pixels with label k of p(c|pixel)`` and
    ``I = sum J * log(J / (row_c * col_k))``.  Returns ``-mean_images(I)``.
    """
    adapted = T.as_tensor(adapted)
    k = adapted.shape[-3]
    y = _labels_array(labels, k)
    adapted, y = _batched(adapted, y)
    b, _, h, w = adapted.shape
    n = h * w
    p = T.reshape(T.softmax(adapted, axis=1), (b, k, n))
    onehot = Tensor(one_hot(y, k).reshape(b, k, n).transpose(0, 2, 1).copy())  # B x N x K
    joint = T.matmul(p, onehot) / n  # B x K(pred) x K(label)
    row = T.tsum(joint, axis=2, keepdims=True)  # B x K x 1
    col = T.tsum(joint, axis=1, keepdims=True)  # B x 1 x K
    outer = T.matmul(row, col)
    pmi = T.sub(T.log(joint), T.log(outer))
    info = T.tsum(T.mul(joint, pmi))
    # 0 <= I <= log K holds exactly; the clamp only absorbs rounding, and both
    # ends are stationary points so dropping the gradient there is harmless
    return T.clip(T.neg(info) / b, -math.log(k), 0.0)


def ne_reg(z) -> Tensor:
    """Mean over pixels of ``sum_c q log q`` with ``q`` a softmax over channels."""
    z = T.as_tensor(z)
    if z.data.ndim == 3:
        z = z.reshape((1,) + z.shape)
    if z.data.ndim != 4:
        raise T.ShapeError(f"expected C x h x w or B x C x h x w features, got {z.shape}")
    b, _, h, w = z.shape
    q = T.softmax(z, axis=1)
    return T.clip(T.tsum(T.mul(q, T.log(q))) / (b * h * w), -math.log(z.shape[1]), 0.0)


def total_loss(ce: Tensor, mi_list: Sequence[Tensor], ne_list: Sequence[Tensor], weights: LossWeights):
    """``L_T = L_CE + sum_m (alpha_m * L_MI^m + lambda_m * L_NE^m)``."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    m = len(weights)
    if len(mi_list) != m or len(ne_list) != m:
        raise ValueError(f"expected {m} MI and NE terms, got {len(mi_list)} and {len(ne_list)}")
    total = T.as_tensor(ce)
    for a, mi, lam, ne in zip(weights.alpha, mi_list, weights.lam, ne_list):
        total = T.add(total, T.add(T.mul(mi, a), T.mul(ne, lam)))
    breakdown = LossBreakdown(
        ce=T.as_tensor(ce).item(),
        mi=[T.as_tensor(t).item() for t in mi_list],
        ne=[T.as_tensor(t).item() for t in ne_list],
        alpha=list(weights.alpha),
        lam=list(weights.lam),
        total=total.item(),
    )
    return total, breakdown
