"""Segmentation losses over per-pixel logits, each with its analytic gradient.

Every loss takes logits ``[N, K, H, W]`` and integer labels ``[N, H, W]``
and returns a :class:`LossResult` holding the scalar value and the gradient
with respect to the logits.  Pixel-wise losses average over all N*H*W
pixels; region losses (Dice, Lovász) pool pixels across the whole batch.
"""
from dataclasses import dataclass, field

import numpy as np

from .tensor import softmax_channels_backward

KINDS = ("cross_entropy", "focal", "dice", "class_balanced_focal", "lovasz", "focal_lovasz")


class LabelError(ValueError):
    pass


@dataclass
class LossSpec:
    kind: str = "cross_entropy"
    gamma: float = 2.0
    beta: float = 0.999
    eps: float = 1e-6
    lam: float = 0.5
    class_weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {KINDS}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check(logits, labels):
    if logits.ndim != 4:
        raise ValueError(f"logits must be [N,K,H,W], got {logits.shape}")
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k - 1}]")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")


def _onehot(labels, k, dtype):
    return (labels[:, None, :, :] == np.arange(k)[None, :, None, None]).astype(dtype)


def _pixel_focal(logits, labels, gamma, pixel_weight=None):
    """Shared body of CE / focal / class-balanced focal."""
    _check(logits, labels)
    k = logits.shape[1]
    m = labels.size
    logp = _log_softmax(logits)
    p = np.exp(logp)
    y = _onehot(labels, k, logits.dtype)
    logpt = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    pt = np.exp(logpt)
    one_minus = -np.expm1(logpt)
    if gamma == 0:
        per_pixel = -logpt
        coef = -np.ones_like(pt)
    else:
        mod = one_minus ** gamma
        per_pixel = -mod * logpt
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * pt * logpt, 0.0)
        # d(per_pixel)/d(z_j) = coef * (y_j - p_j)
        coef = dmod - mod
    if pixel_weight is not None:
        per_pixel = per_pixel * pixel_weight
        coef = coef * pixel_weight
    grad = (coef / m)[:, None] * (y - p)
    return LossResult(float(per_pixel.sum() / m), grad.astype(logits.dtype, copy=False))


def cross_entropy(logits, labels):
    return _pixel_focal(logits, labels, 0.0)


def focal(logits, labels, gamma=2.0):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return _pixel_focal(logits, labels, gamma)


def effective_number_weights(counts, beta):
    """Class weights inversely proportional to the effective number of samples.

    Classes with no samples get weight 0; the rest are normalized to sum to
    the number of observed classes.
    """
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    present = counts > 0
    eff = np.ones_like(counts)
    eff[present] = (1.0 - np.power(beta, counts[present])) / (1.0 - beta)
    raw = np.where(present, 1.0 / eff, 0.0)
    if not present.any():
        return raw
    return raw * (present.sum() / raw.sum())


def class_balanced_focal(logits, labels, gamma=2.0, weights=None):
    if weights is None:
        raise ValueError("class_balanced_focal needs class weights")
    weights = np.asarray(weights, dtype=np.float64)
    k = logits.shape[1]
    if weights.shape != (k,):
        raise ValueError(f"expected {k} class weights, got {weights.shape}")
    _check(logits, labels)
    observed = np.unique(labels)
    if np.any(weights[observed] <= 0):
        missing = [int(c) for c in observed if weights[c] <= 0]
        raise ValueError(f"no weight for observed classes {missing}")
    return _pixel_focal(logits, labels, gamma, weights.astype(logits.dtype)[labels])


def dice(logits, labels, eps=1e-6):
    """Soft Dice averaged over the classes present in ``labels``."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    _check(logits, labels)
    k = logits.shape[1]
    p = np.exp(_log_softmax(logits))
    g = _onehot(labels, k, logits.dtype)
    inter = (p * g).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3)) + eps
    present = g.sum(axis=(0, 2, 3)) > 0
    n_present = int(present.sum())
    per_class = 1.0 - (2.0 * inter + eps) / denom
    value = float(per_class[present].sum() / n_present)
    num = (2.0 * inter + eps)[None, :, None, None]
    den = denom[None, :, None, None]
    grad_p = -(2.0 * g * den - num) / den**2
    grad_p = grad_p * (present.astype(logits.dtype) / n_present)[None, :, None, None]
    return LossResult(value, softmax_channels_backward(p, grad_p))


def lovasz_grad(gt_sorted):
    """Gradient of the Lovász extension of the Jaccard loss at sorted errors.

    ``gt_sorted`` is the 0/1 ground-truth vector permuted by descending error.
    """
    gt = np.asarray(gt_sorted, dtype=np.float64)
    total = gt.sum()
    if total == 0:
        raise ValueError("class absent from ground truth: Lovász gradient undefined")
    inter = total - np.cumsum(gt)
    union = total + np.cumsum(1.0 - gt)
    jacc = 1.0 - inter / union
    jacc[1:] = jacc[1:] - jacc[:-1]
    return jacc


def lovasz_softmax_probs(probs, labels):
    """Lovász-softmax value and gradient w.r.t. the probabilities."""
    n, k, h, w = probs.shape
    flat_p = probs.transpose(1, 0, 2, 3).reshape(k, -1)
    flat_l = labels.reshape(-1)
    grad = np.zeros_like(flat_p)
    total = 0.0
    n_present = 0
    for c in range(k):
        fg = flat_l == c
        if not fg.any():
            continue
        err = np.abs(fg - flat_p[c])
        order = np.argsort(-err, kind="stable")
        lg = lovasz_grad(fg[order])
        total += float(np.dot(err[order], lg))
        n_present += 1
        grad[c, order] = np.where(fg[order], -lg, lg)
    if n_present == 0:
        raise ValueError("no classes present")
    grad /= n_present
    grad = grad.reshape(k, n, h, w).transpose(1, 0, 2, 3).astype(probs.dtype, copy=False)
    return total / n_present, grad


def lovasz_softmax(logits, labels):
    _check(logits, labels)
    p = np.exp(_log_softmax(logits))
    value, grad_p = lovasz_softmax_probs(p, labels)
    return LossResult(value, softmax_channels_backward(p, grad_p))


def focal_lovasz(logits, labels, gamma=2.0, lam=0.5):
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    if lam == 1:
        return focal(logits, labels, gamma)
    if lam == 0:
        return lovasz_softmax(logits, labels)
    f = focal(logits, labels, gamma)
    lv = lovasz_softmax(logits, labels)
    return LossResult(lam * f.value + (1 - lam) * lv.value, lam * f.grad + (1 - lam) * lv.grad)


def compute_loss(spec, logits, labels):
    """Dispatch on ``spec.kind``."""
    kind = spec.kind
    if kind == "cross_entropy":
        return cross_entropy(logits, labels)
    if kind == "focal":
        return focal(logits, labels, spec.gamma)
    if kind == "class_balanced_focal":
        return class_balanced_focal(logits, labels, spec.gamma, spec.class_weights)
    if kind == "dice":
        return dice(logits, labels, spec.eps)
    if kind == "lovasz":
        return lovasz_softmax(logits, labels)
    return focal_lovasz(logits, labels, spec.gamma, spec.lam)
