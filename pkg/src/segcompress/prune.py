"""Per-layer pruning masks (random / L1 unstructured, random / Ln structured)."""
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, Entry
from .quant import matches_filter

METHODS = ("random_unstructured", "l1_unstructured", "random_structured", "ln_structured")


@dataclass
class PruneSpec:
    method: str = "l1_unstructured"
    amount: float = 0.3
    n: float = 2
    seed: int = 0
    exempt: tuple = field(default_factory=lambda: ("classifier.*",))

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pruning method {self.method!r}; expected one of {METHODS}")
        _check_amount(self.amount)
        if self.n < 1:
            raise ValueError("norm order n must be >= 1")


def _check_amount(amount):
    if not 0 <= amount <= 1:
        raise ValueError(f"amount must lie in [0, 1], got {amount}")


def _count(amount, total):
    # round(., 9) absorbs representation error such as 0.29 * 100 = 28.999999999999996
    return int(math.floor(round(amount * total, 9)))


def _count_channels(amount, channels):
    return int(math.floor(round(amount * channels, 9) + 0.5))


def l1_unstructured_mask(w, amount):
    """Zero the floor(amount*N) smallest-magnitude entries; ties by flat index."""
    _check_amount(amount)
    w = np.asarray(w)
    k = _count(amount, w.size)
    mask = np.ones(w.size, dtype=np.uint8)
    mask[np.argsort(np.abs(w).ravel(), kind="stable")[:k]] = 0
    return mask.reshape(w.shape)


def random_unstructured_mask(w, amount, seed=0):
    _check_amount(amount)
    w = np.asarray(w)
    k = _count(amount, w.size)
    mask = np.ones(w.size, dtype=np.uint8)
    mask[np.random.default_rng(seed).choice(w.size, size=k, replace=False)] = 0
    return mask.reshape(w.shape)


def _channel_view(w):
    w = np.asarray(w)
    if w.ndim < 2:
        raise ValueError(f"structured pruning needs an output-channel axis, got shape {w.shape}")
    return w.reshape(w.shape[0], -1)


def _channel_mask(shape, pruned):
    mask = np.ones(shape[0], dtype=np.uint8)
    mask[pruned] = 0
    return np.broadcast_to(mask.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def random_structured_mask(w, amount, seed=0):
    _check_amount(amount)
    rows = _channel_view(w)
    k = _count_channels(amount, rows.shape[0])
    pruned = np.random.default_rng(seed).choice(rows.shape[0], size=k, replace=False)
    return _channel_mask(np.shape(w), pruned)


def ln_structured_mask(w, amount, n=2):
    """Zero the round(amount*C) output channels with the smallest Ln norm."""
    _check_amount(amount)
    if n < 1:
        raise ValueError("norm order n must be >= 1")
    rows = _channel_view(w).astype(np.float64)
    norms = np.linalg.norm(rows, ord=n, axis=1)
    k = _count_channels(amount, rows.shape[0])
    return _channel_mask(np.shape(w), np.argsort(norms, kind="stable")[:k])


def prune_targets(ckpt, exempt=("classifier.*",)):
    """Names of prunable tensors: conv weights (4-d) not matching ``exempt``."""
    return [
        name for name, e in ckpt.items()
        if e.kind == "float" and len(e.shape) == 4 and not matches_filter(name, exempt)
    ]


def make_masks(ckpt, spec):
    masks = {}
    for i, name in enumerate(prune_targets(ckpt, spec.exempt)):
        w = ckpt[name].array
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        if spec.method == "l1_unstructured":
            masks[name] = l1_unstructured_mask(w, spec.amount)
        elif spec.method == "random_unstructured":
            masks[name] = random_unstructured_mask(w, spec.amount, seed)
        elif spec.method == "random_structured":
            masks[name] = random_structured_mask(w, spec.amount, seed)
        else:
            masks[name] = ln_structured_mask(w, spec.amount, spec.n)
    return masks


def apply_mask(ckpt, masks):
    out = Checkpoint(ckpt)
    for name, mask in masks.items():
        if name not in ckpt:
            raise KeyError(f"mask for unknown entry {name!r}")
        e = ckpt[name]
        if e.kind != "float":
            raise ValueError(f"cannot mask {e.kind} entry {name!r}")
        if mask.shape != e.array.shape:
            raise ValueError(f"mask shape {mask.shape} != tensor shape {e.array.shape} for {name!r}")
        out[name] = Entry.dense(e.array * mask.astype(e.array.dtype))
    return out


def prune_checkpoint(ckpt, spec):
    masks = make_masks(ckpt, spec)
    return apply_mask(ckpt, masks), masks


def sparsity(ckpt, names=None):
    """Fraction of exactly-zero elements over ``names`` (default: every entry)."""
    names = list(ckpt) if names is None else names
    total = zeros = 0
    for name in names:
        a = ckpt[name].to_float()
        total += a.size
        zeros += int(np.count_nonzero(a == 0))
    return zeros / total if total else 0.0


def pruned_count(masks):
    return sum(int(m.size - np.count_nonzero(m)) for m in masks.values())


def pruned_size_mb(dense_mb, amount):
    """Size under the convention that the pruning amount shrinks the model proportionally."""
    _check_amount(amount)
    return dense_mb * (1 - amount)


def to_sparse(ckpt, names):
    out = Checkpoint(ckpt)
    for name in names:
        out[name] = Entry.sparse(ckpt[name].to_float())
    return out
