"""TinySegNet: a four-convolution encoder-decoder with hand-written backward.

Layers::

    conv3x3(3 -> F) + ReLU
    conv3x3 stride 2 (F -> 2F) + ReLU
    conv3x3(2F -> 2F) + ReLU
    nearest upsample x2
    conv1x1(2F -> K)

The stride-2 layer pads one zero row/column on the bottom/right only, so an
even input extent halves exactly.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import augment, class_pixel_counts, stack
from .losses import LossSpec, compute_loss, effective_number_weights
from .metrics import ConfusionMatrix
from .tensor import (
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    relu,
    relu_backward,
    upsample_nearest,
    upsample_nearest_backward,
)

log = logging.getLogger(__name__)

# name, stride, padding, followed by ReLU
LAYERS = (
    ("conv1", 1, 1, True),
    ("conv2", 2, (0, 1), True),
    ("conv3", 1, 1, True),
    ("classifier", 1, 0, False),
)


class TrainingError(RuntimeError):
    pass


class TinySegNet:
    def __init__(self, params):
        self.params = params
        self.width = params["conv1.weight"].shape[0]
        self.num_classes = params["classifier.weight"].shape[0]

    @classmethod
    def init(cls, width=16, num_classes=5, seed=0, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E9]))
        shapes = {
            "conv1": (width, 3, 3, 3),
            "conv2": (2 * width, width, 3, 3),
            "conv3": (2 * width, 2 * width, 3, 3),
            "classifier": (num_classes, 2 * width, 1, 1),
        }
        params = {}
        for name, shape in shapes.items():
            fan_in = shape[1] * shape[2] * shape[3]
            params[f"{name}.weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            params[f"{name}.bias"] = np.zeros(shape[0], dtype=dtype)
        return cls(params)

    def astype(self, dtype):
        return TinySegNet({k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return TinySegNet({k: v.copy() for k, v in self.params.items()})

    # -- forward / backward ------------------------------------------------

    def forward(self, images, return_cache=False):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be [N,3,H,W], got {images.shape}")
        if images.shape[2] % 2 or images.shape[3] % 2:
            raise ShapeError(f"image extents must be even, got {images.shape[2:]}")
        x = images.astype(self.params["conv1.weight"].dtype, copy=False)
        cache = []
        for name, stride, pad, act in LAYERS:
            if name == "classifier":
                cache.append(("upsample", x))
                x = upsample_nearest(x, 2)
            pre_input = x
            z = conv2d_forward(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, pad)
            cache.append((name, pre_input, z))
            x = relu(z) if act else z
        return (x, cache) if return_cache else x

    def backward(self, cache, grad_logits):
        """Parameter gradients given d(loss)/d(logits)."""
        grads = {}
        g = grad_logits
        for entry in reversed(cache):
            if entry[0] == "upsample":
                g = upsample_nearest_backward(g, 2)
                continue
            name, x, z = entry
            stride, pad, act = next((s, p, a) for n, s, p, a in LAYERS if n == name)
            if act:
                g = relu_backward(z, g)
            g, gw, gb = conv2d_backward(x, self.params[f"{name}.weight"], g, stride, pad)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
        return grads

    def predict(self, images):
        return self.forward(images).argmax(axis=1)

    # -- accounting --------------------------------------------------------

    def to_checkpoint(self):
        return Checkpoint.from_arrays({k: v.astype(np.float32) for k, v in self.params.items()})

    @classmethod
    def from_checkpoint(cls, ckpt, dtype=np.float32):
        return cls({name: e.to_float(dtype) for name, e in ckpt.items()})

    def count_params(self):
        return sum(v.size for v in self.params.values())


def estimate_flops(net, height, width):
    """Sum over convolutions of 2 * kh * kw * Cin * Cout * Hout * Wout."""
    total = 0
    h, w = height, width
    for name, stride, pad, _ in LAYERS:
        if name == "classifier":
            h, w = 2 * h, 2 * w
        cout, cin, kh, kw = net.params[f"{name}.weight"].shape
        h = conv_output_size(h, kh, stride, pad)
        w = conv_output_size(w, kw, stride, pad)
        total += 2 * kh * kw * cin * cout * h * w
    return total


# ---------------------------------------------------------------------------
# schedule / optimizer


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float | None = None
    step_lr: int | None = None
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.lr_decay is not None:
            if not 0 < self.lr_decay <= 1:
                raise ValueError("lr_decay must lie in (0, 1]")
            if self.step_lr is None or self.step_lr <= 0:
                raise ValueError("step_lr must be a positive integer when lr_decay is set")
        if self.step_lr is not None and self.step_lr <= 0:
            raise ValueError("step_lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def lr_at_epoch(cfg, epoch):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.lr_decay is None or cfg.step_lr is None:
        return cfg.lr
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.step_lr)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (lr / c1) * self.m[k] / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype, copy=False)


class SGD:
    def __init__(self, params, momentum=0.9):
        self.momentum = momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        for k in params:
            self.buf[k] = self.momentum * self.buf[k] + grads[k]
            params[k] -= (lr * self.buf[k]).astype(params[k].dtype, copy=False)


# ---------------------------------------------------------------------------
# training / evaluation


def evaluate(net, samples, batch_size=16):
    cm = ConfusionMatrix(net.num_classes)
    for i in range(0, len(samples), batch_size):
        images, labels = stack(samples[i:i + batch_size])
        cm.update(labels, net.predict(images))
    return cm


@dataclass
class EpochRecord:
    epoch: int
    iou: list
    miou: float
    lr: float
    loss: float


def train(net, train_set, val_set, cfg, augment_cfg=None, include_background=True):
    """Train ``net`` in place; return the per-epoch validation trace."""
    if not train_set:
        raise ValueError("empty training set")
    if cfg.loss.kind == "class_balanced_focal" and cfg.loss.class_weights is None:
        counts = class_pixel_counts(train_set, net.num_classes)
        cfg.loss.class_weights = effective_number_weights(counts, cfg.loss.beta)
    opt = Adam(net.params) if cfg.optimizer == "adam" else SGD(net.params, cfg.momentum)
    trace = []
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1, epoch]))
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            if augment_cfg is not None:
                batch = [augment(s, augment_cfg, rng) for s in batch]
            images, labels = stack(batch)
            logits, cache = net.forward(images, return_cache=True)
            if not np.all(np.isfinite(logits)):
                raise TrainingError(f"non-finite logits at epoch {epoch}, batch {b}")
            res = compute_loss(cfg.loss, logits, labels)
            if not np.isfinite(res.value) or not np.all(np.isfinite(res.grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {res.value}")
            grads = net.backward(cache, res.grad)
            opt.step(net.params, grads, lr)
            losses.append(res.value)
        rec_iou, rec_miou = [], float("nan")
        if val_set:
            cm = evaluate(net, val_set)
            rec_iou = [float(v) for v in cm.iou_per_class()]
            rec_miou = cm.miou(include_background)
        trace.append(EpochRecord(epoch, rec_iou, rec_miou, lr, float(np.mean(losses))))
        log.info("epoch %d loss %.4f mIoU %.4f lr %.3g", epoch, trace[-1].loss, rec_miou, lr)
    return trace
