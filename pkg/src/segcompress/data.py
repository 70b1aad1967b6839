"""Synthetic waste scenes, training-time augmentation and PPM/PGM storage.

Each scene composites a few material objects over a colorful background.
Every object class has its own shape and color family so a small network
can learn to separate them; class frequencies are configurable to control
imbalance.
"""
import os
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("background", "Aluminium", "Paper", "Bottle", "Nylon")

# base RGB per material, in class order
MATERIAL_COLORS = np.array(
    [
        [0.66, 0.68, 0.72],  # Aluminium: gray metal
        [0.94, 0.92, 0.84],  # Paper: off-white
        [0.18, 0.48, 0.92],  # Bottle: blue plastic
        [0.35, 0.86, 0.32],  # Nylon: green film
    ],
    dtype=np.float32,
)

BACKGROUND_PALETTE = np.array(
    [
        [0.78, 0.16, 0.14],
        [0.92, 0.52, 0.08],
        [0.50, 0.10, 0.52],
        [0.44, 0.28, 0.12],
        [0.86, 0.20, 0.58],
        [0.16, 0.14, 0.22],
        [0.62, 0.08, 0.30],
    ],
    dtype=np.float32,
)

# object radius as a fraction of image size, per material
MATERIAL_SCALES = ((0.10, 0.16), (0.14, 0.22), (0.12, 0.20), (0.11, 0.19))


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [H, W] int64

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3,H,W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ValueError(f"labels {self.labels.shape} do not match image {self.image.shape}")


@dataclass
class SynthConfig:
    seed: int = 0
    size: int = 64
    objects: tuple = (2, 5)
    num_classes: int = 5
    class_weights: tuple = (1.0, 0.8, 0.6, 0.4)
    noise: float = 0.02

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("image size must be >= 16")
        if self.num_classes not in (2, 5):
            raise ValueError("num_classes must be 2 (binary) or 5 (materials)")
        lo, hi = self.objects
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects-per-scene range {self.objects}")
        if len(self.class_weights) != 4 or any(w <= 0 for w in self.class_weights):
            raise ValueError("class_weights must be four positive numbers")


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_colorjitter: float = 0.25
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    scale_range: tuple = (1.0, 1.25)
    crop_size: int | None = None

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_colorjitter"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")


def sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# ---------------------------------------------------------------------------
# scene generation


def _inside(material, u, v, rng):
    """Canonical-coordinate shape test for one material family."""
    if material == 0:  # can: rounded rectangle
        return (np.abs(u) < 0.5) & (np.abs(v) < 0.9) & ((np.abs(u) < 0.35) | (np.abs(v) < 0.8))
    if material == 1:  # sheet: rectangle
        return (np.abs(u) < 0.95) & (np.abs(v) < 0.7)
    if material == 2:  # bottle: ellipse body plus neck
        body = (u / 0.5) ** 2 + ((v - 0.15) / 0.85) ** 2 < 1
        neck = (np.abs(u) < 0.17) & (v > -1.05) & (v < -0.5)
        return body | neck
    phase = rng.uniform(0, 2 * np.pi)
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    return r < 0.72 + 0.22 * np.sin(5 * theta + phase)


def _texture(material, u, v, rgb):
    if material == 0:  # specular stripe
        return np.where(((u > 0.05) & (u < 0.22))[None], np.minimum(rgb * 1.3, 1.0), rgb)
    if material == 1:  # faint print lines
        lines = (np.floor((v + 1) * 6) % 2 == 0) & (np.abs(u) < 0.7)
        return np.where(lines[None], rgb * 0.9, rgb)
    return rgb


def _background(rng, size):
    a, b = BACKGROUND_PALETTE[rng.choice(len(BACKGROUND_PALETTE), 2, replace=False)]
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    t = np.clip(0.5 + (xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle), 0, 1)
    img = a[:, None, None] * (1 - t) + b[:, None, None] * t
    freq = rng.uniform(2, 6)
    stripes = 0.06 * np.sin(2 * np.pi * freq * (xx * np.sin(angle) - yy * np.cos(angle)))
    return (img + stripes[None]).astype(np.float32)


def generate_scene(cfg, index):
    """Scene ``index`` of the corpus described by ``cfg`` (pure in (seed, index))."""
    rng = sample_rng(cfg.seed, index)
    s = cfg.size
    image = _background(rng, s)
    labels = np.zeros((s, s), dtype=np.int64)
    lo, hi = cfg.objects
    count = int(rng.integers(lo, hi + 1))
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    for _ in range(count):
        material = int(rng.choice(4, p=weights / weights.sum()))
        smin, smax = MATERIAL_SCALES[material]
        radius = rng.uniform(smin, smax) * s
        aspect = rng.uniform(0.8, 1.25)
        angle = rng.uniform(0, 2 * np.pi)
        cx, cy = rng.uniform(0.1, 0.9, 2) * s
        dx, dy = xs - cx, ys - cy
        c, sn = np.cos(angle), np.sin(angle)
        u = (c * dx + sn * dy) / (radius * aspect)
        v = (-sn * dx + c * dy) / (radius / aspect)
        mask = _inside(material, u, v, rng)
        rgb = MATERIAL_COLORS[material] + rng.uniform(-0.04, 0.04, 3).astype(np.float32)
        obj = _texture(material, u, v, np.broadcast_to(rgb[:, None, None], (3, s, s)).astype(np.float32))
        image = np.where(mask[None], obj, image)
        labels[mask] = material + 1
    if cfg.noise > 0:
        image = image + rng.normal(0, cfg.noise, image.shape).astype(np.float32)
    image = np.clip(image, 0, 1).astype(np.float32)
    if cfg.num_classes == 2:
        labels = (labels > 0).astype(np.int64)
    return SceneSample(image, labels)


def generate_dataset(cfg, count, start=0):
    return [generate_scene(cfg, i) for i in range(start, start + count)]


def split_dataset(samples, train_fraction=0.8):
    n_train = int(round(len(samples) * train_fraction))
    return samples[:n_train], samples[n_train:]


def class_pixel_counts(dataset, num_classes):
    if not dataset:
        raise ValueError("empty dataset")
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in dataset:
        counts += np.bincount(s.labels.ravel(), minlength=num_classes)[:num_classes]
    return counts


def stack(samples):
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    return images, labels


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(img, out_h, out_w):
    c, h, w = img.shape
    sy = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    sx = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(np.float32)[:, None]
    fx = (sx - x0).astype(np.float32)[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _resize_nearest(labels, out_h, out_w):
    h, w = labels.shape
    iy = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ix = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return labels[iy][:, ix]


def _rgb_to_hsv(img):
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6, 0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0)
    return h, s, mx


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape, dtype=np.float32)
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        out[0][sel], out[1][sel], out[2][sel] = r[sel], g[sel], b[sel]
    return out


def color_jitter(img, rng, brightness, contrast, saturation, hue):
    """Random brightness/contrast/saturation factors and hue shift; zero amplitude is a no-op."""
    gray_w = np.array([0.299, 0.587, 0.114], dtype=np.float32)[:, None, None]
    if brightness > 0:
        img = img * np.float32(rng.uniform(1 - brightness, 1 + brightness))
    if contrast > 0:
        mean = (img * gray_w).sum(axis=0).mean()
        img = (img - mean) * np.float32(rng.uniform(1 - contrast, 1 + contrast)) + mean
    if saturation > 0:
        gray = (img * gray_w).sum(axis=0, keepdims=True)
        img = (img - gray) * np.float32(rng.uniform(1 - saturation, 1 + saturation)) + gray
    if hue > 0:
        h, s, v = _rgb_to_hsv(np.clip(img, 0, 1))
        img = _hsv_to_rgb((h + rng.uniform(-hue, hue)) % 1.0, s, v)
    return np.clip(img, 0, 1).astype(np.float32)


def augment(sample, cfg, rng):
    """Scale, crop, flip and color-jitter one sample with the caller's ``rng``."""
    image, labels = sample.image, sample.labels
    _, h, w = image.shape
    lo, hi = cfg.scale_range
    factor = rng.uniform(lo, hi) if hi > lo else lo
    if factor != 1:
        nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
        image = _resize_bilinear(image, nh, nw)
        labels = _resize_nearest(labels, nh, nw)
    crop = cfg.crop_size or h
    _, ch, cw = image.shape
    if crop > ch or crop > cw:
        raise ValueError(f"crop size {crop} exceeds image size {ch}x{cw}")
    if crop < ch or crop < cw:
        oy = int(rng.integers(0, ch - crop + 1))
        ox = int(rng.integers(0, cw - crop + 1))
        image = image[:, oy:oy + crop, ox:ox + crop]
        labels = labels[oy:oy + crop, ox:ox + crop]
    if rng.random() < cfg.p_hflip:
        image, labels = image[:, :, ::-1], labels[:, ::-1]
    if rng.random() < cfg.p_vflip:
        image, labels = image[:, ::-1, :], labels[::-1, :]
    if rng.random() < cfg.p_colorjitter:
        image = color_jitter(image, rng, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue)
    return SceneSample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(labels))


# ---------------------------------------------------------------------------
# PPM / PGM


class ImageFormatError(ValueError):
    pass


def _write_pnm(path, magic, h, w, payload):
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload)


def _read_pnm(path, expected_magic):
    with open(path, "rb") as f:
        buf = f.read()
    return parse_pnm(buf, expected_magic)


def parse_pnm(buf, expected_magic):
    """Parse a binary P5/P6 buffer into an ``(H, W[, 3])`` uint8 array."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: unexpected end of file")
        tokens.append(buf[start:pos])
    magic = tokens[0].decode("ascii", "replace")
    if magic != expected_magic:
        raise ImageFormatError(f"malformed header: expected {expected_magic}, got {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError("malformed header: non-integer field") from None
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError("malformed header: empty image")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == "P6" else 1
    n = w * h * channels
    if len(buf) - pos < n:
        raise ImageFormatError(f"truncated pixel data: {len(buf) - pos} of {n} bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    return data.reshape(h, w, 3) if channels == 3 else data.reshape(h, w)


def save_sample(sample, image_path, label_path):
    if sample.labels.max(initial=0) > 255 or sample.labels.min(initial=0) < 0:
        raise ValueError("labels must fit in one byte")
    _, h, w = sample.image.shape
    img8 = np.floor(np.clip(sample.image, 0, 1) * 255 + 0.5).astype(np.uint8)
    _write_pnm(image_path, "P6", h, w, img8.transpose(1, 2, 0).tobytes())
    _write_pnm(label_path, "P5", h, w, sample.labels.astype(np.uint8).tobytes())


def load_sample(image_path, label_path):
    img = _read_pnm(image_path, "P6")
    lbl = _read_pnm(label_path, "P5")
    if img.shape[:2] != lbl.shape:
        raise ImageFormatError(f"image {img.shape[:2]} and labels {lbl.shape} differ in size")
    image = (img.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)
    return SceneSample(np.ascontiguousarray(image), lbl.astype(np.int64))


def write_dataset(samples, out_dir, prefix="scene"):
    """Write samples as PPM/PGM pairs plus a tab-separated manifest; return its path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name, lbl_name = f"{prefix}_{i:05d}.ppm", f"{prefix}_{i:05d}_labels.pgm"
        save_sample(s, os.path.join(out_dir, img_name), os.path.join(out_dir, lbl_name))
        lines.append(f"{img_name}\t{lbl_name}\n")
    manifest = os.path.join(out_dir, f"{prefix}_manifest.txt")
    with open(manifest, "w") as f:
        f.writelines(lines)
    return manifest


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'image<TAB>labels'")
            samples.append(load_sample(*(os.path.join(base, p) for p in parts)))
    return samples
