"""INI experiment configuration with line-numbered validation errors."""
import configparser
import re
from dataclasses import asdict, dataclass, field

from .data import AugmentConfig, SynthConfig
from .losses import KINDS, LossSpec
from .model import TrainConfig
from .prune import METHODS, PruneSpec


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        loc = f"{path or '<config>'}:{line}: " if line else f"{path or '<config>'}: "
        super().__init__(loc + message)
        self.line = line


@dataclass
class PruneStage:
    spec: PruneSpec
    amounts: list
    combined_amount: float | None
    sparse: bool = False


@dataclass
class QuantStage:
    enabled: bool = False
    layer_filter: tuple = ("*.weight",)


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    count: int = 200
    split: float = 0.8
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    width: int = 16
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneStage | None = None
    quant: QuantStage = field(default_factory=QuantStage)
    max_mb: float = 10.0
    include_background: bool = True
    sweep_losses: list = field(default_factory=lambda: list(KINDS))
    sweep_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    @property
    def num_classes(self):
        return self.synth.num_classes

    def section_dict(self, name):
        """Plain-data view of one stage's inputs, used for resume hashing."""
        if name == "data":
            return {"synth": asdict(self.synth), "count": self.count, "split": self.split}
        if name == "train":
            t = asdict(self.train)
            t["loss"].pop("class_weights", None)
            aug = asdict(self.augment) if self.augment else None
            return {"train": t, "augment": aug, "width": self.width}
        if name == "prune":
            return asdict(self.prune) if self.prune else None
        if name == "quant":
            return asdict(self.quant)
        if name == "eval":
            return {"include_background": self.include_background}
        raise KeyError(name)


_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text):
    """Map (section, key) -> 1-based line number."""
    index = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip().lower()
            index[(section, None)] = lineno
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            index[(section, m.group(1).strip().lower())] = lineno
    return index


class _Reader:
    def __init__(self, parser, lines, path):
        self.p, self.lines, self.path = parser, lines, path

    def fail(self, section, key, msg):
        line = self.lines.get((section, key)) or self.lines.get((section, None))
        raise ConfigError(f"[{section}] {key}: {msg}" if key else msg, line, self.path)

    def raw(self, section, key):
        if self.p.has_section(section) and self.p.has_option(section, key):
            return self.p.get(section, key).strip()
        return None

    def get(self, section, key, conv, default):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            self.fail(section, key, f"invalid value {raw!r} ({exc})")

    def check(self, section, key, ok, msg):
        if not ok:
            self.fail(section, key, msg)


def _bool(s):
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _optional(conv):
    def parse(s):
        return None if s.lower() in ("none", "") else conv(s)
    return parse


def _floats(s):
    return [float(x) for x in s.replace(",", " ").split()]


def _ints(s):
    return [int(x) for x in s.replace(",", " ").split()]


def _words(s):
    return [x for x in s.replace(",", " ").split()]


def parse_config(text, path=None):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse: {exc.message.splitlines()[0]}", line, path) from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"cannot parse: {exc.message.splitlines()[0]}", line, path) from None
    r = _Reader(parser, _line_index(text), path)

    known = {"data", "model", "train", "prune", "quant", "budget", "eval", "sweep"}
    for section in parser.sections():
        if section not in known:
            r.fail(section, None, f"unknown section [{section}]")

    # [data]
    k = r.get("data", "k", int, 5)
    r.check("data", "k", k in (2, 5), "K must be 2 (binary) or 5 (materials)")
    size = r.get("data", "size", int, 64)
    r.check("data", "size", size >= 16 and size % 2 == 0, "size must be even and >= 16")
    objects = r.get("data", "objects", _ints, [2, 5])
    r.check("data", "objects", len(objects) == 2 and 0 <= objects[0] <= objects[1], "objects must be 'lo, hi'")
    weights = r.get("data", "class_weights", _floats, [1.0, 0.8, 0.6, 0.4])
    r.check("data", "class_weights", len(weights) == 4 and all(w > 0 for w in weights), "need four positive weights")
    synth = SynthConfig(
        seed=r.get("data", "seed", int, 0),
        size=size,
        objects=tuple(objects),
        num_classes=k,
        class_weights=tuple(weights),
        noise=r.get("data", "noise", float, 0.02),
    )
    count = r.get("data", "count", int, 200)
    r.check("data", "count", count >= 2, "count must be >= 2")
    split = r.get("data", "split", float, 0.8)
    r.check("data", "split", 0 < split < 1, "split must lie in (0, 1)")
    augment = None
    if r.get("data", "augment", _bool, True):
        probs = {}
        for key, default in (("p_hflip", 0.5), ("p_vflip", 0.5), ("p_colorjitter", 0.25)):
            probs[key] = r.get("data", key, float, default)
            r.check("data", key, 0 <= probs[key] <= 1, "probability must lie in [0, 1]")
        scale = r.get("data", "scale_range", _floats, [1.0, 1.25])
        r.check("data", "scale_range", len(scale) == 2 and 0 < scale[0] <= scale[1], "scale_range must be 'lo, hi'")
        augment = AugmentConfig(**probs, scale_range=tuple(scale))

    width = r.get("model", "width", int, 16)
    r.check("model", "width", width >= 1, "width must be >= 1")

    # [train]
    loss_kind = r.get("train", "loss", str, "cross_entropy")
    r.check("train", "loss", loss_kind in KINDS, f"unknown loss; expected one of {', '.join(KINDS)}")
    gamma = r.get("train", "gamma", float, 2.0)
    r.check("train", "gamma", gamma >= 0, "gamma must be >= 0")
    beta = r.get("train", "beta", float, 0.999)
    r.check("train", "beta", 0 <= beta < 1, "beta must lie in [0, 1)")
    eps = r.get("train", "eps", float, 1e-6)
    r.check("train", "eps", eps > 0, "eps must be > 0")
    lam = r.get("train", "lambda", float, 0.5)
    r.check("train", "lambda", 0 <= lam <= 1, "lambda must lie in [0, 1]")
    lr = r.get("train", "lr", float, 5e-4)
    r.check("train", "lr", lr > 0, "lr must be > 0")
    lr_decay = r.get("train", "lr_decay", _optional(float), None)
    r.check("train", "lr_decay", lr_decay is None or 0 < lr_decay <= 1, "lr_decay must lie in (0, 1]")
    step_lr = r.get("train", "step_lr", _optional(int), None)
    r.check("train", "step_lr", step_lr is None or step_lr > 0, "step_lr must be positive")
    r.check("train", "lr_decay", lr_decay is None or step_lr is not None, "step_lr is required when lr_decay is set")
    epochs = r.get("train", "epochs", int, 30)
    r.check("train", "epochs", epochs >= 0, "epochs must be >= 0")
    batch = r.get("train", "batch", int, 8)
    r.check("train", "batch", batch >= 1, "batch must be >= 1")
    optimizer = r.get("train", "optimizer", str, "adam")
    r.check("train", "optimizer", optimizer in ("adam", "sgd"), "optimizer must be adam or sgd")
    train = TrainConfig(
        lr=lr, lr_decay=lr_decay, step_lr=step_lr, epochs=epochs, batch_size=batch,
        optimizer=optimizer, seed=r.get("train", "seed", int, 0),
        loss=LossSpec(kind=loss_kind, gamma=gamma, beta=beta, eps=eps, lam=lam),
    )

    # [prune]
    prune = None
    if parser.has_section("prune") and r.get("prune", "enabled", _bool, True):
        method = r.get("prune", "method", str, "l1_unstructured")
        r.check("prune", "method", method in METHODS, f"unknown method; expected one of {', '.join(METHODS)}")
        amounts = r.get("prune", "amounts", _floats, None)
        if amounts is None:
            amounts = r.get("prune", "amount", _floats, [0.3])
        r.check("prune", "amounts", amounts and all(0 <= a <= 1 for a in amounts), "amounts must lie in [0, 1]")
        combined = r.get("prune", "combined_amount", _optional(float), amounts[-1] if len(amounts) == 1 else None)
        r.check("prune", "combined_amount", combined is None or 0 <= combined <= 1, "must lie in [0, 1]")
        n = r.get("prune", "n", float, 2)
        r.check("prune", "n", n >= 1, "n must be >= 1")
        exempt = tuple(r.get("prune", "exempt", _words, ["classifier.*"]))
        spec = PruneSpec(method=method, amount=amounts[0], n=n, seed=r.get("prune", "seed", int, 0), exempt=exempt)
        prune = PruneStage(spec, amounts, combined, r.get("prune", "sparse", _bool, False))

    quant = QuantStage(
        enabled=r.get("quant", "enabled", _bool, False),
        layer_filter=tuple(r.get("quant", "layer_filter", _words, ["*.weight"])),
    )
    max_mb = r.get("budget", "max_mb", float, 10.0)
    r.check("budget", "max_mb", max_mb > 0, "max_mb must be > 0")

    losses = r.get("sweep", "losses", _words, list(KINDS))
    for name in losses:
        r.check("sweep", "losses", name in KINDS, f"unknown loss {name!r}")
    seeds = r.get("sweep", "seeds", _ints, [0, 1, 2, 3, 4])
    r.check("sweep", "seeds", len(seeds) >= 1, "need at least one seed")

    return PipelineConfig(
        synth=synth, count=count, split=split, augment=augment, width=width, train=train,
        prune=prune, quant=quant, max_mb=max_mb,
        include_background=r.get("eval", "include_background", _bool, True),
        sweep_losses=losses, sweep_seeds=seeds,
    )


def load_config(path):
    with open(path) as f:
        return parse_config(f.read(), str(path))


def with_seed(cfg, seed):
    """Copy of ``cfg`` with every seed replaced by ``seed``."""
    from dataclasses import replace

    out = replace(cfg, synth=replace(cfg.synth, seed=seed), train=replace(cfg.train, seed=seed))
    if cfg.prune:
        out.prune = replace(cfg.prune, spec=replace(cfg.prune.spec, seed=seed))
    return out
