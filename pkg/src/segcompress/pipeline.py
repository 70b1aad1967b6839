"""Staged experiment runner, report tables and the loss sweep.

A run directory holds ``manifest.json`` recording, per stage, a hash of the
stage's inputs and its results. A rerun skips a stage only when the hash
matches and its output files are still present.
"""
import copy
import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .data import CLASS_NAMES, generate_dataset, read_manifest, split_dataset, write_dataset
from .losses import KINDS
from .model import TinySegNet, evaluate, train
from .prune import prune_checkpoint, prune_targets, pruned_count, pruned_size_mb, to_sparse
from .quant import ptq_checkpoint, quant_size_mb

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# report rows


def delta_percent(value, baseline):
    if baseline == 0:
        raise ZeroDivisionError("baseline value is zero")
    return (value - baseline) / baseline * 100.0


def format_percent(x):
    if x is None:
        return ""
    r = round(x, 2)
    return "0.00%" if r == 0 else f"{r:+.2f}%"


@dataclass
class ReportRow:
    label: str
    iou: list
    miou: float
    size_mb: float
    d_miou: float | None = None
    d_size: float | None = None
    over_budget: bool = False


def with_deltas(rows):
    """Fill deltas of every row against the first (baseline) row."""
    if not rows:
        raise ValueError("no report rows")
    base = rows[0]
    return [
        replace(r, d_miou=delta_percent(r.miou, base.miou), d_size=delta_percent(r.size_mb, base.size_mb))
        for r in rows
    ]


def _class_columns(num_classes):
    return list(CLASS_NAMES[1:]) if num_classes == 5 else []


def _fmt_iou(v):
    return "-" if v is None or np.isnan(v) else f"{v:.3f}"


def _cells(row, num_classes):
    iou = [_fmt_iou(row.iou[c]) for c in range(1, len(row.iou))] if num_classes == 5 else []
    size = f"{row.size_mb:.2f}" + (" !" if row.over_budget else "")
    return [row.label, *iou, _fmt_iou(row.miou), size, format_percent(row.d_miou), format_percent(row.d_size)]


def report_table(rows, num_classes=5):
    """Fixed-width text table; an over-budget size carries a trailing '!'."""
    if not rows:
        raise ValueError("no report rows")
    header = ["label", *_class_columns(num_classes), "mIoU", "Size (MB)", "ΔmIoU %", "ΔSize %"]
    body = [_cells(r, num_classes) for r in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]

    def fmt(line):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))).rstrip()

    out = [fmt(header), "  ".join("-" * w for w in widths)]
    out += [fmt(line) for line in body]
    return "\n".join(out) + "\n"


def report_csv(rows, num_classes=5):
    if not rows:
        raise ValueError("no report rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", *_class_columns(num_classes), "miou", "size_mb", "d_miou_pct", "d_size_pct", "over_budget"])
    for r in rows:
        iou = [f"{r.iou[c]:.6f}" for c in range(1, len(r.iou))] if num_classes == 5 else []
        d = ["" if x is None else f"{x:.4f}" for x in (r.d_miou, r.d_size)]
        w.writerow([r.label, *iou, f"{r.miou:.6f}", f"{r.size_mb:.6f}", *d, int(r.over_budget)])
    return buf.getvalue()


REFERENCE_ROWS = (
    # label, baseline mIoU, compressed mIoU, baseline MB, compressed MB
    ("BiSeNet quantized", 0.718, 0.707, 13.38, 3.21),
    ("ICNet quantized", 0.733, 0.725, 189.96, 90.69),
)


def reference_table():
    """Full-scale quantization results with deltas recomputed by ``delta_percent``."""
    lines = ["reference (full-scale networks, deltas recomputed)"]
    for label, m0, m1, s0, s1 in REFERENCE_ROWS:
        lines.append(
            f"  {label:<18} mIoU {m1:.3f}  size {s1:.2f} MB  "
            f"ΔmIoU {format_percent(delta_percent(m1, m0))}  ΔSize {format_percent(delta_percent(s1, s0))}"
        )
    return "\n".join(lines) + "\n"


def write_trace(path, trace, num_classes):
    names = list(CLASS_NAMES) if num_classes == 5 else ["background", "waste"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", *[f"iou_{n}" for n in names], "miou", "lr"])
        for rec in trace:
            w.writerow([rec.epoch, *[f"{v:.6f}" for v in rec.iou], f"{rec.miou:.6f}", repr(rec.lr)])


# ---------------------------------------------------------------------------
# run directory


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class RunDir:
    def __init__(self, root):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.manifest_path = os.path.join(self.root, MANIFEST)
        self.stages = {}
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as f:
                self.stages = json.load(f).get("stages", {})
        self.executed = []

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def _save(self):
        with open(self.manifest_path, "w") as f:
            json.dump({"stages": self.stages}, f, indent=2, sort_keys=True)
            f.write("\n")

    def stage(self, name, inputs, fn):
        """Run ``fn() -> (result, outputs)`` unless a hash-matching record exists."""
        h = _hash({"stage": name, "inputs": inputs})
        rec = self.stages.get(name)
        if rec and rec["hash"] == h and all(os.path.exists(self.path(p)) for p in rec["outputs"]):
            log.info("stage %s: up to date", name)
            return h, rec["result"]
        log.info("stage %s: running", name)
        try:
            result, outputs = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.stages[name] = {"hash": h, "result": result, "outputs": sorted(outputs)}
        self._save()
        self.executed.append(name)
        return h, result


# ---------------------------------------------------------------------------
# stages


def _rel(run, path):
    return os.path.relpath(path, run.root)


def stage_data(run, cfg):
    def fn():
        samples = generate_dataset(cfg.synth, cfg.count)
        tr, va = split_dataset(samples, cfg.split)
        if not tr or not va:
            raise ValueError(f"split {cfg.split} of {cfg.count} scenes leaves an empty side")
        d = run.path("dataset")
        mt = write_dataset(tr, d, "train")
        mv = write_dataset(va, d, "val")
        res = {"train_manifest": _rel(run, mt), "val_manifest": _rel(run, mv), "n_train": len(tr), "n_val": len(va)}
        return res, [res["train_manifest"], res["val_manifest"]]

    return run.stage("data", cfg.section_dict("data"), fn)


def load_splits(run, data_result):
    return (
        read_manifest(run.path(data_result["train_manifest"])),
        read_manifest(run.path(data_result["val_manifest"])),
    )


def train_model(cfg, train_set, val_set):
    net = TinySegNet.init(cfg.width, cfg.num_classes, seed=cfg.train.seed)
    trace = train(net, train_set, val_set, copy.deepcopy(cfg.train), cfg.augment, cfg.include_background)
    return net, trace


def stage_train(run, cfg, data_hash, data_result, splits):
    def fn():
        train_set, val_set = splits()
        net, trace = train_model(cfg, train_set, val_set)
        os.makedirs(run.path("checkpoints"), exist_ok=True)
        net.to_checkpoint().save(run.path("checkpoints", "baseline.csgc"))
        write_trace(run.path("trace.csv"), trace, cfg.num_classes)
        return {"checkpoint": "checkpoints/baseline.csgc", "trace": "trace.csv"}, ["checkpoints/baseline.csgc", "trace.csv"]

    return run.stage("train", {"data": data_hash, "train": cfg.section_dict("train")}, fn)


def eval_checkpoint(ckpt, val_set, include_background=True):
    cm = evaluate(TinySegNet.from_checkpoint(ckpt), val_set)
    return {"iou": [float(v) for v in cm.iou_per_class()], "miou": cm.miou(include_background)}


def _fmt_amount(a):
    return f"{a:g}"


def stage_eval(run, cfg, train_hash, ckpt_rel, splits):
    def fn():
        ckpt = Checkpoint.load(run.path(ckpt_rel))
        res = eval_checkpoint(ckpt, splits()[1], cfg.include_background)
        res.update(label="baseline", size_mb=ckpt.size_mb())
        return res, [ckpt_rel]

    return run.stage("eval", {"train": train_hash, "eval": cfg.section_dict("eval")}, fn)


def _prune(ckpt, cfg, amount):
    spec = replace(cfg.prune.spec, amount=amount)
    pruned, masks = prune_checkpoint(ckpt, spec)
    effective = pruned_count(masks) / ckpt.count_params()
    return pruned, effective


def stage_prune(run, cfg, eval_hash, base_ckpt_rel, dense_mb, splits):
    def fn():
        ckpt = Checkpoint.load(run.path(base_ckpt_rel))
        rows, outputs = [], []
        for amount in cfg.prune.amounts:
            pruned, effective = _prune(ckpt, cfg, amount)
            name = f"checkpoints/pruned_{_fmt_amount(amount)}.csgc"
            pruned.save(run.path(name))
            outputs.append(name)
            if cfg.prune.sparse:
                sname = f"checkpoints/pruned_{_fmt_amount(amount)}.sparse.csgc"
                to_sparse(pruned, prune_targets(pruned, cfg.prune.spec.exempt)).save(run.path(sname))
                outputs.append(sname)
            res = eval_checkpoint(pruned, splits()[1], cfg.include_background)
            res.update(
                label=f"pruned({_fmt_amount(amount)})",
                size_mb=pruned_size_mb(dense_mb, effective),
                effective_amount=effective,
            )
            rows.append(res)
        return {"rows": rows}, outputs

    return run.stage("prune", {"eval": eval_hash, "prune": cfg.section_dict("prune")}, fn)


def stage_quant(run, cfg, eval_hash, base_ckpt_rel, splits):
    def fn():
        q = ptq_checkpoint(Checkpoint.load(run.path(base_ckpt_rel)), cfg.quant.layer_filter)
        q.save(run.path("checkpoints", "quantized.csgc"))
        res = eval_checkpoint(q, splits()[1], cfg.include_background)
        res.update(label="quantized", size_mb=quant_size_mb(q))
        return res, ["checkpoints/quantized.csgc"]

    return run.stage("quant", {"eval": eval_hash, "quant": cfg.section_dict("quant")}, fn)


def stage_combined(run, cfg, eval_hash, base_ckpt_rel, splits):
    amount = cfg.prune.combined_amount

    def fn():
        pruned, _ = _prune(Checkpoint.load(run.path(base_ckpt_rel)), cfg, amount)
        q = ptq_checkpoint(pruned, cfg.quant.layer_filter)
        name = f"checkpoints/pruned_{_fmt_amount(amount)}_quantized.csgc"
        q.save(run.path(name))
        res = eval_checkpoint(q, splits()[1], cfg.include_background)
        # quantization charges every element a byte, so the size matches the
        # quantized-only model
        res.update(label=f"pruned({_fmt_amount(amount)})+quantized", size_mb=quant_size_mb(q))
        return res, [name]

    inputs = {"eval": eval_hash, "prune": cfg.section_dict("prune"), "quant": cfg.section_dict("quant")}
    return run.stage("combined", inputs, fn)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    rows: list
    report_path: str
    csv_path: str
    final_size_mb: float
    budget_exceeded: bool
    executed: list


def _row(res):
    return ReportRow(res["label"], res["iou"], res["miou"], res["size_mb"])


def run_pipeline(cfg, out_dir):
    """Run data -> train -> eval -> prune -> quant -> combined and write the report."""
    run = RunDir(out_dir)
    cache = {}

    def splits():
        if "splits" not in cache:
            cache["splits"] = load_splits(run, data_res)
        return cache["splits"]

    data_hash, data_res = stage_data(run, cfg)
    train_hash, train_res = stage_train(run, cfg, data_hash, data_res, splits)
    eval_hash, base = stage_eval(run, cfg, train_hash, train_res["checkpoint"], splits)
    results = [base]
    if cfg.prune:
        _, pr = stage_prune(run, cfg, eval_hash, train_res["checkpoint"], base["size_mb"], splits)
        results += pr["rows"]
    if cfg.quant.enabled:
        results.append(stage_quant(run, cfg, eval_hash, train_res["checkpoint"], splits)[1])
        if cfg.prune and cfg.prune.combined_amount is not None:
            results.append(stage_combined(run, cfg, eval_hash, train_res["checkpoint"], splits)[1])

    rows = with_deltas([_row(r) for r in results])
    final = rows[-1]
    exceeded = final.size_mb > cfg.max_mb
    rows[-1] = replace(final, over_budget=exceeded)

    text = report_table(rows, cfg.num_classes)
    text += f"\nbudget: {cfg.max_mb:.2f} MB, final artifact {final.size_mb:.2f} MB"
    text += " (OVER BUDGET)\n" if exceeded else " (within budget)\n"
    text += "\n" + reference_table()
    report_path, csv_path = run.path("report.txt"), run.path("report.csv")
    with open(report_path, "w") as f:
        f.write(text)
    with open(csv_path, "w") as f:
        f.write(report_csv(rows, cfg.num_classes))
    return PipelineResult(rows, report_path, csv_path, final.size_mb, exceeded, run.executed)


# ---------------------------------------------------------------------------
# loss sweep

SWEEP_ORDER = ("cross_entropy", "focal", "lovasz", "dice", "class_balanced_focal", "focal_lovasz")
SWEEP_LABELS = {
    "cross_entropy": "Cross-entropy",
    "focal": "Focal",
    "lovasz": "Lovász",
    "dice": "Dice",
    "class_balanced_focal": "CBFL",
    "focal_lovasz": "Focal-Lovász",
}
LAST_EPOCHS = 10


@dataclass
class SweepRow:
    loss: str
    final: list  # final mIoU per seed
    last_mean: list  # per seed, mean mIoU over the last epochs
    last_sd: list  # per seed, sd of mIoU over the last epochs

    @property
    def mean(self):
        return float(np.mean(self.final))

    @property
    def sd(self):
        return float(np.std(self.final))


@dataclass
class SweepResult:
    rows: list
    report_path: str
    csv_path: str

    def row(self, loss):
        return next(r for r in self.rows if r.loss == loss)

    @property
    def best(self):
        return max(self.rows, key=lambda r: r.mean).loss

    @property
    def focal_lovasz_ge_ce(self):
        names = {r.loss for r in self.rows}
        if not {"focal_lovasz", "cross_entropy"} <= names:
            return None
        return self.row("focal_lovasz").mean >= self.row("cross_entropy").mean


def sweep_report(result, seeds):
    lines = [
        f"loss sweep over seeds {', '.join(str(s) for s in seeds)} (last {LAST_EPOCHS} epochs averaged per seed)",
        "",
    ]
    header = ["loss", "final mIoU", "last-epochs mean", "last-epochs sd"]
    body = [
        [
            SWEEP_LABELS[r.loss],
            f"{r.mean:.4f} ± {r.sd:.4f}",
            f"{np.mean(r.last_mean):.4f}",
            f"{np.mean(r.last_sd):.4f}",
        ]
        for r in result.rows
    ]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    for line in [header, ["-" * w for w in widths], *body]:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))).rstrip())
    lines.append("")
    lines.append(f"best mean final mIoU: {SWEEP_LABELS[result.best]}")
    flag = result.focal_lovasz_ge_ce
    if flag is not None:
        lines.append(f"Focal-Lovász >= Cross-entropy: {'yes' if flag else 'no'}")
    return "\n".join(lines) + "\n"


def loss_sweep(cfg, out_dir, losses=None, seeds=None):
    """Train one model per (loss, seed) on a shared dataset; report mean ± sd mIoU."""
    losses = list(cfg.sweep_losses if losses is None else losses)
    seeds = list(cfg.sweep_seeds if seeds is None else seeds)
    if not losses or not seeds:
        raise ValueError("need at least one loss and one seed")
    for name in losses:
        if name not in KINDS:
            raise ValueError(f"unknown loss {name!r}")
    run = RunDir(out_dir)
    _, data_res = stage_data(run, cfg)
    train_set, val_set = load_splits(run, data_res)
    os.makedirs(run.path("traces"), exist_ok=True)

    ordered = sorted(dict.fromkeys(losses), key=SWEEP_ORDER.index)
    rows = []
    for loss in ordered:
        final, last_mean, last_sd = [], [], []
        for seed in seeds:
            sub = replace(cfg, train=replace(cfg.train, seed=seed, loss=replace(cfg.train.loss, kind=loss)))
            log.info("sweep: %s seed %d", loss, seed)
            try:
                _, trace = train_model(sub, train_set, val_set)
            except Exception as exc:
                raise StageError(f"sweep {loss} seed {seed}", exc) from exc
            write_trace(run.path("traces", f"{loss}_seed{seed}.csv"), trace, cfg.num_classes)
            if not trace:
                raise ValueError("sweep needs epochs >= 1")
            tail = [r.miou for r in trace[-LAST_EPOCHS:]]
            final.append(trace[-1].miou)
            last_mean.append(float(np.mean(tail)))
            last_sd.append(float(np.std(tail)))
        rows.append(SweepRow(loss, final, last_mean, last_sd))

    result = SweepResult(rows, run.path("sweep_report.txt"), run.path("sweep_report.csv"))
    with open(result.report_path, "w") as f:
        f.write(sweep_report(result, seeds))
    with open(result.csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["loss", "seed", "final_miou", "last_mean", "last_sd"])
        for r in rows:
            for s, a, b, c in zip(seeds, r.final, r.last_mean, r.last_sd):
                w.writerow([r.loss, s, f"{a:.6f}", f"{b:.6f}", f"{c:.6f}"])
    return result
