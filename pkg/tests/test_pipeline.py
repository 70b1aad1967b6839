import csv
import os

import numpy as np
import pytest

from segcompress.cli import main
from segcompress.config import ConfigError, parse_config, with_seed
from segcompress.pipeline import (
    ReportRow,
    delta_percent,
    format_percent,
    loss_sweep,
    report_csv,
    report_table,
    run_pipeline,
    with_deltas,
)

TINY = """
[data]
count = 10
size = 32
augment = false
[train]
epochs = {epochs}
batch = 4
"""

COMPRESS = """
[prune]
amounts = 0, 0.3
combined_amount = 0.3
[quant]
enabled = true
"""


def tiny(epochs=2, extra=""):
    return parse_config(TINY.format(epochs=epochs) + extra)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


# -- deltas and tables ---------------------------------------------------


def test_delta_examples():
    assert format_percent(delta_percent(0.707, 0.718)) == "-1.53%"
    # the printed table value is -76.02; the formula gives -76.009...
    assert format_percent(delta_percent(3.21, 13.38)) == "-76.01%"
    assert format_percent(0.0) == "0.00%"
    assert format_percent(-0.001) == "0.00%"
    assert format_percent(12.5) == "+12.50%"


def test_report_table_layout():
    iou = [0.99, 0.5, 0.6, 0.7, 0.8]
    base = ReportRow("baseline", iou, 0.718, 13.38)
    text = report_table([base])
    header, rule, row = text.splitlines()
    assert header.split()[:5] == ["label", "Aluminium", "Paper", "Bottle", "Nylon"]
    assert row.split() == ["baseline", "0.500", "0.600", "0.700", "0.800", "0.718", "13.38"]

    rows = with_deltas([base, ReportRow("quantized", iou, 0.707, 3.21)])
    line = report_table(rows).splitlines()[-1]
    assert line.endswith("-1.53%  -76.01%")


def test_report_table_binary_mode_omits_classes():
    text = report_table([ReportRow("baseline", [0.9, 0.8], 0.85, 0.01)], num_classes=2)
    assert "Aluminium" not in text
    assert text.splitlines()[2].split() == ["baseline", "0.850", "0.01"]


def test_report_empty_rows():
    with pytest.raises(ValueError):
        report_table([])
    with pytest.raises(ValueError):
        report_csv([])
    with pytest.raises(ValueError):
        with_deltas([])


# -- config --------------------------------------------------------------


def test_config_defaults():
    cfg = parse_config("")
    assert cfg.max_mb == 10.0 and cfg.num_classes == 5 and cfg.prune is None
    assert cfg.train.loss.kind == "cross_entropy" and cfg.train.lr == 5e-4


@pytest.mark.parametrize(
    "text, line",
    [
        ("[data]\ncount = 10\n\n[train]\nlr = -1\n", 5),
        ("[data]\nK = 3\n", 2),
        ("[train]\nepochs = many\n", 2),
        ("[train]\nloss = hinge\n", 2),
        ("[prune]\nmethod = l1_unstructured\namounts = 0.3, 1.5\n", 3),
        ("[budget]\n\nmax_mb = 0\n", 3),
        ("[data]\ncount 5\n", 2),
        ("[widgets]\nx = 1\n", 1),
        ("[train]\nlr_decay = 0.9\n", 2),
    ],
)
def test_config_errors_are_line_numbered(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "exp.ini")
    assert info.value.line == line
    assert f"exp.ini:{line}:" in str(info.value)


def test_with_seed_overrides_every_seed():
    cfg = with_seed(parse_config("[prune]\namounts = 0.3\n"), 7)
    assert cfg.synth.seed == cfg.train.seed == cfg.prune.spec.seed == 7


# -- pipeline ------------------------------------------------------------


def test_identity_pipeline(tmp_path):
    res = run_pipeline(tiny(epochs=0), tmp_path / "run")
    assert [r.label for r in res.rows] == ["baseline"]
    assert res.rows[0].d_miou == 0 and res.rows[0].d_size == 0
    line = open(res.report_path).read().splitlines()[2]
    assert line.endswith("0.00%    0.00%")
    assert not res.budget_exceeded


def test_pipeline_rows_and_artifacts(tmp_path):
    res = run_pipeline(tiny(extra=COMPRESS), tmp_path)
    labels = [r.label for r in res.rows]
    assert labels == ["baseline", "pruned(0)", "pruned(0.3)", "quantized", "pruned(0.3)+quantized"]
    base, p0, p3, q, pq = res.rows
    # amount 0 is an exact no-op
    assert p0.miou == base.miou and p0.size_mb == base.size_mb
    assert p3.size_mb < base.size_mb
    assert q.size_mb == pq.size_mb and q.d_size < -74
    for name in ("report.txt", "report.csv", "trace.csv", "manifest.json", "dataset/train_manifest.txt"):
        assert os.path.exists(tmp_path / name)
    for name in ("baseline", "pruned_0.3", "quantized", "pruned_0.3_quantized"):
        assert os.path.exists(tmp_path / "checkpoints" / f"{name}.csgc")
    with open(tmp_path / "trace.csv") as f:
        trace = list(csv.DictReader(f))
    assert len(trace) == 2 and float(trace[-1]["miou"]) == pytest.approx(base.miou, abs=1e-6)


def test_pipeline_deterministic(tmp_path):
    cfg = tiny(extra=COMPRESS)
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    assert _read(a.report_path) == _read(b.report_path)
    assert _read(a.csv_path) == _read(b.csv_path)
    assert _read(tmp_path / "a" / "checkpoints" / "quantized.csgc") == _read(tmp_path / "b" / "checkpoints" / "quantized.csgc")


def test_resume_only_on_hash_match(tmp_path):
    cfg = tiny(extra=COMPRESS)
    first = run_pipeline(cfg, tmp_path)
    assert first.executed == ["data", "train", "eval", "prune", "quant", "combined"]
    report = _read(first.report_path)
    again = run_pipeline(cfg, tmp_path)
    assert again.executed == [] and _read(again.report_path) == report

    changed = tiny(epochs=3, extra=COMPRESS)
    assert run_pipeline(changed, tmp_path).executed == ["train", "eval", "prune", "quant", "combined"]

    # a removed artifact forces its stage to rerun
    os.remove(tmp_path / "checkpoints" / "quantized.csgc")
    assert run_pipeline(changed, tmp_path).executed == ["quant"]


def test_budget_flag(tmp_path):
    res = run_pipeline(tiny(epochs=0, extra="[budget]\nmax_mb = 0.01\n"), tmp_path)
    assert res.budget_exceeded and res.rows[-1].over_budget
    assert "OVER BUDGET" in open(res.report_path).read()


# -- sweep ---------------------------------------------------------------


def test_single_loss_sweep_matches_pipeline(tmp_path):
    cfg = tiny()
    pipe = run_pipeline(cfg, tmp_path / "pipe")
    sweep = loss_sweep(cfg, tmp_path / "sweep", losses=["cross_entropy"], seeds=[cfg.train.seed])
    assert sweep.rows[0].final == [pipe.rows[0].miou]


def test_sweep_order_and_determinism(tmp_path):
    cfg = tiny(epochs=1)
    losses = ["focal_lovasz", "dice", "cross_entropy"]
    a = loss_sweep(cfg, tmp_path / "a", losses=losses, seeds=[0, 1])
    assert [r.loss for r in a.rows] == ["cross_entropy", "dice", "focal_lovasz"]
    b = loss_sweep(cfg, tmp_path / "b", losses=losses + ["dice"], seeds=[0, 1])
    assert _read(a.report_path) == _read(b.report_path)
    text = open(a.report_path).read()
    assert "Focal-Lovász >= Cross-entropy:" in text and "±" in text
    assert a.focal_lovasz_ge_ce == (a.row("focal_lovasz").mean >= a.row("cross_entropy").mean)
    assert np.isclose(a.row("dice").sd, np.std(a.row("dice").final))


def test_sweep_rejects_unknown_loss(tmp_path):
    with pytest.raises(ValueError):
        loss_sweep(tiny(), tmp_path, losses=["hinge"], seeds=[0])


# -- CLI -----------------------------------------------------------------


def _write(tmp_path, text):
    path = tmp_path / "exp.ini"
    path.write_text(text)
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    ok = _write(tmp_path, TINY.format(epochs=0))
    assert main(["pipeline", "--config", ok, "--out", str(tmp_path / "ok")]) == 0
    assert "baseline" in capsys.readouterr().out

    over = _write(tmp_path, TINY.format(epochs=0) + "[budget]\nmax_mb = 0.001\n")
    assert main(["pipeline", "--config", over, "--out", str(tmp_path / "over")]) == 2

    bad = _write(tmp_path, "[train]\nepochs = -1\n")
    assert main(["pipeline", "--config", bad, "--out", str(tmp_path / "bad")]) == 1
    assert "exp.ini:2:" in capsys.readouterr().err


def test_cli_subcommands(tmp_path, capsys):
    cfg = _write(tmp_path, TINY.format(epochs=1) + "[prune]\namounts = 0.5\n")
    out = str(tmp_path / "run")
    assert main(["gen-data", "--config", cfg, "--out", out]) == 0
    assert main(["train", "--config", cfg, "--out", out, "--seed", "3"]) == 0
    assert main(["eval", "--config", cfg, "--out", out, "--seed", "3"]) == 0
    assert main(["prune", "--config", cfg, "--out", out, "--seed", "3"]) == 0
    assert main(["quantize", "--config", cfg, "--out", out, "--seed", "3"]) == 0
    assert main(["sweep", "--config", cfg, "--out", out, "--losses", "dice", "--seeds", "0"]) == 0
    text = capsys.readouterr().out
    assert "pruned(0.5)" in text and "quantized" in text and "Dice" in text
    assert os.path.exists(os.path.join(out, "checkpoints", "pruned_0.5.csgc"))
    assert main(["eval", "--config", cfg, "--out", out, "--checkpoint", str(tmp_path / "missing.csgc")]) == 1
