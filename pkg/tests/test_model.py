import numpy as np
import pytest

from segcompress.checkpoint import Checkpoint, params_size_mb
from segcompress.data import SynthConfig, generate_dataset, stack
from segcompress.losses import LossSpec, cross_entropy, focal_lovasz
from segcompress.model import (
    TinySegNet,
    TrainConfig,
    TrainingError,
    estimate_flops,
    evaluate,
    lr_at_epoch,
    train,
)
from segcompress.tensor import ShapeError


def test_shapes_and_param_count():
    net = TinySegNet.init(16, 5)
    logits = net.forward(np.zeros((2, 3, 64, 64), np.float32))
    assert logits.shape == (2, 5, 64, 64) and logits.dtype == np.float32
    assert net.count_params() == (16 * 27 + 16) + (32 * 144 + 32) + (32 * 288 + 32) + (5 * 32 + 5)
    assert net.to_checkpoint().count_params() == net.count_params()
    assert net.to_checkpoint().size_mb() == net.count_params() * 4 / 1e6


def test_odd_input_rejected():
    with pytest.raises(ShapeError):
        TinySegNet.init(4, 2).forward(np.zeros((1, 3, 9, 8)))


def test_zero_weights_give_bias():
    net = TinySegNet.init(4, 5)
    for k in net.params:
        net.params[k][...] = 0
    net.params["classifier.bias"][:] = np.arange(5)
    out = net.forward(np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(5, dtype=np.float32)[None, :, None, None], out.shape))


def test_backward_zero_upstream():
    net = TinySegNet.init(4, 3)
    x = np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32)
    logits, cache = net.forward(x, return_cache=True)
    grads = net.backward(cache, np.zeros_like(logits))
    assert all(not g.any() for g in grads.values())
    assert set(grads) == set(net.params)


@pytest.mark.parametrize("loss", [cross_entropy, lambda z, y: focal_lovasz(z, y, 2.0, 0.5)])
def test_full_net_gradient_finite_differences(loss):
    rng = np.random.default_rng(3)
    net = TinySegNet.init(4, 5, seed=1, dtype=np.float64)
    for k in net.params:
        if k.endswith("bias"):
            net.params[k] = rng.standard_normal(net.params[k].shape) * 0.1
    x = rng.random((2, 3, 8, 8))
    y = rng.integers(0, 5, (2, 8, 8))
    logits, cache = net.forward(x, return_cache=True)
    grads = net.backward(cache, loss(logits, y).grad)
    names = sorted(net.params)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        name = names[rng.integers(len(names))]
        flat = net.params[name].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        fp = loss(net.forward(x), y).value
        flat[i] = old - h
        fm = loss(net.forward(x), y).value
        flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = grads[name].reshape(-1)[i]
        scale = max(abs(num), np.max(np.abs(grads[name])) * 1e-3, 1e-10)
        worst = max(worst, abs(ana - num) / scale)
    assert worst <= 1e-4


def test_lr_schedule():
    assert lr_at_epoch(TrainConfig(lr=5e-4), 99) == 5e-4
    cfg = TrainConfig(lr=5e-4, lr_decay=0.995, step_lr=25)
    assert lr_at_epoch(cfg, 0) == 5e-4
    assert lr_at_epoch(cfg, 100) == pytest.approx(5e-4 * 0.995**4, rel=1e-15)
    assert lr_at_epoch(cfg, 100) == pytest.approx(4.9005e-4, rel=1e-4)
    lrs = [lr_at_epoch(cfg, e) for e in range(300)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.995)


def test_flops():
    net = TinySegNet.init(16, 5)
    expected = 2 * 9 * 3 * 16 * 64 * 64 + 2 * 9 * 16 * 32 * 32 * 32 + 2 * 9 * 32 * 32 * 32 * 32 + 2 * 32 * 5 * 64 * 64
    assert estimate_flops(net, 64, 64) == expected


def test_checkpoint_roundtrip(tmp_path):
    net = TinySegNet.init(8, 2, seed=4)
    net.to_checkpoint().save(tmp_path / "n.csgc")
    back = TinySegNet.from_checkpoint(Checkpoint.load(tmp_path / "n.csgc"))
    x = np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x), net.forward(x))


def small_data(n=6, size=16):
    return generate_dataset(SynthConfig(seed=5, size=size), n)


def test_zero_epochs_noop():
    net = TinySegNet.init(4, 5)
    before = net.to_checkpoint().to_bytes()
    assert train(net, small_data(), small_data(), TrainConfig(epochs=0)) == []
    assert net.to_checkpoint().to_bytes() == before


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(TinySegNet.init(4, 5), [], [], TrainConfig(epochs=1))


def test_nonfinite_loss_aborts():
    net = TinySegNet.init(4, 5)
    net.params["classifier.bias"][0] = np.inf
    with pytest.raises((TrainingError, ValueError), match="epoch 0"):
        train(net, small_data(), [], TrainConfig(epochs=1))


def block_ceiling(labels):
    """Best pixel accuracy reachable by a predictor constant on 2x2 blocks."""
    h, w = labels.shape
    blocks = labels.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
    return sum(np.bincount(b).max() for b in blocks) / labels.size


def test_overfit_single_sample():
    # the net's logits are constant on 2x2 blocks; pick a scene whose ceiling clears 0.99
    sample = generate_dataset(SynthConfig(seed=3, size=64, objects=(1, 2)), 1)
    assert block_ceiling(sample[0].labels) > 0.995
    net = TinySegNet.init(16, 5, seed=0)
    train(net, sample, [], TrainConfig(lr=5e-3, epochs=200, batch_size=1))
    images, labels = stack(sample)
    acc = (net.predict(images) == labels).mean()
    assert acc >= 0.99


def test_training_deterministic():
    from segcompress.data import AugmentConfig

    data = small_data(8)
    runs = []
    for _ in range(2):
        net = TinySegNet.init(4, 5, seed=2)
        trace = train(net, data[:6], data[6:], TrainConfig(epochs=2, batch_size=3, seed=9), AugmentConfig(p_colorjitter=1.0))
        runs.append((net.to_checkpoint().to_bytes(), [(r.miou, r.loss) for r in trace]))
    assert runs[0] == runs[1]


def test_cbfl_weights_derived_from_training_set():
    data = small_data(4)
    spec = LossSpec(kind="class_balanced_focal")
    train(TinySegNet.init(4, 5), data, [], TrainConfig(epochs=1, loss=spec))
    assert spec.class_weights is not None and spec.class_weights.shape == (5,)


def test_evaluate_confusion_total():
    data = small_data(3)
    cm = evaluate(TinySegNet.init(4, 5), data)
    assert cm.total == 3 * 16 * 16


@pytest.mark.parametrize("params,mb", [(363_132, 1.45), (1_363_168, 5.45), (47_489_184, 189.96)])
def test_table1_rows(params, mb):
    assert round(params_size_mb(params), 2) == mb


def test_table1_bisenet_row_inconsistent():
    assert round(params_size_mb(5_188_485), 2) == 20.75
    assert round(params_size_mb(5_188_485), 2) != 13.38
