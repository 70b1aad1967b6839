import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segcompress.losses import (
    LabelError,
    LossSpec,
    class_balanced_focal,
    compute_loss,
    cross_entropy,
    dice,
    effective_number_weights,
    focal,
    focal_lovasz,
    lovasz_grad,
    lovasz_softmax,
    lovasz_softmax_probs,
)

from conftest import fd_gradient, rel_err
from oracles import all_binary_maps, brute_force_jaccard, lovasz_grad_oracle


def random_case(seed, n=1, k=5, h=4, w=4, scale=2.0):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((n, k, h, w)) * scale
    labels = r.integers(0, k, (n, h, w))
    return logits, labels


def onehot_logits(labels, k, big=60.0):
    return (labels[:, None] == np.arange(k)[None, :, None, None]) * big


LOSSES = {
    "ce": lambda z, y: cross_entropy(z, y),
    "focal1": lambda z, y: focal(z, y, 1.0),
    "focal2": lambda z, y: focal(z, y, 2.0),
    "focal5": lambda z, y: focal(z, y, 5.0),
    "focal_half": lambda z, y: focal(z, y, 0.5),
    "dice": lambda z, y: dice(z, y),
    "cbfl": lambda z, y: class_balanced_focal(z, y, 2.0, np.array([0.3, 1.2, 0.8, 1.5, 1.2])),
    "lovasz": lambda z, y: lovasz_softmax(z, y),
    "focal_lovasz": lambda z, y: focal_lovasz(z, y, 2.0, 0.5),
}


def test_ce_uniform_is_log_k():
    z = np.zeros((1, 5, 3, 3))
    y = np.zeros((1, 3, 3), dtype=np.int64)
    assert cross_entropy(z, y).value == pytest.approx(math.log(5), abs=1e-12)
    assert cross_entropy(z, y).value == pytest.approx(1.60944, abs=1e-5)


def test_ce_grad_formula(rng):
    z, y = random_case(3)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = (y[:, None] == np.arange(5)[None, :, None, None])
    np.testing.assert_allclose(cross_entropy(z, y).grad, (p - onehot) / y.size, atol=1e-15)


def test_label_out_of_range():
    z = np.zeros((1, 2, 2, 2))
    with pytest.raises(LabelError):
        cross_entropy(z, np.full((1, 2, 2), 2))
    with pytest.raises(LabelError):
        focal(z, np.full((1, 2, 2), 5))


def test_focal_gamma_zero_is_ce():
    z, y = random_case(5)
    a, b = focal(z, y, 0.0), cross_entropy(z, y)
    assert abs(a.value - b.value) <= 1e-12
    assert np.max(np.abs(a.grad - b.grad)) <= 1e-12


def test_focal_single_pixel_half():
    z = np.zeros((1, 2, 1, 1))
    y = np.zeros((1, 1, 1), dtype=np.int64)
    assert focal(z, y, 2.0).value == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert focal(z, y, 2.0).value == pytest.approx(0.173287, abs=1e-6)


def test_focal_monotone_in_pt():
    pts = np.linspace(0.01, 0.999, 200)
    for gamma in (0.0, 0.5, 1.0, 2.0, 5.0):
        # binary pixel with p_t = sigmoid(d) for logits (d, 0)
        d = np.log(pts / (1 - pts))
        vals = [focal(np.array([di, 0.0]).reshape(1, 2, 1, 1), np.zeros((1, 1, 1), int), gamma).value for di in d]
        assert np.all(np.diff(vals) <= 1e-15)


def test_effective_number_examples():
    np.testing.assert_allclose(effective_number_weights([7, 7, 7], 0.99), [1, 1, 1], rtol=1e-15)
    np.testing.assert_allclose(effective_number_weights([1, 50, 4000], 0.0), [1, 1, 1], rtol=1e-15)
    w = effective_number_weights([1, 2], 0.9)
    # E = (1, 1.9); raw = (1, 1/1.9); normalized to sum 2
    raw = np.array([1.0, 1 / 1.9])
    np.testing.assert_allclose(w, raw * 2 / raw.sum(), rtol=1e-15)
    np.testing.assert_allclose(w, [1.31034, 0.68966], atol=5e-6)
    w = effective_number_weights([0, 3, 3], 0.5)
    assert w[0] == 0 and w[1] == pytest.approx(1.0) and w.sum() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        effective_number_weights([1, 2], 1.0)


def test_cbfl_reductions():
    z, y = random_case(9)
    uni = class_balanced_focal(z, y, 2.0, np.ones(5))
    ref = focal(z, y, 2.0)
    assert uni.value == ref.value and np.array_equal(uni.grad, ref.grad)
    w = np.array([0.5, 1.0, 2.0, 0.7, 1.1])
    a = class_balanced_focal(z, y, 2.0, w)
    b = class_balanced_focal(z, y, 2.0, 2 * w)
    assert b.value == pytest.approx(2 * a.value, rel=1e-14)
    np.testing.assert_allclose(b.grad, 2 * a.grad, rtol=1e-14)


def test_cbfl_missing_weight():
    z, y = random_case(2)
    w = np.ones(5)
    w[y[0, 0, 0]] = 0
    with pytest.raises(ValueError):
        class_balanced_focal(z, y, 2.0, w)
    with pytest.raises(ValueError):
        class_balanced_focal(z, y, 2.0, np.ones(4))


def test_dice_examples():
    z = np.array([0.0, 0.0]).reshape(1, 2, 1, 1)
    y = np.ones((1, 1, 1), dtype=np.int64)
    eps = 1e-6
    assert dice(z, y, eps).value == pytest.approx(1 - (1 + eps) / (1.5 + eps), abs=1e-15)
    assert dice(z, y, eps).value == pytest.approx(1 / 3, abs=1e-6)


def test_lovasz_grad_examples():
    np.testing.assert_array_equal(lovasz_grad([1]), [1.0])
    np.testing.assert_array_equal(lovasz_grad([1, 0]), [1.0, 0.0])
    np.testing.assert_allclose(lovasz_grad([0, 1]), lovasz_grad_oracle([0, 1]), atol=1e-15)
    np.testing.assert_allclose(lovasz_grad([0, 1]), [0.5, 0.5], atol=1e-15)
    with pytest.raises(ValueError):
        lovasz_grad([0, 0])


@given(gt=st.lists(st.integers(0, 1), min_size=1, max_size=12).filter(lambda g: any(g)))
@settings(max_examples=200, deadline=None)
def test_lovasz_grad_matches_set_oracle(gt):
    g = lovasz_grad(gt)
    np.testing.assert_allclose(g, lovasz_grad_oracle(gt), atol=1e-14)
    inter = sum(gt) - np.cumsum(gt)[-1]
    union = sum(gt) + np.cumsum(1 - np.array(gt))[-1]
    assert g.sum() == pytest.approx(1 - inter / union, abs=1e-14)


@pytest.mark.parametrize("m", [1, 2, 3, 5, 7])
def test_lovasz_binary_predictions_equal_jaccard(m):
    r = np.random.default_rng(m)
    for _ in range(3):
        gt = r.integers(0, 2, m)
        if gt.sum() == 0:
            gt[0] = 1
        labels = gt.reshape(1, 1, m)
        for bits in all_binary_maps(m):
            b = np.array(bits, dtype=np.float64)
            probs = np.stack([1 - b, b]).reshape(1, 2, 1, m)
            value, _ = lovasz_softmax_probs(probs, labels)
            assert value == pytest.approx(brute_force_jaccard(bits, gt.tolist(), 2), abs=1e-15)


@pytest.mark.parametrize("name", list(LOSSES))
def test_zero_at_perfect_prediction(name):
    _, y = random_case(4)
    z = onehot_logits(y, 5)
    res = LOSSES[name](z, y)
    assert 0 <= res.value <= 1e-12


@pytest.mark.parametrize("name", list(LOSSES))
def test_nonnegative_and_tangent(name):
    for seed in range(5):
        z, y = random_case(seed, n=2)
        res = LOSSES[name](z, y)
        assert res.value >= 0
        assert np.all(np.isfinite(res.grad))
        assert np.max(np.abs(res.grad.sum(axis=1))) <= 1e-9


def tie_free(z, y, gap=1e-4):
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    for c in range(z.shape[1]):
        e = np.abs((y == c) - p[:, c]).ravel()
        if np.min(np.diff(np.sort(e))) < gap:
            return False
    return True


@pytest.mark.parametrize("name", list(LOSSES))
def test_gradients_finite_differences(name):
    seed, checked = 0, 0
    while checked < 3:
        z, y = random_case(100 + seed)
        seed += 1
        if name in ("lovasz", "focal_lovasz") and not tie_free(z, y):
            continue
        res = LOSSES[name](z, y)
        num = fd_gradient(lambda: LOSSES[name](z, y).value, z, h=1e-6)
        assert rel_err(res.grad, num) <= 1e-5, name
        checked += 1


def test_focal_lovasz_endpoints():
    z, y = random_case(21)
    f, lv = focal(z, y, 2.0), lovasz_softmax(z, y)
    a = focal_lovasz(z, y, 2.0, 1.0)
    assert a.value == f.value and np.array_equal(a.grad, f.grad)
    b = focal_lovasz(z, y, 2.0, 0.0)
    assert b.value == lv.value and np.array_equal(b.grad, lv.grad)
    c = focal_lovasz(z, y, 2.0, 0.5)
    assert c.value == pytest.approx((f.value + lv.value) / 2, rel=1e-15)


def test_compute_loss_dispatch():
    z, y = random_case(30)
    for kind in ("cross_entropy", "focal", "dice", "lovasz", "focal_lovasz"):
        compute_loss(LossSpec(kind=kind), z, y)
    spec = LossSpec(kind="class_balanced_focal", class_weights=np.ones(5))
    assert compute_loss(spec, z, y).value == focal(z, y, 2.0).value
    with pytest.raises(ValueError):
        LossSpec(kind="hinge")
    with pytest.raises(ValueError):
        LossSpec(lam=1.5)


def test_float32_path_close_to_float64():
    z, y = random_case(8, n=2)
    for name, fn in LOSSES.items():
        a = fn(z.astype(np.float32), y)
        b = fn(z, y)
        assert a.grad.dtype == np.float32
        assert abs(a.value - b.value) <= 1e-5 * max(1, b.value), name
