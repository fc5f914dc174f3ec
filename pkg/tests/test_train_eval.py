import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpenet.config import ModelConfig
from fpenet.data import channel_means, class_colors, make_toy_dataset
from fpenet.errors import ConfigError, DataError, DivergenceError, UndefinedMetricError
from fpenet.graph import build
from fpenet.metrics import ConfusionMatrix, miou
from fpenet.tensor import GradTape, Tensor, backward
from fpenet.train import (
    AdamState,
    AugmentationPolicy,
    PolySchedule,
    adam_step,
    apply_transform,
    augment,
    cross_entropy_loss,
    poly_lr,
    train,
)

from oracles import softmax_nll


# ---- schedule ----------------------------------------------------------------


def test_poly_lr_values():
    s = PolySchedule(0.0005, 0.9, 400)
    assert poly_lr(s, 0) == 0.0005
    assert poly_lr(s, 400) == 0.0
    assert poly_lr(s, 200) == pytest.approx(2.6794e-4, rel=1e-4)
    assert poly_lr(s, 200) == 0.0005 * 0.5**0.9


def test_poly_lr_range():
    with pytest.raises(ValueError):
        poly_lr(PolySchedule(max_epoch=10), 11)
    with pytest.raises(ValueError):
        poly_lr(PolySchedule(max_epoch=10), -1)


# ---- loss --------------------------------------------------------------------


@given(c=st.integers(2, 8), seed=st.integers(0, 1000))
def test_uniform_logits_give_log_c(c, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, size=(1, 3, 2))
    loss = cross_entropy_loss(Tensor(np.full((1, c, 3, 2), 1.7)), labels)
    assert float(loss.data) == pytest.approx(math.log(c), rel=1e-12)


def test_large_margin_drives_loss_to_zero():
    labels = np.array([[[0, 2]]])
    prev = None
    for m in (1.0, 5.0, 20.0, 60.0):
        z = np.zeros((1, 3, 1, 2))
        z[0, 0, 0, 0] = m
        z[0, 2, 0, 1] = m
        value = float(cross_entropy_loss(Tensor(z), labels).data)
        assert prev is None or value < prev
        prev = value
    assert prev < 1e-20


def test_cross_entropy_matches_pixel_oracle(rng):
    z = rng.normal(size=(1, 3, 2, 2))
    labels = np.array([[[0, 2], [1, 255]]])
    got = float(cross_entropy_loss(Tensor(z), labels).data)
    assert abs(got - softmax_nll(z, labels)) < 1e-7


def test_cross_entropy_gradient(rng):
    z = rng.normal(size=(2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 1, 1] = 255
    t = Tensor(z, requires_grad=True)
    with GradTape() as tape:
        loss = cross_entropy_loss(t, labels)
    backward(tape, loss)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 3, 2, 1), (0, 2, 1, 1)]:
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        fd = (softmax_nll(zp, labels) - softmax_nll(zm, labels)) / (2 * eps)
        assert t.grad[idx] == pytest.approx(fd, abs=1e-8)
    assert np.all(t.grad[0, :, 1, 1] == 0)


def test_label_out_of_range_names_pixel():
    labels = np.zeros((1, 2, 3), dtype=np.int64)
    labels[0, 1, 2] = 7
    with pytest.raises(DataError, match=r"y=1, x=2"):
        cross_entropy_loss(Tensor(np.zeros((1, 3, 2, 3))), labels)


# ---- Adam --------------------------------------------------------------------


@given(g=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), lr=st.floats(1e-5, 1e-1))
def test_adam_first_step_moves_by_lr(g, lr):
    p = Tensor(np.zeros(5), requires_grad=True)
    adam_step(AdamState(weight_decay=0.0), {"p": p}, {"p": np.full(5, g)}, lr)
    np.testing.assert_allclose(np.abs(p.data), lr, rtol=1e-5)
    assert np.all(np.sign(p.data) == -np.sign(g))


def test_adam_zero_gradient_is_fixed_point(rng):
    data = rng.normal(size=(3, 3))
    p = Tensor(data.copy(), requires_grad=True)
    state = AdamState(weight_decay=0.0)
    for _ in range(3):
        adam_step(state, {"p": p}, {"p": np.zeros((3, 3))}, 0.01)
    np.testing.assert_array_equal(p.data, data)


def test_adam_three_steps_on_square():
    # f(x) = x^2 with coupled decay wd, unrolled by hand
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    x, m, v = 1.5, 0.0, 0.0
    expected = []
    for t in (1, 2, 3):
        g = 2 * x + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(x)
    p = Tensor(np.array([1.5]), requires_grad=True)
    state = AdamState(weight_decay=wd)
    got = []
    for _ in range(3):
        adam_step(state, {"p": p}, {"p": 2 * p.data}, lr)
        got.append(float(p.data[0]))
    np.testing.assert_allclose(got, expected, rtol=1e-14)


def test_adam_non_finite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(DivergenceError, match="'w' at step 1"):
        adam_step(AdamState(), {"w": p}, {"w": np.array([0.0, np.nan])}, 0.1)


# ---- augmentation ------------------------------------------------------------


def _pair(rng, h=12, w=10):
    return rng.normal(size=(3, h, w)).astype(np.float32), rng.integers(0, 4, size=(h, w))


def test_flip_twice_is_identity(rng):
    img, lab = _pair(rng)
    once = apply_transform(img, lab, flip=True)
    twice = apply_transform(*once, flip=True)
    np.testing.assert_array_equal(twice[0], img)
    np.testing.assert_array_equal(twice[1], lab)
    np.testing.assert_array_equal(once[1], lab[:, ::-1])


def test_identity_transform_only_normalizes(rng):
    img, lab = _pair(rng)
    mean = (0.1, -0.2, 0.3)
    out_img, out_lab = apply_transform(img, lab, policy=AugmentationPolicy(mean=mean))
    np.testing.assert_allclose(out_img, img - np.array(mean, np.float32)[:, None, None])
    np.testing.assert_array_equal(out_lab, lab)


def test_marked_pixel_under_flip_and_scale():
    h = w = 33
    img = np.zeros((3, h, w), np.float32)
    lab = np.zeros((h, w), np.int64)
    img[:, 20, 10] = 1.0
    lab[20, 10] = 3
    out_img, out_lab = apply_transform(img, lab, flip=True, scale=1.5)
    # flip: x -> 32 - x; scale about the centre 16: v -> 16 + 1.5 (v - 16)
    y, x = 16 + 1.5 * (20 - 16), 16 + 1.5 * ((32 - 10) - 16)
    assert (y, x) == (22, 25)
    assert out_lab[22, 25] == 3
    assert out_img[:, 22, 25].tolist() == [1.0, 1.0, 1.0]


def test_rotation_fills_exterior():
    img = np.ones((3, 16, 16), np.float32) * np.array([0.2, 0.4, 0.6], np.float32)[:, None, None]
    lab = np.ones((16, 16), np.int64)
    out_img, out_lab = apply_transform(img, lab, angle=10.0, scale=0.5)
    assert out_lab[0, 0] == 255
    np.testing.assert_allclose(out_img[:, 0, 0], [0.2, 0.4, 0.6], rtol=1e-6)
    assert out_lab[8, 8] == 1


@given(seed=st.integers(0, 10_000))
def test_augment_keeps_shapes_and_label_set(seed):
    rng = np.random.default_rng(seed)
    img, lab = _pair(rng, 16, 16)
    out_img, out_lab = augment(img, lab, AugmentationPolicy(), rng)
    assert out_img.shape == img.shape and out_lab.shape == lab.shape
    assert set(np.unique(out_lab)) <= set(np.unique(lab)) | {255}


# ---- metrics -----------------------------------------------------------------


def test_perfect_prediction():
    t = np.array([[0, 1, 2], [2, 1, 0]])
    iou, mean, acc = miou(ConfusionMatrix(3).update(t, t))
    assert iou == [1.0, 1.0, 1.0] and mean == 1.0 and acc == 1.0


def test_two_class_counts():
    iou, mean, acc = miou(ConfusionMatrix.from_counts([[3, 1], [1, 3]]))
    assert iou == [0.6, 0.6] and mean == pytest.approx(0.6) and acc == 0.75


def test_absent_class_excluded():
    iou, mean, _ = miou(ConfusionMatrix.from_counts([[2, 0, 0], [0, 0, 0], [0, 0, 2]]))
    assert math.isnan(iou[1]) and mean == 1.0


def test_empty_matrix_raises():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix(3))


def test_ignore_index_skipped():
    cm = ConfusionMatrix(2, ignore_index=255).update([0, 1, 1], [0, 255, 1])
    assert cm.total == 2


@given(seed=st.integers(0, 10_000), c=st.integers(2, 6))
def test_miou_invariant_to_class_relabeling(seed, c):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, c, 200)
    p = np.where(rng.random(200) < 0.7, t, rng.integers(0, c, 200))
    perm = rng.permutation(c)
    _, m1, a1 = miou(ConfusionMatrix(c).update(p, t))
    _, m2, a2 = miou(ConfusionMatrix(c).update(perm[p], perm[t]))
    assert m1 == pytest.approx(m2, rel=1e-12) and a1 == a2
    assert ConfusionMatrix(c).update(p, t).total == 200


# ---- toy data ----------------------------------------------------------------


def test_toy_dataset_is_seeded():
    a = make_toy_dataset(3, 4)
    b = make_toy_dataset(3, 4)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    img, lab = a[0]
    assert img.shape == (3, 64, 64) and img.dtype == np.float32
    assert lab.shape == (64, 64) and lab.min() >= 0 and lab.max() < 3


def test_toy_dataset_contains_foreground():
    data = make_toy_dataset(0, 20, size=32, num_classes=5)
    for _, lab in data:
        assert (lab > 0).any()
    assert set(np.unique(np.concatenate([lab.ravel() for _, lab in data]))) == set(range(5))


def test_toy_dataset_validation():
    with pytest.raises(ConfigError):
        make_toy_dataset(0, 1, num_classes=1)
    with pytest.raises(ConfigError):
        make_toy_dataset(0, 1, size=30)


def test_class_colors_distinct():
    colors = class_colors(6)
    assert len({tuple(c) for c in colors.round(4)}) == 6


def test_channel_means():
    data = [(np.full((3, 2, 2), v, np.float32), None) for v in (1.0, 3.0)]
    np.testing.assert_array_equal(channel_means(data), [2.0, 2.0, 2.0])


# ---- training loop -----------------------------------------------------------


def test_zero_lr_leaves_weights_untouched():
    cfg = ModelConfig(num_classes=3, p=1, q=1, input_size=(16, 16))
    g = build(cfg, seed=0)
    before = {k: t.data.copy() for k, t in g.parameters().items()}
    data = make_toy_dataset(0, 4, size=16)
    res = train(g, data, 2, PolySchedule(0.0, 0.9, 2), weight_decay=0.0)
    assert len(res.log) == 2
    for k, t in g.parameters().items():
        np.testing.assert_array_equal(t.data, before[k])


def test_short_training_reduces_loss():
    cfg = ModelConfig(num_classes=3, p=1, q=1, input_size=(16, 16))
    g = build(cfg, seed=0)
    data = make_toy_dataset(0, 16, size=16)
    res = train(g, data, 6, PolySchedule(0.01, 0.9, 6))
    assert res.log[-1].loss < res.log[0].loss
    assert [r.epoch for r in res.log] == list(range(6))
    assert res.log[0].line().count("\t") == 3


def test_empty_training_set():
    g = build(ModelConfig(num_classes=3, p=1, q=1, input_size=(16, 16)))
    with pytest.raises(DataError):
        train(g, [], 1)
