import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpenet import ops
from fpenet.errors import ConfigError, DimensionError
from fpenet.ops import BatchNormState, ConvSpec
from fpenet.tensor import GradTape, Tensor, backward

from oracles import conv_direct, depthwise, upsample_pixel


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---- Tensor / layout -------------------------------------------------------


def test_row_major_offset():
    n, c, h, w = 2, 3, 4, 5
    x = np.arange(n * c * h * w, dtype=np.float64).reshape(n, c, h, w)
    for idx in [(0, 0, 0, 0), (1, 2, 3, 4), (1, 0, 2, 1)]:
        b, ch, y, xx = idx
        assert x.ravel()[((b * c + ch) * h + y) * w + xx] == x[idx]


def test_rank_check():
    with pytest.raises(DimensionError) as err:
        ops.relu(Tensor(np.ones((2, 3)))) and ops.global_avg_pool(Tensor(np.ones((2, 3))))
        ops.global_avg_pool(Tensor(np.ones((2, 3))))
    assert err.value.axis == "rank"


# ---- conv2d ----------------------------------------------------------------


def test_conv_stem_shape():
    spec = ConvSpec(3, 16, kernel=3, stride=2, padding=1)
    x = Tensor(np.zeros((1, 3, 1024, 512), dtype=np.float32))
    w = Tensor(np.zeros(spec.weight_shape, dtype=np.float32))
    assert ops.conv2d(x, w, None, spec).shape == (1, 16, 512, 256)


def test_conv_identity_permutation(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    spec = ConvSpec(5, 5, kernel=1)
    w = np.zeros(spec.weight_shape)
    for o in range(5):
        w[o, o, 0, 0] = 1.0
    y = ops.conv2d(T(x), T(w), None, spec)
    np.testing.assert_array_equal(y.data, x)


def test_conv_dilated_ramp_against_direct_sum():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    spec = ConvSpec(1, 1, kernel=3, dilation=2, padding=2)
    w = np.ones(spec.weight_shape)
    got = ops.conv2d(T(x), T(w), None, spec).data
    expected = conv_direct(x, w, dilation=2, padding=2)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    # frozen from the oracle: centre-ish pixel sums rows/cols {0, 2}
    assert expected[0, 0, 0, 0] == 0 + 2 + 8 + 10


@given(
    n=st.integers(1, 2),
    cin=st.integers(1, 4),
    cout=st.integers(1, 4),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2),
    dilation=st.integers(1, 3),
    padding=st.integers(0, 3),
)
def test_conv_shape_formula(n, cin, cout, h, w, k, stride, dilation, padding):
    spec = ConvSpec(cin, cout, kernel=k, stride=stride, dilation=dilation, padding=padding)
    oh = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    x = T(np.zeros((n, cin, h, w)))
    wt = T(np.zeros(spec.weight_shape))
    if oh < 1 or ow < 1:
        with pytest.raises(ConfigError):
            ops.conv2d(x, wt, None, spec)
    else:
        assert ops.conv2d(x, wt, None, spec).shape == (n, cout, oh, ow)


@given(seed=st.integers(0, 10_000), c=st.integers(1, 6), d=st.integers(1, 3), stride=st.integers(1, 2))
def test_depthwise_matches_per_channel_oracle(seed, c, d, stride):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, c, 7, 6))
    spec = ConvSpec(c, c, kernel=3, stride=stride, dilation=d, padding=d, groups=c)
    w = rng.normal(size=spec.weight_shape)
    got = ops.conv2d(T(x), T(w), None, spec).data
    expected = depthwise(x, w, stride, d)
    np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-12)


def test_grouped_conv_with_bias_matches_oracle(rng):
    spec = ConvSpec(4, 6, kernel=3, stride=2, padding=1, groups=2, has_bias=True)
    x = rng.normal(size=(2, 4, 5, 6))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=6)
    got = ops.conv2d(T(x), T(w), T(b), spec).data
    np.testing.assert_allclose(got, conv_direct(x, w, b, stride=2, padding=1, groups=2), rtol=1e-10)


def test_conv_errors():
    spec = ConvSpec(3, 4, kernel=3, padding=1)
    with pytest.raises(DimensionError) as err:
        ops.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros(spec.weight_shape)), None, spec)
    assert err.value.axis == "channels"
    with pytest.raises(ConfigError):
        ConvSpec(3, 4, groups=2)
    with pytest.raises(ConfigError):
        ops.conv2d(T(np.zeros((1, 3, 2, 2))), T(np.zeros((4, 3, 5, 5))), None, ConvSpec(3, 4, kernel=5))


# ---- batch norm ------------------------------------------------------------


def test_bn_infer_identity_statistics(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    s = BatchNormState(3, dtype=np.float64)
    y = ops.batch_norm(T(x), s, "infer").data
    np.testing.assert_allclose(y, x / np.sqrt(1 + s.eps), rtol=1e-12)


def test_bn_train_constant_channel_gives_beta():
    s = BatchNormState(2, dtype=np.float64)
    s.beta.data = np.array([0.3, -1.2])
    x = np.full((2, 2, 3, 3), 7.5)
    y = ops.batch_norm(T(x), s, "train").data
    assert np.all(np.isfinite(y))
    np.testing.assert_array_equal(y[:, 0], 0.3)
    np.testing.assert_array_equal(y[:, 1], -1.2)


def test_bn_train_moments(rng):
    x = rng.normal(2.0, 3.0, size=(2, 4, 3, 3))
    s = BatchNormState(4, dtype=np.float64)
    s.gamma.data = np.array([0.5, 1.0, 2.0, 3.0])
    s.beta.data = np.array([-1.0, 0.0, 1.0, 2.0])
    y = ops.batch_norm(T(x), s, "train").data
    for c in range(4):
        var = x[:, c].var()
        assert y[:, c].mean() == pytest.approx(s.beta.data[c], abs=1e-12)
        assert y[:, c].std() == pytest.approx(s.gamma.data[c] * np.sqrt(var / (var + s.eps)), rel=1e-12)
    m = 2 * 9
    np.testing.assert_allclose(s.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


# ---- elementwise / structural ---------------------------------------------


def test_split_concat_inverse_bit_exact(rng):
    x = rng.normal(size=(1, 64, 8, 8)).astype(np.float32)
    parts = ops.split_channels(Tensor(x), 4)
    assert [p.shape for p in parts] == [(1, 16, 8, 8)] * 4
    np.testing.assert_array_equal(ops.concat_channels(parts).data, x)


@given(c=st.integers(1, 12), parts=st.integers(1, 6))
def test_split_divisibility(c, parts):
    x = Tensor(np.zeros((1, c, 2, 2)))
    if c % parts:
        with pytest.raises(ConfigError):
            ops.split_channels(x, parts)
    else:
        assert ops.concat_channels(ops.split_channels(x, parts)).shape == x.shape


def test_mul_broadcast_unit_scaling(rng):
    x = rng.normal(size=(1, 4, 2, 2))
    np.testing.assert_array_equal(ops.mul_broadcast(T(x), T(np.ones((1, 4, 1, 1)))).data, x)


def test_mul_broadcast_rejects_bad_shape():
    with pytest.raises(DimensionError):
        ops.mul_broadcast(T(np.ones((1, 4, 2, 2))), T(np.ones((1, 2, 1, 1))))


def test_add_against_loop(rng):
    a = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2)
    b = a[::-1].copy() * 0.5
    got = ops.add(T(a), T(b)).data
    for idx in np.ndindex(a.shape):
        assert got[idx] == a[idx] + b[idx]
    with pytest.raises(DimensionError) as err:
        ops.add(T(a), T(np.ones((2, 3, 2, 3))))
    assert err.value.axis == "width"


def test_relu():
    x = np.array([-2.0, -0.0, 0.0, 1.5]).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(ops.relu(T(x)).data, [[[[0, 0], [0, 1.5]]]])


# ---- pooling ---------------------------------------------------------------


def test_pool_constant():
    x = T(np.full((2, 3, 4, 5), 2.5))
    np.testing.assert_array_equal(ops.global_avg_pool(x).data, 2.5)
    np.testing.assert_array_equal(ops.channel_mean(x).data, 2.5)


def test_pool_symmetric_average():
    x = np.stack([np.ones((2, 2)), np.full((2, 2), 3.0)])[None]
    np.testing.assert_array_equal(ops.global_avg_pool(T(x)).data.ravel(), [1.0, 3.0])
    np.testing.assert_array_equal(ops.channel_mean(T(x)).data, 2.0)


def test_pool_against_loops(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    gp = ops.global_avg_pool(T(x)).data
    cm = ops.channel_mean(T(x)).data
    for b in range(2):
        for c in range(3):
            assert gp[b, c, 0, 0] == pytest.approx(sum(x[b, c].ravel()) / 20, rel=1e-12)
        for y in range(4):
            for xx in range(5):
                assert cm[b, 0, y, xx] == pytest.approx(sum(x[b, :, y, xx]) / 3, rel=1e-12)


# ---- upsampling ------------------------------------------------------------


@given(v=st.floats(-1e6, 1e6, allow_nan=False), h=st.integers(1, 5), w=st.integers(1, 5))
def test_upsample_preserves_constants_exactly(v, h, w):
    x = np.full((1, 2, h, w), v)
    y = ops.bilinear_upsample_x2(T(x)).data
    assert y.shape == (1, 2, 2 * h, 2 * w)
    assert np.all(y == v)


def test_upsample_2x2_against_pixel_oracle():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    got = ops.bilinear_upsample_x2(T(x)).data
    expected = upsample_pixel(x)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    # frozen oracle values: first row 0, .25, .75, 1; corners clamp
    np.testing.assert_allclose(expected[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(expected[0, 0, 1], [0.5, 0.75, 1.25, 1.5])


def test_upsample_random_against_pixel_oracle(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    np.testing.assert_allclose(ops.bilinear_upsample_x2(T(x)).data, upsample_pixel(x), atol=1e-12)


def test_upsample_decoder_shape():
    x = Tensor(np.zeros((1, 64, 128, 64), dtype=np.float32))
    assert ops.bilinear_upsample_x2(x).shape == (1, 64, 256, 128)


# ---- backward ----------------------------------------------------------------


def test_grad_of_sum_is_ones(rng):
    x = T(rng.normal(size=(1, 2, 3, 3)), grad=True)
    with GradTape() as tape:
        loss = ops.total(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((1, 2, 3, 3)))


def test_grad_of_relu_sum_is_indicator(rng):
    raw = rng.normal(size=(1, 2, 3, 3))
    x = T(raw, grad=True)
    with GradTape() as tape:
        loss = ops.total(ops.relu(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, (raw > 0).astype(float))


def test_reused_input_accumulates(rng):
    x = T(rng.normal(size=(1, 1, 2, 2)), grad=True)
    with GradTape() as tape:
        loss = ops.total(ops.add(x, x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2.0)


def test_unreachable_parameter_gets_zero_grad(rng):
    x = T(rng.normal(size=(1, 1, 2, 2)), grad=True)
    unused = T(np.ones(3), grad=True)
    with GradTape() as tape:
        loss = ops.total(x)
    backward(tape, loss, params=[x, unused])
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_no_tape_no_record(rng):
    x = T(rng.normal(size=(1, 1, 2, 2)), grad=True)
    y = ops.relu(x)
    assert not y.requires_grad
    with GradTape() as tape:
        ops.relu(Tensor(np.ones((1, 1, 2, 2))))
    assert len(tape) == 0


def test_backward_rejects_non_scalar(rng):
    x = T(rng.normal(size=(1, 1, 2, 2)), grad=True)
    with GradTape() as tape:
        y = ops.relu(x)
    with pytest.raises(DimensionError):
        backward(tape, y)
