import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfcn import functional as F
from gfcn.functional import BATCH, INSTANCE, LAYER, NormKind
from gfcn.tensor import Tensor, backward
from conftest import gradcheck


def conv_oracle(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[1]), (pad[2], pad[3])))
    Ho = (H + pad[0] + pad[1] - kh) // stride[0] + 1
    Wo = (W + pad[2] + pad[3] - kw) // stride[1] + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    win = xp[n, :, i * stride[0] : i * stride[0] + kh, j * stride[1] : j * stride[1] + kw]
                    out[n, o, i, j] = np.sum(win * w[o]) + (b[o] if b is not None else 0.0)
    return out


# -- convolution ---------------------------------------------------------------------------


def test_conv_ones_center_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = F.conv2d(x, w, None, 1, 1).data[0, 0]
    assert y[1, 1] == 9.0
    assert y[0, 0] == 4.0


@pytest.mark.parametrize("stride, pad", [(1, (1, 1, 1, 1)), (2, (0, 0, 0, 0)), (1, (0, 0, 3, 4)), ((2, 1), (1, 0, 2, 1))])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(1, 2, 5, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    s = stride if isinstance(stride, tuple) else (stride, stride)
    np.testing.assert_allclose(got, conv_oracle(x, w, b, s, pad), atol=1e-12)


def test_conv_1x1_matches_oracle(rng):
    x = rng.normal(size=(2, 4, 3, 5))
    w = rng.normal(size=(6, 4, 1, 1))
    np.testing.assert_allclose(F.conv2d(Tensor(x), Tensor(w)).data, conv_oracle(x, w, None, (1, 1), (0,) * 4), atol=1e-12)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)|\(2, 2, 3, 3\).*\(1, 3, 4, 4\)"):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_conv_kernel_must_fit():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 16), st.integers(1, 16), st.integers(1, 3), st.integers(1, 3),
    st.integers(0, 2), st.integers(1, 3),
)
def test_conv_output_shape_formula(h, w, kh, kw, pad, stride):
    if h + 2 * pad < kh or w + 2 * pad < kw:
        return
    y = F.conv2d(Tensor(np.ones((1, 2, h, w))), Tensor(np.ones((3, 2, kh, kw))), None, stride, pad)
    assert y.shape == (1, 3, (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1)


def test_conv_gradient(rng):
    x, w, b = rng.normal(size=(2, 2, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    assert gradcheck(lambda x, w, b: F.conv2d(x, w, b, 1, 1), x, w, b) < 1e-6
    assert gradcheck(lambda x, w: F.conv2d(x, w, None, 2, (0, 1, 3, 4)), x, w) < 1e-6


# -- depthwise separable -------------------------------------------------------------------


def test_dsc_identity():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    y = F.depthwise_separable_conv(
        Tensor(x), Tensor(np.ones((3, 1, 1, 1))), Tensor(np.zeros(3)),
        Tensor(np.eye(3).reshape(3, 3, 1, 1)), Tensor(np.zeros(3)),
    )
    np.testing.assert_allclose(y.data, x)


def test_dsc_zero_weights_zero_output(rng):
    y = F.depthwise_separable_conv(
        Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(2)),
        Tensor(rng.normal(size=(5, 2, 1, 1))), Tensor(np.zeros(5)), 1, 1,
    )
    assert not y.data.any()


def test_dsc_matches_two_stage_oracle(rng):
    x = rng.normal(size=(1, 4, 6, 10))
    dw, db = rng.normal(size=(4, 1, 1, 8)), rng.normal(size=4)
    pw, pb = rng.normal(size=(5, 4, 1, 1)), rng.normal(size=5)
    got = F.depthwise_separable_conv(Tensor(x), Tensor(dw), Tensor(db), Tensor(pw), Tensor(pb), 1, 0).data
    stage1 = np.concatenate(
        [conv_oracle(x[:, c : c + 1], dw[c : c + 1], db[c : c + 1], (1, 1), (0,) * 4) for c in range(4)], axis=1
    )
    np.testing.assert_allclose(got, conv_oracle(stage1, pw, pb, (1, 1), (0,) * 4), atol=1e-11)


def test_dsc_channel_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        F.depthwise_separable_conv(
            Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(np.ones((3, 1, 3, 3))), None,
            Tensor(np.ones((2, 4, 1, 1))), None, 1, 1,
        )


def test_dsc_gradient(rng):
    args = (rng.normal(size=(2, 3, 4, 9)), rng.normal(size=(3, 1, 1, 8)), rng.normal(size=3),
            rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4))
    fn = lambda x, dw, db, pw, pb: F.depthwise_separable_conv(x, dw, db, pw, pb, 1, (0, 0, 3, 4))
    assert gradcheck(fn, *args) < 1e-6


# -- pooling ---------------------------------------------------------------------------------


def test_maxpool_basic():
    y = F.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), (2, 2))
    assert y.data.tolist() == [[[[4.0]]]]


def test_maxpool_constant():
    y = F.maxpool2d(Tensor(np.full((1, 2, 4, 6), 3.0)), (2, 2))
    assert y.shape == (1, 2, 2, 3) and np.all(y.data == 3.0)


def test_maxpool_matches_window_scan(rng):
    x = rng.normal(size=(1, 3, 8, 12))
    y = F.maxpool2d(Tensor(x), (2, 1)).data
    ref = np.array([[[[x[0, c, 2 * i : 2 * i + 2, j].max() for j in range(12)] for i in range(4)] for c in range(3)]])
    np.testing.assert_array_equal(y, ref)


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(F.maxpool2d(x, (2, 2)).sum())
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_kernel_too_large():
    with pytest.raises(ValueError):
        F.maxpool2d(Tensor(np.ones((1, 1, 1, 4))), (2, 1))


def test_maxpool_gradient(rng):
    x = rng.permutation(2 * 2 * 6 * 4).reshape(2, 2, 6, 4).astype(float)  # distinct values, no ties
    assert gradcheck(lambda x: F.maxpool2d(x, (2, 2)), x) < 1e-6
    assert gradcheck(lambda x: F.maxpool2d(x, (2, 1)), x) < 1e-6


# -- activations and softmax -------------------------------------------------------------------


def test_activation_values():
    assert F.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    assert F.tanh(Tensor(np.zeros(1))).data[0] == 0.0
    assert F.relu(Tensor(np.array([-3.0]))).data[0] == 0.0


def test_activation_ranges(rng):
    # float64 tanh/sigmoid round to the bounds beyond |x| ~ 19 and 37
    x = Tensor(rng.uniform(-15, 15, size=1000))
    assert np.all(np.abs(F.tanh(x).data) < 1)
    s = F.sigmoid(x).data
    assert np.all((s > 0) & (s < 1))
    assert np.all(F.relu(x).data >= 0)


def test_activation_rejects_unknown_kind():
    with pytest.raises(ValueError):
        F.activation(Tensor(np.zeros(1)), "gelu")


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
def test_activation_gradient(kind, rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    assert gradcheck(lambda t: F.activation(t, kind), x) < 1e-6


def test_softmax_uniform_and_stable():
    p = F.softmax_over_channels(Tensor(np.zeros((1, 5, 1, 1)))).data
    np.testing.assert_allclose(p.ravel(), 0.2)
    p = F.softmax_over_channels(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))).data.ravel()
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0)


def test_softmax_matches_oracle(rng):
    z = rng.normal(scale=3, size=(2, 7, 1, 5))
    e = np.exp(z)
    np.testing.assert_allclose(F.softmax_over_channels(Tensor(z)).data, e / e.sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(np.exp(F.log_softmax_over_channels(Tensor(z)).data).sum(axis=1), 1.0, atol=1e-6)


def test_softmax_requires_collapsed_height():
    with pytest.raises(ValueError, match="height"):
        F.softmax_over_channels(Tensor(np.zeros((1, 3, 2, 4))))


def test_softmax_gradients(rng):
    z = rng.normal(size=(2, 4, 1, 3))
    assert gradcheck(F.softmax_over_channels, z) < 1e-6
    assert gradcheck(F.log_softmax_over_channels, z) < 1e-6


# -- normalisation ---------------------------------------------------------------------------

AXES = {"batch": (0, 2, 3), "instance": (2, 3), "layer": (1, 2, 3)}


@pytest.mark.parametrize("kind", ["batch", "layer", "instance"])
def test_norm_moments(kind, rng):
    x = rng.normal(loc=3.0, scale=2.5, size=(3, 4, 5, 6))
    y = F.normalize(Tensor(x), NormKind(kind)).data
    np.testing.assert_allclose(y.mean(axis=AXES[kind]), 0.0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=AXES[kind]), 1.0, atol=1e-4)


def test_group_norm_moments(rng):
    x = rng.normal(loc=-1.0, scale=3.0, size=(2, 8, 3, 4))
    y = F.normalize(Tensor(x), NormKind("group", 4)).data.reshape(2, 4, -1)
    np.testing.assert_allclose(y.mean(axis=2), 0.0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=2), 1.0, atol=1e-4)


@pytest.mark.parametrize("kind", ["batch", "layer", "instance", "group(2)"])
def test_norm_constant_input_gives_zero(kind):
    y = F.normalize(Tensor(np.full((2, 4, 3, 3), 7.0)), NormKind.parse(kind))
    assert np.allclose(y.data, 0.0)


def test_instance_norm_two_points():
    y = F.normalize(Tensor(np.array([[[[2.0, 5.0]]]])), INSTANCE).data.ravel()
    np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-5)


def test_group_norm_indivisible():
    x = Tensor(np.ones((1, 6, 2, 2)))
    with pytest.raises(ValueError, match="divisible"):
        F.normalize(x, NormKind("group", 4))
    assert F.resolve_groups(6, 4, fallback=True) == 2
    assert F.normalize(x, NormKind("group", 4), group_fallback=True).shape == x.shape


def test_norm_kind_parsing():
    assert NormKind.parse("Group(32)") == NormKind("group", 32)
    assert str(NormKind.parse("instance")) == "instance"
    with pytest.raises(ValueError):
        NormKind.parse("weight")


def test_batch_norm_running_statistics(rng):
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    F.normalize(Tensor(x), BATCH, training=True, running_mean=rm, running_var=rv)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)
    y = F.normalize(Tensor(x), BATCH, training=False, running_mean=rm, running_var=rv).data
    np.testing.assert_allclose(y, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


@pytest.mark.parametrize("kind", ["batch", "layer", "instance", "group(2)"])
def test_norm_gradient(kind, rng):
    x = rng.normal(size=(2, 4, 3, 3))
    w, b = rng.normal(size=4), rng.normal(size=4)
    fn = lambda x, w, b: F.normalize(x, NormKind.parse(kind), w, b)
    assert gradcheck(fn, x, w, b) < 1e-6


# -- gate ------------------------------------------------------------------------------------


def test_gate_zero_input():
    assert not F.gate(Tensor(np.zeros((1, 4, 2, 3)))).data.any()


def test_gate_shape_and_odd_channels():
    assert F.gate(Tensor(np.ones((2, 6, 3, 5)))).shape == (2, 3, 3, 5)
    with pytest.raises(ValueError, match="even"):
        F.gate(Tensor(np.ones((1, 5, 2, 2))))


def test_gate_matches_composition(rng):
    x = rng.normal(size=(2, 6, 3, 4))
    a, b = np.tanh(x[:, :3]), 1 / (1 + np.exp(-x[:, 3:]))

    def ln(v):
        m = v.mean(axis=(1, 2, 3), keepdims=True)
        return (v - m) / np.sqrt(v.var(axis=(1, 2, 3), keepdims=True) + 1e-5)

    # branch bounds hold on the intermediates, before normalisation
    assert np.all(np.abs(a) < 1) and np.all((b > 0) & (b < 1))
    np.testing.assert_allclose(F.gate(Tensor(x)).data, ln(a) * ln(b), atol=1e-12)


def test_gate_gradient(rng):
    assert gradcheck(F.gate, rng.normal(size=(2, 4, 2, 3))) < 1e-6


# -- dropout and noise -----------------------------------------------------------------------


def test_dropout_identities(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert F.dropout(x, 0.0, True, rng) is x
    assert F.dropout(x, 0.7, False, rng) is x
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, True, rng)


def test_dropout_rate_and_scaling():
    x = Tensor(np.ones(1_000_000))
    y = F.dropout(x, 0.4, True, np.random.default_rng(7)).data
    assert abs((y == 0).mean() - 0.4) < 0.005
    np.testing.assert_allclose(y[y != 0], 1 / 0.6)


def test_dropout_deterministic_and_gradient():
    x = np.random.default_rng(0).normal(size=(2, 5))
    y1 = F.dropout(Tensor(x), 0.5, True, np.random.default_rng(3)).data
    y2 = F.dropout(Tensor(x), 0.5, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(y1, y2)
    assert gradcheck(lambda t: F.dropout(t, 0.5, True, np.random.default_rng(3)), x) < 1e-6


def test_noise_moments_and_identities():
    x = Tensor(np.zeros(1_000_000))
    d = F.gaussian_noise(x, 0.01, True, np.random.default_rng(5)).data
    assert abs(d.mean()) < 1e-4 and abs(d.std() - 0.01) < 1e-4
    assert F.gaussian_noise(x, 0.0, True) is x
    assert F.gaussian_noise(x, 0.3, False) is x
    with pytest.raises(ValueError):
        F.gaussian_noise(x, -1.0, True)
