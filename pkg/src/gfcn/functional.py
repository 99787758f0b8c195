"""Differentiable layer operations on (batch, channel, height, width) tensors."""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result, mul, add, getitem

NORM_EPS = 1e-5


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def _padding4(padding) -> tuple[int, int, int, int]:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(padding, int):
        return (padding,) * 4
    if len(padding) == 2:
        ph, pw = padding
        return (ph, ph, pw, pw)
    if len(padding) == 4:
        return tuple(int(p) for p in padding)
    raise ValueError(f"padding must be int, (ph, pw) or (top, bottom, left, right); got {padding!r}")


def _pad(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    if not any(pads):
        return x
    t, b, l, r = pads
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def _unpad(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    t, b, l, r = pads
    return x[:, :, t : x.shape[2] - b, l : x.shape[3] - r]


def conv_output_size(size: int, kernel: int, stride: int, pad_total: int) -> int:
    return (size + pad_total - kernel) // stride + 1


def _check_fit(shape, kernel, pads, op):
    H, W = shape[2] + pads[0] + pads[1], shape[3] + pads[2] + pads[3]
    if kernel[0] > H or kernel[1] > W:
        raise ValueError(f"{op}: kernel {kernel} does not fit padded input of size {(H, W)}")


# -- convolutions ---------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Standard 2-D cross-correlation.

    ``padding`` is an int, ``(ph, pw)`` or ``(top, bottom, left, right)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {C} channels, weight {weight.shape} expects {Ci}"
        )
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"stride must be >= 1, got {(sh, sw)}")
    pads = _padding4(padding)
    _check_fit(x.shape, (kh, kw), pads, "conv2d")
    wd = weight.data

    if kh == kw == 1 and sh == sw == 1 and not any(pads):
        w2 = wd[:, :, 0, 0]
        xd = x.data
        out = np.einsum("oc,bchw->bohw", w2, xd, optimize=True)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def _back_pw(g):
            gx = np.einsum("oc,bohw->bchw", w2, g, optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)[:, :, None, None]
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw, gb)

        parents = (x, weight) + ((bias,) if bias is not None else ())
        return make_result(out, parents, _back_pw)

    xp = _pad(x.data, pads)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    out = (cols @ wd.reshape(O, -1).T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(O, C, kh, kw)
        gcols = (g2 @ wd.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (_unpad(gxp, pads), gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, parents, _back)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Per-channel convolution with channel multiplier 1; ``weight`` is (C, 1, kh, kw)."""
    B, C, H, W = x.shape
    if weight.ndim != 4 or weight.shape[0] != C or weight.shape[1] != 1:
        raise ValueError(
            f"depthwise conv: weight {weight.shape} incompatible with input {x.shape} (need ({C}, 1, kh, kw))"
        )
    kh, kw = weight.shape[2:]
    sh, sw = _pair(stride)
    pads = _padding4(padding)
    _check_fit(x.shape, (kh, kw), pads, "depthwise conv")
    xp = _pad(x.data, pads)
    Ho = (xp.shape[2] - kh) // sh + 1
    Wo = (xp.shape[3] - kw) // sw + 1
    wd = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.data, wd))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _back(g):
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        gw = np.empty((C, 1, kh, kw), dtype=wd.dtype)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw]
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, window)
                gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += g * wd[None, :, i, j, None, None]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (_unpad(gxp, pads), gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, parents, _back)


def depthwise_separable_conv(
    x: Tensor,
    depthwise_weight: Tensor,
    depthwise_bias: Tensor | None,
    pointwise_weight: Tensor,
    pointwise_bias: Tensor | None,
    stride=1,
    padding=0,
) -> Tensor:
    """Depthwise spatial convolution followed by a 1x1 pointwise convolution.

    Stride and padding apply to the depthwise stage only.
    """
    if pointwise_weight.shape[1] != depthwise_weight.shape[0] or pointwise_weight.shape[2:] != (1, 1):
        raise ValueError(
            f"separable conv: pointwise weight {pointwise_weight.shape} does not consume the "
            f"{depthwise_weight.shape[0]} depthwise channels"
        )
    h = depthwise_conv2d(x, depthwise_weight, depthwise_bias, stride=stride, padding=padding)
    return conv2d(h, pointwise_weight, pointwise_bias)


# -- pooling ----------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling; ties send the gradient to the first maximum in row-major order."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise ValueError(f"maxpool2d: kernel {(kh, kw)} larger than input spatial size {(H, W)}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _back(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        if (sh, sw) == (kh, kw):
            gwin = np.zeros((B, C, Ho, Wo, kh * kw), dtype=x.dtype)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gwin = gwin.reshape(B, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5)
            gx[:, :, : Ho * kh, : Wo * kw] = gwin.reshape(B, C, Ho * kh, Wo * kw)
        else:
            di, dj = np.divmod(idx, kw)
            rows = np.arange(Ho)[:, None] * sh + di
            cols = np.arange(Wo)[None, :] * sw + dj
            bi = np.arange(B)[:, None, None, None]
            ci = np.arange(C)[None, :, None, None]
            np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return make_result(out, (x,), _back)


# -- activations -------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def _check_collapsed(x: Tensor, op: str) -> None:
    if x.ndim != 4 or x.shape[2] != 1:
        raise ValueError(f"{op} expects (B, C, 1, W) input with collapsed height, got {x.shape}")


def softmax_over_channels(x: Tensor) -> Tensor:
    _check_collapsed(x, "softmax_over_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_result(y, (x,), _back)


def log_softmax_over_channels(x: Tensor) -> Tensor:
    _check_collapsed(x, "log_softmax_over_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)

    def _back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return make_result(logp, (x,), _back)


# -- normalisation -----------------------------------------------------------------


@dataclass(frozen=True)
class NormKind:
    """Which axes a normalisation layer computes statistics over."""

    kind: str
    groups: int | None = None

    def __post_init__(self):
        if self.kind not in ("batch", "layer", "instance", "group"):
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.kind == "group" and (self.groups is None or self.groups < 1):
            raise ValueError("group normalization needs a positive group count")
        if self.kind != "group" and self.groups is not None:
            raise ValueError(f"{self.kind} normalization takes no group count")

    @classmethod
    def parse(cls, text: str) -> "NormKind":
        """Parse ``batch``, ``layer``, ``instance`` or ``group(32)`` / ``group32``."""
        t = text.strip().lower().replace(" ", "")
        if t.startswith("group"):
            digits = t[5:].strip("():=")
            return cls("group", int(digits) if digits else 32)
        return cls(t)

    def __str__(self) -> str:
        return f"group({self.groups})" if self.kind == "group" else self.kind


BATCH = NormKind("batch")
LAYER = NormKind("layer")
INSTANCE = NormKind("instance")


def resolve_groups(channels: int, groups: int, fallback: bool = False) -> int:
    """Group count actually used for ``channels``.

    With ``fallback`` an indivisible request degrades to gcd(channels, groups).
    """
    if channels % groups == 0:
        return groups
    if not fallback:
        raise ValueError(
            f"group normalization: {channels} channels not divisible into {groups} groups"
        )
    return gcd(channels, groups)


def _standardize(x: Tensor, reduce_shape: tuple[int, ...], axes: tuple[int, ...], eps: float):
    """(x - mean) / sqrt(var + eps) with statistics over ``axes`` of ``x`` reshaped to ``reduce_shape``."""
    shape = x.shape
    xr = x.data.reshape(reduce_shape)
    mu = xr.mean(axis=axes, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def _back(g):
        gr = g.reshape(reduce_shape)
        gm = gr.mean(axis=axes, keepdims=True)
        gym = (gr * y).mean(axis=axes, keepdims=True)
        return ((inv * (gr - gm - y * gym)).reshape(shape),)

    return make_result(y.reshape(shape), (x,), _back), mu, var


def normalize(
    x: Tensor,
    kind: NormKind,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = NORM_EPS,
    training: bool = True,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.1,
    group_fallback: bool = False,
) -> Tensor:
    """Batch, layer, instance or group normalisation with optional per-channel affine.

    Batch normalisation updates ``running_mean``/``running_var`` in place
    while training and uses them in evaluation mode.
    """
    B, C, H, W = x.shape
    if kind.kind == "batch":
        if training or running_mean is None:
            y, mu, var = _standardize(x, (B, C, H, W), (0, 2, 3), eps)
            if training and running_mean is not None:
                n = B * H * W
                unbiased = var.reshape(C) * (n / (n - 1) if n > 1 else 1.0)
                running_mean *= 1.0 - momentum
                running_mean += momentum * mu.reshape(C)
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            scale = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)[None, :, None, None]
            shift = running_mean.astype(x.dtype)[None, :, None, None]
            y = make_result((x.data - shift) * scale, (x,), lambda g: (g * scale,))
    elif kind.kind == "layer":
        y, _, _ = _standardize(x, (B, C * H * W), (1,), eps)
    elif kind.kind == "instance":
        y, _, _ = _standardize(x, (B, C, H * W), (2,), eps)
    else:
        g = resolve_groups(C, kind.groups, group_fallback)
        y, _, _ = _standardize(x, (B, g, (C // g) * H * W), (2,), eps)
    if weight is not None:
        y = mul(y, weight.reshape(1, C, 1, 1))
    if bias is not None:
        y = add(y, bias.reshape(1, C, 1, 1))
    return y


def layer_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    return normalize(x, LAYER, eps=eps)


# -- gate ------------------------------------------------------------------------------


def gate(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Split channels in half; layer-norm(tanh(first)) * layer-norm(sigmoid(second)).

    The two layer norms carry no learnable parameters.
    """
    C2 = x.shape[1]
    if C2 % 2:
        raise ValueError(f"gate needs an even channel count, got {C2} (input {x.shape})")
    C = C2 // 2
    a = tanh(getitem(x, (slice(None), slice(0, C))))
    b = sigmoid(getitem(x, (slice(None), slice(C, C2))))
    return mul(layer_norm(a, eps), layer_norm(b, eps))


# -- stochastic regularisers --------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def gaussian_noise(x: Tensor, std: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if std < 0:
        raise ValueError(f"noise standard deviation must be non-negative, got {std}")
    if not training or std == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    noise = rng.normal(0.0, std, size=x.shape).astype(x.dtype)
    return make_result(x.data + noise, (x,), lambda g: (g,))
