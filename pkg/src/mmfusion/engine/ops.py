"""Neural-network operators over ``Tensor`` with taped backward rules.

Convolutions take channels-last layouts (NHWC / NLC) and TF-style
``same``/``valid`` zero padding: output extent under ``same`` is
ceil(in / stride), total padding max((out-1)*stride + eff_kernel - in, 0)
split floor-before / ceil-after per axis (for stride 1 this is the
pad-less-before / more-after rule for even kernels).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    concat,
    narrow,
    record,
    reshape,
    tensor_mean,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
BCE_EPS = 1e-7


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def rule(g):
        return [(a, g * (a.data > 0))]

    return record(out, (a,), rule)


def sigmoid(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(check_finite(s, "sigmoid"))

    def rule(g):
        return [(a, g * s * (1.0 - s))]

    return record(out, (a,), rule)


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)

    def rule(g):
        return [(a, g * (1.0 - t * t))]

    return record(out, (a,), rule)


# ---------------------------------------------------------------------------
# convolution plumbing


def _pad_amount(in_len, kernel, stride, dilation, padding):
    eff = (kernel - 1) * dilation + 1
    if padding == "same":
        out_len = -(-in_len // stride)
        total = max((out_len - 1) * stride + eff - in_len, 0)
        return total // 2, total - total // 2, out_len
    if padding == "valid":
        if in_len < eff:
            raise ShapeError(f"kernel (effective {eff}) exceeds input extent {in_len}")
        return 0, 0, (in_len - eff) // stride + 1
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _conv2d_geometry(x, kernel_shape, stride, padding, dilation):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NHWC, got shape {x.shape}")
    sh, sw = stride
    dh, dw = dilation
    if min(sh, sw) < 1 or min(dh, dw) < 1:
        raise ShapeError("stride and dilation must be >= 1")
    kh, kw = kernel_shape[:2]
    _, h, w, _ = x.shape
    pt, pb, ho = _pad_amount(h, kh, sh, dh, padding)
    pl, pr, wo = _pad_amount(w, kw, sw, dw, padding)
    return (pt, pb, pl, pr), (ho, wo)


def _window_view(xp, kh, kw, out_hw, stride, dilation):
    """Strided read-only view of all (kh, kw) windows: (N, Ho, Wo, kh, kw, C)."""
    n, _, _, c = xp.shape
    ho, wo = out_hw
    sn, sh_, sw_, sc = xp.strides
    sh, sw = stride
    dh, dw = dilation
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * sh_, sw * sw_, dh * sh_, dw * sw_, sc),
        writeable=False,
    )


def conv2d(x, kernel, stride=(1, 1), padding="same", dilation=(1, 1)):
    """2-D cross-correlation. x: (N,H,W,Cin), kernel: (kh,kw,Cin,Cout)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh,kw,Cin,Cout), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    (pt, pb, pl, pr), (ho, wo) = _conv2d_geometry(x, kernel.shape, stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _window_view(xp, kh, kw, (ho, wo), stride, dilation)
    out = Tensor(check_finite(np.tensordot(win, kernel.data, ([3, 4, 5], [0, 1, 2])), "conv2d"))

    sh, sw = stride
    dh, dw = dilation
    n, h, w, _ = x.shape

    def rule(g):
        dk = np.tensordot(win, g, ([0, 1, 2], [0, 1, 2]))
        dxp = np.zeros_like(xp)
        for p in range(kh):
            rows = slice(p * dh, p * dh + ho * sh, sh)
            for q in range(kw):
                cols = slice(q * dw, q * dw + wo * sw, sw)
                dxp[:, rows, cols, :] += g @ kernel.data[p, q].T
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        return [(x, dx), (kernel, dk)]

    return record(out, (x, kernel), rule)


def depthwise_conv2d(x, kernel, stride=(1, 1), padding="same"):
    """Per-channel 2-D conv, channel multiplier 1. kernel: (kh,kw,C)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"depthwise kernel must be (kh,kw,C), got {kernel.shape}")
    kh, kw, c = kernel.shape
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape[-1]}, kernel {c}")
    (pt, pb, pl, pr), (ho, wo) = _conv2d_geometry(x, kernel.shape, stride, padding, (1, 1))
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _window_view(xp, kh, kw, (ho, wo), stride, (1, 1))
    out = Tensor(check_finite(np.einsum("nhwpqc,pqc->nhwc", win, kernel.data), "depthwise_conv2d"))

    sh, sw = stride
    n, h, w, _ = x.shape

    def rule(g):
        dk = np.einsum("nhwpqc,nhwc->pqc", win, g)
        dxp = np.zeros_like(xp)
        for p in range(kh):
            rows = slice(p, p + ho * sh, sh)
            for q in range(kw):
                cols = slice(q, q + wo * sw, sw)
                dxp[:, rows, cols, :] += g * kernel.data[p, q]
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        return [(x, dx), (kernel, dk)]

    return record(out, (x, kernel), rule)


def conv1d(x, kernel, stride=1, padding="same", dilation=1):
    """1-D cross-correlation. x: (N,L,Cin), kernel: (k,Cin,Cout).

    Routed through conv2d with a singleton height axis, so padding and
    gradient behaviour match the 2-D operator exactly.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be NLC, got shape {x.shape}")
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be (k,Cin,Cout), got {kernel.shape}")
    n, l, cin = x.shape
    k, kcin, cout = kernel.shape
    x4 = reshape(x, (n, 1, l, cin))
    k4 = reshape(kernel, (1, k, kcin, cout))
    out4 = conv2d(x4, k4, stride=(1, stride), padding=padding, dilation=(1, dilation))
    _, _, lo, _ = out4.shape
    return reshape(out4, (n, lo, cout))


# ---------------------------------------------------------------------------
# convolutional LSTM (1-D)


def conv_lstm1d(x, kernel_x, kernel_h, bias, stride=1, return_sequences=False):
    """ConvLSTM over a (N, T, L, Cin) sequence.

    Gate pre-activations are conv1d(x_t, kernel_x, stride) +
    conv1d(h_{t-1}, kernel_h, 1) + bias, split into (i, f, g, o) along the
    channel axis; the recurrence is c_t = f*c_{t-1} + i*tanh(g),
    h_t = o*tanh(c_t) with sigmoid-activated i/f/o and zero initial state.
    The spatial stride applies to the input-to-gate convolution only.

    kernel_x: (k, Cin, 4*Ch), kernel_h: (k, Ch, 4*Ch), bias: (4*Ch,).
    Returns the full hidden sequence (N, T, L', Ch) when
    ``return_sequences`` else the final hidden state (N, L', Ch).
    """
    x, kernel_x, kernel_h = as_tensor(x), as_tensor(kernel_x), as_tensor(kernel_h)
    bias = as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv_lstm1d input must be (N,T,L,Cin), got {x.shape}")
    n, t_steps, l, cin = x.shape
    if t_steps < 1:
        raise ShapeError("conv_lstm1d needs at least one timestep")
    if kernel_x.shape[1] != cin:
        raise ShapeError(f"conv_lstm1d channel mismatch: input {cin}, kernel {kernel_x.shape[1]}")
    ch4 = kernel_x.shape[2]
    if ch4 % 4 != 0 or kernel_h.shape[2] != ch4 or kernel_h.shape[1] != ch4 // 4:
        raise ShapeError("conv_lstm1d hidden-channel mismatch between kernels")
    ch = ch4 // 4

    h = c = None
    outputs = []
    for step in range(t_steps):
        x_t = reshape(narrow(x, 1, step, 1), (n, l, cin))
        gates = conv1d(x_t, kernel_x, stride=stride, padding="same")
        if h is not None:
            gates = gates + conv1d(h, kernel_h, stride=1, padding="same")
        gates = gates + bias
        i_gate = sigmoid(narrow(gates, -1, 0, ch))
        f_gate = sigmoid(narrow(gates, -1, ch, ch))
        g_gate = tanh(narrow(gates, -1, 2 * ch, ch))
        o_gate = sigmoid(narrow(gates, -1, 3 * ch, ch))
        c = i_gate * g_gate if c is None else f_gate * c + i_gate * g_gate
        h = o_gate * tanh(c)
        if return_sequences:
            lo = h.shape[1]
            outputs.append(reshape(h, (n, 1, lo, ch)))
    if return_sequences:
        return concat(outputs, axis=1) if len(outputs) > 1 else outputs[0]
    return h


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running per-channel statistics used by infer mode."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, batch_mean, batch_var):
        m = BN_MOMENTUM
        self.mean = (m * self.mean + (1.0 - m) * batch_mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1.0 - m) * batch_var).astype(self.var.dtype)


def batch_norm(x, gamma, beta, state, mode="train", update_stats=None):
    """Normalize per channel (last axis) over all other axes.

    Train mode uses the batch's own (biased) statistics and, unless
    ``update_stats`` is False, folds them into ``state`` with momentum
    0.99. Infer mode normalizes with the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[0] == 0:
        raise ShapeError("batch_norm on an empty batch")
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("gamma/beta must be one value per channel")
    if mode not in ("train", "infer"):
        raise ShapeError(f"batch_norm mode must be train|infer, got {mode!r}")
    axes = tuple(range(x.ndim - 1))
    bshape = (1,) * (x.ndim - 1) + (channels,)

    if mode == "train":
        mu = tensor_mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = tensor_mean(centered * centered, axis=axes, keepdims=True)
        if update_stats or update_stats is None:
            state.update(mu.data.reshape(channels), var.data.reshape(channels))
        inv = _rsqrt(var + BN_EPS)
        xhat = centered * inv
    else:
        mean = state.mean.reshape(bshape).astype(x.dtype)
        inv_const = (1.0 / np.sqrt(state.var.astype(np.float64) + BN_EPS)).astype(x.dtype)
        xhat = (x - Tensor(mean)) * Tensor(inv_const.reshape(bshape))
    return xhat * reshape(gamma, bshape) + reshape(beta, bshape)


def _rsqrt(t):
    from .tensor import power

    return power(t, -0.5)


# ---------------------------------------------------------------------------
# dropout / upsampling


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); infer mode and rate 0 are identities."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ShapeError("train-mode dropout needs an explicit rng stream")
    keep = (rng.uniform(size=x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)

    def rule(g):
        return [(x, g * keep * scale)]

    return record(out, (x,), rule)


def upsample_nearest(x, factor):
    """Nearest-neighbour upsample of (N,H,W,C) by integer factors (fh, fw)."""
    x = as_tensor(x)
    fh, fw = factor
    if fh < 1 or fw < 1:
        raise ShapeError("upsample factors must be >= 1")
    if fh == 1 and fw == 1:
        return x
    n, h, w, c = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, fh, axis=1), fw, axis=2))

    def rule(g):
        return [(x, g.reshape(n, h, fh, w, fw, c).sum(axis=(2, 4)))]

    return record(out, (x,), rule)


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred, target):
    """Mean binary cross entropy over all elements.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the log; the
    gradient is zero where the clamp is active.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    y = target.data
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
    out = Tensor(check_finite(np.asarray(loss, dtype=pred.dtype), "bce_loss"))

    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def rule(g):
        scale = g / p.size
        dp = scale * (p - y) / (p * (1.0 - p)) * inside
        return [(pred, dp.astype(pred.dtype)), (target, None)]

    return record(out, (pred, target), rule)
