"""Dual-branch fusion network for concealed-object mask prediction.

A radar branch (two ConvLSTM1D layers, then three Conv1D layers) and a
depth branch (four Conv2D layers) each embed their input into a 4x4x128
latent. The latents are concatenated along channels, mixed by a deep
feature magnification (DFM) stack of depthwise/pointwise/dilated
convolutions, and decoded back to input resolution by upsample + conv +
feature-extraction (FEE) stages ending in a 1x1 conv with sigmoid.

Everything is functional: ``ModelParams`` is a named registry of engine
tensors plus batch-norm states, and ``forward`` threads it through the
graph. Channel widths can be divided uniformly (``width_divisor``) to get
cheap clones for gradient checks and small experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    BatchNormState,
    EngineError,
    RngStream,
    ShapeError,
    Tensor,
    as_tensor,
    batch_norm,
    concat,
    conv1d,
    conv2d,
    conv_lstm1d,
    depthwise_conv2d,
    dropout,
    relu,
    reshape,
    sigmoid,
    upsample_nearest,
)

RADAR_SHAPE = (1, 256, 4)
LATENT_GRID = (4, 4)

_RADAR_CHANNELS = (16, 32, 64, 64, 128)
_RADAR_STRIDES = (2, 2, 2, 2, 1)
_RADAR_KERNEL = 7
_TOF_CHANNELS = (32, 64, 64, 128)
_DECODER_CHANNELS = (128, 64, 32)

_TOF_STRIDES = {
    (32, 64): ((2, 2), (2, 2), (2, 2), (1, 2)),
    (48, 64): ((2, 2), (2, 2), (3, 2), (1, 2)),
    (8, 16): ((2, 2), (1, 2), (1, 1), (1, 1)),
}
_UP_FACTORS = {
    (32, 64): ((2, 2), (2, 2), (2, 4)),
    (48, 64): ((2, 2), (2, 2), (3, 4)),
    (8, 16): ((2, 2), (1, 2), (1, 1)),
}

_DFM_LAYERS = (
    ("dfm.dw", "depthwise"),
    ("dfm.pw", (1, 1)),
    ("dfm.c1", (1, 1)),
    ("dfm.c2", (3, 3)),
    ("dfm.c3", (1, 1)),
    ("dfm.c4", (4, 4)),
    ("dfm.dil", (4, 4)),
)


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture description; see module docstring for the graph."""

    depth_resolution: tuple = (32, 64)
    width_divisor: int = 1
    tof_kernel: tuple = (7, 7)
    dropout_rate: float = 0.3
    dfm_dilation: int = 2

    def __post_init__(self):
        res = tuple(int(v) for v in self.depth_resolution)
        object.__setattr__(self, "depth_resolution", res)
        object.__setattr__(self, "tof_kernel", tuple(int(v) for v in self.tof_kernel))
        if res not in _TOF_STRIDES:
            raise ShapeError(
                f"unsupported depth resolution {res}; known: {sorted(_TOF_STRIDES)}"
            )
        d = self.width_divisor
        if d < 1 or any(c % d for c in _RADAR_CHANNELS + _TOF_CHANNELS + _DECODER_CHANNELS):
            raise ShapeError(f"width_divisor {d} does not divide the channel schedule")
        h, w = res
        for sh, sw in self.tof_strides:
            h, w = -(-h // sh), -(-w // sw)
        if (h, w) != LATENT_GRID:
            raise ShapeError(f"encoder strides land on {(h, w)}, expected {LATENT_GRID}")
        h, w = LATENT_GRID
        for fh, fw in self.up_factors:
            h, w = h * fh, w * fw
        if (h, w) != res:
            raise ShapeError(f"decoder factors land on {(h, w)}, expected {res}")

    @classmethod
    def spad(cls, **kw):
        return cls(depth_resolution=(32, 64), **kw)

    @classmethod
    def wide(cls, **kw):
        return cls(depth_resolution=(48, 64), **kw)

    @classmethod
    def tiny(cls, **kw):
        kw.setdefault("width_divisor", 8)
        return cls(depth_resolution=(8, 16), **kw)

    @property
    def tof_strides(self):
        return _TOF_STRIDES[self.depth_resolution]

    @property
    def up_factors(self):
        return _UP_FACTORS[self.depth_resolution]

    @property
    def radar_channels(self):
        return tuple(c // self.width_divisor for c in _RADAR_CHANNELS)

    @property
    def tof_channels(self):
        return tuple(c // self.width_divisor for c in _TOF_CHANNELS)

    @property
    def decoder_channels(self):
        return tuple(c // self.width_divisor for c in _DECODER_CHANNELS)

    @property
    def latent_channels(self):
        return self.radar_channels[-1]

    @property
    def fused_channels(self):
        return self.latent_channels + self.tof_channels[-1]

    def param_shapes(self):
        """Ordered registry: parameter name -> shape.

        Names ending in ``.k``/``.kx``/``.kh`` are kernels, ``.b`` biases,
        ``.bn.gamma``/``.bn.beta`` batch-norm affine pairs.
        """
        rc = self.radar_channels
        tc = self.tof_channels
        kh, kw = self.tof_kernel
        fused = self.fused_channels
        shapes = {}

        cin = RADAR_SHAPE[2]
        for i, ch in enumerate(rc[:2], 1):
            shapes[f"radar.lstm{i}.kx"] = (_RADAR_KERNEL, cin, 4 * ch)
            shapes[f"radar.lstm{i}.kh"] = (_RADAR_KERNEL, ch, 4 * ch)
            shapes[f"radar.lstm{i}.b"] = (4 * ch,)
            cin = ch
        for i, ch in enumerate(rc[2:], 1):
            shapes[f"radar.conv{i}.k"] = (_RADAR_KERNEL, cin, ch)
            shapes[f"radar.conv{i}.b"] = (ch,)
            cin = ch

        cin = 1
        for i, ch in enumerate(tc, 1):
            shapes[f"tof.conv{i}.k"] = (kh, kw, cin, ch)
            shapes[f"tof.conv{i}.b"] = (ch,)
            cin = ch

        for name, kind in _DFM_LAYERS:
            if kind == "depthwise":
                shapes[f"{name}.k"] = (3, 3, fused)
            else:
                shapes[f"{name}.k"] = (*kind, fused, fused)
            shapes[f"{name}.b"] = (fused,)
            shapes[f"{name}.bn.gamma"] = (fused,)
            shapes[f"{name}.bn.beta"] = (fused,)

        cin = fused
        for s, ch in enumerate(self.decoder_channels, 1):
            for layer, kern in ((f"dec{s}.conv", (3, 3, cin, ch)),
                                (f"dec{s}.fee.c1", (1, 1, ch, ch)),
                                (f"dec{s}.fee.c2", (4, 4, ch, ch))):
                shapes[f"{layer}.k"] = kern
                shapes[f"{layer}.b"] = (ch,)
                shapes[f"{layer}.bn.gamma"] = (ch,)
                shapes[f"{layer}.bn.beta"] = (ch,)
            cin = ch
        shapes["head.k"] = (1, 1, cin, 1)
        shapes["head.b"] = (1,)
        return shapes

    def bn_layers(self):
        """Names that own a running-statistics state, with channel counts."""
        out = {name: self.fused_channels for name, _ in _DFM_LAYERS}
        for s, ch in enumerate(self.decoder_channels, 1):
            for layer in (f"dec{s}.conv", f"dec{s}.fee.c1", f"dec{s}.fee.c2"):
                out[layer] = ch
        return out


@dataclass
class ModelParams:
    """Learnable tensors plus batch-norm running statistics."""

    config: ModelConfig
    params: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)

    def n_params(self):
        return int(sum(t.data.size for t in self.params.values()))

    def grads(self):
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


def _init_std(name, shape):
    """Fan-in-scaled normal std for one kernel.

    ReLU-fed convolutions get sqrt(2/fan_in); LSTM gate kernels and the
    sigmoid head get 1/sqrt(fan_in). A flat std starves the 16-layer
    trunk: activations decay geometrically, train-mode batch norm hides
    it, and infer mode collapses to a constant.
    """
    if name.endswith((".kx", ".kh")) or name == "head.k":
        return 1.0 / math.sqrt(np.prod(shape[:-1]))
    return math.sqrt(2.0 / np.prod(shape[:-1]))


def init_params(config: ModelConfig, rng: RngStream, dtype=np.float32) -> ModelParams:
    """Fresh parameters: kernels ~ N(0, std(fan_in)^2), biases 0, BN gamma 1
    / beta 0.

    Each tensor draws from its own named substream, so values depend only
    on the seed and the parameter's name.
    """
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b") or name.endswith(".bn.beta"):
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".bn.gamma"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = rng.split(f"init/{name}").normal(
                shape, std=_init_std(name, shape), dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    bn = {name: BatchNormState(ch, dtype=dtype) for name, ch in config.bn_layers().items()}
    return ModelParams(config=config, params=params, bn=bn)


def _note(record, name, t):
    if record is not None:
        record[name] = tuple(t.shape)


def _check_mode(mode):
    if mode not in ("train", "infer"):
        raise EngineError(f"mode must be 'train' or 'infer', got {mode!r}")


def _drop(x, name, config, mode, rng):
    if mode != "train" or config.dropout_rate <= 0.0:
        return x
    if rng is None:
        raise EngineError("train-mode forward needs an rng stream for dropout")
    return dropout(x, config.dropout_rate, mode="train", rng=rng.split(f"drop/{name}"))


def _bn_relu(x, model, name, mode, update_stats):
    p = model.params
    x = batch_norm(x, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], model.bn[name],
                   mode=mode, update_stats=update_stats)
    return relu(x)


def radar_encoder(model: ModelParams, trace, record=None) -> Tensor:
    """(N, 1, 256, 4) normalized trace -> (N, 4, 4, C_latent)."""
    x = as_tensor(trace)
    if x.ndim != 4 or x.shape[1:] != RADAR_SHAPE:
        raise ShapeError(f"radar input must be (N,)+{RADAR_SHAPE}, got {x.shape}")
    p = model.params
    strides = _RADAR_STRIDES
    for i in (1, 2):
        x = conv_lstm1d(x, p[f"radar.lstm{i}.kx"], p[f"radar.lstm{i}.kh"],
                        p[f"radar.lstm{i}.b"], stride=strides[i - 1],
                        return_sequences=(i == 1))
        _note(record, f"radar.lstm{i}", x)
    for i in (1, 2, 3):
        x = relu(conv1d(x, p[f"radar.conv{i}.k"], stride=strides[i + 1]) + p[f"radar.conv{i}.b"])
        _note(record, f"radar.conv{i}", x)
    n, length, ch = x.shape
    gh, gw = LATENT_GRID
    if length * ch != gh * gw * model.config.latent_channels:
        raise ShapeError(f"radar feature {length}x{ch} cannot reshape to latent grid")
    x = reshape(x, (n, gh, gw, model.config.latent_channels))
    _note(record, "radar.latent", x)
    return x


def tof_encoder(model: ModelParams, frame, record=None) -> Tensor:
    """(N, H, W, 1) preprocessed depth -> (N, 4, 4, C_latent)."""
    x = as_tensor(frame)
    h, w = model.config.depth_resolution
    if x.ndim != 4 or x.shape[1:] != (h, w, 1):
        raise ShapeError(f"depth input must be (N, {h}, {w}, 1), got {x.shape}")
    p = model.params
    for i, stride in enumerate(model.config.tof_strides, 1):
        x = relu(conv2d(x, p[f"tof.conv{i}.k"], stride=stride) + p[f"tof.conv{i}.b"])
        _note(record, f"tof.conv{i}", x)
    _note(record, "tof.latent", x)
    return x


def dfm_block(model: ModelParams, fused, mode="infer", rng=None, record=None,
              update_stats=None) -> Tensor:
    """Deep feature magnification over the fused (N, 4, 4, 2C) latent."""
    _check_mode(mode)
    x = as_tensor(fused)
    cfg = model.config
    want = (*LATENT_GRID, cfg.fused_channels)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"dfm input must be (N,)+{want}, got {x.shape}")
    p = model.params
    for name, kind in _DFM_LAYERS:
        if kind == "depthwise":
            x = depthwise_conv2d(x, p[f"{name}.k"]) + p[f"{name}.b"]
        else:
            dil = (cfg.dfm_dilation,) * 2 if name == "dfm.dil" else (1, 1)
            x = conv2d(x, p[f"{name}.k"], dilation=dil) + p[f"{name}.b"]
        x = _drop(_bn_relu(x, model, name, mode, update_stats), name, cfg, mode, rng)
        _note(record, name, x)
    return x


def fee_block(model: ModelParams, x, prefix, mode="infer", rng=None, record=None,
              update_stats=None) -> Tensor:
    """Consecutive 1x1 and 4x4 same-padded convs; keeps the spatial extent."""
    _check_mode(mode)
    x = as_tensor(x)
    cfg = model.config
    p = model.params
    for layer in (f"{prefix}.c1", f"{prefix}.c2"):
        x = conv2d(x, p[f"{layer}.k"]) + p[f"{layer}.b"]
        x = _drop(_bn_relu(x, model, layer, mode, update_stats), layer, cfg, mode, rng)
    _note(record, prefix, x)
    return x


def decoder(model: ModelParams, latent, mode="infer", rng=None, record=None,
            update_stats=None) -> Tensor:
    """(N, 4, 4, 2C) fused latent -> (N, H, W, 1) sigmoid mask."""
    _check_mode(mode)
    x = as_tensor(latent)
    cfg = model.config
    want = (*LATENT_GRID, cfg.fused_channels)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"decoder input must be (N,)+{want}, got {x.shape}")
    p = model.params
    for s, factor in enumerate(cfg.up_factors, 1):
        x = upsample_nearest(x, factor)
        _note(record, f"dec{s}.up", x)
        x = conv2d(x, p[f"dec{s}.conv.k"]) + p[f"dec{s}.conv.b"]
        x = _bn_relu(x, model, f"dec{s}.conv", mode, update_stats)
        x = fee_block(model, x, f"dec{s}.fee", mode, rng, record, update_stats)
    x = sigmoid(conv2d(x, p["head.k"]) + p["head.b"])
    _note(record, "head", x)
    return x


def forward(model: ModelParams, radar, depth, mode="infer", rng=None, record=None,
            update_stats=None) -> Tensor:
    """Full pipeline: encode both modalities, fuse, magnify, decode.

    ``record``, when a dict, collects intermediate output shapes by layer
    name. ``update_stats=False`` freezes batch-norm running statistics in
    train mode (used by gradient checks).
    """
    _check_mode(mode)
    r = radar_encoder(model, radar, record)
    t = tof_encoder(model, depth, record)
    fused = concat([r, t], 3)
    _note(record, "fused", fused)
    x = dfm_block(model, fused, mode, rng, record, update_stats)
    return decoder(model, x, mode, rng, record, update_stats)
