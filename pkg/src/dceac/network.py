"""Convolutional autoencoder with an attention-refined bottleneck.

Encoder: three 3x3 convolutions (ReLU), then a sigmoid-gated 1x1 recalibration
with an identity shortcut, then a 1x1 channel lift to the bottleneck width.
Decoder: transposed convolutions mirroring the encoder, batch norm + ReLU
between stages and a sigmoid output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from dceac.autodiff import ops
from dceac.autodiff.tape import unwrap


@dataclass(frozen=True)
class ArchitectureConfig:
    input_size: int = 128
    input_channels: int = 3
    encoder_filters: tuple = (32, 64, 128)
    encoder_strides: tuple = (2, 2, 1)
    kernel_size: int = 3
    bottleneck_size: int = 32
    channels: int = 256
    attention: bool = True
    n_clusters: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        object.__setattr__(self, "encoder_strides", tuple(int(s) for s in self.encoder_strides))

    def validate(self):
        if len(self.encoder_filters) != len(self.encoder_strides) or not self.encoder_filters:
            raise ValueError("encoder_filters and encoder_strides must be non-empty and equally long")
        if any(s < 1 for s in self.encoder_strides) or any(f < 1 for f in self.encoder_filters):
            raise ValueError("filters and strides must be positive")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        size = self.input_size
        for s in self.encoder_strides:
            if size % s:
                raise ValueError(f"stride {s} does not divide feature size {size}")
            size //= s
        if size != self.bottleneck_size:
            raise ValueError(
                f"encoder strides {self.encoder_strides} map {self.input_size} to {size}, "
                f"not the declared bottleneck {self.bottleneck_size}")
        return self

    def encoder_layers(self):
        """(name, in_channels, out_channels, stride) per encoder convolution."""
        chans = (self.input_channels,) + self.encoder_filters
        return [(f"enc.conv{i + 1}", chans[i], chans[i + 1], s)
                for i, s in enumerate(self.encoder_strides)]

    def decoder_layers(self):
        """(name, in_channels, out_channels, stride, batch_norm) per transposed conv."""
        outs = tuple(reversed(self.encoder_filters[:-1])) + (self.input_channels,)
        ins = (self.channels,) + outs[:-1]
        strides = tuple(reversed(self.encoder_strides))
        last = len(outs) - 1
        return [(f"dec.tconv{i + 1}", ins[i], outs[i], strides[i], i < last)
                for i in range(len(outs))]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["encoder_strides"] = list(self.encoder_strides)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Named trainable weights, batch-norm buffers and (once set) cluster centres."""

    config: ArchitectureConfig
    weights: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    centers: np.ndarray | None = None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def astype(self, dtype):
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}
        return self.replace(weights=cast(self.weights), buffers=cast(self.buffers),
                            centers=None if self.centers is None else self.centers.astype(dtype))

    def arrays(self):
        """Every stored array in canonical order (weights, buffers, centres)."""
        out = dict(self.weights)
        out.update(self.buffers)
        if self.centers is not None:
            out["cluster.centers"] = self.centers
        return out


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(config=None, seed=0, dtype=np.float32):
    """Fresh parameters: zero-mean uniform weights with variance 2/(fan_in+fan_out)."""
    config = (config or ArchitectureConfig()).validate()
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    weights, buffers = {}, {}

    def conv(name, cin, cout, ksize, transpose=False):
        shape = (cin, cout, ksize, ksize) if transpose else (cout, cin, ksize, ksize)
        rf = ksize * ksize
        weights[f"{name}.weight"] = _glorot(rng, shape, cin * rf, cout * rf, dtype)
        weights[f"{name}.bias"] = np.zeros(cout, dtype=dtype)

    for name, cin, cout, _ in config.encoder_layers():
        conv(name, cin, cout, k)
    width = config.encoder_filters[-1]
    if config.attention:
        conv("att.gate", width, width, 1)
    conv("enc.lift", width, config.channels, 1)
    for name, cin, cout, _, bn in config.decoder_layers():
        conv(name, cin, cout, k, transpose=True)
        if bn:
            bn_name = name.replace("tconv", "bn")
            weights[f"{bn_name}.scale"] = np.ones(cout, dtype=dtype)
            weights[f"{bn_name}.shift"] = np.zeros(cout, dtype=dtype)
            buffers[f"{bn_name}.running_mean"] = np.zeros(cout, dtype=dtype)
            buffers[f"{bn_name}.running_var"] = np.ones(cout, dtype=dtype)
    return ModelParams(config, weights, buffers, None)


def attention_gate(pre, gate_weight, gate_bias):
    """pre + pre * sigmoid(conv1x1(pre)): gated recalibration with identity shortcut."""
    gate = ops.sigmoid(ops.conv2d(pre, gate_weight, gate_bias, stride=1, padding=0))
    return ops.add(pre, ops.mul(pre, gate))


def encoder_forward(w, config, x):
    """Encoder on a mapping of (possibly watched) weights; returns the bottleneck tensor."""
    h = x
    for name, _, _, stride in config.encoder_layers():
        h = ops.relu(ops.conv2d(h, w[f"{name}.weight"], w[f"{name}.bias"], stride, "same"))
    if config.attention:
        h = attention_gate(h, w["att.gate.weight"], w["att.gate.bias"])
    return ops.conv2d(h, w["enc.lift.weight"], w["enc.lift.bias"], 1, 0)


def decoder_forward(w, buffers, config, z, training=True):
    """Decoder; returns ``(reconstruction, updated_buffers)``."""
    h = z
    updates = {}
    for name, _, _, stride, bn in config.decoder_layers():
        pad = config.kernel_size // 2
        h = ops.conv_transpose2d(h, w[f"{name}.weight"], w[f"{name}.bias"], stride, pad, stride - 1)
        if bn:
            b = name.replace("tconv", "bn")
            h, (rm, rv) = ops.batch_norm(
                h, w[f"{b}.scale"], w[f"{b}.shift"],
                buffers[f"{b}.running_mean"], buffers[f"{b}.running_var"],
                training=training, momentum=config.bn_momentum, eps=config.bn_eps)
            updates[f"{b}.running_mean"] = rm
            updates[f"{b}.running_var"] = rv
            h = ops.relu(h)
        else:
            h = ops.sigmoid(h)
    return h, updates


def _check_input(config, x):
    shape = np.shape(unwrap(x))
    want = (config.input_channels, config.input_size, config.input_size)
    if len(shape) != 4 or shape[1:] != want:
        raise ValueError(f"expected input N x {want[0]} x {want[1]} x {want[2]}, got {shape}")


def encode(params, x):
    """Bottleneck features N x C x H x W for a batch of images."""
    _check_input(params.config, x)
    return encoder_forward(params.weights, params.config, x).data


def embed(params, x, batch_size=32):
    """Global-average-pooled bottleneck features N x C, computed in batches."""
    x = np.asarray(x)
    _check_input(params.config, x)
    out = [ops.global_avg_pool(encoder_forward(params.weights, params.config, x[i:i + batch_size])).data
           for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.channels), x.dtype)


def decode(params, z, training=False):
    cfg = params.config
    shape = np.shape(unwrap(z))
    want = (cfg.channels, cfg.bottleneck_size, cfg.bottleneck_size)
    if len(shape) != 4 or shape[1:] != want:
        raise ValueError(f"expected bottleneck N x {want[0]} x {want[1]} x {want[2]}, got {shape}")
    r, _ = decoder_forward(params.weights, params.buffers, cfg, z, training=training)
    return r.data


def watch_all(tape, weights, names=None):
    """Register weights on ``tape``; unlisted names pass through as constants."""
    names = set(weights) if names is None else set(names)
    return {k: tape.watch(k, v) if k in names else v for k, v in weights.items()}
