"""Forward-pass primitives for the TMS backbones.

Feature maps are plain ``numpy`` arrays of shape ``(channels, frames)``.
Segment-level vectors (after statistics pooling) are 1-D arrays. All frame
operators use stride 1 and symmetric same-padding, so the frame count never
changes.

Layer types are frozen dataclasses whose arrays are copied and made read-only
at construction, so one layer may be shared by concurrent forwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

FeatureMap = np.ndarray

LEAKY_RELU_SLOPE = 0.01
POOLING_VARIANCE_FLOOR = 1e-10


def _frozen(a, name: str, ndim: int) -> np.ndarray:
    arr = np.array(a)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if arr.ndim != ndim:
        raise ValidationError(name, f"expected a {ndim}-D array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _check_odd(kernel: int, name: str = "kernel") -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ValidationError(name, f"must be a positive odd integer, got {kernel}")


def _check_input(x: np.ndarray, channels: int) -> None:
    if x.ndim != 2:
        raise ValidationError("x", f"expected (channels, frames), got shape {x.shape}")
    if x.shape[0] != channels:
        raise ValidationError("x.channels", f"expected {channels}, got {x.shape[0]}")
    if x.shape[1] < 1:
        raise ValidationError("x.frames", "need at least one frame")


def _per_channel(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    # broadcast a (C,) vector along every trailing axis of x
    return v.reshape(v.shape + (1,) * (x.ndim - 1))


@dataclass(frozen=True)
class ConvLayer:
    """Dense or grouped 1-D convolution.

    ``pad_value`` (one value per input channel) replaces the zero padding when
    set. A BN folded into a conv with kernel > 1 needs it to stay exact at the
    utterance edges.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    groups: int = 1
    dilation: int = 1
    pad_value: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _frozen(self.weight, "weight", 3)
        object.__setattr__(self, "weight", w)
        out_ch, in_per_group, kernel = w.shape
        _check_odd(kernel)
        if self.groups < 1 or out_ch % self.groups:
            raise ValidationError("groups", f"{self.groups} does not divide out_channels={out_ch}")
        if self.dilation < 1:
            raise ValidationError("dilation", f"must be >= 1, got {self.dilation}")
        if self.bias is not None:
            b = _frozen(self.bias, "bias", 1)
            if b.shape[0] != out_ch:
                raise ValidationError("bias", f"length {b.shape[0]} != out_channels {out_ch}")
            object.__setattr__(self, "bias", b)
        if self.pad_value is not None:
            p = _frozen(self.pad_value, "pad_value", 1)
            if p.shape[0] != in_per_group * self.groups:
                raise ValidationError("pad_value", f"length {p.shape[0]} != in_channels")
            object.__setattr__(self, "pad_value", p)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @cached_property
    def _matrix(self) -> np.ndarray:
        # (G, out/G, kernel * in/G), columns ordered tap-major to match _im2col
        g = self.groups
        w = self.weight.reshape(g, self.out_channels // g, self.weight.shape[1], self.kernel)
        return np.ascontiguousarray(w.transpose(0, 1, 3, 2)).reshape(
            g, self.out_channels // g, -1
        )


@dataclass(frozen=True)
class DepthwiseBranch:
    """Per-channel temporal convolution: one kernel row per channel."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _frozen(self.weight, "weight", 2)
        _check_odd(w.shape[1])
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = _frozen(self.bias, "bias", 1)
            if b.shape[0] != w.shape[0]:
                raise ValidationError("bias", f"length {b.shape[0]} != channels {w.shape[0]}")
            object.__setattr__(self, "bias", b)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name, 1))
        n = self.gamma.shape[0]
        for name in ("beta", "mean", "var"):
            if getattr(self, name).shape[0] != n:
                raise ValidationError(name, f"length {getattr(self, name).shape[0]} != {n}")
        if np.any(self.var < 0):
            raise ValidationError("var", "variance must be non-negative")
        if not self.eps >= 0:
            raise ValidationError("eps", f"must be non-negative, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) with BN(x) = scale * x + shift, in float64."""
        scale = self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)
        shift = self.beta.astype(np.float64) - self.mean.astype(np.float64) * scale
        return scale, shift


@dataclass(frozen=True)
class Affine:
    """Per-channel ``scale * x + shift``; what a BN becomes once frozen."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scale", _frozen(self.scale, "scale", 1))
        object.__setattr__(self, "shift", _frozen(self.shift, "shift", 1))
        if self.scale.shape != self.shift.shape:
            raise ValidationError("shift", "scale and shift lengths differ")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def from_batchnorm(cls, bn: BatchNormParams) -> "Affine":
        scale, shift = bn.scale_shift()
        return cls(scale, shift)


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    slope: float = LEAKY_RELU_SLOPE

    def __post_init__(self):
        if self.kind not in ("relu", "leaky_relu"):
            raise ValidationError("function", f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class SeBlock:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name, nd in (("w1", 2), ("b1", 1), ("w2", 2), ("b2", 1)):
            object.__setattr__(self, name, _frozen(getattr(self, name), name, nd))
        r, c = self.w1.shape
        if self.w2.shape != (c, r) or self.b1.shape != (r,) or self.b2.shape != (c,):
            raise ValidationError("w2", "excitation shapes do not match channels/bottleneck")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class TmsLayer:
    """Channel-modeling conv followed by a sum of depthwise branches.

    Either stage may carry an identity shortcut; the channel-modeling one
    needs equal in/out channels.
    """

    cm: ConvLayer
    branches: tuple[DepthwiseBranch, ...]
    cm_shortcut: bool = False
    tms_shortcut: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.branches and not self.tms_shortcut:
            raise ValidationError("branches", "need at least one branch or the shortcut")
        for i, br in enumerate(self.branches):
            if br.channels != self.cm.out_channels:
                raise ValidationError(
                    f"branches[{i}]", f"channels {br.channels} != cm out_channels {self.cm.out_channels}"
                )
        if self.cm_shortcut and self.cm.in_channels != self.cm.out_channels:
            raise ValidationError(
                "cm_shortcut",
                f"shortcut needs in_channels == out_channels ({self.cm.in_channels} != {self.cm.out_channels})",
            )

    @property
    def in_channels(self) -> int:
        return self.cm.in_channels

    @property
    def out_channels(self) -> int:
        return self.cm.out_channels


@dataclass(frozen=True)
class ParallelConv:
    """Conventional multi-branch layer: parallel full convolutions, summed."""

    branches: tuple[ConvLayer, ...]
    identity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.branches:
            raise ValidationError("branches", "need at least one branch")
        first = self.branches[0]
        for i, br in enumerate(self.branches[1:], 1):
            if (br.in_channels, br.out_channels) != (first.in_channels, first.out_channels):
                raise ValidationError(f"branches[{i}]", "branch shapes differ")
        if self.identity and first.in_channels != first.out_channels:
            raise ValidationError("identity", "identity branch needs in_channels == out_channels")

    @property
    def in_channels(self) -> int:
        return self.branches[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.branches[0].out_channels


@dataclass(frozen=True)
class FullyConnected:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight, "weight", 2))
        if self.bias is not None:
            b = _frozen(self.bias, "bias", 1)
            if b.shape[0] != self.weight.shape[0]:
                raise ValidationError("bias", "length != out_features")
            object.__setattr__(self, "bias", b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class StatsPooling:
    floor: float = field(default=POOLING_VARIANCE_FLOOR)


# --------------------------------------------------------------------------
# forward operations


def _pad(x: np.ndarray, pad: int, value: Optional[np.ndarray]) -> np.ndarray:
    c, t = x.shape
    out = np.empty((c, t + 2 * pad), dtype=np.result_type(x, value) if value is not None else x.dtype)
    out[:, pad : pad + t] = x
    if value is None:
        out[:, :pad] = 0
        out[:, pad + t :] = 0
    else:
        out[:, :pad] = value[:, None]
        out[:, pad + t :] = value[:, None]
    return out


def conv1d_forward(layer: ConvLayer, x: FeatureMap) -> FeatureMap:
    _check_input(x, layer.in_channels)
    g, k, d = layer.groups, layer.kernel, layer.dilation
    frames = x.shape[1]
    w = layer._matrix
    if k == 1:
        cols = x.reshape(g, layer.in_channels // g, frames)
    else:
        span = d * (k - 1)
        xp = _pad(x, span // 2, layer.pad_value)
        win = sliding_window_view(xp, span + 1, axis=1)[:, :, ::d]  # (C_in, T, k)
        win = win.reshape(g, layer.in_channels // g, frames, k).transpose(0, 3, 1, 2)
        cols = np.ascontiguousarray(win).reshape(g, -1, frames)
    y = np.matmul(w, cols).reshape(layer.out_channels, frames)
    if layer.bias is not None:
        y += layer.bias[:, None]
    return y


def depthwise_forward(branch: DepthwiseBranch, x: FeatureMap) -> FeatureMap:
    _check_input(x, branch.channels)
    k = branch.kernel
    frames = x.shape[1]
    w = branch.weight
    xp = _pad(x, k // 2, None) if k > 1 else x
    y = xp[:, 0:frames] * w[:, 0:1]
    if k > 1:
        tmp = np.empty_like(y)
        for j in range(1, k):
            np.multiply(xp[:, j : j + frames], w[:, j : j + 1], out=tmp)
            y += tmp
    if branch.bias is not None:
        y += branch.bias[:, None]
    return y


def batchnorm_forward(bn: BatchNormParams, x: np.ndarray) -> np.ndarray:
    if x.shape[0] != bn.channels:
        raise ValidationError("x.channels", f"expected {bn.channels}, got {x.shape[0]}")
    scale, shift = bn.scale_shift()
    return x * _per_channel(scale.astype(x.dtype), x) + _per_channel(shift.astype(x.dtype), x)


def affine_forward(aff: Affine, x: np.ndarray) -> np.ndarray:
    if x.shape[0] != aff.channels:
        raise ValidationError("x.channels", f"expected {aff.channels}, got {x.shape[0]}")
    return x * _per_channel(aff.scale, x) + _per_channel(aff.shift, x)


def activation(act: Activation, x: np.ndarray) -> np.ndarray:
    if act.kind == "relu":
        return np.maximum(x, 0)
    return np.maximum(x, x * np.asarray(act.slope, dtype=x.dtype))


def tms_forward(layer: TmsLayer, x: FeatureMap) -> FeatureMap:
    y = conv1d_forward(layer.cm, x)
    if layer.cm_shortcut:
        y += x
    out = y.copy() if layer.tms_shortcut else None
    for br in layer.branches:
        z = depthwise_forward(br, y)
        if out is None:
            out = z
        else:
            out += z
    return out


def parallel_forward(layer: ParallelConv, x: FeatureMap) -> FeatureMap:
    out = conv1d_forward(layer.branches[0], x)
    for br in layer.branches[1:]:
        out += conv1d_forward(br, x)
    if layer.identity:
        out += x
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def se_gate(se: SeBlock, x: FeatureMap) -> np.ndarray:
    _check_input(x, se.channels)
    squeeze = x.mean(axis=1)
    hidden = np.maximum(se.w1 @ squeeze + se.b1, 0)
    return _sigmoid(se.w2 @ hidden + se.b2)


def se_forward(se: SeBlock, x: FeatureMap) -> FeatureMap:
    return x * se_gate(se, x)[:, None]


def statistics_pooling(x: FeatureMap, floor: float = POOLING_VARIANCE_FLOOR) -> np.ndarray:
    """Concatenate per-channel temporal mean and population std."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError("x.frames", "statistics pooling needs at least one frame")
    mean = x.mean(axis=1)
    var = np.maximum(np.mean(np.square(x - mean[:, None]), axis=1), floor)
    return np.concatenate([mean, np.sqrt(var)])


def fc_forward(weight: np.ndarray, bias: Optional[np.ndarray], v: np.ndarray) -> np.ndarray:
    if weight.ndim != 2 or v.shape[0] != weight.shape[1]:
        raise ValidationError("v", f"expected length {weight.shape[1]}, got {v.shape[0]}")
    y = weight @ v
    if bias is not None:
        if bias.shape[0] != weight.shape[0]:
            raise ValidationError("bias", "length != out_features")
        y = y + bias
    return y


LayerParams = Union[
    ConvLayer,
    DepthwiseBranch,
    BatchNormParams,
    Affine,
    Activation,
    TmsLayer,
    ParallelConv,
    SeBlock,
    StatsPooling,
    FullyConnected,
]
