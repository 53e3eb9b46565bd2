"""Parameter and MAC accounting, the TMS speedup predictor, and a naive
direct-convolution oracle for tests.

MAC figures follow the 1 MAC = 1 "FLOP" convention of the published
complexity numbers; ``as_dict`` also reports the 2-FLOPs-per-MAC count.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import ValidationError
from .graph import LayerNode, ModelGraph, _walk


@dataclass(frozen=True)
class ComplexityReport:
    params_total: Optional[int] = None
    params_per_layer: tuple[tuple[str, int], ...] = ()
    macs_total: Optional[int] = None
    macs_per_layer: tuple[tuple[str, int], ...] = ()
    frames: Optional[int] = None

    def merge(self, other: "ComplexityReport") -> "ComplexityReport":
        return ComplexityReport(
            self.params_total if self.params_total is not None else other.params_total,
            self.params_per_layer or other.params_per_layer,
            self.macs_total if self.macs_total is not None else other.macs_total,
            self.macs_per_layer or other.macs_per_layer,
            self.frames if self.frames is not None else other.frames,
        )

    def as_dict(self) -> dict:
        params = dict(self.params_per_layer)
        macs = dict(self.macs_per_layer)
        names = [n for n, _ in (self.params_per_layer or self.macs_per_layer)]
        out = {
            "params_total": self.params_total,
            "macs_total": self.macs_total,
            "flops_total": None if self.macs_total is None else 2 * self.macs_total,
            "frames": self.frames,
            "per_layer": [
                {"name": n, "params": params.get(n), "macs": macs.get(n)} for n in names
            ],
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def to_text(self) -> str:
        d = self.as_dict()
        width = max([len(r["name"]) for r in d["per_layer"]] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>15}"]
        for r in d["per_layer"]:
            p = "" if r["params"] is None else f"{r['params']:,}"
            m = "" if r["macs"] is None else f"{r['macs']:,}"
            lines.append(f"{r['name']:<{width}}  {p:>12}  {m:>15}")
        lines.append("-" * len(lines[0]))
        if self.params_total is not None:
            lines.append(f"params total: {self.params_total:,} ({self.params_total / 1e6:.2f}M)")
        if self.macs_total is not None:
            lines.append(
                f"MACs (1 MAC = 1 FLOP) at T={self.frames}: {self.macs_total:,} ({self.macs_total / 1e9:.3f}e9); "
                f"2xMACs: {2 * self.macs_total / 1e9:.3f}e9"
            )
        return "\n".join(lines)


def count_params(model: ModelGraph) -> ComplexityReport:
    """Every stored value: weights, biases, pad values, BN gamma/beta/mean/var."""
    per_layer = tuple(
        (node.name, int(sum(a.size for _, a in _walk(node.params, node.name)))) for node in model.nodes
    )
    return ComplexityReport(params_total=sum(n for _, n in per_layer), params_per_layer=per_layer)


def _conv_macs(c: tc.ConvLayer, frames: int) -> int:
    return c.out_channels * (c.in_channels // c.groups) * c.kernel * frames


def node_macs(node: LayerNode, channels: int, frames: int) -> int:
    """MACs of one node given its input channel count (or vector length)."""
    p = node.params
    k = node.kind
    if k == "conv":
        return _conv_macs(p, frames)
    if k == "depthwise":
        return p.channels * p.kernel * frames
    if k == "tms":
        return _conv_macs(p.cm, frames) + sum(b.channels * b.kernel * frames for b in p.branches)
    if k == "parallel":
        return sum(_conv_macs(b, frames) for b in p.branches)
    if k in ("batchnorm", "affine"):
        return channels * frames
    if k == "se":
        # squeeze, two excitation matvecs, rescale
        return channels * frames + 2 * p.bottleneck * p.channels + channels * frames
    if k == "pooling":
        return 2 * channels * frames
    if k == "fc":
        return p.in_features * p.out_features
    return 0


def count_macs(model: ModelGraph, frames: int) -> ComplexityReport:
    if frames < 1:
        raise ValidationError("frames", "must be >= 1")
    per_layer = []
    channels, t = model.input_dim, frames
    for node in model.nodes:
        per_layer.append((node.name, int(node_macs(node, channels, t))))
        p = node.params
        if node.kind in ("conv", "tms", "parallel"):
            channels = p.out_channels
        elif node.kind == "pooling":
            channels, t = 2 * channels, 1
        elif node.kind == "fc":
            channels = p.out_features
    return ComplexityReport(macs_total=sum(n for _, n in per_layer), macs_per_layer=tuple(per_layer), frames=frames)


def analyze(model: ModelGraph, frames: int) -> ComplexityReport:
    return count_params(model).merge(count_macs(model, frames))


def predicted_speedup(
    conventional_kernels: Sequence[int],
    c_channel: int,
    branch_kernels: Sequence[int],
    n_out: int,
    n_in: int,
    frames: int,
) -> tuple[float, float]:
    """(exact, approximate) cost ratio of a dense multi-branch layer to a TMS layer.

    The dense layer runs one ``n_out x n_in`` conv per kernel in
    ``conventional_kernels``; the TMS layer runs one ``c_channel`` conv and
    a depthwise conv per entry of ``branch_kernels``. The approximation
    drops the depthwise term: ``sum(C_k) / c_channel``.
    """
    values = list(conventional_kernels) + list(branch_kernels) + [c_channel, n_out, n_in, frames]
    if not conventional_kernels or not branch_kernels or any(v <= 0 for v in values):
        raise ValidationError("kernels", "all counts must be positive and lists non-empty")
    numerator = sum(n_out * n_in * frames * c for c in conventional_kernels)
    denominator = n_out * n_in * frames * c_channel + sum(n_in * frames * c for c in branch_kernels)
    exact = numerator / denominator
    approx = sum(conventional_kernels) / c_channel
    return exact, approx


ORACLE_MAX_WORK = 2_000_000


def oracle_direct_conv(weight, groups: int, dilation: int, x, bias=None) -> np.ndarray:
    """Literal nested-loop 1-D convolution with explicit zero boundaries.

    Reference for tests only; refuses instances above ``ORACLE_MAX_WORK``
    multiply-adds.
    """
    weight = np.asarray(weight, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_out, n_in_g, kernel = weight.shape
    n_in, frames = x.shape
    if n_out * n_in_g * kernel * frames > ORACLE_MAX_WORK:
        raise ValidationError("size", "instance too large for the direct oracle")
    if n_in != n_in_g * groups:
        raise ValidationError("x.channels", "does not match weight and groups")
    half = (kernel // 2) * dilation
    out_per_group = n_out // groups
    y = [[0.0] * frames for _ in range(n_out)]
    for o in range(n_out):
        g = o // out_per_group
        for t in range(frames):
            acc = 0.0 if bias is None else float(bias[o])
            for i in range(n_in_g):
                c = g * n_in_g + i
                for j in range(kernel):
                    src = t - half + j * dilation
                    if 0 <= src < frames:
                        acc += float(weight[o, i, j]) * float(x[c, src])
            y[o][t] = acc
    return np.array(y)
