"""Structural re-parameterization: multi-branch graph to single-path graph.

Two stages per region of "TDNN-ReLU-BN" sequential layers:

* external: regroup each BN with the *next* linear layer ("BN-TDNN-ReLU")
  and fold it into that layer's first conv;
* internal: turn shortcuts into identity kernels, zero-pad every branch to
  the largest kernel and sum them.

All arithmetic runs in float64; results are cast back to the model dtype.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import ValidationError
from .graph import LINEAR_KINDS, LayerNode, ModelGraph, forward_node, model_forward

# --------------------------------------------------------------------------
# kernel algebra


def pad_kernel_centered(weight: np.ndarray, target: int) -> np.ndarray:
    """Zero-pad the last (tap) axis symmetrically up to ``target`` taps."""
    k = weight.shape[-1]
    if target < k:
        raise ValidationError("target_kernel", f"{target} is smaller than the current kernel {k}")
    if (target - k) % 2:
        raise ValidationError("target_kernel", f"parity mismatch between {k} and {target}")
    if target == k:
        return weight
    p = (target - k) // 2
    return np.pad(weight, [(0, 0)] * (weight.ndim - 1) + [(p, p)])


def identity_to_conv(channels: int, kernel: int, groups: int = 1) -> tc.ConvLayer:
    """Conv whose forward is the identity: a 1 at (n, n within group, center)."""
    if groups < 1 or channels % groups:
        raise ValidationError("groups", f"{groups} does not divide channels={channels}")
    tc._check_odd(kernel)
    per_group = channels // groups
    w = np.zeros((channels, per_group, kernel))
    n = np.arange(channels)
    w[n, n % per_group, kernel // 2] = 1.0
    return tc.ConvLayer(w, np.zeros(channels), groups=groups)


def identity_to_depthwise(channels: int, kernel: int) -> tc.DepthwiseBranch:
    tc._check_odd(kernel)
    w = np.zeros((channels, kernel))
    w[:, kernel // 2] = 1.0
    return tc.DepthwiseBranch(w, np.zeros(channels))


def _sum_bias(biases) -> Optional[np.ndarray]:
    present = [b for b in biases if b is not None]
    if not present:
        return None
    return np.sum([b.astype(np.float64) for b in present], axis=0) if len(present) > 1 else present[0]


def merge_parallel_convs(
    branches: Sequence[tc.ConvLayer],
    include_identity: bool = False,
    *,
    channels: Optional[int] = None,
    groups: int = 1,
) -> tc.ConvLayer:
    """One conv equal to the sum of ``branches`` (plus x when ``include_identity``)."""
    branches = list(branches)
    if not branches:
        if not include_identity or channels is None:
            raise ValidationError("branches", "nothing to merge")
        return identity_to_conv(channels, 1, groups)
    if len(branches) == 1 and not include_identity:
        return branches[0]
    first = branches[0]
    for i, br in enumerate(branches[1:], 1):
        if (br.in_channels, br.out_channels, br.groups) != (first.in_channels, first.out_channels, first.groups):
            raise ValidationError(f"branches[{i}]", "in/out channels or groups differ")
        if br.dilation != first.dilation:
            raise ValidationError(f"branches[{i}].dilation", "dilations differ")
        if (br.pad_value is None) != (first.pad_value is None) or (
            br.pad_value is not None and not np.array_equal(br.pad_value, first.pad_value)
        ):
            raise ValidationError(f"branches[{i}].pad_value", "pad values differ")
    if include_identity and first.in_channels != first.out_channels:
        raise ValidationError("include_identity", "identity needs in_channels == out_channels")

    k = max(br.kernel for br in branches)
    w = np.sum([pad_kernel_centered(br.weight.astype(np.float64), k) for br in branches], axis=0)
    biases = [br.bias for br in branches]
    if include_identity:
        ident = identity_to_conv(first.out_channels, k, first.groups)
        w = w + ident.weight
        biases.append(ident.bias)
    return tc.ConvLayer(w, _sum_bias(biases), groups=first.groups,
                        dilation=first.dilation, pad_value=first.pad_value)


def merge_depthwise_branches(
    branches: Sequence[tc.DepthwiseBranch],
    include_identity: bool = False,
    *,
    channels: Optional[int] = None,
) -> tc.DepthwiseBranch:
    branches = list(branches)
    if not branches:
        if not include_identity or channels is None:
            raise ValidationError("branches", "nothing to merge")
        return identity_to_depthwise(channels, 1)
    n = branches[0].channels
    for i, br in enumerate(branches[1:], 1):
        if br.channels != n:
            raise ValidationError(f"branches[{i}].channels", f"{br.channels} != {n}")
    k = max(br.kernel for br in branches)
    w = np.sum([pad_kernel_centered(br.weight.astype(np.float64), k) for br in branches], axis=0)
    biases = [br.bias for br in branches]
    if include_identity:
        w[:, k // 2] += 1.0
    return tc.DepthwiseBranch(w, _sum_bias(biases))


def fold_bn_first(bn: tc.BatchNormParams, conv: tc.ConvLayer) -> tc.ConvLayer:
    """Absorb a BN that runs *before* ``conv``: conv'(x) == conv(BN(x)).

    Each input-channel slice of the weight is scaled by ``gamma/sigma`` and
    the bias gains the conv of the weight with the constant BN shift, one
    group at a time. For kernels wider than one tap the padding value is
    moved to the BN pre-image of the old padding, which keeps the edge
    frames exact.
    """
    if bn.channels != conv.in_channels:
        raise ValidationError("bn.channels", f"{bn.channels} != conv in_channels {conv.in_channels}")
    scale, shift = bn.scale_shift()
    g = conv.groups
    out_per_group = conv.out_channels // g
    # (out, in/G): the BN entries seen by each output channel's group
    s = np.repeat(scale.reshape(g, -1), out_per_group, axis=0)
    t = np.repeat(shift.reshape(g, -1), out_per_group, axis=0)
    w = conv.weight.astype(np.float64)
    new_w = w * s[:, :, None]
    new_b = np.einsum("oik,oi->o", w, t)
    if conv.bias is not None:
        new_b += conv.bias
    pad_value = None
    if conv.kernel > 1:
        if np.any(scale == 0):
            raise ValidationError("bn.gamma", "zero BN scale cannot be folded exactly into a kernel > 1")
        old = np.zeros(conv.in_channels) if conv.pad_value is None else conv.pad_value.astype(np.float64)
        pad_value = (old - shift) / scale
    return tc.ConvLayer(new_w, new_b, groups=g, dilation=conv.dilation, pad_value=pad_value)


# --------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class SequentialLayer:
    """One "TDNN-ReLU-BN" layer; after reordering the BN sits in ``pre_bn``."""

    linear: LayerNode
    act: LayerNode
    se: Optional[LayerNode] = None
    bn: Optional[LayerNode] = None
    pre_bn: Optional[LayerNode] = None


@dataclass(frozen=True)
class ReparamRegion:
    layers: tuple[SequentialLayer, ...]
    tail: Optional[LayerNode] = None
    reordered: bool = False


def _parse_layer(nodes: Sequence[LayerNode], i: int) -> tuple[Optional[SequentialLayer], int]:
    n = len(nodes)
    if i + 1 >= n or nodes[i].kind not in LINEAR_KINDS or nodes[i + 1].kind != "activation":
        return None, i
    block = nodes[i].block
    if nodes[i + 1].block != block:
        return None, i
    j = i + 2
    se = bn = None
    if j < n and nodes[j].kind == "se" and nodes[j].block == block:
        se = nodes[j]
        j += 1
    if j < n and nodes[j].kind == "batchnorm" and nodes[j].block == block:
        bn = nodes[j]
        j += 1
    return SequentialLayer(nodes[i], nodes[i + 1], se, bn), j


def find_regions(nodes: Sequence[LayerNode]) -> list:
    """Split ``nodes`` into ReparamRegions and passthrough nodes, in order."""
    out: list = []
    i = 0
    while i < len(nodes):
        layer, j = _parse_layer(nodes, i)
        if layer is None:
            out.append(nodes[i])
            i += 1
            continue
        layers = [layer]
        while layers[-1].bn is not None:
            nxt, k = _parse_layer(nodes, j)
            if nxt is None or nxt.linear.block != layer.linear.block:
                break
            layers.append(nxt)
            j = k
        out.append(ReparamRegion(tuple(layers)))
        i = j
    return out


def _check_region(region: ReparamRegion) -> None:
    for idx, layer in enumerate(region.layers):
        p = layer.linear.params
        if idx > 0 and layer.linear.kind == "tms" and p.in_channels != p.out_channels:
            raise ValidationError(
                f"{layer.linear.name}.in_channels",
                f"BN reordering needs equal in/out channels inside a region ({p.in_channels} != {p.out_channels})",
            )


def cs_rep_reorder(region: ReparamRegion) -> ReparamRegion:
    """Regroup "TDNN-ReLU-BN" layers as "BN-TDNN-ReLU".

    BN_{j-1} becomes the head of layer j; the last BN becomes the region
    tail. The sequence of operations applied to an input is unchanged.
    """
    if region.reordered:
        raise ValidationError("region", "already reordered")
    _check_region(region)
    layers = []
    prev_bn = region.layers[0].pre_bn
    for layer in region.layers:
        layers.append(dataclasses.replace(layer, pre_bn=prev_bn, bn=None))
        prev_bn = layer.bn
    return ReparamRegion(tuple(layers), tail=prev_bn, reordered=True)


def region_forward(region: ReparamRegion, x: np.ndarray) -> np.ndarray:
    for layer in region.layers:
        for node in (layer.pre_bn, layer.linear, layer.act, layer.se, layer.bn):
            if node is not None:
                x = forward_node(node, x)
    if region.tail is not None:
        x = forward_node(region.tail, x)
    return x


def _with_bias(conv: tc.ConvLayer) -> tc.ConvLayer:
    if conv.bias is not None:
        return conv
    return dataclasses.replace(conv, bias=np.zeros(conv.out_channels))


def _f64(obj):
    return dataclasses.replace(obj, **{
        f.name: getattr(obj, f.name).astype(np.float64)
        for f in dataclasses.fields(obj)
        if isinstance(getattr(obj, f.name), np.ndarray)
    })


def reparam_linear(node: LayerNode, pre_bn: Optional[tc.BatchNormParams]) -> list[LayerNode]:
    """Single-path replacement nodes for one conv / parallel / TMS node."""
    p = node.params
    bn = _f64(pre_bn) if pre_bn is not None else None
    if node.kind == "conv":
        conv = _f64(p)
        if bn is not None:
            conv = fold_bn_first(bn, conv)
        return [LayerNode("conv", node.name, _with_bias(conv), node.block)]
    if node.kind == "parallel":
        conv = merge_parallel_convs([_f64(b) for b in p.branches], p.identity)
        if bn is not None:
            conv = fold_bn_first(bn, conv)
        return [LayerNode("conv", node.name, _with_bias(conv), node.block)]
    if node.kind == "tms":
        cm = merge_parallel_convs([_f64(p.cm)], p.cm_shortcut)
        if bn is not None:
            cm = fold_bn_first(bn, cm)
        dw = merge_depthwise_branches([_f64(b) for b in p.branches], p.tms_shortcut, channels=p.out_channels)
        if dw.bias is None:
            dw = dataclasses.replace(dw, bias=np.zeros(dw.channels))
        return [
            LayerNode("conv", f"{node.name}.cm", _with_bias(cm), node.block),
            LayerNode("depthwise", f"{node.name}.dw", dw, node.block),
        ]
    raise ValidationError("kind", f"{node.kind} is not a linear layer")


def reparameterize_region(region: ReparamRegion) -> list[LayerNode]:
    if not region.reordered:
        region = cs_rep_reorder(region)
    out: list[LayerNode] = []
    for layer in region.layers:
        pre = layer.pre_bn.params if layer.pre_bn is not None else None
        out += reparam_linear(layer.linear, pre)
        out.append(layer.act)
        if layer.se is not None:
            out.append(layer.se)
    if region.tail is not None:
        t = region.tail
        out.append(LayerNode("affine", t.name, tc.Affine.from_batchnorm(t.params), t.block))
    return out


def reparameterize_model(model: ModelGraph) -> ModelGraph:
    """Convert a regular graph into its single-path equivalent."""
    if model.topology != "regular":
        raise ValidationError("topology", f"expected a regular graph, got {model.topology!r}")
    dtype = model.dtype
    nodes: list[LayerNode] = []
    for item in find_regions(model.nodes):
        if isinstance(item, ReparamRegion):
            nodes += reparameterize_region(item)
        elif item.kind in ("tms", "parallel"):
            nodes += reparam_linear(item, None)
        else:
            nodes.append(item)
    rep = ModelGraph(tuple(nodes), model.config, "rep", model.seed, model.format_version)
    return rep.astype(dtype)


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance

    def as_dict(self) -> dict:
        return {**dataclasses.asdict(self), "passed": self.passed}


def verify_equivalence(
    a: ModelGraph, b: ModelGraph, trials: int = 100, frames: int = 300,
    tol: float = 1e-4, seed: int = 0,
) -> EquivalenceReport:
    """Compare embeddings of two graphs on ``trials`` seeded random inputs."""
    if (a.input_dim, a.embedding_dim) != (b.input_dim, b.embedding_dim):
        raise ValidationError("model", "input/embedding dimensions differ")
    rng = np.random.Generator(np.random.PCG64(seed))
    max_abs = max_rel = 0.0
    for _ in range(trials):
        x = rng.standard_normal((a.input_dim, frames))
        ya = model_forward(a, x).astype(np.float64)
        yb = model_forward(b, x).astype(np.float64)
        diff = float(np.max(np.abs(ya - yb)))
        max_abs = max(max_abs, diff)
        max_rel = max(max_rel, diff / max(float(np.max(np.abs(ya))), 1e-30))
    return EquivalenceReport(trials, max_abs, max_rel, tol)
