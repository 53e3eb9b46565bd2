"""Embedded configs for the three backbones.

Every frame-level layer is a "TDNN-ReLU-BN" sequential layer. ``block``
bounds the regions the re-parameterizer may fold across.
"""
from __future__ import annotations

import copy

INPUT_DIM = 161
WIDTH = 512
EMBEDDING_DIM = 512


def _seq(layer: dict, act: dict, block: int, se: dict | None = None) -> list[dict]:
    name = layer["name"]
    out = [dict(layer, block=block), dict(act, name=f"{name}.act", block=block)]
    if se is not None:
        out.append(dict(se, name=f"{name}.se", block=block))
    channels = layer["out_channels"]
    out.append({"kind": "batchnorm", "name": f"{name}.bn", "channels": channels, "block": block})
    return out


def _conv(name: str, cin: int, cout: int, kernel: int, dilation: int = 1) -> dict:
    return {
        "kind": "conv",
        "name": name,
        "in_channels": cin,
        "out_channels": cout,
        "kernel": kernel,
        "dilation": dilation,
    }


def _head(embed_in: int, act: dict) -> list[dict]:
    return [
        {"kind": "pooling", "name": "pool"},
        {"kind": "fc", "name": "fc1", "in_features": embed_in, "out_features": EMBEDDING_DIM},
        dict(act, name="fc1.act"),
        {"kind": "batchnorm", "name": "fc1.bn", "channels": EMBEDDING_DIM},
        {"kind": "fc", "name": "fc2", "in_features": EMBEDDING_DIM, "out_features": EMBEDDING_DIM},
    ]


RELU = {"kind": "activation", "function": "relu"}
LEAKY = {"kind": "activation", "function": "leaky_relu", "slope": 0.01}


def e_tdnn_config() -> dict:
    """E-TDNN baseline with dense kernels (dilation stays configurable)."""
    contexts = [5, 1, 3, 1, 3, 1, 3, 1, 1, 1]
    layers: list[dict] = []
    cin = INPUT_DIM
    for i, k in enumerate(contexts, 1):
        cout = 3 * WIDTH if i == len(contexts) else WIDTH
        layers += _seq(_conv(f"tdnn{i}", cin, cout, k), RELU, block=0)
        cin = cout
    layers += _head(2 * cin, RELU)
    return {"input_dim": INPUT_DIM, "embedding_dim": EMBEDDING_DIM, "layers": layers}


def _tms(name, cin, cout, *, c_channel, groups=1, c_base=3, num_branches=4, kernels=None):
    entry = {
        "kind": "tms",
        "name": name,
        "in_channels": cin,
        "out_channels": cout,
        "c_channel": c_channel,
        "groups": groups,
        "c_base": c_base,
        "num_branches": num_branches,
        "cm_shortcut": cin == cout,
        "tms_shortcut": True,
    }
    if kernels is not None:
        entry["branch_kernels"] = list(kernels)
    return entry


def rep_e_tms_config() -> dict:
    """E-TDNN with layers 1, 3, 5 and 7 swapped for TMS-TDNN layers."""
    tms_kernels = {1: [5], 3: [1, 3, 5, 7], 5: [1, 3, 5, 7], 7: [1, 5, 7, 9]}
    layers: list[dict] = []
    cin = INPUT_DIM
    for i in range(1, 11):
        cout = 3 * WIDTH if i == 10 else WIDTH
        if i in tms_kernels:
            ks = tms_kernels[i]
            layer = _tms(f"tms{i}", cin, cout, c_channel=1, num_branches=len(ks), kernels=ks)
        else:
            layer = _conv(f"tdnn{i}", cin, cout, 1)
        layers += _seq(layer, RELU, block=0)
        cin = cout
    layers += _head(2 * cin, RELU)
    return {"input_dim": INPUT_DIM, "embedding_dim": EMBEDDING_DIM, "layers": layers}


def rep_a_tms_config() -> dict:
    """Four SE-gated blocks of a head TDNN plus four grouped TMS-TDNN layers."""
    se = {"kind": "se", "channels": WIDTH, "bottleneck": 128}
    layers: list[dict] = []
    cin = INPUT_DIM
    for b, c_head in enumerate([3, 1, 3, 5], 1):
        layers += _seq(_conv(f"b{b}.head", cin, WIDTH, c_head), LEAKY, block=b)
        for j in range(1, 5):
            layer = _tms(f"b{b}.tms{j}", WIDTH, WIDTH, c_channel=3, groups=8, c_base=c_head)
            layers += _seq(layer, LEAKY, block=b, se=se if j == 4 else None)
        cin = WIDTH
    layers += _seq(_conv("tdnn_out", WIDTH, 3 * WIDTH, 1), LEAKY, block=5)
    layers += _head(6 * WIDTH, LEAKY)
    return {"input_dim": INPUT_DIM, "embedding_dim": EMBEDDING_DIM, "layers": layers}


PRESETS = {
    "e-tdnn": e_tdnn_config,
    "rep-e-tms-tdnn": rep_e_tms_config,
    "rep-a-tms-tdnn": rep_a_tms_config,
}


def preset(name: str) -> dict:
    """Look up a preset by name or unambiguous prefix (``rep-a`` works)."""
    if name in PRESETS:
        return copy.deepcopy(PRESETS[name]())
    matches = [k for k in PRESETS if k.startswith(name)]
    if len(matches) != 1:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[matches[0]]()
