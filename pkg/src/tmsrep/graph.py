"""Model configuration, deterministic builder and end-to-end forward."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

import jsonschema
import numpy as np

from . import tensor as tc
from .errors import ValidationError

FORMAT_VERSION = 1

FRAME_KINDS = ("conv", "depthwise", "tms", "parallel", "se")
LINEAR_KINDS = ("conv", "tms", "parallel")

_POS = {"type": "integer", "minimum": 1}
_ODD = {"type": "integer", "minimum": 1, "not": {"multipleOf": 2}}
_COMMON = {"kind": {}, "name": {"type": "string", "minLength": 1}, "block": {"type": "integer"}}


def _layer_schema(kind: str, required: list[str], props: dict) -> dict:
    return {
        "if": {"properties": {"kind": {"const": kind}}},
        "then": {
            "required": required,
            "properties": {**_COMMON, **props},
            "additionalProperties": False,
        },
    }


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["input_dim", "embedding_dim", "layers"],
    "additionalProperties": False,
    "properties": {
        "input_dim": _POS,
        "embedding_dim": _POS,
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {
                        "enum": [
                            "conv", "depthwise", "batchnorm", "activation",
                            "tms", "parallel", "se", "pooling", "fc",
                        ]
                    }
                },
                "allOf": [
                    _layer_schema("conv", ["in_channels", "out_channels", "kernel"], {
                        "in_channels": _POS, "out_channels": _POS, "kernel": _ODD,
                        "groups": _POS, "dilation": _POS, "bias": {"type": "boolean"},
                    }),
                    _layer_schema("tms", ["in_channels", "out_channels"], {
                        "in_channels": _POS, "out_channels": _POS, "c_channel": _ODD,
                        "groups": _POS, "dilation": _POS, "c_base": _POS, "num_branches": _POS,
                        "branch_kernels": {"type": "array", "items": _ODD, "minItems": 1},
                        "cm_shortcut": {"type": "boolean"}, "tms_shortcut": {"type": "boolean"},
                        "bias": {"type": "boolean"},
                    }),
                    _layer_schema("parallel", ["in_channels", "out_channels", "kernels"], {
                        "in_channels": _POS, "out_channels": _POS, "groups": _POS,
                        "kernels": {"type": "array", "items": _ODD, "minItems": 1},
                        "identity": {"type": "boolean"}, "bias": {"type": "boolean"},
                    }),
                    _layer_schema("depthwise", ["channels", "kernel"], {
                        "channels": _POS, "kernel": _ODD, "bias": {"type": "boolean"},
                    }),
                    _layer_schema("batchnorm", ["channels"], {
                        "channels": _POS, "eps": {"type": "number", "exclusiveMinimum": 0},
                    }),
                    _layer_schema("activation", ["function"], {
                        "function": {"enum": ["relu", "leaky_relu"]},
                        "slope": {"type": "number"},
                    }),
                    _layer_schema("se", ["channels"], {"channels": _POS, "bottleneck": _POS}),
                    _layer_schema("pooling", [], {}),
                    _layer_schema("fc", ["in_features", "out_features"], {
                        "in_features": _POS, "out_features": _POS, "bias": {"type": "boolean"},
                    }),
                ],
            },
        },
    },
}

_DEFAULTS = {
    "conv": {"groups": 1, "dilation": 1, "bias": True},
    "tms": {
        "c_channel": 1, "groups": 1, "dilation": 1, "c_base": 3, "num_branches": 4,
        "cm_shortcut": False, "tms_shortcut": False, "bias": True,
    },
    "parallel": {"groups": 1, "identity": False, "bias": True},
    "depthwise": {"bias": True},
    "batchnorm": {"eps": 1e-5},
    "activation": {"slope": tc.LEAKY_RELU_SLOPE},
    "se": {"bottleneck": 128},
    "pooling": {},
    "fc": {"bias": True},
}


def default_branch_kernels(c_base: int, num_branches: int) -> list[int]:
    """Branch sizes ``c_base + 2(k - 2)`` for k = 1..K, dropping sizes below 1."""
    return [c_base + 2 * (k - 2) for k in range(1, num_branches + 1) if c_base + 2 * (k - 2) >= 1]


@dataclass(frozen=True)
class TmsLayerSpec:
    in_channels: int
    out_channels: int
    c_channel: int = 1
    groups: int = 1
    c_base: int = 3
    num_branches: int = 4
    branch_kernels: Optional[tuple[int, ...]] = None
    cm_shortcut: bool = False
    tms_shortcut: bool = False
    dilation: int = 1

    @classmethod
    def from_entry(cls, entry: dict) -> "TmsLayerSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in entry.items() if k in names}
        if kw.get("branch_kernels") is not None:
            kw["branch_kernels"] = tuple(kw["branch_kernels"])
        return cls(**kw)

    def kernels(self) -> tuple[int, ...]:
        if self.branch_kernels is not None:
            return self.branch_kernels
        return tuple(default_branch_kernels(self.c_base, self.num_branches))


@dataclass(frozen=True)
class LayerNode:
    kind: str
    name: str
    params: Any
    block: int = 0


@dataclass(frozen=True)
class ModelGraph:
    nodes: tuple[LayerNode, ...]
    config: dict
    topology: str = "regular"
    seed: Optional[int] = None
    format_version: int = FORMAT_VERSION

    @property
    def input_dim(self) -> int:
        return self.config["input_dim"]

    @property
    def embedding_dim(self) -> int:
        return self.config["embedding_dim"]

    @property
    def config_hash(self) -> bytes:
        return config_hash(self.config)

    @property
    def dtype(self) -> np.dtype:
        for _, arr in named_arrays(self):
            return arr.dtype
        return np.dtype(np.float32)

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def astype(self, dtype) -> "ModelGraph":
        dtype = np.dtype(dtype)
        return map_arrays(self, lambda _, a: a.astype(dtype))


# --------------------------------------------------------------------------
# config handling


def canonical_config_text(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> bytes:
    return hashlib.sha256(canonical_config_text(config).encode("utf-8")).digest()


def validate_config(config: dict) -> dict:
    """Check schema and channel flow; return the config with defaults filled in.

    Raises ValidationError before anything is allocated.
    """
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "config"
        raise ValidationError(path, exc.message) from None

    layers = []
    seen = set()
    channels = config["input_dim"]
    pooled = False
    for i, raw in enumerate(config["layers"]):
        kind = raw["kind"]
        entry = {**_DEFAULTS[kind], **raw}
        entry.setdefault("name", f"{i:02d}.{kind}")
        entry.setdefault("block", 0)
        where = f"layers.{i}"
        if entry["name"] in seen:
            raise ValidationError(f"{where}.name", f"duplicate layer name {entry['name']!r}")
        seen.add(entry["name"])

        if kind in FRAME_KINDS and pooled:
            raise ValidationError(where, f"{kind} layer after pooling")
        if kind == "fc" and not pooled:
            raise ValidationError(where, "fc layer before pooling")

        if kind in LINEAR_KINDS:
            if entry["in_channels"] != channels:
                raise ValidationError(
                    f"{where}.in_channels", f"expected {channels} from the previous layer, got {entry['in_channels']}"
                )
            g = entry["groups"]
            if entry["in_channels"] % g or entry["out_channels"] % g:
                raise ValidationError(f"{where}.groups", f"{g} does not divide in/out channels")
            same = entry["in_channels"] == entry["out_channels"]
            if kind == "tms":
                if entry["cm_shortcut"] and not same:
                    raise ValidationError(f"{where}.cm_shortcut", "shortcut requires in_channels == out_channels")
                tms = TmsLayerSpec.from_entry(entry)
                if not tms.kernels() and not entry["tms_shortcut"]:
                    raise ValidationError(f"{where}.branch_kernels", "no usable branch kernels")
                entry["branch_kernels"] = list(tms.kernels())
            if kind == "parallel" and entry["identity"] and not same:
                raise ValidationError(f"{where}.identity", "identity branch requires in_channels == out_channels")
            channels = entry["out_channels"]
        elif kind in ("depthwise", "batchnorm", "se"):
            if entry["channels"] != channels:
                raise ValidationError(f"{where}.channels", f"expected {channels}, got {entry['channels']}")
        elif kind == "pooling":
            if pooled:
                raise ValidationError(where, "second pooling layer")
            pooled = True
            channels *= 2
        elif kind == "fc":
            if entry["in_features"] != channels:
                raise ValidationError(f"{where}.in_features", f"expected {channels}, got {entry['in_features']}")
            channels = entry["out_features"]
        layers.append(entry)

    if not pooled:
        raise ValidationError("layers", "model has no pooling layer")
    if channels != config["embedding_dim"]:
        raise ValidationError("embedding_dim", f"layers produce {channels}, config says {config['embedding_dim']}")
    return {"input_dim": config["input_dim"], "embedding_dim": config["embedding_dim"], "layers": layers}


# --------------------------------------------------------------------------
# generic traversal over the arrays held by a graph


def _walk(obj, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif isinstance(obj, tuple):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def named_arrays(model: ModelGraph) -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(name, array)`` for every stored tensor, in node order."""
    for node in model.nodes:
        yield from _walk(node.params, node.name)


def _map(obj, prefix: str, fn: Callable[[str, np.ndarray], np.ndarray]):
    if isinstance(obj, np.ndarray):
        return fn(prefix, obj)
    if isinstance(obj, tuple):
        return tuple(_map(item, f"{prefix}.{i}", fn) for i, item in enumerate(obj))
    if dataclasses.is_dataclass(obj):
        changes = {
            f.name: _map(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, fn)
            for f in dataclasses.fields(obj)
        }
        return dataclasses.replace(obj, **changes)
    return obj


def map_arrays(model: ModelGraph, fn: Callable[[str, np.ndarray], np.ndarray]) -> ModelGraph:
    nodes = tuple(dataclasses.replace(n, params=_map(n.params, n.name, fn)) for n in model.nodes)
    return dataclasses.replace(model, nodes=nodes)


# --------------------------------------------------------------------------
# building


class _Init:
    """Per-tensor PCG64 streams: tensor ``i`` draws from ``SeedSequence(seed, spawn_key=(i,))``."""

    def __init__(self, seed: int):
        self.seed = seed
        self.index = 0

    def rng(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.index,))
        self.index += 1
        return np.random.Generator(np.random.PCG64(ss))

    def uniform(self, shape, fan_in: int) -> np.ndarray:
        bound = np.sqrt(1.0 / fan_in)
        return self.rng().uniform(-bound, bound, size=shape)

    def range(self, shape, lo: float, hi: float) -> np.ndarray:
        return self.rng().uniform(lo, hi, size=shape)


def _make_conv(init: _Init, cin, cout, kernel, groups, dilation, bias) -> tc.ConvLayer:
    fan_in = (cin // groups) * kernel
    w = init.uniform((cout, cin // groups, kernel), fan_in)
    b = init.uniform((cout,), fan_in) if bias else None
    return tc.ConvLayer(w, b, groups=groups, dilation=dilation)


def _make_params(entry: dict, init: _Init):
    kind = entry["kind"]
    if kind == "conv":
        return _make_conv(init, entry["in_channels"], entry["out_channels"], entry["kernel"],
                          entry["groups"], entry["dilation"], entry["bias"])
    if kind == "tms":
        cm = _make_conv(init, entry["in_channels"], entry["out_channels"], entry["c_channel"],
                        entry["groups"], entry["dilation"], entry["bias"])
        branches = []
        for k in entry["branch_kernels"]:
            w = init.uniform((entry["out_channels"], k), k)
            b = init.uniform((entry["out_channels"],), k) if entry["bias"] else None
            branches.append(tc.DepthwiseBranch(w, b))
        return tc.TmsLayer(cm, tuple(branches), entry["cm_shortcut"], entry["tms_shortcut"])
    if kind == "parallel":
        convs = tuple(
            _make_conv(init, entry["in_channels"], entry["out_channels"], k, entry["groups"], 1, entry["bias"])
            for k in entry["kernels"]
        )
        return tc.ParallelConv(convs, entry["identity"])
    if kind == "depthwise":
        k, c = entry["kernel"], entry["channels"]
        return tc.DepthwiseBranch(init.uniform((c, k), k), init.uniform((c,), k) if entry["bias"] else None)
    if kind == "batchnorm":
        c = entry["channels"]
        # running statistics are replaced during calibration
        return tc.BatchNormParams(init.range(c, 0.8, 1.2), init.range(c, -0.2, 0.2),
                                  np.zeros(c), np.ones(c), entry["eps"])
    if kind == "activation":
        return tc.Activation(entry["function"], entry["slope"])
    if kind == "se":
        c, r = entry["channels"], entry["bottleneck"]
        return tc.SeBlock(init.uniform((r, c), c), init.uniform((r,), c),
                          init.uniform((c, r), r), init.uniform((c,), r))
    if kind == "pooling":
        return tc.StatsPooling()
    if kind == "fc":
        fi, fo = entry["in_features"], entry["out_features"]
        return tc.FullyConnected(init.uniform((fo, fi), fi), init.uniform((fo,), fi) if entry["bias"] else None)
    raise ValidationError("kind", f"unknown layer kind {kind!r}")


CALIBRATION_UTTERANCES = 4
CALIBRATION_FRAMES = 200
CALIBRATION_VAR_FLOOR = 1e-2


def _calibrate(nodes: list[LayerNode], input_dim: int, seed: int) -> list[LayerNode]:
    """Set BN running statistics from a seeded pass of random utterances.

    Without this, untrained weights shrink activations layer after layer and
    every downstream comparison turns trivially small.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2**32 - 1,))))
    xs = [rng.standard_normal((input_dim, CALIBRATION_FRAMES)) for _ in range(CALIBRATION_UTTERANCES)]
    out = []
    for node in nodes:
        if node.kind == "batchnorm":
            if xs[0].ndim == 2:
                stacked = np.concatenate(xs, axis=1)
            else:
                stacked = np.stack(xs, axis=1)
            p = node.params
            node = dataclasses.replace(node, params=tc.BatchNormParams(
                p.gamma, p.beta, stacked.mean(axis=1),
                np.maximum(stacked.var(axis=1), CALIBRATION_VAR_FLOOR), p.eps,
            ))
        xs = [forward_node(node, x) for x in xs]
        out.append(node)
    return out


def build_model(config: dict, seed: int = 0, dtype=np.float32, calibrate: bool = True) -> ModelGraph:
    """Build a regular (multi-branch) graph with seeded weights.

    Identical ``(config, seed)`` pairs give bit-identical weights. Weights and
    biases are uniform in ``[-b, b]`` with ``b = sqrt(1 / fan_in)``.
    """
    if seed < 0:
        raise ValidationError("seed", "must be an unsigned integer")
    cfg = validate_config(config)
    init = _Init(seed)
    nodes = [
        LayerNode(e["kind"], e["name"], _make_params(e, init), e["block"]) for e in cfg["layers"]
    ]
    if calibrate:
        nodes = _calibrate(nodes, cfg["input_dim"], seed)
    graph = ModelGraph(tuple(nodes), cfg, "regular", seed)
    return graph.astype(dtype)


# --------------------------------------------------------------------------
# forward


def _fc(p: tc.FullyConnected, x):
    return tc.fc_forward(p.weight, p.bias, x)


FORWARD: dict[str, Callable] = {
    "conv": tc.conv1d_forward,
    "depthwise": tc.depthwise_forward,
    "batchnorm": tc.batchnorm_forward,
    "affine": tc.affine_forward,
    "activation": tc.activation,
    "tms": tc.tms_forward,
    "parallel": tc.parallel_forward,
    "se": tc.se_forward,
    "pooling": lambda p, x: tc.statistics_pooling(x, p.floor),
    "fc": _fc,
}


def forward_node(node: LayerNode, x: np.ndarray) -> np.ndarray:
    return FORWARD[node.kind](node.params, x)


def model_forward(model: ModelGraph, features: np.ndarray) -> np.ndarray:
    """Map a ``(input_dim, frames)`` feature map to the embedding vector."""
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[0] != model.input_dim:
        raise ValidationError(
            "features.channels", f"expected ({model.input_dim}, frames), got shape {x.shape}"
        )
    x = x.astype(model.dtype, copy=False)
    for node in model.nodes:
        x = forward_node(node, x)
    return x
