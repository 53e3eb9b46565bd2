import copy

import numpy as np
import pytest

from tmsrep import presets
from tmsrep.errors import ValidationError
from tmsrep.graph import (
    build_model,
    config_hash,
    default_branch_kernels,
    forward_node,
    model_forward,
    named_arrays,
    validate_config,
)


def linear_nodes(model, kind):
    return [n for n in model.nodes if n.kind == kind]


class TestPresets:
    def test_rep_e_structure(self):
        model = build_model(presets.rep_e_tms_config(), calibrate=False)
        tms = linear_nodes(model, "tms")
        kernels = [tuple(b.kernel for b in n.params.branches) for n in tms]
        assert kernels == [(5,), (1, 3, 5, 7), (1, 3, 5, 7), (1, 5, 7, 9)]
        linear = [n for n in model.nodes if n.kind in ("conv", "tms")]
        assert [i for i, n in enumerate(linear, start=1) if n.kind == "tms"] == [1, 3, 5, 7]
        assert len(linear) == 10
        assert linear[-1].params.out_channels == 3 * 512
        assert all(n.params.cm.kernel == 1 for n in tms)

    def test_rep_a_structure(self):
        model = build_model(presets.rep_a_tms_config(), calibrate=False)
        heads = [n for n in linear_nodes(model, "conv") if n.params.kernel > 1]
        assert [n.params.kernel for n in heads] == [3, 3, 5]
        tms = linear_nodes(model, "tms")
        assert len(tms) == 16
        assert {n.params.cm.groups for n in tms} == {8}
        assert {n.params.cm.kernel for n in tms} == {3}
        per_block = {}
        for n in tms:
            per_block.setdefault(n.block, set()).add(tuple(b.kernel for b in n.params.branches))
        assert per_block[1] == {(1, 3, 5, 7)}
        # C_base = 1 leaves only the positive kernels of the default rule
        assert per_block[2] == {(1, 3, 5)}
        assert per_block[4] == {(3, 5, 7, 9)}
        assert len(linear_nodes(model, "se")) == 4
        assert model.embedding_dim == 512

    def test_preset_prefix(self):
        assert presets.preset("rep-e") == presets.rep_e_tms_config()
        with pytest.raises(KeyError):
            presets.preset("rep")
        with pytest.raises(KeyError):
            presets.preset("x-vector")

    @pytest.mark.parametrize("name", sorted(presets.PRESETS))
    def test_presets_validate(self, name):
        cfg = validate_config(presets.preset(name))
        assert cfg["input_dim"] == 161 and cfg["embedding_dim"] == 512


class TestDefaults:
    @pytest.mark.parametrize("c_base, expected", [(3, [1, 3, 5, 7]), (5, [3, 5, 7, 9]), (1, [1, 3, 5])])
    def test_default_kernel_rule(self, c_base, expected):
        assert default_branch_kernels(c_base, 4) == expected

    def test_names_and_defaults_filled(self, tiny_config):
        cfg = validate_config(tiny_config)
        assert cfg["layers"][0]["name"] == "00.conv"
        assert cfg["layers"][0]["groups"] == 1
        assert cfg["layers"][6]["branch_kernels"] == [1, 3]


class TestValidation:
    def test_schema_violation_has_path(self, tiny_config):
        tiny_config["layers"][0]["kernel"] = 2
        with pytest.raises(ValidationError) as exc:
            validate_config(tiny_config)
        assert exc.value.field == "layers.0.kernel"

    def test_unknown_field(self, tiny_config):
        tiny_config["layers"][1]["colour"] = "red"
        with pytest.raises(ValidationError):
            validate_config(tiny_config)

    def test_missing_top_level_key(self, tiny_config):
        del tiny_config["embedding_dim"]
        with pytest.raises(ValidationError):
            validate_config(tiny_config)

    def test_channel_flow(self, tiny_config):
        tiny_config["layers"][3]["in_channels"] = 9
        tiny_config["layers"][3]["cm_shortcut"] = False
        with pytest.raises(ValidationError) as exc:
            validate_config(tiny_config)
        assert exc.value.field == "layers.3.in_channels"

    def test_shortcut_on_unequal_channels(self, tiny_config):
        layers = tiny_config["layers"]
        layers[3]["out_channels"] = 16
        with pytest.raises(ValidationError) as exc:
            validate_config(tiny_config)
        assert exc.value.field == "layers.3.cm_shortcut"

    def test_groups_must_divide(self, tiny_config):
        tiny_config["layers"][3]["groups"] = 3
        with pytest.raises(ValidationError, match="groups"):
            validate_config(tiny_config)

    def test_embedding_dim_mismatch(self, tiny_config):
        tiny_config["embedding_dim"] = 7
        with pytest.raises(ValidationError) as exc:
            validate_config(tiny_config)
        assert exc.value.field == "embedding_dim"

    def test_duplicate_names(self, tiny_config):
        tiny_config["layers"][0]["name"] = "x"
        tiny_config["layers"][1]["name"] = "x"
        with pytest.raises(ValidationError, match="duplicate"):
            validate_config(tiny_config)

    def test_frame_layer_after_pooling(self, tiny_config):
        tiny_config["layers"].insert(-1, {"kind": "activation", "function": "relu"})
        validate_config(tiny_config)  # activations are fine on vectors
        tiny_config["layers"].insert(-1, {"kind": "conv", "in_channels": 16, "out_channels": 16, "kernel": 1})
        with pytest.raises(ValidationError, match="after pooling"):
            validate_config(tiny_config)

    def test_no_pooling(self, tiny_config):
        tiny_config["layers"] = tiny_config["layers"][:3]
        tiny_config["embedding_dim"] = 8
        with pytest.raises(ValidationError, match="pooling"):
            validate_config(tiny_config)

    def test_input_not_mutated(self, tiny_config):
        before = copy.deepcopy(tiny_config)
        validate_config(tiny_config)
        assert tiny_config == before


class TestBuild:
    def test_deterministic(self, tiny_config):
        a = build_model(tiny_config, seed=3)
        b = build_model(tiny_config, seed=3)
        for (na, xa), (nb, xb) in zip(named_arrays(a), named_arrays(b)):
            assert na == nb
            np.testing.assert_array_equal(xa, xb)

    def test_seeds_differ_shapes_match(self, tiny_config):
        a = dict(named_arrays(build_model(tiny_config, seed=1)))
        b = dict(named_arrays(build_model(tiny_config, seed=2)))
        assert a.keys() == b.keys()
        assert all(a[k].shape == b[k].shape for k in a)
        assert not np.array_equal(a["00.conv.weight"], b["00.conv.weight"])

    def test_init_bounds(self, tiny_config):
        model = build_model(tiny_config, seed=0, dtype=np.float64)
        w = model.node("00.conv").params.weight
        assert np.abs(w).max() <= np.sqrt(1 / 18)
        bn = model.node("02.batchnorm").params
        assert np.all((bn.gamma >= 0.8) & (bn.gamma <= 1.2))
        assert np.all(bn.var >= 1e-2)

    def test_dtype(self, tiny_config):
        assert build_model(tiny_config).dtype == np.float32
        assert build_model(tiny_config, dtype=np.float64).dtype == np.float64

    def test_negative_seed(self, tiny_config):
        with pytest.raises(ValidationError):
            build_model(tiny_config, seed=-1)

    def test_config_hash_stable_under_key_order(self, tiny_config):
        reordered = dict(reversed(list(tiny_config.items())))
        assert config_hash(reordered) == config_hash(tiny_config)


class TestForward:
    def test_embedding_length(self, built_models, rng):
        regular, _ = built_models("rep-a-tms-tdnn")
        emb = model_forward(regular, rng.standard_normal((161, 300)))
        assert emb.shape == (512,) and emb.dtype == np.float32

    @pytest.mark.parametrize("frames", [1, 2, 17])
    def test_any_frame_count(self, tiny_config, rng, frames):
        model = build_model(tiny_config)
        assert model_forward(model, rng.standard_normal((6, frames))).shape == (5,)

    def test_single_frame_std_is_floor(self, tiny_config, rng):
        model = build_model(tiny_config, dtype=np.float64)
        h = rng.standard_normal((6, 1))
        for node in model.nodes[:-1]:
            h = forward_node(node, h)
        np.testing.assert_allclose(h[8:], 1e-5)

    def test_input_mismatch(self, tiny_config, rng):
        model = build_model(tiny_config)
        with pytest.raises(ValidationError):
            model_forward(model, rng.standard_normal((5, 10)))

    def test_deterministic(self, tiny_config, rng):
        model = build_model(tiny_config)
        x = rng.standard_normal((6, 30))
        np.testing.assert_array_equal(model_forward(model, x), model_forward(model, x))
