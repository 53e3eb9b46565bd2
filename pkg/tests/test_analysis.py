import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tmsrep.analysis import (
    ORACLE_MAX_WORK,
    analyze,
    count_macs,
    count_params,
    oracle_direct_conv,
    predicted_speedup,
)
from tmsrep.errors import ValidationError
from tmsrep.graph import build_model
from tmsrep.reparam import reparameterize_model


def single_layer_config(layer, input_dim, out):
    return {
        "input_dim": input_dim,
        "embedding_dim": 2 * out,
        "layers": [layer, {"kind": "pooling"}],
    }


@pytest.fixture
def conv_2_to_3():
    cfg = single_layer_config({"kind": "conv", "in_channels": 2, "out_channels": 3, "kernel": 3}, 2, 3)
    return build_model(cfg, calibrate=False)


class TestCounts:
    def test_conv_params(self, conv_2_to_3):
        assert count_params(conv_2_to_3).params_total == 21

    def test_conv_macs(self, conv_2_to_3):
        report = count_macs(conv_2_to_3, 10)
        assert dict(report.macs_per_layer)["00.conv"] == 180

    def test_grouped_conv_macs(self):
        cfg = single_layer_config(
            {"kind": "conv", "in_channels": 8, "out_channels": 8, "kernel": 3, "groups": 4, "bias": False}, 8, 8)
        model = build_model(cfg, calibrate=False)
        assert count_params(model).params_total == 8 * 2 * 3
        assert dict(count_macs(model, 5).macs_per_layer)["00.conv"] == 8 * 2 * 3 * 5

    def test_tms_macs(self):
        layer = {"kind": "tms", "in_channels": 4, "out_channels": 4, "c_channel": 3, "branch_kernels": [1, 3]}
        model = build_model(single_layer_config(layer, 4, 4), calibrate=False)
        assert dict(count_macs(model, 7).macs_per_layer)["00.tms"] == 4 * 4 * 3 * 7 + 4 * 1 * 7 + 4 * 3 * 7

    def test_head_macs(self):
        cfg = {
            "input_dim": 4, "embedding_dim": 3,
            "layers": [
                {"kind": "batchnorm", "channels": 4},
                {"kind": "se", "channels": 4, "bottleneck": 2},
                {"kind": "pooling"},
                {"kind": "fc", "in_features": 8, "out_features": 3},
            ],
        }
        macs = dict(count_macs(build_model(cfg, calibrate=False), 10).macs_per_layer)
        assert macs == {"00.batchnorm": 40, "01.se": 2 * 40 + 2 * 2 * 4, "02.pooling": 80, "03.fc": 24}

    def test_per_layer_sums_to_total(self, tiny_config):
        report = analyze(build_model(tiny_config, calibrate=False), 50)
        assert report.params_total == sum(n for _, n in report.params_per_layer)
        assert report.macs_total == sum(n for _, n in report.macs_per_layer)

    def test_macs_affine_in_frames(self, tiny_config):
        # frame-level layers scale with T; the head and SE matvecs do not
        model = build_model(tiny_config, calibrate=False)
        f = [count_macs(model, t).macs_total for t in (100, 200, 300)]
        assert f[2] - f[1] == f[1] - f[0] > 0

    def test_frames_must_be_positive(self, tiny_config):
        with pytest.raises(ValidationError):
            count_macs(build_model(tiny_config, calibrate=False), 0)

    def test_rep_counts_fewer_params(self, tiny_config):
        regular = build_model(tiny_config, calibrate=False)
        rep = reparameterize_model(regular)
        assert count_params(rep).params_total < count_params(regular).params_total


class TestReport:
    def test_json_keys(self, tiny_config):
        d = json.loads(analyze(build_model(tiny_config, calibrate=False), 300).to_json())
        assert {"params_total", "macs_total", "flops_total", "frames", "per_layer"} <= set(d)
        assert d["flops_total"] == 2 * d["macs_total"]
        assert {"name", "params", "macs"} == set(d["per_layer"][0])

    def test_text_table(self, tiny_config):
        text = analyze(build_model(tiny_config, calibrate=False), 300).to_text()
        assert "00.conv" in text and "params total" in text and "MACs" in text


class TestPredictor:
    def test_reference_values(self):
        exact, approx = predicted_speedup([1, 3, 5, 7], 3, [1, 3, 5, 7], 512, 512, 300)
        assert exact == pytest.approx(5.278, abs=5e-4)
        assert approx == pytest.approx(16 / 3)

    def test_single_scale_is_about_one(self):
        exact, approx = predicted_speedup([1], 1, [1], 512, 512, 300)
        assert approx == 1.0
        assert exact == pytest.approx(1.0, abs=1e-2)

    def test_converges_to_approx(self):
        gaps = []
        for n in (8, 64, 512, 4096):
            exact, approx = predicted_speedup([1, 3, 5, 7], 3, [1, 3, 5, 7], n, n, 300)
            gaps.append(approx - exact)
        assert all(g > 0 for g in gaps)
        assert gaps == sorted(gaps, reverse=True)

    @given(
        conventional=st.lists(st.integers(1, 11), min_size=1, max_size=5),
        branches=st.lists(st.integers(1, 11), min_size=1, max_size=5),
        c_channel=st.integers(1, 5), n_out=st.integers(1, 1024), n_in=st.integers(1, 1024),
        frames=st.integers(1, 500),
    )
    def test_exact_below_approx(self, conventional, branches, c_channel, n_out, n_in, frames):
        exact, approx = predicted_speedup(conventional, c_channel, branches, n_out, n_in, frames)
        assert exact < approx

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            predicted_speedup([], 3, [1], 8, 8, 10)


class TestOracle:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 5))
        w = np.zeros((2, 2, 3))
        w[0, 0, 1] = w[1, 1, 1] = 1.0
        np.testing.assert_allclose(oracle_direct_conv(w, 1, 1, x), x)

    def test_dilation_literal(self):
        y = oracle_direct_conv(np.array([[[1.0, 0.0, 1.0]]]), 1, 2, np.array([[1.0, 2, 3, 4, 5]]))
        np.testing.assert_array_equal(y, [[3, 4, 6, 2, 3]])

    def test_refuses_large_instance(self):
        w = np.zeros((100, 100, 3))
        with pytest.raises(ValidationError):
            oracle_direct_conv(w, 1, 1, np.zeros((100, ORACLE_MAX_WORK // 30000 + 10)))
