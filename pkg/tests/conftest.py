import numpy as np
import pytest

from tmsrep import build_model, preset, reparameterize_model

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def built_models():
    """Lazily built (regular, rep) pairs keyed by (preset name, dtype)."""
    cache = {}

    def get(name, dtype=np.float32, seed=0):
        key = (name, np.dtype(dtype).str, seed)
        if key not in cache:
            regular = build_model(preset(name), seed=seed, dtype=dtype)
            cache[key] = (regular, reparameterize_model(regular))
        return cache[key]

    return get


@pytest.fixture
def tiny_config():
    """Small TMS network: two reparam regions, SE and the pooling head."""
    return {
        "input_dim": 6,
        "embedding_dim": 5,
        "layers": [
            {"kind": "conv", "in_channels": 6, "out_channels": 8, "kernel": 3},
            {"kind": "activation", "function": "relu"},
            {"kind": "batchnorm", "channels": 8},
            {"kind": "tms", "in_channels": 8, "out_channels": 8, "c_channel": 3, "groups": 2,
             "branch_kernels": [1, 3, 5], "cm_shortcut": True, "tms_shortcut": True},
            {"kind": "activation", "function": "leaky_relu"},
            {"kind": "batchnorm", "channels": 8},
            {"kind": "tms", "in_channels": 8, "out_channels": 8, "c_channel": 1, "c_base": 3,
             "num_branches": 2},
            {"kind": "activation", "function": "relu"},
            {"kind": "se", "channels": 8, "bottleneck": 4},
            {"kind": "batchnorm", "channels": 8},
            {"kind": "parallel", "in_channels": 8, "out_channels": 8, "kernels": [1, 3], "identity": True,
             "block": 1},
            {"kind": "activation", "function": "relu", "block": 1},
            {"kind": "batchnorm", "channels": 8, "block": 1},
            {"kind": "pooling"},
            {"kind": "fc", "in_features": 16, "out_features": 5},
        ],
    }


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per acceptance criterion."""
    log = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        log.append((criterion, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
