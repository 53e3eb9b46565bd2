"""Temporal multi-scale (TMS) speaker-embedding networks with structural
re-parameterization on a numpy backend."""
from .analysis import ComplexityReport, analyze, count_macs, count_params, oracle_direct_conv, predicted_speedup
from .bench import BenchStats, run_bench
from .errors import ArchiveError, ConfigHashMismatchError, TruncatedArchiveError, ValidationError
from .graph import LayerNode, ModelGraph, build_model, config_hash, model_forward, validate_config
from .presets import PRESETS, preset
from .reparam import (
    EquivalenceReport,
    cs_rep_reorder,
    find_regions,
    fold_bn_first,
    identity_to_conv,
    identity_to_depthwise,
    merge_depthwise_branches,
    merge_parallel_convs,
    pad_kernel_centered,
    reparameterize_model,
    verify_equivalence,
)
from .serialization import (
    load_embedding,
    load_features,
    load_weights,
    save_embedding,
    save_features,
    save_weights,
)

__version__ = "0.1.0"
