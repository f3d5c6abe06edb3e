"""Sliding-window attention with residue-class dilation.

Library layout:

* ``tensorops`` — dense float32 primitives with explicit backward passes;
* ``neighborhood`` — window/bias index math with border clamping and dilation;
* ``attention`` — windowed multi-head attention (reference + tiled paths,
  backward) and the unrestricted-attention oracle;
* ``rfanalysis`` — receptive-field, FLOP, and parameter accounting, plus a
  Jacobian probe measuring receptive fields on live layers;
* ``model`` — hierarchical / patch-merged / isotropic model families with
  dilation schedules, serialization, and test-time dilation swaps;
* ``data`` / ``train`` — a deterministic synthetic shapes dataset and a plain
  SGD trainer;
* ``cli`` — the ``dina`` command (check, rf, flops, bench, train, eval).
"""

from .errors import (
    ArchiveError, ArgumentError, ConfigError, DimensionError, DinaError,
    InvalidWindowError, NumericError, StateError,
)
from .neighborhood import (
    NeighborhoodSpec, NeighborIndexMap, build_neighbor_map, inverse_neighbor_map,
    max_dilation, neighbor_indices_1d, neighbor_indices_2d, rpb_index,
)
from .attention import (
    AttentionLayerState, na_av, na_backward, na_forward, na_forward_tiled,
    na_forward_traced, na_qk, self_attention_ref,
)
from .model import (
    ModelConfig, build_model, constant_max_schedule, dilation_schedule, forward,
    gradual_schedule, load_weights, preset, save_weights, set_test_time_dilation,
)
from .rfanalysis import LayerKind, RFReport, analytic_rf, empirical_rf, layer_flops, model_flops, model_params

__version__ = "0.1.0"
