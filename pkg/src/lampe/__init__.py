"""Length-aware multi-grained positional encoding for rotary attention."""

from ._backend import BACKEND
from .pe_map import (
    MappingConfig,
    RelPositionMatrix,
    SelfExtendConfig,
    build_index_pe_matrix,
    build_pe_matrix,
    verify_monotonicity,
)
from .rope_attention import AttentionBatch, RotaryBasis, dense_oracle_attention
from .sigmoid_fit import SigmoidParams, fit_sigmoid, mapping_length
from .three_pass import lampe_attention

__version__ = "0.1.0"
