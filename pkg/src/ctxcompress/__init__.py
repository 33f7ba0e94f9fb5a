"""Soft context compression over frozen hidden states.

Hidden states are gated across layers into token anchors, allocated to slots
by segmented entropic optimal transport, aggregated and aligned by an MLP.
"""

__version__ = "0.1.0"

from .depth import DepthParams, TokenAnchors, build_anchors, init_depth_params
from .numerics import Rng, effective_rank, softmax
from .slots import CompressorParams, Compression, compress, init_compressor_params
from .states import HiddenStates, SyntheticEncoder, load_states, save_states
from .width import TransmissionPlan, WidthParams, segmented_plan, sinkhorn_plan, window_attention_baseline

__all__ = [
    "Compression", "CompressorParams", "DepthParams", "HiddenStates", "Rng", "SyntheticEncoder",
    "TokenAnchors", "TransmissionPlan", "WidthParams", "build_anchors", "compress", "effective_rank",
    "init_compressor_params", "init_depth_params", "load_states", "save_states", "segmented_plan",
    "sinkhorn_plan", "softmax", "window_attention_baseline",
]
