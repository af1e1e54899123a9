"""Edge-aware graph reasoning for segmentation, on a small float64 autodiff engine."""

from .graph import (
    EagrConfig,
    EagrParams,
    build_projection,
    eagr_forward,
    project,
    reason,
    reproject,
    select_central_anchors,
)
from .nonlocal_block import NonLocalParams, attention_flop_ratio, nonlocal_forward
from .tensor import FlopCounter, Tape, Tensor, backward

__version__ = "0.1.0"
