"""Per-vertex response maps from the high-level projection matrix."""

import numpy as np

from .errors import ContractError
from .graph import anchor_indices
from .net import forward
from .tensor import Tensor


def response_map(image, params, cfg, vertex, ablation=None):
    """Row ``vertex`` of the high-level projection matrix, reshaped to its grid."""
    nv = cfg.high_eagr.num_vertices
    if not 0 <= vertex < nv:
        raise ContractError(f"vertex {vertex} out of range for {nv} vertices")
    if not params.has_eagr or ablation == "baseline":
        raise ContractError("response maps need a model with graph blocks")
    trace = {}
    forward(Tensor(image), params, cfg, ablation, trace=trace)
    p = trace["projection.high"].data
    h, w = cfg.grid[0] // 2, cfg.grid[1] // 2
    return p[vertex].reshape(h, w)


def to_gray(response):
    """Min-max normalise to bytes with higher response drawn darker.

    A constant map becomes uniform mid-gray.
    """
    lo, hi = float(response.min()), float(response.max())
    if hi - lo <= 1e-15 * max(1.0, abs(hi)):
        return np.full(response.shape, 128, dtype=np.uint8)
    norm = (response - lo) / (hi - lo)
    return np.rint(255 * (1.0 - norm)).astype(np.uint8)


def vertex_region(shape, grid, sel, vertex):
    """Boolean mask of the pooling bin that seeds ``vertex`` on a map of ``shape``."""
    h, w = shape
    ph, pw = grid
    flat = anchor_indices(grid, sel)[vertex]
    r, c = divmod(flat, pw)
    mask = np.zeros(shape, dtype=bool)
    mask[r * h // ph : (r + 1) * h // ph, c * w // pw : (c + 1) * w // pw] = True
    return mask


def top_decile_overlap(response, region):
    """Fraction of the top-10% response pixels that fall inside ``region``."""
    k = max(1, int(np.ceil(0.1 * response.size)))
    top = np.argsort(response.ravel(), kind="stable")[::-1][:k]
    return float(region.ravel()[top].mean())
