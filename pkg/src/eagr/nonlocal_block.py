"""Dense pixel-pairwise attention, the comparison target for the graph block."""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ContractError
from .graph import EagrConfig, EagrParams, build_projection
from .tensor import FlopCounter, Tensor


@dataclass
class NonLocalParams:
    w_theta: Tensor
    b_theta: Tensor
    w_phi: Tensor
    b_phi: Tensor
    w_gamma: Tensor
    b_gamma: Tensor

    @classmethod
    def init(cls, channels, t_dim, rng):
        bound = 1 / np.sqrt(channels)

        def w(cout):
            return Tensor(rng.uniform(-bound, bound, (channels, cout)), requires_grad=True)

        def b(cout):
            return Tensor(np.zeros(cout), requires_grad=True)

        return cls(w(t_dim), b(t_dim), w(t_dim), b(t_dim), w(channels), b(channels))


def nonlocal_forward(x, params, tag="nonlocal", trace=None):
    """``softmax(theta(X) phi(X)^T) gamma(X)`` with no residual."""
    theta = T.conv1x1(x, params.w_theta, params.b_theta, tag=f"{tag}.theta")
    phi = T.conv1x1(x, params.w_phi, params.b_phi, tag=f"{tag}.phi")
    gamma = T.conv1x1(x, params.w_gamma, params.b_gamma, tag=f"{tag}.gamma")
    attn = T.softmax_rows(T.matmul(theta, T.transpose(phi), tag=f"{tag}.affinity"))
    if trace is not None:
        trace["attention"] = attn
    return T.matmul(attn, gamma, tag=f"{tag}.aggregate")


@dataclass(frozen=True)
class FlopRatio:
    measured: Fraction
    analytic: Fraction
    nonlocal_macs: int
    eagr_macs: int


def _vertex_grid(h, w, nv):
    pairs = [(a, nv // a) for a in range(1, nv + 1) if nv % a == 0 and a <= h and nv // a <= w]
    if not pairs:
        raise ContractError(f"{nv} vertices cannot be laid out on a {h}x{w} grid")
    return min(pairs, key=lambda p: abs(p[0] - p[1]))


def attention_flop_ratio(h, w, c, t, nv, seed=0):
    """Measured and predicted ratio of attention-product MACs, dense vs graph.

    Both blocks run on one random input under live counters; the prediction is
    ``HW / Nv``.
    """
    if min(h, w, c, t, nv) < 1:
        raise ContractError("all extents must be positive")
    grid = _vertex_grid(h, w, nv)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((h * w, c)))
    y = Tensor(rng.uniform(0, 1, (h * w, 1)))

    cfg = EagrConfig(t_dim=t, k_dim=t, pool_grid=grid, central_sel=grid)
    eparams = EagrParams.init(max(c, t + 1), cfg, rng)
    if c <= t:
        # the ratio only involves the affinity product; widen phi's input to satisfy T < C
        x = Tensor(np.pad(x.data, ((0, 0), (0, t + 1 - c))))
    with FlopCounter() as fe:
        build_projection(x, y, eparams, cfg, (h, w))
    with FlopCounter() as fn:
        nonlocal_forward(x, NonLocalParams.init(x.shape[1], t, rng))
    a = fn.breakdown["nonlocal.affinity"]
    b = fe.breakdown["eagr.affinity"]
    return FlopRatio(Fraction(a, b), Fraction(h * w, nv), a, b)
