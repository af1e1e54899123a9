"""Edge-aware graph reasoning block.

Pixels are softly assigned to a small set of vertices, the vertex features
are propagated over a learned adjacency with one graph-convolution layer, and
the result is scattered back to the pixel grid and added to the input.

Shapes follow the flattened convention: a feature map is ``HW x C`` and the
spatial extent ``(H, W)`` is passed alongside wherever pooling needs it.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class EagrConfig:
    t_dim: int = 64
    k_dim: int = 128
    pool_grid: tuple = (6, 6)
    central_sel: tuple = (4, 4)
    residual_reasoning: bool = True
    strict_centering: bool = False

    @property
    def num_vertices(self):
        return self.central_sel[0] * self.central_sel[1]

    def validate(self, channels=None):
        (ph, pw), (sh, sw) = self.pool_grid, self.central_sel
        if min(self.t_dim, self.k_dim, ph, pw, sh, sw) < 1:
            raise ContractError(f"non-positive extent in {self}")
        if sh > ph or sw > pw:
            raise DimensionError(f"central selection {self.central_sel} exceeds grid {self.pool_grid}")
        if self.strict_centering and ((ph - sh) % 2 or (pw - sw) % 2):
            raise ContractError("strict centering needs even margins between grid and selection")
        if channels is not None and not self.t_dim < channels:
            raise ContractError(f"t_dim={self.t_dim} must be below the input channel count {channels}")


def _uniform(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class EagrParams:
    w_phi: Tensor
    b_phi: Tensor
    w_theta: Tensor
    b_theta: Tensor
    w_sigma: Tensor
    b_sigma: Tensor
    w_g: Tensor
    adj: Tensor

    NAMES = ("w_phi", "b_phi", "w_theta", "b_theta", "w_sigma", "b_sigma", "w_g", "adj")

    @classmethod
    def init(cls, channels, cfg, rng):
        """Fan-in uniform weights, zero biases, adjacency in [-0.01, 0.01]."""
        cfg.validate(channels)
        t, k, nv = cfg.t_dim, cfg.k_dim, cfg.num_vertices
        return cls(
            w_phi=_uniform(rng, (channels, t), 1 / np.sqrt(channels)),
            b_phi=_zeros(t),
            w_theta=_uniform(rng, (channels, k), 1 / np.sqrt(channels)),
            b_theta=_zeros(k),
            w_sigma=_uniform(rng, (k, channels), 1 / np.sqrt(k)),
            b_sigma=_zeros(channels),
            w_g=_uniform(rng, (k, k), 1 / np.sqrt(k)),
            adj=_uniform(rng, (nv, nv), 0.01),
        )

    def named(self, prefix="eagr.0"):
        return {f"{prefix}.{name}": getattr(self, name) for name in self.NAMES}

    @classmethod
    def from_named(cls, tensors, prefix="eagr.0"):
        return cls(**{name: tensors[f"{prefix}.{name}"] for name in cls.NAMES})


def anchor_indices(grid, sel):
    """Row-major flat indices of the centred ``sel`` block inside ``grid``.

    Odd margins round the offset down.
    """
    (ph, pw), (sh, sw) = grid, sel
    if sh > ph or sw > pw or sh < 1 or sw < 1:
        raise DimensionError(f"selection {sel} does not fit grid {grid}")
    r0, c0 = (ph - sh) // 2, (pw - sw) // 2
    return [(r0 + i) * pw + (c0 + j) for i in range(sh) for j in range(sw)]


def select_central_anchors(pooled, sel):
    """Pick the centred ``Sh x Sw`` block of a ``Ph x Pw x T`` anchor grid as ``Nv x T``."""
    if pooled.ndim != 3:
        raise DimensionError(f"pooled anchors must be Ph x Pw x T, got {pooled.shape}")
    ph, pw, t = pooled.shape
    idx = anchor_indices((ph, pw), sel)
    return T.take(T.reshape(pooled, (ph * pw, t)), idx, axis=0)


def _check_inputs(x, y, hw):
    if x.ndim != 2:
        raise DimensionError(f"feature map must be HW x C, got {x.shape}")
    if hw[0] * hw[1] != x.shape[0]:
        raise DimensionError(f"spatial extent {hw} does not match {x.shape[0]} pixels")
    if y is not None:
        if y.shape != (x.shape[0], 1):
            raise DimensionError(f"edge map must be HW x 1 = {(x.shape[0], 1)}, got {y.shape}")
        if y.data.min() < 0 or y.data.max() > 1:
            raise ContractError("edge map entries must lie in [0, 1]")


def edge_anchors(x, y, params, cfg, hw, tag="eagr"):
    """Edge-weighted anchors ``Nv x T`` and the reduced features ``phi(X)``."""
    _check_inputs(x, y, hw)
    phi = T.conv1x1(x, params.w_phi, params.b_phi, tag=f"{tag}.phi")
    weighted = T.reshape(T.hadamard(phi, y), (hw[0], hw[1], cfg.t_dim))
    pooled = T.adaptive_avg_pool(weighted, cfg.pool_grid)
    return select_central_anchors(pooled, cfg.central_sel), phi


def build_projection(x, y, params, cfg, hw, tag="eagr"):
    """Projection matrix ``Nv x HW``: each row is a softmax over pixels of
    the similarity between one edge-weighted anchor and every pixel's
    reduced feature."""
    anchors, phi = edge_anchors(x, y, params, cfg, hw, tag)
    logits = T.matmul(anchors, T.transpose(phi), tag=f"{tag}.affinity")
    return T.softmax_rows(logits)


def project(p, x, params, tag="eagr"):
    """Vertex features ``P @ theta(X)``, shape ``Nv x K``."""
    if p.ndim != 2 or p.shape[1] != x.shape[0]:
        raise DimensionError(f"projection {p.shape} does not match features {x.shape}")
    theta = T.conv1x1(x, params.w_theta, params.b_theta, tag=f"{tag}.theta")
    return T.matmul(p, theta, tag=f"{tag}.project")


def reason(x_g, params, cfg, tag="eagr"):
    """One graph convolution ``ReLU((I - A) X_G W_G)``, plus ``X_G`` when the
    residual flag is set."""
    nv = x_g.shape[0]
    if params.adj.shape != (nv, nv):
        raise DimensionError(f"adjacency {params.adj.shape} does not match {nv} vertices")
    if params.w_g.shape != (x_g.shape[1], x_g.shape[1]):
        raise DimensionError(f"W_G {params.w_g.shape} does not match vertex features {x_g.shape}")
    laplacian = T.sub(Tensor(np.eye(nv)), params.adj)
    mixed = T.matmul(laplacian, x_g, tag=f"{tag}.reason")
    core = T.relu(T.matmul(mixed, params.w_g, tag=f"{tag}.reason"))
    return T.add(core, x_g) if cfg.residual_reasoning else core


def reproject(p, x_hat_g, x, params, tag="eagr"):
    """``X + sigma(P^T X_hat_G)``."""
    if p.shape != (x_hat_g.shape[0], x.shape[0]):
        raise DimensionError(
            f"projection {p.shape} inconsistent with vertices {x_hat_g.shape} and pixels {x.shape}"
        )
    back = T.matmul(T.transpose(p), x_hat_g, tag=f"{tag}.reproject")
    return T.add(x, T.conv1x1(back, params.w_sigma, params.b_sigma, tag=f"{tag}.sigma"))


def eagr_forward(x, y, params, cfg, hw, reasoning=True, tag="eagr", trace=None):
    """Full block: ``HW x C`` features and ``HW x 1`` edge probabilities in,
    refined ``HW x C`` features out.

    ``reasoning=False`` skips the graph convolution (projection and
    reprojection only). If ``trace`` is a dict, the projection matrix is
    stored under ``"projection"``.
    """
    p = build_projection(x, y, params, cfg, hw, tag)
    x_g = project(p, x, params, tag)
    x_hat = reason(x_g, params, cfg, tag) if reasoning else x_g
    if trace is not None:
        trace["projection"] = p
    return reproject(p, x_hat, x, params, tag)
