"""Synthetic face-like samples, edge masks, augmentation and dataset folders.

Label maps and edge masks are plain ``uint8`` arrays of shape ``(H, W)``;
images are float64 arrays of shape ``(H, W, 3)`` in ``[0, 1]``.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParseError
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

CLASS_NAMES = ("background", "skin", "l-eye", "r-eye", "l-brow", "r-brow", "nose", "mouth")
NUM_CLASSES = len(CLASS_NAMES)

# merged categories used for the overall F1 score
HELEN_MERGE = (("eyes", (2, 3)), ("brows", (4, 5)), ("nose", (6,)), ("mouth", (7,)))

COLORS = np.array(
    [
        [0.20, 0.25, 0.40],  # background
        [0.85, 0.66, 0.52],  # skin
        [0.25, 0.30, 0.55],  # l-eye
        [0.25, 0.30, 0.55],  # r-eye
        [0.35, 0.22, 0.15],  # l-brow
        [0.35, 0.22, 0.15],  # r-brow
        [0.75, 0.50, 0.42],  # nose
        [0.72, 0.30, 0.33],  # mouth
    ]
)

# (kind, class, centre row, centre col, half-height, half-width) in canvas fractions,
# listed in painting order
SHAPES = (
    ("ellipse", 1, 0.52, 0.50, 0.42, 0.34),
    ("ellipse", 2, 0.44, 0.35, 0.065, 0.09),
    ("ellipse", 3, 0.44, 0.65, 0.065, 0.09),
    ("rect", 4, 0.335, 0.345, 0.028, 0.10),
    ("rect", 5, 0.335, 0.655, 0.028, 0.10),
    ("rect", 6, 0.55, 0.50, 0.09, 0.05),
    ("ellipse", 7, 0.76, 0.50, 0.06, 0.15),
)


def validate_labels(labels, num_classes=NUM_CLASSES):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ContractError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.size and labels.max() >= num_classes:
        raise ContractError(f"label id {int(labels.max())} out of range for {num_classes} classes")
    return labels


def extract_edge_mask(labels):
    """1 where any in-bounds 4-neighbour carries a different class."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    vert = labels[1:, :] != labels[:-1, :]
    horz = labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= vert
    edge[:-1, :] |= vert
    edge[:, 1:] |= horz
    edge[:, :-1] |= horz
    return edge.astype(np.uint8)


@dataclass(frozen=True)
class SynthConfig:
    size: tuple = (32, 32)
    num_classes: int = NUM_CLASSES
    face_jitter: float = 0.03
    part_jitter: float = 0.015
    radius_jitter: float = 0.1
    noise_std: float = 0.08
    seed: int = 0


def layout(cfg, rng):
    """Jittered copy of ``SHAPES`` for one sample."""
    dy, dx = rng.uniform(-cfg.face_jitter, cfg.face_jitter, 2)
    out = []
    for kind, cls, cy, cx, hy, hx in SHAPES:
        jy, jx = rng.uniform(-cfg.part_jitter, cfg.part_jitter, 2)
        sy, sx = rng.uniform(1 - cfg.radius_jitter, 1 + cfg.radius_jitter, 2)
        out.append((kind, cls, cy + dy + jy, cx + dx + jx, hy * sy, hx * sx))
    return out


def rasterize(shapes, size):
    """Paint shapes in order onto a background canvas, sampling pixel centres."""
    h, w = size
    v = ((np.arange(h) + 0.5) / h)[:, None]
    u = ((np.arange(w) + 0.5) / w)[None, :]
    labels = np.zeros((h, w), dtype=np.uint8)
    for kind, cls, cy, cx, hy, hx in shapes:
        if kind == "ellipse":
            inside = ((v - cy) / hy) ** 2 + ((u - cx) / hx) ** 2 <= 1.0
        else:
            inside = (np.abs(v - cy) <= hy) & (np.abs(u - cx) <= hx)
        labels[inside] = cls
    return labels


def synth_sample(cfg, index):
    """Deterministic (image, labels) pair keyed by ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    labels = rasterize(layout(cfg, rng), cfg.size)
    image = COLORS[labels] + rng.normal(0.0, cfg.noise_std, labels.shape + (3,))
    return np.clip(image, 0.0, 1.0), labels


def transform(image, labels, angle_deg, scale):
    """Rotate (counter-clockwise as displayed) and scale about the canvas centre.

    Each output pixel pulls from the inverse-mapped source location: bilinear
    for the image, nearest for labels. Samples falling off the canvas become
    black / background.
    """
    h, w = labels.shape
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = (c * dx - s * dy) / scale + cx
    sy = (s * dx + c * dy) / scale + cy

    ny = np.floor(sy + 0.5).astype(int)
    nx = np.floor(sx + 0.5).astype(int)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    new_labels = np.zeros_like(labels)
    new_labels[inside] = labels[ny[inside], nx[inside]]

    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)))
    new_image = np.zeros_like(image)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yy = np.clip(y0 + oy + 1, 0, h + 1)
            xx = np.clip(x0 + ox + 1, 0, w + 1)
            new_image += (wy * wx)[..., None] * padded[yy, xx]
    return new_image, new_labels


def augment(image, labels, rng):
    """Random rotation in (-30, 30) degrees and scale in (0.75, 1.25)."""
    angle = rng.uniform(-30.0, 30.0)
    scale = rng.uniform(0.75, 1.25)
    return transform(image, labels, angle, scale)


# --------------------------------------------------------------------------
# dataset folders

MANIFEST = "manifest.txt"


def sample_paths(root, index):
    stem = os.path.join(root, f"sample_{index:06d}")
    return stem + "_image.ppm", stem + "_labels.pgm"


def write_dataset(root, cfg, count):
    os.makedirs(root, exist_ok=True)
    for index in range(count):
        image, labels = synth_sample(cfg, index)
        img_path, lbl_path = sample_paths(root, index)
        write_ppm(image, img_path)
        write_pgm(labels, lbl_path)
    with open(os.path.join(root, MANIFEST), "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\n" for i in range(count))


def read_manifest(root):
    path = os.path.join(root, MANIFEST)
    indices = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not line.isdigit():
                raise ParseError(f"{path}:{lineno}: expected a sample index, got {line!r}")
            indices.append(int(line))
    return indices


def load_dataset(root):
    """List of (image, labels) pairs in manifest order."""
    samples = []
    for index in read_manifest(root):
        img_path, lbl_path = sample_paths(root, index)
        samples.append((read_ppm(img_path), read_pgm(lbl_path)))
    return samples
