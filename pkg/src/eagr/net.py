"""Toy face-parsing network built around two graph reasoning blocks.

encoder -> (low features at 1/2 scale, high features at 1/4 scale)
edge head on low features -> edge logits, edge probability y
each feature map refined by its own graph block using y
high map upsampled, concatenated with low, 1x1 conv -> parsing logits
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .data import validate_labels
from .errors import ContractError, DimensionError, ParseError
from .graph import EagrConfig, EagrParams, eagr_forward
from .tensor import Tensor

ABLATIONS = ("baseline", "no-edge", "no-reasoning", "no-ba")


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 8
    input_size: tuple = (32, 32)
    c1: int = 8
    c_low: int = 16
    c_high: int = 32
    t_low: int = 8
    k_low: int = 16
    t_high: int = 16
    k_high: int = 32
    pool_grid: tuple = (6, 6)
    central_sel: tuple = (4, 4)
    residual_reasoning: bool = True
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    seed: int = 0
    epochs: int = 20
    batch_size: int = 4
    augment: bool = True

    def __post_init__(self):
        h, w = self.input_size
        if h % 4 or w % 4:
            raise ContractError(f"input size {self.input_size} must be divisible by 4")
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ContractError("loss weights must be non-negative")
        self.low_eagr.validate(self.c_low)
        self.high_eagr.validate(self.c_high)

    @property
    def low_eagr(self):
        return EagrConfig(self.t_low, self.k_low, self.pool_grid, self.central_sel, self.residual_reasoning)

    @property
    def high_eagr(self):
        return EagrConfig(self.t_high, self.k_high, self.pool_grid, self.central_sel, self.residual_reasoning)

    @property
    def grid(self):
        """Spatial extent of the logits (half the input)."""
        return self.input_size[0] // 2, self.input_size[1] // 2


def _parse_value(kind, raw):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is tuple:
        parts = raw.lower().split("x")
        if len(parts) != 2:
            raise ValueError(f"expected AxB, got {raw!r}")
        return int(parts[0]), int(parts[1])
    return kind(raw)


def parse_config(text, base=None):
    """Parse flat ``key=value`` lines (``#`` comments) into a :class:`NetConfig`."""
    kinds = {f.name: type(f.default) for f in fields(NetConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ParseError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(kinds[key], raw)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad value for {key}: {exc}") from None
    try:
        return replace(base or NetConfig(), **values)
    except (ContractError, DimensionError) as exc:
        raise ParseError(f"invalid configuration: {exc}") from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg):
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = f"{v[0]}x{v[1]}"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name}={v}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# parameters


def _conv_init(rng, shape, fan_in):
    bound = 1 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class NetParams:
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg, rng, with_eagr=True):
        t = {}
        specs = [
            ("enc.conv1", 3, cfg.c1),
            ("enc.conv2", cfg.c1, cfg.c_low),
            ("enc.conv3", cfg.c_low, cfg.c_high),
            ("edge", cfg.c_low, 2),
        ]
        for name, cin, cout in specs:
            t[f"{name}.w"] = _conv_init(rng, (3, 3, cin, cout), 9 * cin)
            t[f"{name}.b"] = _bias(cout)
        cdec = cfg.c_low + cfg.c_high
        t["dec.w"] = _conv_init(rng, (cdec, cfg.num_classes), cdec)
        t["dec.b"] = _bias(cfg.num_classes)
        if with_eagr:
            t.update(EagrParams.init(cfg.c_low, cfg.low_eagr, rng).named("eagr.0"))
            t.update(EagrParams.init(cfg.c_high, cfg.high_eagr, rng).named("eagr.1"))
        return cls(t)

    @property
    def has_eagr(self):
        return any(k.startswith("eagr.") for k in self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def values(self):
        return list(self.tensors.values())


# --------------------------------------------------------------------------
# forward


def edge_probability(edge_logits):
    """``HW x 1`` probability of the edge channel."""
    h, w, _ = edge_logits.shape
    probs = T.softmax_rows(T.reshape(edge_logits, (h * w, 2)))
    return T.take(probs, [1], axis=1)


def forward(image, params, cfg, ablation=None, trace=None):
    """Return ``(parsing_logits H x W x N, edge_logits H x W x 2)`` at half resolution.

    ``ablation`` is one of ``baseline`` (no graph blocks), ``no-edge`` (edge
    map fixed to 1), ``no-reasoning`` (graph convolution skipped) or None.
    ``no-ba`` only changes the loss and runs the full forward pass.
    """
    if ablation is not None and ablation not in ABLATIONS:
        raise ContractError(f"unknown ablation {ablation!r}")
    if image.shape != (*cfg.input_size, 3):
        raise DimensionError(f"image shape {image.shape} does not match input size {cfg.input_size}")
    p = params.tensors
    x = T.relu(T.conv3x3(image, p["enc.conv1.w"], p["enc.conv1.b"], 1, tag="enc.conv1"))
    low = T.relu(T.conv3x3(x, p["enc.conv2.w"], p["enc.conv2.b"], 2, tag="enc.conv2"))
    high = T.relu(T.conv3x3(low, p["enc.conv3.w"], p["enc.conv3.b"], 2, tag="enc.conv3"))
    edge_logits = T.conv3x3(low, p["edge.w"], p["edge.b"], 1, tag="edge")

    h, w = cfg.grid
    hh, hw = h // 2, w // 2
    if ablation == "baseline":
        low_ref, high_ref = low, high
    else:
        if not params.has_eagr:
            raise ContractError("parameters contain no graph blocks; use the baseline ablation")
        if ablation == "no-edge":
            y = Tensor(np.ones((h * w, 1)))
        else:
            y = edge_probability(edge_logits)
        y_high = T.reshape(T.subsample(T.reshape(y, (h, w, 1)), 2), (hh * hw, 1))
        reasoning = ablation != "no-reasoning"
        t0 = {} if trace is not None else None
        t1 = {} if trace is not None else None
        low_ref = eagr_forward(
            T.reshape(low, (h * w, cfg.c_low)), y,
            EagrParams.from_named(p, "eagr.0"), cfg.low_eagr, (h, w),
            reasoning=reasoning, tag="eagr.0", trace=t0,
        )
        high_ref = eagr_forward(
            T.reshape(high, (hh * hw, cfg.c_high)), y_high,
            EagrParams.from_named(p, "eagr.1"), cfg.high_eagr, (hh, hw),
            reasoning=reasoning, tag="eagr.1", trace=t1,
        )
        low_ref = T.reshape(low_ref, (h, w, cfg.c_low))
        high_ref = T.reshape(high_ref, (hh, hw, cfg.c_high))
        if trace is not None:
            trace["projection.low"] = t0["projection"]
            trace["projection.high"] = t1["projection"]

    fused = T.concat_channels(low_ref, T.upsample_nearest(high_ref, 2))
    cdec = cfg.c_low + cfg.c_high
    logits = T.conv1x1(T.reshape(fused, (h * w, cdec)), p["dec.w"], p["dec.b"], tag="dec")
    return T.reshape(logits, (h, w, cfg.num_classes)), edge_logits


# --------------------------------------------------------------------------
# losses

PROB_FLOOR = 1e-12


def to_grid(label_map, grid):
    """Nearest-neighbour downsample of a label/edge map onto the logit grid."""
    label_map = np.asarray(label_map)
    h, w = grid
    if label_map.shape == (h, w):
        return label_map
    fy, fx = label_map.shape[0] // h, label_map.shape[1] // w
    if fy < 1 or fx < 1 or label_map.shape != (fy * h, fx * w):
        raise DimensionError(f"map {label_map.shape} is not an integer multiple of grid {grid}")
    return label_map[::fy, ::fx]


def log_probs(logits):
    """``HW x N`` log-softmax with probabilities floored at 1e-12."""
    h, w, n = logits.shape
    probs = T.softmax_rows(T.reshape(logits, (h * w, n)))
    return T.log(T.clamp_min(probs, PROB_FLOOR))


def _one_hot(labels, n):
    labels = validate_labels(labels, n).ravel()
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _masked_nll(lp, labels, weights, denom):
    n = lp.shape[1]
    target = _one_hot(labels, n) * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return T.scale(T.sum_all(T.hadamard(lp, Tensor(target))), -1.0 / denom)


def loss_parsing(logits, labels, lp=None):
    """Mean per-pixel cross entropy."""
    h, w, n = logits.shape
    labels = to_grid(labels, (h, w))
    lp = log_probs(logits) if lp is None else lp
    return _masked_nll(lp, labels, np.ones(h * w), h * w)


def loss_edge(edge_logits, edge_mask):
    return loss_parsing(edge_logits, edge_mask)


def loss_ba(logits, labels, edge_mask, lp=None):
    """Cross entropy over edge pixels only, divided by the edge-pixel count.

    Exactly zero when the mask has no edge pixels.
    """
    h, w, _ = logits.shape
    labels = to_grid(labels, (h, w))
    mask = to_grid(edge_mask, (h, w)).ravel()
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0)
    lp = log_probs(logits) if lp is None else lp
    return _masked_nll(lp, labels, mask, count)


def loss_terms(parsing_logits, edge_logits, labels, edge_mask, cfg):
    """Dict with ``parsing``, ``edge``, ``ba`` and ``total`` scalar tensors."""
    lp = log_probs(parsing_logits)
    terms = {
        "parsing": loss_parsing(parsing_logits, labels, lp),
        "edge": loss_edge(edge_logits, edge_mask),
        "ba": loss_ba(parsing_logits, labels, edge_mask, lp),
    }
    total = terms["parsing"]
    if cfg.lambda1:
        total = T.add(total, T.scale(terms["edge"], cfg.lambda1))
    if cfg.lambda2:
        total = T.add(total, T.scale(terms["ba"], cfg.lambda2))
    terms["total"] = total
    return terms


def loss_total(parsing_logits, edge_logits, labels, edge_mask, cfg):
    return loss_terms(parsing_logits, edge_logits, labels, edge_mask, cfg)["total"]


# --------------------------------------------------------------------------
# optimiser


class SGD:
    """SGD with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.
    """

    def __init__(self, params, lr=0.001, momentum=0.9, weight_decay=0.0005):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.velocity.get(name)
            v = d if v is None else self.momentum * v + d
            self.velocity[name] = v
            p.data = p.data - self.lr * v
