"""Central finite-difference checks of every differentiable operation.

Each check builds a random instance, reduces the output to a scalar with a
fixed random weighting, and compares the tape gradient against
``(f(x + h) - f(x - h)) / 2h`` entry by entry. The reported error is
``max |analytic - numeric| / max(1, |analytic|)``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SynthConfig, extract_edge_mask, synth_sample
from .graph import EagrConfig, EagrParams, eagr_forward
from .net import NetConfig, NetParams, forward, loss_ba, loss_edge, loss_parsing, loss_terms
from .nonlocal_block import NonLocalParams, nonlocal_forward
from .tensor import Tensor

STEP = 1e-5
OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def numerical_grad(loss_fn, tensor, h=STEP, entries=None):
    """Central differences of ``loss_fn()`` w.r.t. the listed flat entries of ``tensor``."""
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        out[n] = (up - down) / (2 * h)
    return out


def check_gradients(fn, inputs, rng, h=STEP, max_entries=None):
    """Worst relative error of tape gradients of ``fn(*inputs)`` over all inputs.

    The output is reduced by a fixed random weighting unless it is already scalar.
    """
    with T.Tape():
        probe = fn(*inputs)
    weights = None if probe.size == 1 else Tensor(rng.standard_normal(probe.shape))

    def loss():
        out = fn(*inputs)
        return out if weights is None else T.sum_all(T.hadamard(out, weights))

    for t in inputs:
        t.grad = None
    with T.Tape():
        value = loss()
    T.backward(value, leaves=inputs)

    worst = 0.0
    for t in inputs:
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = sorted(rng.choice(t.size, max_entries, replace=False).tolist())
        analytic = t.grad.reshape(-1)
        if entries is not None:
            analytic = analytic[entries]
        worst = max(worst, relative_error(analytic, numerical_grad(loss, t, h, entries)))
    return worst


def _leaf(arr):
    return Tensor(arr, requires_grad=True)


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap * 2, x)


# --------------------------------------------------------------------------
# individual checks: each takes an rng and returns the worst relative error


def _check_matmul(rng):
    a, b = _leaf(rng.standard_normal((4, 3))), _leaf(rng.standard_normal((3, 5)))
    return check_gradients(lambda a, b: T.matmul(a, b), [a, b], rng)


def _check_transpose(rng):
    return check_gradients(T.transpose, [_leaf(rng.standard_normal((3, 5)))], rng)


def _check_softmax(rng):
    return check_gradients(T.softmax_rows, [_leaf(rng.standard_normal((4, 6)) * 2)], rng)


def _check_hadamard(rng):
    a, b = _leaf(rng.standard_normal((5, 4))), _leaf(rng.standard_normal((5, 4)))
    c = _leaf(rng.standard_normal((5, 1)))
    return max(
        check_gradients(T.hadamard, [a, b], rng),
        check_gradients(T.hadamard, [a, c], rng),
    )


def _check_pool(rng):
    x = _leaf(rng.standard_normal((6, 5, 3)))
    return check_gradients(lambda x: T.adaptive_avg_pool(x, (4, 3)), [x], rng)


def _check_conv1x1(rng):
    x, w, b = (_leaf(rng.standard_normal(s)) for s in [(6, 4), (4, 3), (3,)])
    return check_gradients(lambda x, w, b: T.conv1x1(x, w, b), [x, w, b], rng)


def _check_conv3x3(rng):
    x, w, b = (_leaf(rng.standard_normal(s)) for s in [(5, 6, 2), (3, 3, 2, 3), (3,)])
    return max(
        check_gradients(lambda x, w, b: T.conv3x3(x, w, b, 1), [x, w, b], rng),
        check_gradients(lambda x, w, b: T.conv3x3(x, w, b, 2), [x, w, b], rng),
    )


def _check_resample(rng):
    x = _leaf(rng.standard_normal((3, 4, 2)))
    y = _leaf(rng.standard_normal((6, 4, 2)))
    a, b = _leaf(rng.standard_normal((3, 4, 3))), _leaf(rng.standard_normal((3, 4, 2)))
    return max(
        check_gradients(lambda x: T.upsample_nearest(x, 2), [x], rng),
        check_gradients(lambda y: T.subsample(y, 2), [y], rng),
        check_gradients(T.concat_channels, [a, b], rng),
        check_gradients(lambda x: T.reshape(x, (12, 2)), [x], rng),
        check_gradients(lambda y: T.take(T.reshape(y, (24, 2)), [3, 0, 3, 7], axis=0), [y], rng),
    )


def _check_elementwise(rng):
    a = _leaf(_away_from_zero(rng, (4, 5)))
    b = _leaf(rng.standard_normal((4, 5)))
    pos = _leaf(rng.uniform(0.5, 2.0, (4, 5)))
    clamp_in = _leaf(_away_from_zero(rng, (4, 5)))
    return max(
        check_gradients(T.relu, [a], rng),
        check_gradients(T.add, [a, b], rng),
        check_gradients(T.sub, [a, b], rng),
        check_gradients(lambda a: T.scale(a, -1.7), [a], rng),
        check_gradients(T.sum_all, [b], rng),
        check_gradients(T.log, [pos], rng),
        check_gradients(lambda x: T.clamp_min(x, 0.0), [clamp_in], rng),
    )


def small_eagr_instance(rng, h=4, w=4, c=5, t=3, k=4, grid=(2, 2), sel=(2, 2), residual=True):
    cfg = EagrConfig(t_dim=t, k_dim=k, pool_grid=grid, central_sel=sel, residual_reasoning=residual)
    params = EagrParams.init(c, cfg, rng)
    # non-zero biases so their gradients are exercised
    for b in (params.b_phi, params.b_theta, params.b_sigma):
        b.data = rng.uniform(-0.3, 0.3, b.shape)
    x = _leaf(rng.standard_normal((h * w, c)))
    y = _leaf(rng.uniform(0.05, 0.95, (h * w, 1)))
    return x, y, params, cfg


def _check_eagr(rng):
    x, y, params, cfg = small_eagr_instance(rng)
    names = EagrParams.NAMES

    def fn(x, y, *ps):
        p = EagrParams(**dict(zip(names, ps)))
        return eagr_forward(x, y, p, cfg, (4, 4))

    return check_gradients(fn, [x, y, *(getattr(params, n) for n in names)], rng)


def _check_nonlocal(rng):
    x = _leaf(rng.standard_normal((9, 4)))
    params = NonLocalParams.init(4, 2, rng)
    names = ("w_theta", "b_theta", "w_phi", "b_phi", "w_gamma", "b_gamma")
    for n in names[1::2]:
        getattr(params, n).data = rng.uniform(-0.3, 0.3, getattr(params, n).shape)

    def fn(x, *ps):
        return nonlocal_forward(x, NonLocalParams(*ps))

    return check_gradients(fn, [x, *(getattr(params, n) for n in names)], rng)


def _check_losses(rng):
    logits = _leaf(rng.standard_normal((3, 3, 4)) * 2)
    edge_logits = _leaf(rng.standard_normal((3, 3, 2)))
    labels = rng.integers(0, 4, (3, 3)).astype(np.uint8)
    mask = rng.integers(0, 2, (3, 3)).astype(np.uint8)
    mask[0, 0] = 1
    return max(
        check_gradients(lambda z: loss_parsing(z, labels), [logits], rng),
        check_gradients(lambda z: loss_edge(z, mask), [edge_logits], rng),
        check_gradients(lambda z: loss_ba(z, labels, mask), [logits], rng),
    )


def tiny_net_config(seed=0):
    return NetConfig(
        num_classes=8, input_size=(16, 16), c1=4, c_low=6, c_high=8,
        t_low=3, k_low=5, t_high=4, k_high=6, pool_grid=(4, 4), central_sel=(2, 2),
        lambda1=1.0, lambda2=1.0, seed=seed,
    )


def _check_end_to_end(rng, samples=10):
    cfg = tiny_net_config()
    params = NetParams.init(cfg, rng)
    for name, t in params.tensors.items():
        if name.endswith(".b") or ".b_" in name:
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    image, labels = synth_sample(SynthConfig(size=cfg.input_size, seed=int(rng.integers(1 << 30))), 0)
    edges = extract_edge_mask(labels)
    img = Tensor(image)

    def loss():
        pl, el = forward(img, params, cfg)
        return loss_terms(pl, el, labels, edges, cfg)["total"]

    with T.Tape():
        value = loss()
    T.backward(value, leaves=params.values())

    names = list(params.tensors)
    picks = [(names[i], int(rng.integers(params[names[i]].size)))
             for i in rng.choice(len(names), samples, replace=True)]
    analytic, numeric = [], []
    for name, entry in picks:
        t = params[name]
        analytic.append(t.grad.reshape(-1)[entry])
        numeric.append(numerical_grad(loss, t, STEP, [entry])[0])
    return relative_error(analytic, numeric)


OP_CHECKS = {
    "matmul": _check_matmul,
    "transpose": _check_transpose,
    "softmax_rows": _check_softmax,
    "hadamard": _check_hadamard,
    "adaptive_avg_pool": _check_pool,
    "conv1x1": _check_conv1x1,
    "conv3x3": _check_conv3x3,
    "resample_suite": _check_resample,
    "elementwise_suite": _check_elementwise,
    "eagr_forward": _check_eagr,
    "nonlocal_forward": _check_nonlocal,
    "losses": _check_losses,
}


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    seeds: int

    @property
    def passed(self):
        return self.worst <= self.tolerance


def run_suite(seed=0, seeds=20):
    """Run every check on ``seeds`` independent random instances."""
    results = []
    checks = [(name, fn, OP_TOL) for name, fn in OP_CHECKS.items()]
    checks.append(("end_to_end_total_loss", _check_end_to_end, END_TO_END_TOL))
    for k, (name, fn, tol) in enumerate(checks):
        worst = 0.0
        for s in range(seeds):
            worst = max(worst, fn(np.random.default_rng([seed, k, s])))
        results.append(CheckResult(name, worst, tol, seeds))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'seeds':>5}  {'worst_rel_err':>13}  {'tol':>7}  result"]
    for r in results:
        lines.append(
            f"{r.name:<{width}}  {r.seeds:>5}  {r.worst:>13.3e}  {r.tolerance:>7.0e}  "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    return lines
