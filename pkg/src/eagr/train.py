"""Training and evaluation loops for the toy parsing network."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import HELEN_MERGE, augment, extract_edge_mask
from .errors import ParseError
from .metrics import ConfusionMatrix, merged_overall_f1, scores
from .net import SGD, NetParams, forward, loss_terms
from .tensor import Tensor


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def add_step(self, step, parsing, edge, ba, total):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.steps.append({"step": step, "L_parsing": parsing, "L_edge": edge, "L_BA": ba, "L_total": total})

    def lines(self):
        out = []
        for r in self.steps:
            out.append(
                f"step={r['step']} L_parsing={r['L_parsing']!r} L_edge={r['L_edge']!r} "
                f"L_BA={r['L_BA']!r} L_total={r['L_total']!r}"
            )
        for r in self.epochs:
            out.append(" ".join(f"{k}={v!r}" for k, v in r.items()))
        return out


def effective_config(cfg, ablation):
    return replace(cfg, lambda2=0.0) if ablation == "no-ba" else cfg


def _forward_ablation(ablation):
    return None if ablation == "no-ba" else ablation


def train(samples, cfg, ablation=None, eval_samples=None, params=None):
    """Train on ``(image, labels)`` pairs; returns ``(params, RunLog)``.

    Mini-batch gradients are the mean of per-sample gradients, accumulated
    in a fixed order. Everything is seeded from ``cfg.seed``.
    """
    cfg = effective_config(cfg, ablation)
    fwd_ablation = _forward_ablation(ablation)
    init_rng = np.random.default_rng([cfg.seed, 0])
    data_rng = np.random.default_rng([cfg.seed, 1])
    if params is None:
        params = NetParams.init(cfg, init_rng, with_eagr=ablation != "baseline")
    opt = SGD(params.tensors, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    log = RunLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            opt.zero_grad()
            sums = dict.fromkeys(("parsing", "edge", "ba", "total"), 0.0)
            for i in batch:
                image, labels = samples[i]
                if cfg.augment:
                    image, labels = augment(image, labels, data_rng)
                edges = extract_edge_mask(labels)
                with T.Tape():
                    pl, el = forward(Tensor(image), params, cfg, fwd_ablation)
                    terms = loss_terms(pl, el, labels, edges, cfg)
                    scaled = T.scale(terms["total"], 1.0 / len(batch))
                T.backward(scaled, leaves=params.values())
                for k in sums:
                    sums[k] += terms[k].item()
            opt.step()
            step += 1
            n = len(batch)
            log.add_step(step, sums["parsing"] / n, sums["edge"] / n, sums["ba"] / n, sums["total"] / n)
        if eval_samples is not None:
            cm = evaluate(eval_samples, params, cfg, ablation)
            s = scores(cm)
            log.epochs.append({"epoch": epoch + 1, "pixel_acc": s.pixel_acc, "miou": s.miou,
                               "mean_f1_excl_bg": s.mean_f1_excl_bg})
    return params, log


def predict(image, params, cfg, ablation=None):
    """Full-resolution label map: argmax of the logits, upsampled by nearest."""
    pl, _ = forward(Tensor(image), params, cfg, _forward_ablation(ablation))
    labels = np.argmax(pl.data, axis=2).astype(np.uint8)
    fy = cfg.input_size[0] // labels.shape[0]
    fx = cfg.input_size[1] // labels.shape[1]
    return np.repeat(np.repeat(labels, fy, axis=0), fx, axis=1)


def evaluate(samples, params, cfg, ablation=None):
    cm = ConfusionMatrix(cfg.num_classes)
    for image, labels in samples:
        cm.accumulate(predict(image, params, cfg, ablation), labels)
    return cm


def summary(cm, spec=HELEN_MERGE):
    s = scores(cm)
    return {"pixel_acc": s.pixel_acc, "miou": s.miou, "mean_f1_excl_bg": s.mean_f1_excl_bg,
            "overall_f1": merged_overall_f1(cm, spec)}


def params_from_checkpoint(tensors, cfg):
    """Check names and shapes against ``cfg`` and wrap as :class:`NetParams`."""
    with_eagr = any(k.startswith("eagr.") for k in tensors)
    expected = NetParams.init(cfg, np.random.default_rng(0), with_eagr=with_eagr).tensors
    for name, ref in expected.items():
        if name not in tensors:
            raise ParseError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != ref.shape:
            raise ParseError(
                f"tensor {name!r} has shape {tensors[name].shape}, configuration expects {ref.shape}"
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise ParseError(f"checkpoint has unexpected tensor {extra[0]!r}")
    return NetParams({name: tensors[name] for name in expected})
