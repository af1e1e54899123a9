"""Confusion-matrix segmentation scores, including merged-category F1."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


class ConfusionMatrix:
    """Pixel counts with rows = ground truth and columns = prediction."""

    def __init__(self, n):
        self.n = n
        self.counts = np.zeros((n, n), dtype=np.int64)

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        if pred.size and max(pred.max(), gt.max()) >= self.n:
            raise ContractError(f"class id out of range for {self.n} classes")
        if pred.size and min(pred.min(), gt.min()) < 0:
            raise ContractError("negative class id")
        flat = gt.astype(np.int64).ravel() * self.n + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def __iadd__(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(cm, pred, gt):
    return cm.accumulate(pred, gt)


@dataclass
class Scores:
    pixel_acc: float
    per_class_f1: list
    per_class_iou: list
    miou: float
    mean_f1_excl_bg: float
    present: list = field(default_factory=list)


def _ratio(num, den):
    return num / den if den else float("nan")


def scores(cm):
    """Pixel accuracy, per-class F1/IoU and their means over present classes.

    A class absent from both ground truth and prediction gets NaN and is
    left out of every mean. Class 0 is background.
    """
    c = cm.counts
    total = c.sum()
    if total == 0:
        raise ContractError("confusion matrix is empty")
    tp = np.diag(c).astype(np.int64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    f1 = [_ratio(2 * int(tp[k]), 2 * int(tp[k]) + int(fp[k]) + int(fn[k])) for k in range(cm.n)]
    iou = [_ratio(int(tp[k]), int(tp[k]) + int(fp[k]) + int(fn[k])) for k in range(cm.n)]
    present = [k for k in range(cm.n) if tp[k] + fp[k] + fn[k] > 0]
    fg = [k for k in present if k != 0]
    return Scores(
        pixel_acc=int(tp.sum()) / int(total),
        per_class_f1=f1,
        per_class_iou=iou,
        miou=sum(iou[k] for k in present) / len(present),
        mean_f1_excl_bg=sum(f1[k] for k in fg) / len(fg) if fg else float("nan"),
        present=present,
    )


def validate_merge(spec, n):
    seen = {}
    for name, ids in spec:
        if not ids:
            raise ContractError(f"merged category {name!r} is empty")
        for k in ids:
            if not 0 <= k < n:
                raise ContractError(f"class {k} in {name!r} out of range for {n} classes")
            if k in seen and seen[k] != name:
                raise ContractError(f"class {k} appears in both {seen[k]!r} and {name!r}")
            seen[k] = name


def merged_matrix(cm, spec):
    """Collapse classes into categories; index 0 is the 'other' bucket,
    category ``i`` of ``spec`` becomes index ``i + 1``."""
    validate_merge(spec, cm.n)
    proj = np.zeros((cm.n, len(spec) + 1), dtype=np.int64)
    proj[:, 0] = 1
    for i, (_, ids) in enumerate(spec, 1):
        for k in ids:
            proj[k, 0] = 0
            proj[k, i] = 1
    return proj.T @ cm.counts @ proj


def merged_overall_f1(cm, spec):
    """Micro-averaged F1 over the merged foreground categories."""
    m = merged_matrix(cm, spec)
    tp = np.diag(m)[1:]
    fp = m.sum(axis=0)[1:] - tp
    fn = m.sum(axis=1)[1:] - tp
    return _ratio(2 * int(tp.sum()), 2 * int(tp.sum()) + int(fp.sum()) + int(fn.sum()))


def merged_macro_f1(cm, spec):
    """Mean per-category F1 over merged categories present in either map."""
    m = merged_matrix(cm, spec)
    vals = []
    for i in range(1, m.shape[0]):
        tp = int(m[i, i])
        fp = int(m[:, i].sum()) - tp
        fn = int(m[i, :].sum()) - tp
        if tp + fp + fn:
            vals.append(2 * tp / (2 * tp + fp + fn))
    return sum(vals) / len(vals) if vals else float("nan")


def report_lines(cm, spec=None, class_names=None):
    """Flat ``key=value`` lines for a metrics report."""
    s = scores(cm)
    names = class_names or [str(k) for k in range(cm.n)]
    lines = [
        f"pixel_acc={s.pixel_acc:.6f}",
        f"miou={s.miou:.6f}",
        f"mean_f1_excl_bg={s.mean_f1_excl_bg:.6f}",
    ]
    if spec is not None:
        lines.append(f"overall_f1_merged={merged_overall_f1(cm, spec):.6f}")
        lines.append(f"overall_f1_merged_macro={merged_macro_f1(cm, spec):.6f}")
    for k in range(cm.n):
        lines.append(f"f1.{names[k]}={s.per_class_f1[k]:.6f}")
    for k in range(cm.n):
        lines.append(f"iou.{names[k]}={s.per_class_iou[k]:.6f}")
    lines.append(f"pixels={cm.total}")
    return lines
