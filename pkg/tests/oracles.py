"""Brute-force reference implementations used as independent test oracles.

Everything here is written with explicit Python loops over plain floats and
does not import the package's tensor ops.
"""

import math


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][j] * b[j][c] for j in range(k)) for c in range(m)] for i in range(n)]


def affine(x, w, bias):
    out = matmul(x, w)
    return [[v + bias[c] for c, v in enumerate(row)] for row in out]


def transpose(a):
    return [list(col) for col in zip(*a)]


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def bin_average(img, h, w, grid):
    """img[r][c] is a list of channels; returns grid of channel means."""
    ph, pw = grid
    ch = len(img[0][0])
    out = []
    for i in range(ph):
        row = []
        for j in range(pw):
            r0, r1 = (i * h) // ph, ((i + 1) * h) // ph
            c0, c1 = (j * w) // pw, ((j + 1) * w) // pw
            acc = [0.0] * ch
            cnt = 0
            for r in range(r0, r1):
                for c in range(c0, c1):
                    cnt += 1
                    for t in range(ch):
                        acc[t] += img[r][c][t]
            row.append([v / cnt for v in acc])
        out.append(row)
    return out


def central_block(grid, sel):
    (ph, pw), (sh, sw) = grid, sel
    top, left = (ph - sh) // 2, (pw - sw) // 2
    return [(top + i, left + j) for i in range(sh) for j in range(sw)]


def projection(x, y, p, grid, sel, hw):
    """P for plain-list inputs; p holds plain-list weights."""
    h, w = hw
    phi = affine(x, p["w_phi"], p["b_phi"])
    weighted = [[phi[i][t] * y[i][0] for t in range(len(phi[0]))] for i in range(h * w)]
    img = [[weighted[r * w + c] for c in range(w)] for r in range(h)]
    pooled = bin_average(img, h, w, grid)
    anchors = [pooled[r][c] for r, c in central_block(grid, sel)]
    logits = matmul(anchors, transpose(phi))
    return [softmax_row(row) for row in logits]


def eagr(x, y, p, grid, sel, hw, residual=True, reasoning=True):
    P = projection(x, y, p, grid, sel, hw)
    theta = affine(x, p["w_theta"], p["b_theta"])
    xg = matmul(P, theta)
    if reasoning:
        nv = len(xg)
        lap = [[(1.0 if i == j else 0.0) - p["adj"][i][j] for j in range(nv)] for i in range(nv)]
        core = [[max(0.0, v) for v in row] for row in matmul(matmul(lap, xg), p["w_g"])]
        xh = [[core[i][k] + (xg[i][k] if residual else 0.0) for k in range(len(xg[0]))]
              for i in range(nv)]
    else:
        xh = xg
    back = matmul(transpose(P), xh)
    sig = affine(back, p["w_sigma"], p["b_sigma"])
    return [[x[i][c] + sig[i][c] for c in range(len(x[0]))] for i in range(len(x))]


def nonlocal_block(x, p):
    theta = affine(x, p["w_theta"], p["b_theta"])
    phi = affine(x, p["w_phi"], p["b_phi"])
    gamma = affine(x, p["w_gamma"], p["b_gamma"])
    v = [softmax_row(row) for row in matmul(theta, transpose(phi))]
    return matmul(v, gamma)


def edge_mask(labels):
    h, w = len(labels), len(labels[0])
    out = [[0] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and labels[rr][cc] != labels[r][c]:
                    out[r][c] = 1
    return out


def masked_nll(logits, labels, mask):
    """Sum of -log softmax(logits)[label] over pixels where mask is 1, and the count."""
    total, count = 0.0, 0
    for r in range(len(labels)):
        for c in range(len(labels[0])):
            if mask[r][c]:
                probs = softmax_row(list(logits[r][c]))
                total -= math.log(max(probs[labels[r][c]], 1e-12))
                count += 1
    return total, count


def pixel_scores(pred, gt, n):
    """Per-class tp/fp/fn tallied pixel by pixel, then the usual scores."""
    tp, fp, fn = [0] * n, [0] * n, [0] * n
    correct = total = 0
    for pr, gr in zip(pred, gt):
        for a, b in zip(pr, gr):
            total += 1
            if a == b:
                tp[a] += 1
                correct += 1
            else:
                fp[a] += 1
                fn[b] += 1
    present = [k for k in range(n) if tp[k] + fp[k] + fn[k]]
    f1 = {k: 2 * tp[k] / (2 * tp[k] + fp[k] + fn[k]) for k in present}
    iou = {k: tp[k] / (tp[k] + fp[k] + fn[k]) for k in present}
    fg = [k for k in present if k != 0]
    return {
        "pixel_acc": correct / total,
        "f1": f1,
        "iou": iou,
        "miou": sum(iou[k] for k in present) / len(present),
        "mean_f1_excl_bg": sum(f1[k] for k in fg) / len(fg) if fg else float("nan"),
    }


def relabel_overall_f1(pred, gt, groups):
    """Relabel both maps by category (0 = outside every group) and micro-F1 the rest."""
    lookup = {}
    for cat, ids in enumerate(groups, 1):
        for k in ids:
            lookup[k] = cat
    tp = fp = fn = 0
    for pr, gr in zip(pred, gt):
        for a, b in zip(pr, gr):
            ca, cb = lookup.get(a, 0), lookup.get(b, 0)
            if ca == cb:
                if ca:
                    tp += 1
            else:
                if ca:
                    fp += 1
                if cb:
                    fn += 1
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else float("nan")
