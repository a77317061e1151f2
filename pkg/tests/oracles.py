"""Naive per-element reference implementations, written independently of the library code."""

import math

import numpy as np

EPS = 1e-7


def ce_loop(pred, target, complement=False):
    b, c, h, w = pred.shape
    total = 0.0
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    y = 1.0 if target[n, i, j] == k else 0.0
                    total -= y * math.log(pred[n, k, i, j] + EPS)
                    if complement:
                        total -= (1 - y) * math.log(1 - pred[n, k, i, j] + EPS)
    return total / (b * h * w)


def jaccard_loop(pred, target):
    """Average of y p / (y + p - y p + eps) over class-c pixels, then over present classes."""
    b, c, h, w = pred.shape
    per_class = []
    for k in range(c):
        acc, count = 0.0, 0
        for n in range(b):
            for i in range(h):
                for j in range(w):
                    if target[n, i, j] == k:
                        p = pred[n, k, i, j]
                        acc += p / (1 + p - p + EPS)
                        count += 1
        if count:
            per_class.append(acc / count)
    return -sum(per_class) / len(per_class)


def log_sigmoid(s):
    return -math.log1p(math.exp(-s)) if s >= 0 else s - math.log1p(math.exp(s))


def disc_loop(src, tgt):
    a = sum(-log_sigmoid(s) for s in np.ravel(src)) / np.size(src)
    # log(1 - sigmoid(s)) = log_sigmoid(-s)
    b = sum(-log_sigmoid(-s) for s in np.ravel(tgt)) / np.size(tgt)
    return a + b


def gen_loop(tgt):
    return sum(-log_sigmoid(s) for s in np.ravel(tgt)) / np.size(tgt)


def dice_jaccard_sets(pred, gt, cls):
    p = {(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1]) if pred[i, j] == cls}
    g = {(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1]) if gt[i, j] == cls}
    if not p and not g:
        return 1.0, 1.0
    return 2 * len(p & g) / (len(p) + len(g)), len(p & g) / len(p | g)
