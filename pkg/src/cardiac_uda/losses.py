"""Source hybrid loss, adversarial losses and the weighted full objective.

Predictions are sigmoid maps ``[B, C, H, W]``; targets are integer label maps
``[B, H, W]``. Discriminator outputs are raw logits; every log-sigmoid is taken
through ``softplus`` so that logits of any magnitude stay finite.
"""

import math
from dataclasses import dataclass, field, fields
from typing import List

import torch
import torch.nn.functional as F

from .types import NUM_CLASSES, InvalidInputError, LossWeights

EPS = 1e-7

# report field -> weight field
TERM_WEIGHTS = {
    "ce": "lambda_ce",
    "jac": "lambda_jac",
    "adv_Df": "lambda_Df",
    "adv_Gf": "lambda_Gf",
    "adv_Dm": "lambda_Dm",
    "adv_Gm": "lambda_Gm",
}


@dataclass
class LossReport:
    ce: float = 0.0
    jac: float = 0.0
    adv_Df: float = 0.0
    adv_Gf: float = 0.0
    adv_Dm: float = 0.0
    adv_Gm: float = 0.0
    total: float = 0.0
    jac_per_class: List[float] = field(default_factory=lambda: [0.0] * NUM_CLASSES)

    def components(self):
        return {k: getattr(self, k) for k in TERM_WEIGHTS}

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _one_hot(pred, target):
    if target.dim() != 3 or pred.dim() != 4 or pred.shape[0] != target.shape[0] \
            or pred.shape[2:] != target.shape[1:]:
        raise InvalidInputError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.one_hot(target.long(), pred.shape[1]).permute(0, 3, 1, 2).to(pred.dtype)


def cross_entropy(pred, target, complement=False):
    """Mean over pixels of ``-sum_c y_c log(p_c + eps)``.

    With ``complement=True`` each sigmoid channel is also penalized where the
    class is absent, ``-(1 - y_c) log(1 - p_c + eps)``, which is the binary
    cross-entropy form a sigmoid head needs to learn to switch channels off.
    """
    y = _one_hot(pred, target)
    per_pixel = -(y * torch.log(pred + EPS)).sum(dim=1)
    if complement:
        per_pixel = per_pixel - ((1 - y) * torch.log(1 - pred + EPS)).sum(dim=1)
    return per_pixel.mean()


def jaccard_terms(pred, target, region=False):
    """Per-class soft Jaccard scores, one per class present in ``target``.

    Elementwise form: ``y p / (y + p - y p + eps)`` averaged over the pixels of
    class c. ``region=True`` uses the set form ``sum(y p) / sum(y + p - y p)`` over
    the whole batch instead, which also charges predictions outside the class.
    Returns (scores of present classes, per-class list with None for absent ones).
    """
    y = _one_hot(pred, target)
    inter = y * pred
    dims = (0, 2, 3)
    if region:
        union = (y + pred - inter).sum(dim=dims)
        scores = inter.sum(dim=dims) / (union + EPS)
    else:
        ratio = inter / (y + pred - inter + EPS)
        count = y.sum(dim=dims)
        scores = (ratio * y).sum(dim=dims) / count.clamp_min(1)
    present = y.sum(dim=dims) > 0
    per_class = [float(s) if ok else None for s, ok in zip(scores.detach(), present)]
    return scores[present], per_class


def jaccard_loss(pred, target, region=False):
    """Negative mean soft Jaccard over classes present in the batch; lies in [-1, 0]."""
    scores, _ = jaccard_terms(pred, target, region)
    return -scores.mean()


def disc_loss(scores_source, scores_target):
    """Binary discriminator loss, source labelled real and target fake."""
    if scores_source.shape[1:] != scores_target.shape[1:]:
        raise InvalidInputError("source and target score maps differ in shape")
    return F.softplus(-scores_source).mean() + F.softplus(scores_target).mean()


def gen_adv_loss(scores_target):
    """Non-saturating generator loss: push target scores towards real."""
    return F.softplus(-scores_target).mean()


def full_objective(components, weights: LossWeights):
    """Weighted sum of the six loss terms. ``components`` is a LossReport or a mapping."""
    if isinstance(components, LossReport):
        components = components.components()
    total = 0.0
    for term, wname in TERM_WEIGHTS.items():
        value = components.get(term, 0.0)
        v = float(value) if not torch.is_tensor(value) else float(value.detach())
        if not math.isfinite(v):
            raise InvalidInputError(f"loss component {term} is not finite ({v})")
        total = total + getattr(weights, wname) * value
    return total
