"""Dice/Jaccard metrics, held-out evaluation and the ablation ladder."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .types import CLASS_NAMES, FOREGROUND, InvalidInputError, LossWeights

log = logging.getLogger(__name__)

AGGREGATION = "pooled counts over slices"


def _binary(mask, cls):
    labels = mask.labels if hasattr(mask, "labels") else np.asarray(mask)
    return labels == cls


def overlap_counts(pred, gt, cls):
    """(|P and G|, |P|, |G|) for class ``cls``."""
    p, g = _binary(pred, cls), _binary(gt, cls)
    if p.shape != g.shape:
        raise InvalidInputError(f"shape mismatch {p.shape} vs {g.shape}")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def scores_from_counts(inter, n_pred, n_gt):
    if n_pred + n_gt == 0:
        return 1.0, 1.0
    return 2.0 * inter / (n_pred + n_gt), inter / (n_pred + n_gt - inter)


def dice_jaccard(pred, gt, cls):
    """Dice and Jaccard of class ``cls``; two empty masks score (1.0, 1.0)."""
    return scores_from_counts(*overlap_counts(pred, gt, cls))


@dataclass
class EvalReport:
    dice: Dict[str, float]
    jaccard: Dict[str, float]
    n_slices: int
    aggregation: str = AGGREGATION

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(list(self.jaccard.values())))

    def as_dict(self):
        return {"dice": self.dice, "jaccard": self.jaccard, "mean_dice": self.mean_dice,
                "mean_jaccard": self.mean_jaccard, "n_slices": self.n_slices,
                "aggregation": self.aggregation}

    def table(self) -> str:
        lines = [f"# aggregation: {self.aggregation}; slices: {self.n_slices}",
                 f"{'class':<6} {'DSC':>7} {'Jac':>7}"]
        for name in self.dice:
            lines.append(f"{name:<6} {self.dice[name]:7.4f} {self.jaccard[name]:7.4f}")
        lines.append(f"{'Mean':<6} {self.mean_dice:7.4f} {self.mean_jaccard:7.4f}")
        return "\n".join(lines)


def report_from_masks(preds: Sequence, gts: Sequence) -> EvalReport:
    if len(preds) == 0:
        raise InvalidInputError("cannot evaluate an empty set")
    dice, jac = {}, {}
    for cls in FOREGROUND:
        totals = np.zeros(3, dtype=np.int64)
        for p, g in zip(preds, gts):
            totals += overlap_counts(p, g, cls)
        dice[CLASS_NAMES[cls]], jac[CLASS_NAMES[cls]] = scores_from_counts(*totals)
    return EvalReport(dice, jac, len(preds))


@torch.no_grad()
def predict(model, images, batch_size=16) -> np.ndarray:
    """Label maps [N, H, W] from a SegNet (eval mode) or any callable returning [N, C, H, W] probabilities."""
    x = torch.from_numpy(np.stack([im.pixels for im in images]).astype(np.float32))[:, None]
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    outs = []
    for start in range(0, x.shape[0], batch_size):
        probs = model(x[start:start + batch_size])
        if isinstance(probs, tuple):
            probs = probs[0]
        if torch.isnan(probs).any():
            raise InvalidInputError("model produced NaN probabilities")
        # torch.argmax picks the first maximal index, matching argmax_decode
        outs.append(torch.argmax(probs, dim=1).numpy())
    if was_training:
        model.train()
    return np.concatenate(outs)


def evaluate(model, heldout) -> EvalReport:
    """Pooled-count Dice/Jaccard of ``model`` on labeled slices."""
    if not heldout:
        raise InvalidInputError("cannot evaluate an empty set")
    preds = predict(model, [s.image for s in heldout])
    return report_from_masks(list(preds), [s.mask for s in heldout])


# ---------------------------------------------------------------- ablation

@dataclass(frozen=True)
class AblationRow:
    name: str
    hm: bool
    mda: bool
    fda: bool
    gfrm: bool


LADDER = (
    AblationRow("S2T", hm=False, mda=False, fda=False, gfrm=False),
    AblationRow("S2T+HM", hm=True, mda=False, fda=False, gfrm=False),
    AblationRow("S2T+HM+MDA", hm=True, mda=True, fda=False, gfrm=False),
    AblationRow("S2T+HM+MDA+FDA", hm=True, mda=True, fda=True, gfrm=False),
    AblationRow("S2T+HM+MDA+FDA+GFRM", hm=True, mda=True, fda=True, gfrm=True),
)


def row_config(base_cfg, row: AblationRow, seed: int):
    """Training config for one ladder row; disabled adversaries get zero weights."""
    w = base_cfg.loss_weights
    weights = LossWeights(
        lambda_ce=w.lambda_ce, lambda_jac=w.lambda_jac,
        lambda_Df=w.lambda_Df if row.fda else 0.0, lambda_Gf=w.lambda_Gf if row.fda else 0.0,
        lambda_Dm=w.lambda_Dm if row.mda else 0.0, lambda_Gm=w.lambda_Gm if row.mda else 0.0,
    )
    return replace(base_cfg, loss_weights=weights, use_gfrm=row.gfrm, seed=seed)


@dataclass
class RowResult:
    row: AblationRow
    seeds: List[int]
    target: List[EvalReport] = field(default_factory=list)
    source: List[EvalReport] = field(default_factory=list)
    seconds: float = 0.0
    error: Optional[str] = None

    def stat(self, attr="mean_dice", which="target"):
        reports = getattr(self, which)
        vals = [getattr(r, attr) for r in reports]
        return (float(np.mean(vals)), float(np.std(vals))) if vals else (float("nan"), float("nan"))

    def class_stat(self, cls, metric="dice"):
        vals = [getattr(r, metric)[cls] for r in self.target]
        return (float(np.mean(vals)), float(np.std(vals))) if vals else (float("nan"), float("nan"))

    def as_dict(self):
        return {"name": self.row.name, "seeds": self.seeds, "seconds": self.seconds, "error": self.error,
                "target": [r.as_dict() for r in self.target],
                "source": [r.as_dict() for r in self.source]}


def prepare_data(data, image_size: int, hm: bool, bins: int = 256):
    """Crop/resize every split; with ``hm`` match all of them to the pooled source histogram."""
    from .phantom import DatasetSplit
    from .preprocess import build_reference, preprocess_slices

    ref = None
    if hm:
        resized = preprocess_slices(data.source_labeled, image_size)
        ref = build_reference([s.image for s in resized], bins)
    prep = lambda slices: preprocess_slices(slices, image_size, ref)
    out = DatasetSplit(prep(data.source_labeled), prep(data.target_unlabeled),
                       prep(data.target_heldout_labeled), prep(data.source_heldout_labeled))
    return out, ref


def run_ablation(data, base_cfg, seeds=(0, 1, 2), seg_config=None, rows=LADDER,
                 bins: int = 256, on_row: Callable = None) -> List[RowResult]:
    """Train and evaluate each ladder row over ``seeds``.

    A row that raises is marked with its error and the remaining rows still run.
    """
    from .segnet import SegNetConfig
    from .trainer import fit

    seg_config = seg_config or SegNetConfig()
    prepared = {}
    results = []
    for row in rows:
        res = RowResult(row, list(seeds))
        t0 = time.perf_counter()
        try:
            if row.hm not in prepared:
                prepared[row.hm] = prepare_data(data, seg_config.input_size, row.hm, bins)[0]
            split = prepared[row.hm]
            for seed in seeds:
                cfg = row_config(base_cfg, row, seed)
                state, _ = fit(split, cfg, seg_config)
                res.target.append(evaluate(state.net.seg, split.target_heldout_labeled))
                if split.source_heldout_labeled:
                    res.source.append(evaluate(state.net.seg, split.source_heldout_labeled))
                log.info("%s seed %d: target mean DSC %.4f", row.name, seed, res.target[-1].mean_dice)
        except Exception as exc:  # keep the ladder going
            log.exception("ablation row %s failed", row.name)
            res.error = f"{type(exc).__name__}: {exc}"
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if on_row:
            on_row(res)
    return results


def ablation_table(results: Sequence[RowResult]) -> str:
    head = f"{'Method':<22}" + "".join(f"{c + ' ' + m:>16}" for c in ("LV", "RV", "Myo", "Mean")
                                        for m in ("DSC", "Jac"))
    lines = [f"# target held-out, mean±std over seeds, {AGGREGATION}", head]
    for r in results:
        if r.error:
            lines.append(f"{r.row.name:<22}  FAILED: {r.error}")
            continue
        cells = []
        for cls in ("LV", "RV", "Myo"):
            for metric in ("dice", "jaccard"):
                m, s = r.class_stat(cls, metric)
                cells.append(f"{100 * m:9.2f}±{100 * s:5.2f}")
        for attr in ("mean_dice", "mean_jaccard"):
            m, s = r.stat(attr)
            cells.append(f"{100 * m:9.2f}±{100 * s:5.2f}")
        lines.append(f"{r.row.name:<22}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)


def save_overlays(images, preds, gts, directory, limit=8):
    """Grayscale slices with predicted (left) and reference (right) contours."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    colors = {1: "tab:green", 2: "gold", 3: "tab:blue"}
    paths = []
    for i, (img, pred, gt) in enumerate(zip(images, preds, gts)):
        if i >= limit:
            break
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        for ax, labels, title in ((axes[0], pred, "prediction"), (axes[1], gt, "reference")):
            labels = labels.labels if hasattr(labels, "labels") else labels
            ax.imshow(img.pixels, cmap="gray", vmin=0, vmax=1)
            for cls, color in colors.items():
                if np.any(labels == cls):
                    ax.contour(labels == cls, levels=[0.5], colors=color, linewidths=1)
            ax.set_title(title)
            ax.axis("off")
        path = directory / f"overlay_{i:03d}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths


def write_records(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")
