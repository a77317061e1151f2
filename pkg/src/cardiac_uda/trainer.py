"""Alternating adversarial training of G + R against the feature and mask discriminators."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .discriminator import PatchDiscriminator
from .gfrm import FeatureBranch
from .losses import (LossReport, cross_entropy, disc_loss, full_objective, gen_adv_loss,
                     jaccard_terms)
from .segnet import SegNet, SegNetConfig
from .types import ConfigError, InvalidInputError, LossWeights, NUM_CLASSES

log = logging.getLogger(__name__)

FULL_EPOCHS = 150
FULL_LR_STEP = 80


class TrainingDiverged(RuntimeError):
    def __init__(self, step, component, value):
        super().__init__(f"loss component {component} became {value} at step {step}")
        self.step = step
        self.component = component


@dataclass
class TrainConfig:
    epochs: int = FULL_EPOCHS
    batch_size: int = 8
    gen_lr: float = 0.01
    gen_lr_late: float = 0.001
    lr_step_epoch: Optional[int] = None
    momentum: float = 0.9
    gen_weight_decay: float = 1e-4
    disc_lr: float = 2e-4
    disc_betas: tuple = (0.9, 0.99)
    disc_weight_decay: float = 5e-5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # "binary" adds the absent-class terms a sigmoid head needs; "literal" is the bare formulas
    source_loss: str = "binary"
    use_gfrm: bool = True
    gfrm_width: int = 32
    disc_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.disc_betas = tuple(self.disc_betas)
        if self.epochs < 1 or self.batch_size < 1 or self.disc_steps < 1:
            raise ConfigError("epochs, batch_size and disc_steps must be >= 1")
        for name in ("gen_lr", "gen_lr_late", "disc_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.source_loss not in ("binary", "literal"):
            raise ConfigError(f"source_loss must be 'binary' or 'literal', got {self.source_loss!r}")

    @property
    def lr_step(self) -> int:
        if self.lr_step_epoch is not None:
            return self.lr_step_epoch
        return round(self.epochs * FULL_LR_STEP / FULL_EPOCHS)

    def gen_lr_at(self, epoch: int) -> float:
        """Two-phase step schedule; ``epoch`` counts from 0."""
        return self.gen_lr if epoch < self.lr_step else self.gen_lr_late

    @property
    def feature_adversary(self) -> bool:
        w = self.loss_weights
        return w.lambda_Df > 0 or w.lambda_Gf > 0

    @property
    def mask_adversary(self) -> bool:
        w = self.loss_weights
        return w.lambda_Dm > 0 or w.lambda_Gm > 0

    def to_dict(self):
        d = asdict(self)
        d["disc_betas"] = list(self.disc_betas)
        return d


class UDANet(nn.Module):
    """G (segmentation), R (pyramid fusion + GFRM) and the two discriminators."""

    def __init__(self, seg_config: SegNetConfig, gfrm_width=32, use_gfrm=True):
        super().__init__()
        self.seg = SegNet(seg_config)
        self.feat = FeatureBranch(seg_config.pyramid_channels, gfrm_width, use_gfrm)
        self.disc_f = PatchDiscriminator(gfrm_width)
        self.disc_m = PatchDiscriminator(seg_config.num_classes)
        # NHWC convolutions are noticeably faster on CPU
        self.to(memory_format=torch.channels_last)

    def generator_parameters(self):
        return list(self.seg.parameters()) + list(self.feat.parameters())

    def discriminator_parameters(self):
        return list(self.disc_f.parameters()) + list(self.disc_m.parameters())


@dataclass
class TrainState:
    net: UDANet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    cfg: TrainConfig
    seg_config: SegNetConfig
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    target_order: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainConfig, seg_config: SegNetConfig = None) -> "TrainState":
        seg_config = seg_config or SegNetConfig()
        torch.manual_seed(cfg.seed)
        net = UDANet(seg_config, cfg.gfrm_width, cfg.use_gfrm)
        opt_g = torch.optim.SGD(net.generator_parameters(), lr=cfg.gen_lr, momentum=cfg.momentum,
                                nesterov=True, weight_decay=cfg.gen_weight_decay)
        opt_d = torch.optim.Adam(net.discriminator_parameters(), lr=cfg.disc_lr, betas=cfg.disc_betas,
                                 weight_decay=cfg.disc_weight_decay)
        return cls(net, opt_g, opt_d, cfg, seg_config, np.random.default_rng(cfg.seed))


def _set_requires_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def _check(report: LossReport, step: int):
    for name, value in report.components().items():
        if not math.isfinite(value):
            raise TrainingDiverged(step, name, value)


def _paired_scores(disc, src, tgt):
    """Score both domains in one pass; the discriminator has no batch-coupled layers."""
    scores = disc(torch.cat([src, tgt]))
    return scores[:src.shape[0]], scores[src.shape[0]:]


def train_step(state: TrainState, src_x, src_y, tgt_x, on_phase: Callable = None) -> LossReport:
    """One generator update followed by ``disc_steps`` discriminator updates.

    ``on_phase(name, state)`` is called after each phase ("generator", "discriminator").
    """
    if src_x.shape[0] == 0 or tgt_x.shape[0] == 0:
        raise InvalidInputError("train_step needs non-empty source and target batches")
    cfg, net = state.cfg, state.net
    w = cfg.loss_weights
    binary = cfg.source_loss == "binary"
    adversarial = cfg.feature_adversary or cfg.mask_adversary
    net.train()
    report = LossReport()
    src_x = src_x.contiguous(memory_format=torch.channels_last)
    tgt_x = tgt_x.contiguous(memory_format=torch.channels_last)

    # generator phase: update G and R only
    gen_params = net.generator_parameters()
    disc_params = net.discriminator_parameters()
    _set_requires_grad(disc_params, False)
    state.opt_g.zero_grad(set_to_none=True)
    probs_s, pyr_s = net.seg(src_x)
    ce = cross_entropy(probs_s, src_y, complement=binary)
    jac_scores, report.jac_per_class = jaccard_terms(probs_s, src_y, region=binary)
    jac = -jac_scores.mean()
    loss_g = w.lambda_ce * ce + w.lambda_jac * jac
    report.ce, report.jac = float(ce.detach()), float(jac.detach())

    probs_t = pyr_t = feat_t = None
    if adversarial:
        probs_t, pyr_t = net.seg(tgt_x)
        if cfg.mask_adversary and w.lambda_Gm > 0:
            adv_gm = gen_adv_loss(net.disc_m(probs_t))
            loss_g = loss_g + w.lambda_Gm * adv_gm
            report.adv_Gm = float(adv_gm.detach())
        if cfg.feature_adversary:
            feat_t = net.feat(pyr_t)
            if w.lambda_Gf > 0:
                adv_gf = gen_adv_loss(net.disc_f(feat_t))
                loss_g = loss_g + w.lambda_Gf * adv_gf
                report.adv_Gf = float(adv_gf.detach())
    _check(report, state.step)
    loss_g.backward()
    state.opt_g.step()
    _set_requires_grad(disc_params, True)
    if on_phase:
        on_phase("generator", state)

    # discriminator phase: generator outputs detached, update D_f and D_m only
    if adversarial and (w.lambda_Df > 0 or w.lambda_Dm > 0):
        _set_requires_grad(gen_params, False)
        feat_s = None
        if cfg.feature_adversary and w.lambda_Df > 0:
            with torch.no_grad():
                feat_s = net.feat([p.detach() for p in pyr_s])
        for _ in range(cfg.disc_steps):
            state.opt_d.zero_grad(set_to_none=True)
            loss_d = 0.0
            if w.lambda_Dm > 0:
                adv_dm = disc_loss(*_paired_scores(net.disc_m, probs_s.detach(), probs_t.detach()))
                loss_d = loss_d + w.lambda_Dm * adv_dm
                report.adv_Dm = float(adv_dm.detach())
            if feat_s is not None:
                adv_df = disc_loss(*_paired_scores(net.disc_f, feat_s, feat_t.detach()))
                loss_d = loss_d + w.lambda_Df * adv_df
                report.adv_Df = float(adv_df.detach())
            _check(report, state.step)
            loss_d.backward()
            state.opt_d.step()
        _set_requires_grad(gen_params, True)
    if on_phase:
        on_phase("discriminator", state)

    report.total = float(full_objective(report, w))
    state.step += 1
    return report


def stack_labeled(slices):
    x = torch.from_numpy(np.stack([s.image.pixels for s in slices]).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack([s.mask.labels for s in slices]).astype(np.int64))
    return x, y


def stack_images(slices):
    return torch.from_numpy(np.stack([s.image.pixels for s in slices]).astype(np.float32))[:, None]


def _next_target_batch(state: TrainState, n_target: int, size: int):
    idx = []
    while len(idx) < size:
        if not state.target_order:
            state.target_order = state.rng.permutation(n_target).tolist()
        idx.append(state.target_order.pop(0))
    return idx


def fit(data, cfg: TrainConfig, seg_config: SegNetConfig = None, evaluator: Callable = None,
        state: TrainState = None, log_fn: Callable = None):
    """Train on ``data.source_labeled`` and ``data.target_unlabeled``.

    Held-out masks are never touched here; ``evaluator(net, epoch)`` is the only
    route to per-epoch held-out scores and its output is merged into the epoch record.
    Returns ``(state, records)``.
    """
    if not data.source_labeled or not data.target_unlabeled:
        raise InvalidInputError("fit needs non-empty source_labeled and target_unlabeled splits")
    state = state or TrainState.create(cfg, seg_config)
    size = state.seg_config.input_size
    src_x, src_y = stack_labeled(data.source_labeled)
    tgt_x = stack_images(data.target_unlabeled)
    if src_x.shape[-1] != size or tgt_x.shape[-1] != size:
        raise ConfigError(f"training slices must be {size}x{size}; run preprocessing first")
    n_src, n_tgt = src_x.shape[0], tgt_x.shape[0]
    records = []
    emit = log_fn or records.append

    while state.epoch < cfg.epochs:
        lr = cfg.gen_lr_at(state.epoch)
        for group in state.opt_g.param_groups:
            group["lr"] = lr
        order = state.rng.permutation(n_src)
        for start in range(0, n_src, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            tsel = _next_target_batch(state, n_tgt, len(sel))
            report = train_step(state, src_x[sel], src_y[sel], tgt_x[tsel])
            rec = {"event": "step", "step": state.step, "epoch": state.epoch, "lr": lr}
            rec.update(report.as_dict())
            emit(rec)
        if evaluator is not None:
            rec = {"event": "epoch", "epoch": state.epoch}
            rec.update(evaluator(state.net, state.epoch))
            emit(rec)
            state.net.train()
        state.epoch += 1
    if log_fn is not None:
        return state, None
    return state, records


# ---------------------------------------------------------------- checkpoints

_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64", torch.int32: "int32"}


def _flatten_optimizer(prefix, opt):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            t = val if torch.is_tensor(val) else torch.tensor(val)
            tensors[f"{prefix}/state/{idx}/{key}"] = t
    return tensors, sd["param_groups"]


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write ``tensors.bin`` (raw little-endian bytes) and ``manifest.json`` (name, shape, dtype, offset)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {f"net/{k}": v for k, v in state.net.state_dict().items()}
    t_g, groups_g = _flatten_optimizer("opt_g", state.opt_g)
    t_d, groups_d = _flatten_optimizer("opt_d", state.opt_d)
    tensors.update(t_g)
    tensors.update(t_d)
    entries, offset = [], 0
    with open(directory / "tensors.bin", "wb") as fh:
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().contiguous().numpy()
            data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                            "offset": offset, "nbytes": len(data)})
            fh.write(data)
            offset += len(data)
    manifest = {
        "format": "cardiac-uda-checkpoint/1",
        "tensors": entries,
        "train_state": {
            "epoch": state.epoch,
            "step": state.step,
            "rng": state.rng.bit_generator.state,
            "target_order": [int(i) for i in state.target_order],
            "opt_g_param_groups": groups_g,
            "opt_d_param_groups": groups_d,
        },
        "train_config": state.cfg.to_dict(),
        "segnet_config": asdict(state.seg_config),
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def read_checkpoint_tensors(directory):
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    raw = (directory / "tensors.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"),
                            count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return manifest, tensors


def _unflatten_optimizer(prefix, tensors, groups):
    state = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "/state/"):
            continue
        _, _, idx, key = name.split("/", 3)
        state.setdefault(int(idx), {})[key] = t
    return {"state": state, "param_groups": groups}


def load_checkpoint(directory) -> TrainState:
    manifest, tensors = read_checkpoint_tensors(directory)
    seg_cfg = manifest["segnet_config"]
    seg_cfg["multipliers"] = tuple(seg_cfg["multipliers"])
    cfg = TrainConfig(**manifest["train_config"])
    state = TrainState.create(cfg, SegNetConfig(**seg_cfg))
    state.net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net/")})
    ts = manifest["train_state"]
    state.opt_g.load_state_dict(_unflatten_optimizer("opt_g", tensors, ts["opt_g_param_groups"]))
    state.opt_d.load_state_dict(_unflatten_optimizer("opt_d", tensors, ts["opt_d_param_groups"]))
    state.epoch, state.step = ts["epoch"], ts["step"]
    state.rng.bit_generator.state = ts["rng"]
    state.target_order = list(ts["target_order"])
    return state
