"""Optimization harness: loss, one-cycle schedule, fold training and cross-validation."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .metrics import AggregateReport, CaseReport, aggregate, evaluate_case
from .model import GROUPS, AblationSwitches, FusionSegmenter, parameter_groups
from .preprocess import AugmentConfig, PreprocessConfig, augment, baseline_normalize, preprocess_case
from .segnet import ModelOutput, NetworkConfig
from .semantic import SemanticConfig, semantic_weight
from .volume import REGIONS, TUMOR_TYPES, Case, derive_regions

log = logging.getLogger(__name__)

CURVES_HEADER = ("epoch", "split", "wt_dice", "tc_dice", "et_dice", "wt_hd95", "tc_hd95",
                 "et_hd95", "loss")


@dataclass
class LossWeights:
    dice: float = 1.0
    bce: float = 1.0
    aux: tuple[float, ...] = (0.5, 0.25, 0.125)
    classification: float = 0.1

    def __post_init__(self) -> None:
        self.aux = tuple(float(a) for a in self.aux)
        if min((self.dice, self.bce, self.classification) + self.aux, default=0) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    base_lr: float = 5e-5
    weight_decay: float = 1e-4
    pct_start: float = 0.2
    div_factor: float = 20.0
    final_div_factor: float = 100.0
    group_multipliers: dict = field(
        default_factory=lambda: {"encoder_decoder": 2.0, "clip_adapter": 0.1, "attention": 3.0}
    )
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0
    folds: int = 5
    semantic_activation_epoch: int = 8
    semantic_ramp_epochs: int = 2
    eval_every: int = 1
    threshold: float = 0.5
    # final validation uses the best-scoring epoch's weights; False keeps the last epoch's
    restore_best: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # Full precision only; the field exists so configs asking for AMP fail loudly.
    mixed_precision: bool = False

    def __post_init__(self) -> None:
        for name in ("base_lr", "div_factor", "final_div_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 < self.pct_start < 1:
            raise ConfigError(f"pct_start must be in (0, 1), got {self.pct_start}")
        if set(self.group_multipliers) != set(GROUPS) or min(self.group_multipliers.values()) <= 0:
            raise ConfigError(f"group_multipliers needs positive values for exactly {GROUPS}")
        if self.batch_size < 1 or self.epochs < 1 or self.folds < 2:
            raise ConfigError("batch_size and epochs must be >= 1, folds >= 2")
        if self.mixed_precision:
            raise ConfigError("mixed precision is not supported; set mixed_precision: false")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)


# --------------------------------------------------------------------------- loss

def region_targets(label: np.ndarray) -> torch.Tensor:
    """(3, D, H, W) float tensor of WT/TC/ET masks."""
    return torch.from_numpy(derive_regions(label).as_array().astype(np.float32))


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Per-channel soft Dice loss averaged over the batch, shape (C,)."""
    dims = tuple(range(2, probs.dim()))
    inter = (probs * target).sum(dims)
    denom = probs.sum(dims) + target.sum(dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean(0)


def bce_per_channel(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    per_voxel = F.binary_cross_entropy(probs, target, reduction="none")
    return per_voxel.transpose(0, 1).flatten(1).mean(1)


def _head_terms(probs, target, w: LossWeights):
    d, b = soft_dice_loss(probs, target), bce_per_channel(probs, target)
    return (w.dice * d + w.bce * b).sum(), d, b


def compute_loss(output: ModelOutput, target: torch.Tensor, cfg: TrainConfig,
                 class_target: torch.Tensor | None = None):
    """Soft Dice + BCE per region on the main and auxiliary heads, plus classification CE.

    Args:
        target: (B, 3, D, H, W) region masks at the main resolution; auxiliary
            targets are nearest-neighbour downsampled from it.
        class_target: (B,) long tensor of tumor-type indices, or ``None`` to
            skip the classification term.

    Returns:
        ``(total, breakdown)`` where ``breakdown`` maps component names to floats.

    Raises:
        FloatingPointError: if any component is NaN or infinite.
    """
    w = cfg.loss_weights
    total, d, b = _head_terms(output.main, target, w)
    parts = {"dice": d.mean(), "bce": b.mean(), "main": total}
    if len(w.aux) < len(output.aux):
        raise ConfigError(f"{len(output.aux)} auxiliary heads but only {len(w.aux)} aux weights")
    for k, aux in enumerate(output.aux):
        t = F.interpolate(target, size=aux.shape[2:], mode="nearest")
        term, _, _ = _head_terms(aux, t, w)
        parts[f"aux{k}"] = term
        total = total + w.aux[k] * term
    if class_target is not None and w.classification > 0:
        ce = F.cross_entropy(output.class_logits, class_target)
        parts["classification"] = ce
        total = total + w.classification * ce
    parts["total"] = total
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss component '{name}'")
    return total, {k: float(v.detach()) for k, v in parts.items()}


# --------------------------------------------------------------------------- schedule

def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> dict[str, float]:
    """One-cycle cosine rates per parameter group.

    Warm up from ``base_lr / div_factor`` to ``base_lr`` over the first
    ``pct_start * total_steps`` steps, then anneal to
    ``base_lr / final_div_factor`` at step ``total_steps - 1``. Each group's
    rate is that curve times its multiplier.
    """
    if total_steps < 2:
        raise ValueError("total_steps must be >= 2")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak_step = cfg.pct_start * total_steps
    last = total_steps - 1
    if peak_step >= last:
        raise ValueError(f"pct_start {cfg.pct_start} leaves no annealing phase for {total_steps} steps")
    hi = cfg.base_lr
    lo = hi / cfg.div_factor
    floor = hi / cfg.final_div_factor
    if step <= peak_step:
        lr = _cos_interp(lo, hi, step / peak_step)
    else:
        lr = _cos_interp(hi, floor, (step - peak_step) / (last - peak_step))
    out = {"base": lr}
    out.update({g: lr * m for g, m in cfg.group_multipliers.items()})
    return out


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = [
        {"params": params, "name": name, "lr": cfg.base_lr * cfg.group_multipliers[name]}
        for name, params in parameter_groups(model).items() if params
    ]
    return torch.optim.AdamW(groups, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


# --------------------------------------------------------------------------- folds

def assign_folds(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> dict[str, int]:
    """Deal cases round-robin into ``k`` folds in seeded-hash order."""
    if len(set(case_ids)) != len(case_ids):
        raise DataError("case ids must be unique for fold assignment")
    order = sorted(case_ids, key=lambda c: hashlib.sha256(f"{seed}:{c}".encode()).hexdigest())
    return {c: i % k for i, c in enumerate(order)}


# --------------------------------------------------------------------------- data prep

def prepare_case(case: Case, switches: AblationSwitches, pcfg: PreprocessConfig) -> Case:
    """Normalization used for both training and evaluation (no label-driven contrast)."""
    if switches.pixel_fusion:
        return preprocess_case(case, pcfg, enhance_regions=False)
    return baseline_normalize(case)


def case_seed(seed: int, epoch: int, case_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, zlib.crc32(case_id.encode())])


def _batch_tensors(cases: Sequence[Case]):
    x = torch.from_numpy(np.stack([c.stack() for c in cases]))
    target = torch.stack([region_targets(c.label) for c in cases])
    if all(c.tumor_type is not None for c in cases):
        cls = torch.tensor([TUMOR_TYPES.index(c.tumor_type) for c in cases])
    else:
        cls = None
    return x, target, cls, [c.description for c in cases]


@torch.no_grad()
def predict(model: FusionSegmenter, case: Case, semantic: float = 1.0) -> np.ndarray:
    """(3, D, H, W) region probabilities; the input is zero-padded to the network grid."""
    model.eval()
    x = torch.from_numpy(case.stack())[None]
    k = 2 ** model.net_cfg.levels
    shape = x.shape[2:]
    pad = [(-s) % k for s in shape]
    if any(pad):
        x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]))
    out = model(x, [case.description], semantic)
    probs = out.main[0, :, :shape[0], :shape[1], :shape[2]]
    return probs.numpy().astype(np.float32)


def evaluate_model(model: FusionSegmenter, cases: Sequence[Case], threshold: float = 0.5,
                   semantic: float = 1.0) -> list[CaseReport]:
    return [
        evaluate_case(predict(model, c, semantic), c.label, threshold, c.spacing, c.case_id)
        for c in cases
    ]


def _curve_row(epoch, split, agg: AggregateReport | None, loss) -> dict:
    row = {"epoch": epoch, "split": split, "loss": loss}
    for r in REGIONS:
        row[f"{r}_dice"] = None if agg is None else agg.means[f"{r}_dice"]
        row[f"{r}_hd95"] = None if agg is None else agg.means[f"{r}_hd95"]
    return row


def write_curves(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVES_HEADER)
        for row in rows:
            w.writerow(["" if row[k] is None else row[k] for k in CURVES_HEADER])


@dataclass
class FoldResult:
    model: FusionSegmenter
    curves: list[dict]
    epoch_losses: list[float]
    val_reports: list[CaseReport]
    best_epoch: int
    best_state: dict
    steps: int

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    @property
    def degenerate(self) -> bool:
        """Every validation prediction is empty background."""
        return bool(self.val_reports) and all(r.all_background() for r in self.val_reports)


def build_model(net_cfg: NetworkConfig, sem_cfg: SemanticConfig, switches: AblationSwitches,
                seed: int) -> FusionSegmenter:
    torch.manual_seed(seed)
    encoder = None
    if sem_cfg.encoder_checkpoint and switches.semantic_fusion:
        from .checkpoint import load_checkpoint
        from .semantic import ToyEncoder

        tensors, meta = load_checkpoint(sem_cfg.encoder_checkpoint)
        encoder = ToyEncoder(sem_cfg.embed_dim, trainable=not sem_cfg.freeze_encoder,
                             pooled=int(meta.get("pooled", 16)),
                             vocab_size=int(meta.get("vocab_size", 4096)))
        encoder.load_state_dict(tensors)
    return FusionSegmenter(net_cfg, sem_cfg, switches, encoder)


def train_fold(train_cases: Sequence[Case], val_cases: Sequence[Case],
               switches: AblationSwitches | None = None,
               cfg: TrainConfig | None = None,
               net_cfg: NetworkConfig | None = None,
               sem_cfg: SemanticConfig | None = None,
               pre_cfg: PreprocessConfig | None = None,
               aug_cfg: AugmentConfig | None = None,
               out_dir: str | Path | None = None,
               on_epoch: Callable[[int, float], None] | None = None) -> FoldResult:
    """Train one model and track validation metrics per epoch.

    Cases are raw (un-normalized); preprocessing follows ``switches.pixel_fusion``.
    The best-validation (mean region Dice) weights are restored before the
    final validation pass unless ``cfg.restore_best`` is off. When ``out_dir`` is given, ``curves.csv`` and
    ``best.ckpt`` are written there.

    Raises:
        DataError: on an empty training fold or missing labels.
        FloatingPointError: if the loss becomes non-finite (epoch/step attached).
    """
    switches = switches or AblationSwitches()
    cfg = cfg or TrainConfig()
    net_cfg = net_cfg or NetworkConfig()
    sem_cfg = sem_cfg or SemanticConfig()
    pre_cfg = pre_cfg or PreprocessConfig()
    aug_cfg = aug_cfg or AugmentConfig()
    if not train_cases:
        raise DataError("empty training fold")
    if any(c.label is None for c in list(train_cases) + list(val_cases)):
        raise DataError("training and validation cases need label maps")

    train_prep = [prepare_case(c, switches, pre_cfg) for c in train_cases]
    val_prep = [prepare_case(c, switches, pre_cfg) for c in val_cases]
    model = build_model(net_cfg, sem_cfg, switches, cfg.seed)
    opt = make_optimizer(model, cfg)
    n_batches = math.ceil(len(train_prep) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    step = 0
    curves, epoch_losses = [], []
    best_score, best_epoch, best_state = -math.inf, -1, copy.deepcopy(model.state_dict())

    for epoch in range(cfg.epochs):
        model.train()
        lam = semantic_weight(epoch, cfg.semantic_activation_epoch, cfg.semantic_ramp_epochs)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_prep))
        losses = []
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            batch = [augment(train_prep[i], aug_cfg, case_seed(cfg.seed, epoch, train_prep[i].case_id),
                             pre_cfg) for i in idx]
            x, target, cls, desc = _batch_tensors(batch)
            if total_steps >= 2:
                rates = lr_at(step, total_steps, cfg)
                for group in opt.param_groups:
                    group["lr"] = rates[group["name"]]
            out = model(x, desc, lam)
            try:
                loss, _ = compute_loss(out, target, cfg, cls)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch} step {step}: {exc}") from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        mean_loss = float(np.mean(losses))
        epoch_losses.append(mean_loss)
        curves.append(_curve_row(epoch, "train", None, mean_loss))
        last = epoch == cfg.epochs - 1
        if val_prep and (last or (epoch + 1) % cfg.eval_every == 0):
            reports = evaluate_model(model, val_prep, cfg.threshold, max(lam, 0.0))
            agg = aggregate(reports)
            curves.append(_curve_row(epoch, "val", agg, _val_loss(model, val_prep, cfg, lam)))
            score = float(np.mean([agg.means[f"{r}_dice"] for r in REGIONS]))
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        log.info("epoch %d loss %.4f", epoch, mean_loss)

    if val_prep and not cfg.restore_best:
        best_epoch, best_state = cfg.epochs - 1, copy.deepcopy(model.state_dict())
    if val_prep:
        model.load_state_dict(best_state)
        lam_best = semantic_weight(best_epoch, cfg.semantic_activation_epoch, cfg.semantic_ramp_epochs)
        val_reports = evaluate_model(model, val_prep, cfg.threshold, lam_best)
    else:
        best_state, best_epoch, val_reports = copy.deepcopy(model.state_dict()), cfg.epochs - 1, []
    result = FoldResult(model, curves, epoch_losses, val_reports, best_epoch, best_state, step)
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_curves(curves, out_dir / "curves.csv")
        save_checkpoint(out_dir / "best.ckpt", best_state, {
            "network": _plain(net_cfg), "semantic": _plain(sem_cfg),
            "switches": switches.to_dict(), "best_epoch": best_epoch,
            "semantic_weight": semantic_weight(best_epoch, cfg.semantic_activation_epoch,
                                               cfg.semantic_ramp_epochs),
        })
    return result


@torch.no_grad()
def _val_loss(model, cases, cfg, lam) -> float:
    model.eval()
    vals = []
    for c in cases:
        x, target, cls, desc = _batch_tensors([c])
        loss, _ = compute_loss(model(x, desc, lam), target, cfg, cls)
        vals.append(float(loss))
    return float(np.mean(vals))


def _plain(obj):
    from dataclasses import asdict, is_dataclass

    return asdict(obj) if is_dataclass(obj) else obj


@dataclass
class CVResult:
    assignment: dict[str, int]
    folds: dict[int, FoldResult]
    fold_reports: dict[int, AggregateReport]
    pooled: AggregateReport
    reports: list[CaseReport]


def cross_validate(cases: Sequence[Case], switches: AblationSwitches | None = None,
                   cfg: TrainConfig | None = None, folds_to_run: int | None = None,
                   out_dir: str | Path | None = None, **cfgs) -> CVResult:
    """k-fold cross-validation; each case is validated exactly once across all folds.

    ``folds_to_run`` limits how many folds are trained (for quick runs); the
    pooled report then covers only the validated cases.
    """
    cfg = cfg or TrainConfig()
    k = cfg.folds
    if len(cases) < k:
        raise DataError(f"cross-validation needs at least {k} cases, got {len(cases)}")
    assignment = assign_folds([c.case_id for c in cases], k, cfg.seed)
    results, fold_reports, pooled = {}, {}, []
    for fold in range(k if folds_to_run is None else min(folds_to_run, k)):
        train = [c for c in cases if assignment[c.case_id] != fold]
        val = [c for c in cases if assignment[c.case_id] == fold]
        fold_dir = None if out_dir is None else Path(out_dir) / f"fold{fold}"
        res = train_fold(train, val, switches, cfg, out_dir=fold_dir, **cfgs)
        results[fold] = res
        fold_reports[fold] = aggregate(res.val_reports)
        pooled.extend(res.val_reports)
    overall = aggregate(pooled)
    overall.folds = {str(f): r for f, r in fold_reports.items()}
    return CVResult(assignment, results, fold_reports, overall, pooled)
