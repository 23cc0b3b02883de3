"""Losses, training samples and the training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .geometry import canonical_mask
from .model import LayoutModel, encode_graphs
from .nn import Adam
from .scenegraph import SceneGraph

MASK_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lambda_ep: float = 10.0
    lambda_mask: float = 0.1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    seed: int = 0

    def __post_init__(self):
        if self.lambda_ep < 0 or self.lambda_mask < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=8, steps=300)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainSample:
    graph: SceneGraph
    gt_eps: np.ndarray    # (n, 10) normalized to the image
    gt_masks: np.ndarray  # (n, 16, 16) binary

    def __post_init__(self):
        n = len(self.graph.objects)
        if self.gt_eps.shape != (n, 10) or self.gt_masks.shape[0] != n:
            raise ShapeMismatch(f"targets {self.gt_eps.shape}/{self.gt_masks.shape} "
                                f"for {n} objects")


def prepare_gt_mask(mask: np.ndarray, k: int = 16) -> np.ndarray:
    """Object mask cropped to its tight box, nearest-resized to k x k, thresholded."""
    return canonical_mask(mask, k).astype(np.float64)


# ---- losses ----------------------------------------------------------------

def _check(pred, gt, what):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{what}: prediction {pred.shape} vs target {gt.shape}")
    return pred, gt


def loss_ep(pred_eps, gt_eps) -> float:
    """Mean over objects of the Euclidean norm of the 10-value difference."""
    pred, gt = _check(pred_eps, gt_eps, "loss_ep")
    if pred.ndim != 2 or pred.shape[1] != 10:
        raise ShapeMismatch(f"loss_ep expects (n, 10), got {pred.shape}")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def loss_ep_grad(pred_eps, gt_eps) -> np.ndarray:
    pred, gt = _check(pred_eps, gt_eps, "loss_ep")
    diff = pred - gt
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    # subgradient 0 at an exact match
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, diff / safe, 0.0) / len(pred)


def loss_mask(pred_masks, gt_masks) -> float:
    """Pixel-wise binary cross entropy averaged over objects and pixels."""
    p, y = _check(pred_masks, gt_masks, "loss_mask")
    p = np.clip(p, MASK_CLAMP, 1 - MASK_CLAMP)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def loss_mask_grad(pred_masks, gt_masks) -> np.ndarray:
    p, y = _check(pred_masks, gt_masks, "loss_mask")
    inside = (p > MASK_CLAMP) & (p < 1 - MASK_CLAMP)
    pc = np.clip(p, MASK_CLAMP, 1 - MASK_CLAMP)
    g = (pc - y) / (pc * (1 - pc)) / p.size
    return np.where(inside, g, 0.0)


def loss_total(l_ep: float, l_mask: float, cfg: TrainConfig) -> float:
    return cfg.lambda_ep * l_ep + cfg.lambda_mask * l_mask


# ---- training -----------------------------------------------------------------

@dataclass
class StepLoss:
    step: int
    loss_ep: float
    loss_mask: float
    loss_total: float


@dataclass
class TrainResult:
    model: LayoutModel
    curve: list[StepLoss] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)


def batch_targets(samples: Sequence[TrainSample]):
    return (np.concatenate([s.gt_eps for s in samples]),
            np.concatenate([s.gt_masks for s in samples]))


def batch_loss(model: LayoutModel, samples: Sequence[TrainSample], cfg: TrainConfig,
               backward: bool = True) -> StepLoss:
    """Train-mode forward on one batch; with ``backward`` gradients are accumulated."""
    batch = encode_graphs([s.graph for s in samples], model.vocab)
    gt_eps, gt_masks = batch_targets(samples)
    eps, masks = model.forward(batch, train=True)
    l_ep, l_mask = loss_ep(eps, gt_eps), loss_mask(masks, gt_masks)
    if backward:
        model.backward((cfg.lambda_ep * loss_ep_grad(eps, gt_eps),
                        cfg.lambda_mask * loss_mask_grad(masks, gt_masks)))
    return StepLoss(0, l_ep, l_mask, loss_total(l_ep, l_mask, cfg))


def dataset_loss(model: LayoutModel, samples: Sequence[TrainSample], cfg: TrainConfig) -> StepLoss:
    """Mean batch loss over the dataset in fixed order, leaving running statistics alone."""
    model.set_update_stats(False)
    try:
        parts = [batch_loss(model, samples[i:i + cfg.batch_size], cfg, backward=False)
                 for i in range(0, len(samples), cfg.batch_size)]
    finally:
        model.set_update_stats(True)
    mean = lambda attr: float(np.mean([getattr(p, attr) for p in parts]))  # noqa: E731
    return StepLoss(0, mean("loss_ep"), mean("loss_mask"), mean("loss_total"))


def train(dataset: Sequence[TrainSample], model: LayoutModel, cfg: TrainConfig,
          log=None) -> TrainResult:
    """Seeded mini-batch Adam training; returns the model and its per-step loss curve."""
    if not dataset:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    result = TrainResult(model)
    total_steps = cfg.steps
    n = len(dataset)
    step = 0
    epoch = 0
    while True:
        if total_steps is None and epoch >= cfg.epochs:
            break
        order = rng.permutation(n)
        epoch_losses = []
        for i in range(0, n, cfg.batch_size):
            if total_steps is not None and step >= total_steps:
                break
            samples = [dataset[j] for j in order[i:i + cfg.batch_size]]
            model.zero_grad()
            sl = batch_loss(model, samples, cfg)
            opt.step()
            step += 1
            sl.step = step
            result.curve.append(sl)
            epoch_losses.append(sl.loss_total)
        if epoch_losses:
            result.epoch_means.append(float(np.mean(epoch_losses)))
            if log is not None:
                log(f"epoch {epoch}: mean loss {result.epoch_means[-1]:.5f} (step {step})")
        epoch += 1
        if total_steps is not None and step >= total_steps:
            break
    return result


def write_curve_csv(path, curve: Sequence[StepLoss]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss_ep", "loss_mask", "loss_total"])
        for s in curve:
            w.writerow([s.step, repr(s.loss_ep), repr(s.loss_mask), repr(s.loss_total)])
