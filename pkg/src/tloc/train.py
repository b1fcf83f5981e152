"""Multi-task training: combined four-head objective, warmup + cosine schedule,
decoupled-weight-decay adaptive-moment optimizer, and augmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import DualBranchModel


class TrainError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0.0:
            raise TrainError("loss weights must be nonnegative")
        if self.alpha + self.beta > 1.0:
            raise TrainError(
                f"alpha + beta = {self.alpha + self.beta} > 1 leaves a negative coarse weight"
            )

    @property
    def coarse(self) -> float:
        return 1.0 - self.alpha - self.beta


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    warmup_epochs: int = 2
    batch_size: int = 32

    def __post_init__(self):
        if not (0 <= self.warmup_epochs < self.epochs):
            raise TrainError("warmup_epochs must be < epochs")
        for f in ("base_lr", "epochs", "batch_size"):
            if getattr(self, f) <= 0:
                raise TrainError(f"{f} must be positive")


@dataclass
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8


def total_loss(logits: dict[str, Tensor], labels: dict[str, np.ndarray],
               w: LossWeights) -> Tensor:
    """(1 - a - b) L_coarse + a L_middle + b L_fine + g L_scene."""
    loss = ad.scale(ad.cross_entropy(logits["coarse"], labels["coarse"]), w.coarse)
    loss = loss + ad.scale(ad.cross_entropy(logits["middle"], labels["middle"]), w.alpha)
    loss = loss + ad.scale(ad.cross_entropy(logits["fine"], labels["fine"]), w.beta)
    if w.gamma > 0.0 and "scene" in logits:
        loss = loss + ad.scale(ad.cross_entropy(logits["scene"], labels["scene"]), w.gamma)
    return loss


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup 0 -> base_lr, then cosine decay to 0 at total_steps."""
    if step <= warmup_steps:
        if warmup_steps == 0:
            return base_lr
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * min(1.0, progress)))


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1 = momentum
        self.b2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * update


# augmentation --------------------------------------------------------------


def _gray(rgb: np.ndarray) -> np.ndarray:
    lum = 0.299 * rgb[:, 0] + 0.587 * rgb[:, 1] + 0.114 * rgb[:, 2]
    return lum[:, None]


def color_jitter(rgb: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation/hue jitter on [B, 3, H, W] in [0, 1]."""
    b = len(rgb)
    out = rgb.astype(np.float64)
    factors = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness, b)
    out = out * factors[:, None, None, None]
    factors = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast, b)
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = (out - mean) * factors[:, None, None, None] + mean
    factors = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation, b)
    gray = _gray(out)
    out = (out - gray) * factors[:, None, None, None] + gray
    # hue: rotation about the gray axis by up to cfg.hue of a full turn
    theta = rng.uniform(-cfg.hue, cfg.hue, b) * 2.0 * np.pi
    cos, sin = np.cos(theta), np.sin(theta)
    one3 = 1.0 / 3.0
    sq3 = np.sqrt(1.0 / 3.0)
    rot = np.empty((b, 3, 3))
    for i in range(b):
        c, s = cos[i], sin[i]
        rot[i] = c * np.eye(3) + (1.0 - c) * one3 + s * sq3 * np.array(
            [[0, -1, 1], [1, 0, -1], [-1, 1, 0]]
        )
    out = np.einsum("bij,bjhw->bihw", rot, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(rgb: np.ndarray, seg: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal flip (both channels, consistently) + color jitter (RGB only)."""
    rgb = rgb.copy()
    seg = seg.copy()
    flip = rng.uniform(size=len(rgb)) < cfg.horizontal_flip_prob
    rgb[flip] = rgb[flip][:, :, :, ::-1]
    seg[flip] = seg[flip][:, :, ::-1]
    jitter = rng.uniform(size=len(rgb)) < cfg.jitter_prob
    if jitter.any():
        rgb[jitter] = color_jitter(rgb[jitter], cfg, rng)
    return rgb, seg


# training loop -------------------------------------------------------------


@dataclass
class LabeledData:
    rgb: np.ndarray
    seg: np.ndarray
    labels: dict[str, np.ndarray]  # coarse/middle/fine/scene int arrays

    def __len__(self):
        return len(self.rgb)


def _eval_accuracy(model: DualBranchModel, data: LabeledData, batch_size: int = 64):
    fine_hits = scene_hits = total = 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            seg = data.seg[sl] if model.cfg.dual else None
            logits = model.forward(data.rgb[sl], seg)
            fine_hits += int((logits["fine"].data.argmax(axis=1) == data.labels["fine"][sl]).sum())
            if "scene" in logits:
                scene_hits += int(
                    (logits["scene"].data.argmax(axis=1) == data.labels["scene"][sl]).sum()
                )
            total += len(data.rgb[sl])
    return fine_hits / total, scene_hits / total


def train(model: DualBranchModel, train_data: LabeledData, val_data: LabeledData,
          optim_cfg: OptimConfig, weights: LossWeights, aug_cfg: AugmentConfig,
          shuffle_rng: np.random.Generator, augment_rng: np.random.Generator,
          metrics_path: str | None = None, log=None):
    """Mini-batch loop with per-epoch validation; returns (best_params, rows).

    best_params is a copy of the parameters at the best fine-cell validation
    accuracy; rows is the metrics table that also lands in metrics_path.
    """
    n = len(train_data)
    if n == 0:
        raise TrainError("empty training set")
    for head in ("coarse", "middle", "fine"):
        if head not in train_data.labels:
            raise TrainError(f"missing {head} labels")
    if model.cfg.scene_head and "scene" not in train_data.labels:
        raise TrainError("scene head enabled but scene labels missing")

    bs = optim_cfg.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = steps_per_epoch * optim_cfg.epochs
    warmup_steps = steps_per_epoch * optim_cfg.warmup_epochs
    opt = AdamW(model.params, momentum=optim_cfg.momentum,
                weight_decay=optim_cfg.weight_decay)

    rows = []
    best_acc = -1.0
    best_params = None
    step = 0
    try:
        for epoch in range(optim_cfg.epochs):
            order = shuffle_rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                rgb, seg = augment(train_data.rgb[idx], train_data.seg[idx], aug_cfg, augment_rng)
                labels = {k: v[idx] for k, v in train_data.labels.items()}
                logits = model.forward(rgb, seg if model.cfg.dual else None)
                loss = total_loss(logits, labels, weights)
                model.zero_grad()
                ad.backward(loss)
                step += 1
                lr = lr_at(step, total_steps, warmup_steps, optim_cfg.base_lr)
                opt.step(lr)
                epoch_loss += float(loss.data) * len(idx)
            epoch_loss /= n
            val_fine, val_scene = _eval_accuracy(model, val_data)
            rows.append({
                "epoch": epoch, "step": step, "lr": lr, "train_loss": epoch_loss,
                "val_acc_fine": val_fine, "val_acc_scene": val_scene,
            })
            if log:
                log(f"epoch {epoch:3d}  loss {epoch_loss:.4f}  "
                    f"val_fine {val_fine:.3f}  val_scene {val_scene:.3f}  lr {lr:.2e}")
            # ties prefer the later epoch: more training sharpens margins
            if val_fine >= best_acc:
                best_acc = val_fine
                best_params = {k: p.data.copy() for k, p in model.params.items()}
    except NumericError:
        # keep the last-good parameters so the caller can checkpoint them
        if best_params is not None:
            for name, arr in best_params.items():
                model.params[name].data = arr
        if metrics_path:
            write_metrics(rows, metrics_path)
        raise

    if metrics_path:
        write_metrics(rows, metrics_path)
    return best_params, rows


def write_metrics(rows, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "lr", "train_loss", "val_acc_fine", "val_acc_scene"])
        for r in rows:
            writer.writerow([
                r["epoch"], r["step"], f"{r['lr']:.10g}", f"{r['train_loss']:.10g}",
                f"{r['val_acc_fine']:.10g}", f"{r['val_acc_scene']:.10g}",
            ])
