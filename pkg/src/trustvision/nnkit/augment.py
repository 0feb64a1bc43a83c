"""Batch augmentation: flips, shifted crops, brightness/contrast, Mixup and CutMix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    flip: float = 0.0
    crop: float = 0.0
    brightness_contrast: float = 0.0
    mixup_alpha: float = 0.0
    cutmix: float = 0.0
    crop_pad: int = 2
    brightness: float = 0.1
    contrast: float = 0.2

    def __post_init__(self):
        for name in ("flip", "crop", "brightness_contrast", "cutmix"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} probability must lie in [0, 1]")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")

    @property
    def mixes(self) -> bool:
        return self.mixup_alpha > 0 or self.cutmix > 0


NO_AUGMENT = AugmentPolicy()
FINETUNE_DEFAULT = AugmentPolicy(crop=0.5, brightness_contrast=0.5)
SUPERVISED_PRETRAIN_DEFAULT = AugmentPolicy(crop=0.5, brightness_contrast=0.5, mixup_alpha=0.8, cutmix=0.5)


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[:, :, ::-1, :]


def one_hot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


def mixup(batch, soft, lam: float, perm):
    """Convex combination of each example with ``batch[perm]``."""
    return lam * batch + (1 - lam) * batch[perm], lam * soft + (1 - lam) * soft[perm]


def cutmix_box(h: int, w: int, lam: float, rng) -> tuple[int, int, int, int]:
    """Box (top, left, height, width) of area close to (1 - lam) * h * w, fully inside the image."""
    ratio = np.sqrt(1.0 - lam)
    bh, bw = int(round(h * ratio)), int(round(w * ratio))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix(batch, soft, box, perm):
    """Paste ``box`` from ``batch[perm]``; labels weighted by the pasted area."""
    top, left, bh, bw = box
    out = batch.copy()
    out[:, top:top + bh, left:left + bw, :] = batch[perm][:, top:top + bh, left:left + bw, :]
    frac = bh * bw / (batch.shape[1] * batch.shape[2])
    return out, (1 - frac) * soft + frac * soft[perm]


def augment_batch(batch, policy: AugmentPolicy, seed, labels=None, num_classes: int | None = None):
    """Return ``(images, soft_labels)``; soft labels are None when no labels are given."""
    rng = np.random.default_rng(seed)
    x = np.array(batch, dtype=np.float64, copy=True)
    B, H, W, _ = x.shape
    if policy.flip:
        sel = rng.random(B) < policy.flip
        x[sel] = hflip(x[sel])
    if policy.crop:
        pad = policy.crop_pad
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        for i in np.nonzero(rng.random(B) < policy.crop)[0]:
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            x[i] = padded[i, dy:dy + H, dx:dx + W]
    if policy.brightness_contrast:
        for i in np.nonzero(rng.random(B) < policy.brightness_contrast)[0]:
            c = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
            b = rng.uniform(-policy.brightness, policy.brightness)
            m = x[i].mean()
            x[i] = np.clip((x[i] - m) * c + m + b, 0.0, 1.0)
    soft = None
    if labels is not None:
        soft = np.asarray(labels, dtype=np.float64)
        if soft.ndim == 1:
            soft = one_hot(labels, num_classes)
        if policy.mixes and B > 1:
            perm = np.arange(B)[::-1].copy()
            if policy.cutmix and rng.random() < policy.cutmix:
                lam = rng.beta(1.0, 1.0)
                x, soft = cutmix(x, soft, cutmix_box(H, W, lam, rng), perm)
            elif policy.mixup_alpha > 0:
                lam = rng.beta(policy.mixup_alpha, policy.mixup_alpha)
                x, soft = mixup(x, soft, lam, perm)
    return x, soft
