"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vit import ArchConfig, ModelCheckpoint, backprop, classify_loss, init_checkpoint, mae_forward_loss

ABS_FLOOR = 1e-8


@dataclass(frozen=True)
class BlockCheck:
    name: str
    loss_kind: str
    max_rel_error: float
    n_checked: int


def relative_errors(analytic, numeric, block_scale: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-6 * block_scale, ABS_FLOOR), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(1e-6 * block_scale, ABS_FLOOR))
    return np.abs(a - n) / den


def perturbed_checkpoint(arch: ArchConfig, seed: int, scale: float = 0.05) -> ModelCheckpoint:
    """Initialised weights plus noise, so zero biases and unit gains do not hide errors."""
    ck = init_checkpoint(arch, seed)
    rng = np.random.default_rng([seed, 99])
    return ck.evolve(params={k: v + rng.normal(0.0, scale, v.shape) for k, v in ck.params.items()})


# central-difference stencils: (offsets in units of h, weights); derivative = sum(w * f(x + o*h)) / h
STENCILS = {
    2: ((1.0, -1.0), (0.5, -0.5)),
    4: ((1.0, -1.0, 2.0, -2.0), (8.0 / 12, -8.0 / 12, -1.0 / 12, 1.0 / 12)),
}


def check_gradients(ckpt: ModelCheckpoint, batch, labels=None, *, mask_seed=0, per_block: int = 6,
                    h: float = 1e-5, seed: int = 0, order: int = 2) -> list[BlockCheck]:
    """Compare analytic and numeric gradients on sampled entries of every parameter block.

    The MAE loss is always checked; the cross-entropy loss too when the
    checkpoint has a head and ``labels`` are given.  ``order`` 4 uses the
    five-point central stencil, whose smaller truncation error allows a
    larger ``h`` and so less round-off on small gradient entries.
    """
    offsets, weights = STENCILS[order]
    rng = np.random.default_rng(seed)
    losses = []
    if ckpt.has_decoder:
        losses.append(("mae", lambda c: mae_forward_loss(c, batch, mask_seed).loss,
                       lambda c: mae_forward_loss(c, batch, mask_seed).cache))
    if ckpt.has_head and labels is not None:
        losses.append(("cross_entropy", lambda c: classify_loss(c, batch, labels)[0],
                       lambda c: classify_loss(c, batch, labels)[1]))
    out = []
    for kind, loss_fn, cache_fn in losses:
        grads = backprop(cache_fn(ckpt), kind)
        for name, value in ckpt.params.items():
            g = grads[name]
            flat = rng.choice(value.size, size=min(per_block, value.size), replace=False)
            num, ana = [], []
            for f in flat:
                ix = np.unravel_index(f, value.shape)
                step = h * max(1.0, abs(value[ix]))
                total = 0.0
                for off, wt in zip(offsets, weights):
                    arr = value.copy()
                    arr[ix] += off * step
                    params = dict(ckpt.params)
                    params[name] = arr
                    total += wt * loss_fn(ckpt.evolve(params=params))
                num.append(total / step)
                ana.append(g[ix])
            err = relative_errors(ana, num, float(np.abs(g).max()))
            out.append(BlockCheck(name, kind, float(err.max()), len(flat)))
    return out
