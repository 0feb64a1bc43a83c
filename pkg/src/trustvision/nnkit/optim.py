"""AdamW with decoupled weight decay and layer-wise learning-rate decay."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .vit import ModelCheckpoint, ShapeMismatch

NO_DECAY_NAMES = ("cls_token", "pos_embed", "mask_token", "decoder_pos_embed")


@dataclass(frozen=True)
class OptimHyper:
    base_lr: float = 5e-4
    weight_decay: float = 0.02
    layerwise_decay: float = 0.75
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class OptimState:
    hyper: OptimHyper = field(default_factory=OptimHyper)
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def layer_id(name: str, depth: int) -> int:
    """Embeddings are layer 0, encoder block i is layer i+1, the rest depth+1."""
    if name.startswith(("patch_embed.", "cls_token", "pos_embed")):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return depth + 1


def lr_scale(name: str, depth: int, layerwise_decay: float) -> float:
    return layerwise_decay ** (depth + 1 - layer_id(name, depth))


def applies_weight_decay(name: str, arr: np.ndarray) -> bool:
    return arr.ndim > 1 and name not in NO_DECAY_NAMES


def adamw_update(state: OptimState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], *,
                 depth: int = 0, lr_mult: float = 1.0, frozen=()) -> tuple[dict, OptimState]:
    """One AdamW step over a plain parameter dict; returns new params and state.

    ``frozen`` names are passed through untouched.
    """
    h = state.hyper
    b1, b2 = h.betas
    t = state.step_count + 1
    new_params, m_new, v_new = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        if name in frozen:
            new_params[name] = p
            continue
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} missing or misshapen")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        lr = h.base_lr * lr_mult * lr_scale(name, depth, h.layerwise_decay)
        update = m_hat / (np.sqrt(v_hat) + h.eps)
        if h.weight_decay and applies_weight_decay(name, p):
            update = update + h.weight_decay * p
        new_params[name] = p - lr * update
        m_new[name], v_new[name] = m, v
    return new_params, OptimState(h, t, m_new, v_new)


def optimizer_step(state: OptimState, ckpt: ModelCheckpoint, grads: dict[str, np.ndarray], *,
                   lr_mult: float = 1.0, frozen=()) -> tuple[ModelCheckpoint, OptimState]:
    params, state = adamw_update(state, ckpt.params, grads, depth=ckpt.arch.depth, lr_mult=lr_mult,
                                 frozen=frozen)
    return dataclasses.replace(ckpt, params=params), state


def cosine_lr(step: int, total: int, warmup: int = 0) -> float:
    """Multiplier in [0, 1]: linear warmup then half-cosine decay."""
    if total <= 0:
        return 1.0
    if step < warmup:
        return (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))
