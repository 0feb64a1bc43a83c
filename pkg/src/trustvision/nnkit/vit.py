"""Micro vision transformer with a masked-autoencoder decoder and a linear head.

Parameter naming (D = embed_dim, Dd = decoder_dim, P = patches,
pd = patch_size**2 * in_chans)::

    patch_embed.w (pd, D)     patch_embed.b (D,)
    cls_token (D,)            pos_embed (P+1, D)
    blocks.{i}.{norm1,norm2}.{g,b}
    blocks.{i}.attn.{qkv,proj}.{w,b}
    blocks.{i}.mlp.{fc1,fc2}.{w,b}
    norm.{g,b}
    decoder_embed.{w,b}       mask_token (Dd,)       decoder_pos_embed (P+1, Dd)
    decoder_blocks.{i}.*      decoder_norm.{g,b}     decoder_pred.{w,b}
    head.w (D, C)             head.b (C,)

Fine-tuned checkpoints drop every ``decoder*``/``mask_token`` entry.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .. import container
from .layers import (
    block_bwd,
    block_fwd,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    log_softmax,
    softmax_stable,
)

STAGES = ("random", "pretrained", "finetuned", "local")


class ShapeMismatch(ValueError):
    pass


class StaleCache(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 1
    embed_dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 1
    mask_ratio: float = 0.75
    num_classes: int = 0
    pool: str = "mean"
    drop_path: float = 0.1
    norm_pix_loss: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ValueError("embed_dim and decoder_dim must be divisible by heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.pool not in ("cls", "mean"):
            raise ValueError("pool must be 'cls' or 'mean'")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_chans

    @property
    def num_masked(self) -> int:
        return int(round(self.mask_ratio * self.num_patches))

    @property
    def hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _freeze(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        a = np.array(v, dtype=np.float64, copy=True)
        a.flags.writeable = False
        out[k] = a
    return out


@dataclass(frozen=True)
class ModelCheckpoint:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    seed: int
    stage: str = "random"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        object.__setattr__(self, "params", _freeze(self.params))
        expected = param_shapes(self.arch)
        for name, arr in self.params.items():
            if name not in expected or tuple(arr.shape) != expected[name]:
                raise ShapeMismatch(f"parameter {name!r} has shape {arr.shape}, expected {expected.get(name)}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} has non-finite values")

    @property
    def has_decoder(self) -> bool:
        return "decoder_pred.w" in self.params

    @property
    def has_head(self) -> bool:
        return "head.w" in self.params

    def evolve(self, **changes) -> "ModelCheckpoint":
        return dataclasses.replace(self, **changes)

    # serialization -------------------------------------------------------

    def header(self) -> dict:
        return {"format": "trustvision-checkpoint/1", "arch": self.arch.to_dict(), "seed": self.seed,
                "stage": self.stage, "meta": self.meta}

    def to_bytes(self) -> bytes:
        return container.encode(self.header(), self.params)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | os.PathLike) -> str:
        return container.write(path, self.header(), self.params)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelCheckpoint":
        header, arrays = container.read(path)
        return cls(ArchConfig.from_dict(header["arch"]), arrays, header["seed"], header["stage"],
                   header.get("meta", {}))


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    D, Dd, P, pd = arch.embed_dim, arch.decoder_dim, arch.num_patches, arch.patch_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (pd, D), "patch_embed.b": (D,),
        "cls_token": (D,), "pos_embed": (P + 1, D),
        "norm.g": (D,), "norm.b": (D,),
        "decoder_embed.w": (D, Dd), "decoder_embed.b": (Dd,),
        "mask_token": (Dd,), "decoder_pos_embed": (P + 1, Dd),
        "decoder_norm.g": (Dd,), "decoder_norm.b": (Dd,),
        "decoder_pred.w": (Dd, pd), "decoder_pred.b": (pd,),
    }
    for prefix, n, dim in (("blocks", arch.depth, D), ("decoder_blocks", arch.decoder_depth, Dd)):
        hid = int(dim * arch.mlp_ratio)
        for i in range(n):
            b = f"{prefix}.{i}."
            shapes.update({
                b + "norm1.g": (dim,), b + "norm1.b": (dim,),
                b + "attn.qkv.w": (dim, 3 * dim), b + "attn.qkv.b": (3 * dim,),
                b + "attn.proj.w": (dim, dim), b + "attn.proj.b": (dim,),
                b + "norm2.g": (dim,), b + "norm2.b": (dim,),
                b + "mlp.fc1.w": (dim, hid), b + "mlp.fc1.b": (hid,),
                b + "mlp.fc2.w": (hid, dim), b + "mlp.fc2.b": (dim,),
            })
    if arch.num_classes:
        shapes["head.w"] = (D, arch.num_classes)
        shapes["head.b"] = (arch.num_classes,)
    return shapes


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """2-D sine-cosine table with a leading zero row for the class token."""
    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    if dim % 4:
        emb = np.zeros((grid * grid, dim))
    else:
        emb = np.concatenate([one_axis(dim // 2, gy.ravel()), one_axis(dim // 2, gx.ravel())], axis=1)
    return np.concatenate([np.zeros((1, dim)), emb], axis=0)


def _xavier(rng, shape):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(arch: ArchConfig, seed: int, *, with_decoder: bool = True) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name == "pos_embed":
            params[name] = sincos_pos_embed(arch.embed_dim, arch.grid)
        elif name == "decoder_pos_embed":
            params[name] = sincos_pos_embed(arch.decoder_dim, arch.grid)
        elif name in ("cls_token", "mask_token"):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif name == "head.w":
            params[name] = rng.normal(0.0, 0.01, size=shape)
        elif name.endswith(".w"):
            params[name] = _xavier(rng, shape)
        else:
            params[name] = np.zeros(shape)
    if not with_decoder:
        params = {k: v for k, v in params.items() if not _is_decoder(k)}
    return params


def _is_decoder(name: str) -> bool:
    return name.startswith("decoder") or name == "mask_token"


def init_checkpoint(arch: ArchConfig, seed: int, **meta) -> ModelCheckpoint:
    return ModelCheckpoint(arch, init_params(arch, seed), seed, "random", dict(meta))


def with_new_head(ckpt: ModelCheckpoint, num_classes: int, seed: int, *, drop_decoder: bool = True) -> ModelCheckpoint:
    """Replace (or add) the classifier head with a freshly initialised one."""
    arch = dataclasses.replace(ckpt.arch, num_classes=num_classes)
    fresh = init_params(arch, seed)
    params = {k: v for k, v in ckpt.params.items() if not k.startswith("head.")}
    if drop_decoder:
        params = {k: v for k, v in params.items() if not _is_decoder(k)}
    if num_classes:
        params["head.w"], params["head.b"] = fresh["head.w"], fresh["head.b"]
    return dataclasses.replace(ckpt, arch=arch, params=params)


# ---------------------------------------------------------------------------
# patch helpers


def _check_batch(arch: ArchConfig, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3 and arch.in_chans == 1:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (arch.image_size, arch.image_size, arch.in_chans):
        raise ShapeMismatch(
            f"expected batch (B, {arch.image_size}, {arch.image_size}, {arch.in_chans}), got {x.shape}")
    return x


def patchify(imgs: np.ndarray, p: int) -> np.ndarray:
    B, H, W, C = imgs.shape
    g = H // p
    x = imgs.reshape(B, g, p, g, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, p * p * C)


def unpatchify(patches: np.ndarray, p: int, channels: int) -> np.ndarray:
    B, P, _ = patches.shape
    g = int(round(np.sqrt(P)))
    x = patches.reshape(B, g, g, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * p, g * p, channels)


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _drop_keeps(arch: ArchConfig, B: int, rng) -> list:
    if rng is None or arch.drop_path <= 0.0:
        return [None] * arch.depth
    keeps = []
    for i in range(arch.depth):
        rate = arch.drop_path * i / max(arch.depth - 1, 1)
        if rate <= 0.0:
            keeps.append(None)
            continue
        keeps.append((rng.random(B) >= rate).astype(np.float64) / (1.0 - rate))
    return keeps


# ---------------------------------------------------------------------------
# caches


@dataclass
class Cache:
    kind: str
    ckpt: ModelCheckpoint
    data: dict
    consumed: bool = False


def _embed_tokens(params, arch, patches):
    t = patches @ params["patch_embed.w"] + params["patch_embed.b"] + params["pos_embed"][1:]
    return t


def _encoder_fwd(params, arch, x, keeps):
    caches = []
    attn = []
    for i in range(arch.depth):
        x, c = block_fwd(x, _sub(params, f"blocks.{i}."), arch.heads, keeps[i])
        caches.append(c)
        attn.append(c[-1])
    xn, c_norm = layernorm_fwd(x, params["norm.g"], params["norm.b"])
    return xn, caches, c_norm, attn


def _encoder_bwd(params, arch, dxn, caches, c_norm, grads):
    dx, g = layernorm_bwd(dxn, c_norm, params["norm.g"])
    grads["norm.g"], grads["norm.b"] = g["g"], g["b"]
    for i in reversed(range(arch.depth)):
        dx, g = block_bwd(dx, caches[i], _sub(params, f"blocks.{i}."))
        grads.update({f"blocks.{i}.{k}": v for k, v in g.items()})
    return dx


def _token_input_bwd(params, dx, patches, ids_keep, grads):
    """Backprop from the encoder input tokens to embeddings and tokens."""
    B = dx.shape[0]
    P = patches.shape[1]
    grads["cls_token"] = dx[:, 0].sum(0)
    dpos = np.zeros_like(params["pos_embed"])
    dpos[0] = dx[:, 0].sum(0)
    if ids_keep is None:
        dt = dx[:, 1:]
    else:
        dt = np.zeros((B, P, dx.shape[2]))
        np.put_along_axis(dt, ids_keep[..., None], dx[:, 1:], axis=1)
    dpos[1:] = dt.sum(0)
    grads["pos_embed"] = dpos
    _, g = linear_bwd(dt, patches, params["patch_embed.w"])
    grads["patch_embed.w"], grads["patch_embed.b"] = g["w"], g["b"]


# ---------------------------------------------------------------------------
# classifier path


@dataclass
class ForwardResult:
    embeddings: np.ndarray
    logits: np.ndarray | None
    attention: list
    cache: Cache


def forward_vit(ckpt: ModelCheckpoint, batch, *, train: bool = False, seed=None) -> ForwardResult:
    """Full-token encoder pass; returns pooled embeddings and head logits.

    With ``train=True`` and a ``seed``, stochastic depth is active.
    """
    arch, params = ckpt.arch, ckpt.params
    imgs = _check_batch(arch, batch)
    B = imgs.shape[0]
    patches = patchify(imgs, arch.patch_size)
    t = _embed_tokens(params, arch, patches)
    cls = np.broadcast_to(params["cls_token"] + params["pos_embed"][0], (B, 1, arch.embed_dim))
    x = np.concatenate([cls, t], axis=1)
    rng = np.random.default_rng(seed) if (train and seed is not None) else None
    xn, caches, c_norm, attn = _encoder_fwd(params, arch, x, _drop_keeps(arch, B, rng))
    emb = xn[:, 0] if arch.pool == "cls" else xn[:, 1:].mean(axis=1)
    logits = emb @ params["head.w"] + params["head.b"] if ckpt.has_head else None
    data = {"patches": patches, "caches": caches, "c_norm": c_norm, "emb": emb, "logits": logits, "B": B}
    return ForwardResult(emb, logits, attn, Cache("forward", ckpt, data))


def classify_loss(ckpt: ModelCheckpoint, batch, targets, *, train: bool = False, seed=None):
    """Mean cross-entropy. ``targets`` are class ids or soft (B, C) rows."""
    if not ckpt.has_head:
        raise ShapeMismatch("checkpoint has no classifier head")
    fr = forward_vit(ckpt, batch, train=train, seed=seed)
    C = ckpt.arch.num_classes
    t = np.asarray(targets)
    if t.ndim == 1:
        kind = "cross_entropy"
        soft = np.zeros((len(t), C))
        soft[np.arange(len(t)), t.astype(int)] = 1.0
    else:
        kind = "mixup_cross_entropy"
        soft = t.astype(np.float64)
    if soft.shape != fr.logits.shape:
        raise ShapeMismatch(f"targets shape {soft.shape} does not match logits {fr.logits.shape}")
    logp = log_softmax(fr.logits)
    loss = float(-(soft * logp).sum(axis=1).mean())
    fr.cache.kind = kind
    fr.cache.data["soft"] = soft
    fr.cache.data["probs"] = np.exp(logp)
    return loss, fr.cache


# ---------------------------------------------------------------------------
# masked autoencoder path


def random_mask(arch: ArchConfig, B: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Return (ids_keep sorted (B, K), mask (B, P) with True = masked)."""
    rng = np.random.default_rng(seed)
    P = arch.num_patches
    keep = P - arch.num_masked
    ids_keep = np.sort(np.argsort(rng.random((B, P)), axis=1)[:, :keep], axis=1)
    mask = np.ones((B, P), dtype=bool)
    np.put_along_axis(mask, ids_keep, False, axis=1)
    return ids_keep, mask


def patch_targets(arch: ArchConfig, imgs: np.ndarray) -> np.ndarray:
    target = patchify(imgs, arch.patch_size)
    if arch.norm_pix_loss:
        mu = target.mean(-1, keepdims=True)
        var = target.var(-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    return target


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over masked patches only."""
    per_patch = ((pred - target) ** 2).mean(axis=-1)
    return float((per_patch * mask).sum() / mask.sum())


@dataclass
class MaeResult:
    loss: float
    mask: np.ndarray
    pred: np.ndarray
    target: np.ndarray
    cache: Cache


def mae_forward_loss(ckpt: ModelCheckpoint, batch, seed, *, target=None, train: bool = False,
                     drop_seed=None) -> MaeResult:
    """Encode visible patches, reconstruct all, score the masked ones.

    ``seed`` fixes the mask. ``target`` defaults to ``batch``.
    """
    if not ckpt.has_decoder:
        raise ShapeMismatch("checkpoint has no decoder")
    arch, params = ckpt.arch, ckpt.params
    imgs = _check_batch(arch, batch)
    tgt_imgs = imgs if target is None else _check_batch(arch, target)
    if tgt_imgs.shape != imgs.shape:
        raise ShapeMismatch("target and batch shapes differ")
    B, P = imgs.shape[0], arch.num_patches
    patches = patchify(imgs, arch.patch_size)
    ids_keep, mask = random_mask(arch, B, seed)
    t = _embed_tokens(params, arch, patches)
    tv = np.take_along_axis(t, ids_keep[..., None], axis=1)
    cls = np.broadcast_to(params["cls_token"] + params["pos_embed"][0], (B, 1, arch.embed_dim))
    x = np.concatenate([cls, tv], axis=1)
    rng = np.random.default_rng(drop_seed) if (train and drop_seed is not None) else None
    latent, enc_caches, c_norm, _ = _encoder_fwd(params, arch, x, _drop_keeps(arch, B, rng))

    y = latent @ params["decoder_embed.w"] + params["decoder_embed.b"]
    full = np.broadcast_to(params["mask_token"], (B, P, arch.decoder_dim)).copy()
    np.put_along_axis(full, ids_keep[..., None], y[:, 1:], axis=1)
    z = np.concatenate([y[:, :1], full], axis=1) + params["decoder_pos_embed"]
    dec_caches = []
    for i in range(arch.decoder_depth):
        z, c = block_fwd(z, _sub(params, f"decoder_blocks.{i}."), arch.heads)
        dec_caches.append(c)
    zn, c_dnorm = layernorm_fwd(z, params["decoder_norm.g"], params["decoder_norm.b"])
    pred = (zn @ params["decoder_pred.w"] + params["decoder_pred.b"])[:, 1:]
    tgt = patch_targets(arch, tgt_imgs)
    loss = masked_mse(pred, tgt, mask)
    data = {"patches": patches, "ids_keep": ids_keep, "mask": mask, "latent": latent,
            "enc_caches": enc_caches, "c_norm": c_norm, "dec_caches": dec_caches, "c_dnorm": c_dnorm,
            "zn": zn, "pred": pred, "target": tgt}
    return MaeResult(loss, mask, pred, tgt, Cache("mae", ckpt, data))


# ---------------------------------------------------------------------------
# backprop

LOSS_KINDS = ("mae", "cross_entropy", "mixup_cross_entropy")


def backprop(cache: Cache, loss_kind: str) -> dict[str, np.ndarray]:
    """Gradients of the cached loss with respect to every parameter."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    if cache.consumed:
        raise StaleCache("cache already consumed by a previous backprop")
    if cache.kind != loss_kind:
        raise StaleCache(f"cache was produced by a {cache.kind!r} pass, not {loss_kind!r}")
    cache.consumed = True
    if loss_kind == "mae":
        grads = _mae_bwd(cache)
    else:
        grads = _classify_bwd(cache)
    params = cache.ckpt.params
    return {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}


def _classify_bwd(cache: Cache) -> dict:
    ckpt, d = cache.ckpt, cache.data
    arch, params = ckpt.arch, ckpt.params
    B = d["B"]
    grads: dict[str, np.ndarray] = {}
    dlogits = (d["probs"] - d["soft"]) / B
    grads["head.w"] = d["emb"].T @ dlogits
    grads["head.b"] = dlogits.sum(0)
    demb = dlogits @ params["head.w"].T
    P = arch.num_patches
    dxn = np.zeros((B, P + 1, arch.embed_dim))
    if arch.pool == "cls":
        dxn[:, 0] = demb
    else:
        dxn[:, 1:] = demb[:, None, :] / P
    dx = _encoder_bwd(params, arch, dxn, d["caches"], d["c_norm"], grads)
    _token_input_bwd(params, dx, d["patches"], None, grads)
    return grads


def _mae_bwd(cache: Cache) -> dict:
    ckpt, d = cache.ckpt, cache.data
    arch, params = ckpt.arch, ckpt.params
    grads: dict[str, np.ndarray] = {}
    pred, tgt, mask = d["pred"], d["target"], d["mask"]
    B, P, pd = pred.shape
    dpred = 2.0 * (pred - tgt) * mask[..., None] / (mask.sum() * pd)
    dout = np.concatenate([np.zeros((B, 1, pd)), dpred], axis=1)
    dzn, g = linear_bwd(dout, d["zn"], params["decoder_pred.w"])
    grads["decoder_pred.w"], grads["decoder_pred.b"] = g["w"], g["b"]
    dz, g = layernorm_bwd(dzn, d["c_dnorm"], params["decoder_norm.g"])
    grads["decoder_norm.g"], grads["decoder_norm.b"] = g["g"], g["b"]
    for i in reversed(range(arch.decoder_depth)):
        dz, g = block_bwd(dz, d["dec_caches"][i], _sub(params, f"decoder_blocks.{i}."))
        grads.update({f"decoder_blocks.{i}.{k}": v for k, v in g.items()})
    grads["decoder_pos_embed"] = dz.sum(0)
    dfull = dz[:, 1:]
    ids_keep = d["ids_keep"]
    dvis = np.take_along_axis(dfull, ids_keep[..., None], axis=1)
    grads["mask_token"] = (dfull * mask[..., None]).sum(axis=(0, 1))
    dy = np.concatenate([dz[:, :1], dvis], axis=1)
    dlatent, g = linear_bwd(dy, d["latent"], params["decoder_embed.w"])
    grads["decoder_embed.w"], grads["decoder_embed.b"] = g["w"], g["b"]
    dx = _encoder_bwd(params, arch, dlatent, d["enc_caches"], d["c_norm"], grads)
    _token_input_bwd(params, dx, d["patches"], ids_keep, grads)
    return grads


def predict_proba(ckpt: ModelCheckpoint, images, batch_size: int = 64) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    out = [softmax_stable(forward_vit(ckpt, imgs[i:i + batch_size]).logits, axis=-1)
           for i in range(0, len(imgs), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, ckpt.arch.num_classes))


def predict_logits(ckpt: ModelCheckpoint, images, batch_size: int = 64) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    out = [forward_vit(ckpt, imgs[i:i + batch_size]).logits for i in range(0, len(imgs), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, ckpt.arch.num_classes))


def embed(ckpt: ModelCheckpoint, images, batch_size: int = 64) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    out = [forward_vit(ckpt, imgs[i:i + batch_size]).embeddings for i in range(0, len(imgs), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, ckpt.arch.embed_dim))
