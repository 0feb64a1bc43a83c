"""Forward/backward kernels for the transformer building blocks.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns the input gradient together
with a dict of parameter gradients.  Everything runs in float64.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


class EmptyInput(ValueError):
    pass


def softmax_stable(logits, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction; works on vectors or along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise EmptyInput("softmax of an empty vector")
    # a gap beyond the float range becomes -inf, whose exp is exactly 0
    with np.errstate(over="ignore"):
        z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def linear_fwd(x, w, b):
    # one 2-D gemm instead of a batched matmul loop
    y = x.reshape(-1, w.shape[0]) @ w + b
    return y.reshape(*x.shape[:-1], w.shape[1]), x


def linear_bwd(dy, x, w):
    d = w.shape[0]
    x2 = x.reshape(-1, d)
    dy2 = dy.reshape(-1, w.shape[1])
    dx = (dy2 @ w.T).reshape(*dy.shape[:-1], d)
    return dx, {"w": x2.T @ dy2, "b": dy2.sum(axis=0)}


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_bwd(dy, cache, g):
    xhat, inv = cache
    n = xhat.shape[-1]
    dxhat = dy * g
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    d = xhat.shape[-1]
    return dx, {"g": (dy * xhat).reshape(-1, d).sum(0), "b": dy.reshape(-1, d).sum(0)}


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def attention_fwd(x, p, heads: int):
    """Multi-head self-attention; ``p`` holds qkv.w, qkv.b, proj.w, proj.b."""
    B, T, D = x.shape
    dh = D // heads
    qkv, _ = linear_fwd(x, p["qkv.w"], p["qkv.b"])
    qkv = qkv.reshape(B, T, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = dh**-0.5
    attn = softmax_stable(q @ k.transpose(0, 1, 3, 2) * scale, axis=-1)
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    out, _ = linear_fwd(o, p["proj.w"], p["proj.b"])
    return out, (x, q, k, v, attn, o, heads)


def attention_bwd(dy, cache, p):
    x, q, k, v, attn, o, heads = cache
    B, T, D = x.shape
    dh = D // heads
    scale = dh**-0.5
    do, g_proj = linear_bwd(dy, o, p["proj.w"])
    do = do.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(-1, keepdims=True))
    dq = ds @ k * scale
    dk = ds.transpose(0, 1, 3, 2) @ q * scale
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, T, 3 * D)
    dx, g_qkv = linear_bwd(dqkv, x, p["qkv.w"])
    return dx, {"qkv.w": g_qkv["w"], "qkv.b": g_qkv["b"], "proj.w": g_proj["w"], "proj.b": g_proj["b"]}


def block_fwd(x, p, heads: int, keep=None):
    """Pre-norm transformer block.

    ``keep`` is an optional per-sample (B,) array of stochastic-depth
    multipliers (0 or 1/(1-rate)) applied to both residual branches.
    """
    h1, c_n1 = layernorm_fwd(x, p["norm1.g"], p["norm1.b"])
    a, c_at = attention_fwd(h1, {k[5:]: v for k, v in p.items() if k.startswith("attn.")}, heads)
    if keep is not None:
        a = a * keep[:, None, None]
    x1 = x + a
    h2, c_n2 = layernorm_fwd(x1, p["norm2.g"], p["norm2.b"])
    f1, _ = linear_fwd(h2, p["mlp.fc1.w"], p["mlp.fc1.b"])
    g, c_g = gelu_fwd(f1)
    f2, _ = linear_fwd(g, p["mlp.fc2.w"], p["mlp.fc2.b"])
    if keep is not None:
        f2 = f2 * keep[:, None, None]
    out = x1 + f2
    attn_weights = c_at[4]
    return out, (c_n1, c_at, h2, c_n2, g, c_g, keep, attn_weights)


def block_bwd(dy, cache, p):
    c_n1, c_at, h2, c_n2, g, c_g, keep, _ = cache
    grads = {}
    df2 = dy if keep is None else dy * keep[:, None, None]
    dg, gr = linear_bwd(df2, g, p["mlp.fc2.w"])
    grads["mlp.fc2.w"], grads["mlp.fc2.b"] = gr["w"], gr["b"]
    df1 = gelu_bwd(dg, c_g)
    dh2, gr = linear_bwd(df1, h2, p["mlp.fc1.w"])
    grads["mlp.fc1.w"], grads["mlp.fc1.b"] = gr["w"], gr["b"]
    dx1, gr = layernorm_bwd(dh2, c_n2, p["norm2.g"])
    grads["norm2.g"], grads["norm2.b"] = gr["g"], gr["b"]
    dx1 = dx1 + dy
    da = dx1 if keep is None else dx1 * keep[:, None, None]
    dh1, gr = attention_bwd(da, c_at, {k[5:]: v for k, v in p.items() if k.startswith("attn.")})
    grads.update({"attn." + k: v for k, v in gr.items()})
    dx, gr = layernorm_bwd(dh1, c_n1, p["norm1.g"])
    grads["norm1.g"], grads["norm1.b"] = gr["g"], gr["b"]
    return dx + dx1, grads
