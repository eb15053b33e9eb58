"""Forward/backward kernels for the micro transformer (float64 numpy).

Every ``*_fwd`` returns its output plus a cache tuple; the matching
``*_bwd`` takes the upstream gradient and that cache. Weight gradients are
summed over all leading (batch, position) axes.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteActivation(FloatingPointError):
    pass


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def linear_fwd(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_bwd(dy, x, w, with_bias=True):
    dw = _flat(x).T @ _flat(dy)
    dx = dy @ w.T
    db = _flat(dy).sum(axis=0) if with_bias else None
    return dx, dw, db


def layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = _flat(dy * xhat).sum(axis=0)
    db = _flat(dy).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), (u, t)


def gelu_bwd(dy, cache):
    u, t = cache
    dt = _GELU_C * (1.0 + 3 * 0.044715 * (u * u))
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def softmax(s, axis=-1):
    """Row-max-stabilised softmax; ``-inf`` entries get exactly zero weight."""
    e = s - np.max(s, axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


@lru_cache(maxsize=32)
def _causal_bias(n: int) -> np.ndarray:
    bias = np.where(causal_mask(n), 0.0, -np.inf)
    bias.flags.writeable = False
    return bias


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def attention_fwd(xq, xkv, p, n_heads, causal=False):
    """Multi-head scaled dot-product attention over batched (B, T, d) inputs.

    ``p`` needs ``wq``, ``wk``, ``wv``; ``wo``/``bo`` are applied when present.
    Returns ``(y, attn, cache)`` with ``attn`` shaped (B, H, Tq, Tk).
    """
    d = p["wq"].shape[1]
    dk = d // n_heads
    q = _split_heads(xq @ p["wq"], n_heads)
    k = _split_heads(xkv @ p["wk"], n_heads)
    v = _split_heads(xkv @ p["wv"], n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dk)
    if causal:
        tq, tk = scores.shape[-2:]
        if tq != tk:
            raise ValueError("causal attention needs a square score matrix")
        scores += _causal_bias(tq)
    attn = softmax(scores)
    o = _merge_heads(attn @ v)
    y = o @ p["wo"] + p["bo"] if "wo" in p else o
    if not np.all(np.isfinite(y)):
        raise NonFiniteActivation("attention produced non-finite values")
    return y, attn, (xq, xkv, q, k, v, attn, o, dk)


def attention_bwd(dy, cache, p):
    """Returns ``(dxq, dxkv, grads)``; callers add dxq and dxkv for self-attention."""
    xq, xkv, q, k, v, attn, o, dk = cache
    n_heads = q.shape[1]
    grads = {}
    if "wo" in p:
        do, grads["wo"], grads["bo"] = linear_bwd(dy, o, p["wo"])
    else:
        do = dy
    do = _split_heads(do, n_heads)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = dattn - np.einsum("bhqk,bhqk->bhq", dattn, attn)[..., None]
    ds *= attn
    ds *= 1.0 / math.sqrt(dk)
    dq = ds @ k
    dkk = ds.transpose(0, 1, 3, 2) @ q
    dq, dkk, dv = _merge_heads(dq), _merge_heads(dkk), _merge_heads(dv)
    grads["wq"] = _flat(xq).T @ _flat(dq)
    grads["wk"] = _flat(xkv).T @ _flat(dkk)
    grads["wv"] = _flat(xkv).T @ _flat(dv)
    dxq = dq @ p["wq"].T
    dxkv = dkk @ p["wk"].T + dv @ p["wv"].T
    return dxq, dxkv, grads


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def block_fwd(x, params, prefix, n_heads, causal):
    """Pre-norm residual block: x + attn(ln1(x)), then + ffn(ln2(.))."""
    a_in, c_ln1 = layer_norm_fwd(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    a_out, attn, c_attn = attention_fwd(a_in, a_in, _sub(params, prefix + "attn."), n_heads, causal)
    h = x + a_out
    f_in, c_ln2 = layer_norm_fwd(h, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    u = linear_fwd(f_in, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"])
    gu, c_gelu = gelu_fwd(u)
    out = h + linear_fwd(gu, params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])
    return out, attn, (c_ln1, c_attn, c_ln2, f_in, c_gelu, gu)


def block_bwd(dout, cache, params, prefix):
    c_ln1, c_attn, c_ln2, f_in, c_gelu, gu = cache
    g = {}
    dgu, g[prefix + "ffn.w2"], g[prefix + "ffn.b2"] = linear_bwd(dout, gu, params[prefix + "ffn.w2"])
    du = gelu_bwd(dgu, c_gelu)
    df_in, g[prefix + "ffn.w1"], g[prefix + "ffn.b1"] = linear_bwd(du, f_in, params[prefix + "ffn.w1"])
    dh_ln, g[prefix + "ln2.g"], g[prefix + "ln2.b"] = layer_norm_bwd(df_in, c_ln2)
    dh = dout + dh_ln
    dxq, dxkv, ga = attention_bwd(dh, c_attn, _sub(params, prefix + "attn."))
    for k, v in ga.items():
        g[prefix + "attn." + k] = v
    dx_ln, g[prefix + "ln1.g"], g[prefix + "ln1.b"] = layer_norm_bwd(dxq + dxkv, c_ln1)
    return dh + dx_ln, g


BLOCK_TENSORS = ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo",
                 "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")


def self_attention(x, p, n_heads, causal=False):
    """Unbatched multi-head self-attention: (T, d) -> (Y (T, d), A (H, T, T))."""
    y, a, _ = attention_fwd(x[None], x[None], p, n_heads, causal)
    return y[0], a[0]


def cross_attention(f_q, f_kv, p, n_heads):
    """Queries from ``f_q`` (Tq, d), keys and values from ``f_kv`` (Tk, d).

    Returns (Y (Tq, d), A (H, Tq, Tk)); ``wo``/``bo`` apply only when present in ``p``.
    """
    y, a, _ = attention_fwd(f_q[None], f_kv[None], p, n_heads, causal=False)
    return y[0], a[0]
