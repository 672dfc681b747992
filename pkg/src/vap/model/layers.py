"""Differentiable building blocks with explicit backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache, accumulates parameter gradients into the
``grads`` dict in place and returns the input gradient(s). Everything is
float64 and works on arbitrary leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def linear_fwd(x, W, b):
    return x @ W + b, x


def linear_bwd(dy, x, W, grads, wname, bname):
    grads[wname] += _flat(x).T @ _flat(dy)
    grads[bname] += _flat(dy).sum(axis=0)
    return dy @ W.T


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy, cache, grads, gname, bname):
    xhat, inv, g = cache
    grads[gname] += _flat(dy * xhat).sum(axis=0)
    grads[bname] += _flat(dy).sum(axis=0)
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def gelu_fwd(x):
    t = np.tanh(_GELU_K * (x + _GELU_C * (x * x * x)))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def mha_fwd(xq, xkv, p, prefix, n_heads, mask):
    """Multi-head attention, ``xq`` (B, Lq, d) attending to ``xkv`` (B, Lk, d).

    Masked logits are set to -inf so masked positions get exactly zero weight.
    """
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads
    q = (xq @ p[prefix + ".Wq"] + p[prefix + ".bq"]).reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ p[prefix + ".Wk"] + p[prefix + ".bk"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    v = (xkv @ p[prefix + ".Wv"] + p[prefix + ".bv"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    s = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    out = ctx @ p[prefix + ".Wo"] + p[prefix + ".bo"]
    return out, (xq, xkv, q, k, v, a, ctx, n_heads)


def mha_bwd(dout, cache, p, prefix, grads):
    """Returns (dxq, dxkv)."""
    xq, xkv, q, k, v, a, ctx, n_heads = cache
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads
    dctx = linear_bwd(dout, ctx, p[prefix + ".Wo"], grads, prefix + ".Wo", prefix + ".bo")
    dctx = dctx.reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    da = dctx @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dctx
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    ds /= np.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq = dq.transpose(0, 2, 1, 3).reshape(B, Lq, d)
    dk = dk.transpose(0, 2, 1, 3).reshape(B, Lk, d)
    dv = dv.transpose(0, 2, 1, 3).reshape(B, Lk, d)
    dxq = linear_bwd(dq, xq, p[prefix + ".Wq"], grads, prefix + ".Wq", prefix + ".bq")
    dxkv = linear_bwd(dk, xkv, p[prefix + ".Wk"], grads, prefix + ".Wk", prefix + ".bk")
    dxkv += linear_bwd(dv, xkv, p[prefix + ".Wv"], grads, prefix + ".Wv", prefix + ".bv")
    return dxq, dxkv


def ffn_fwd(x, p, prefix):
    h, c1 = linear_fwd(x, p[prefix + ".W1"], p[prefix + ".b1"])
    g, c2 = gelu_fwd(h)
    y, c3 = linear_fwd(g, p[prefix + ".W2"], p[prefix + ".b2"])
    return y, (c1, c2, c3)


def ffn_bwd(dy, cache, p, prefix, grads):
    c1, c2, c3 = cache
    dg = linear_bwd(dy, c3, p[prefix + ".W2"], grads, prefix + ".W2", prefix + ".b2")
    dh = gelu_bwd(dg, c2)
    return linear_bwd(dh, c1, p[prefix + ".W1"], grads, prefix + ".W1", prefix + ".b1")


# ------------------------------------------------------------------ GRU
# gate layout along the last axis: [reset | update | candidate]


def gru_step(xw_t, h, U):
    """One step for stacked channels: ``xw_t`` (C, B, 3d) precomputed input
    projection incl. bias, ``h`` (C, B, d), ``U`` (C, d, 3d)."""
    d = h.shape[-1]
    hu = h @ U
    r = sigmoid(xw_t[..., :d] + hu[..., :d])
    z = sigmoid(xw_t[..., d:2 * d] + hu[..., d:2 * d])
    n = np.tanh(xw_t[..., 2 * d:] + r * hu[..., 2 * d:])
    return (1.0 - z) * n + z * h, (r, z, n, hu[..., 2 * d:])


def gru_fwd(x, W, U, b, h0=None):
    """Run stacked-channel GRUs over time.

    x: (C, B, T, D); W: (C, D, 3d); U: (C, d, 3d); b: (C, 3d).
    Returns hidden states (C, B, T, d) and a cache.
    """
    C, B, T, _ = x.shape
    d = U.shape[1]
    xw = x @ W[:, None] + b[:, None, None, :]
    h = np.zeros((C, B, d)) if h0 is None else h0
    hs = np.empty((C, B, T, d))
    gates = []
    for t in range(T):
        h, gc = gru_step(xw[:, :, t], h, U)
        hs[:, :, t] = h
        gates.append(gc)
    return hs, (x, hs, gates, h0)


def gru_bwd(dhs, cache, W, U):
    """Returns (dx, dW, dU, db) for stacked channels."""
    x, hs, gates, h0 = cache
    C, B, T, d = hs.shape
    dxw = np.empty((C, B, T, 3 * d))
    dU = np.zeros_like(U)
    dh_next = np.zeros((C, B, d))
    zeros = np.zeros((C, B, d)) if h0 is None else h0
    Ut = U.transpose(0, 2, 1)
    for t in range(T - 1, -1, -1):
        r, z, n, hun = gates[t]
        h_prev = hs[:, :, t - 1] if t > 0 else zeros
        dh = dhs[:, :, t] + dh_next
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (h_prev - n) * z * (1.0 - z)
        dr_pre = dn_pre * hun * r * (1.0 - r)
        dxw[:, :, t, :d] = dr_pre
        dxw[:, :, t, d:2 * d] = dz_pre
        dxw[:, :, t, 2 * d:] = dn_pre
        dhu = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
        dU += h_prev.transpose(0, 2, 1) @ dhu
        dh_next = dh * z + dhu @ Ut
    xf = x.reshape(C, B * T, -1)
    dxf = dxw.reshape(C, B * T, -1)
    dW = xf.transpose(0, 2, 1) @ dxf
    db = dxf.sum(axis=1)
    dx = dxw @ W.transpose(0, 2, 1)[:, None]
    return dx, dW, dU, db


# ------------------------------------------------------------------ inference-only


def gelu(x):
    t = x * x
    t *= _GELU_C
    t += 1.0
    t *= x
    t *= _GELU_K
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xc *= 1.0 / np.sqrt(var + LN_EPS)
    xc *= g
    xc += b
    return xc


def _softmax_rows(s):
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


QUERY_BLOCK = 128
_MASKS: dict = {}


def _upper_mask(n, dtype):
    key = (n, np.dtype(dtype))
    if key not in _MASKS:
        _MASKS[key] = np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)
    return _MASKS[key]


def causal_attention(q, k, v):
    """softmax(q k^T / sqrt(dh)) v with a causal mask aligned at the end.

    q: (B, h, Lq, dh) holds the *last* Lq positions of a window whose keys
    are k, v: (B, h, Lk, dh). Long windows are processed in query blocks
    that skip keys the block cannot see.
    """
    Lq, Lk, dh = q.shape[2], k.shape[2], q.shape[3]
    off = Lk - Lq
    scale = 1.0 / np.sqrt(dh)
    out = np.empty(q.shape, dtype=q.dtype)
    for lo in range(0, Lq, QUERY_BLOCK):
        hi = min(lo + QUERY_BLOCK, Lq)
        kend = off + hi
        s = q[:, :, lo:hi] @ k[:, :, :kend].transpose(0, 1, 3, 2)
        s *= scale
        # query row i (absolute off+lo+i) sees keys <= off+lo+i; only the
        # trailing (hi-lo) key columns can be blocked
        n = hi - lo
        if n > 1:
            s[..., kend - n:] += _upper_mask(n, s.dtype)
        out[:, :, lo:hi] = _softmax_rows(s) @ v[:, :, :kend]
    return out


def mha(xq, xkv, p, prefix, n_heads):
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads
    q = (xq @ p[prefix + ".Wq"] + p[prefix + ".bq"]).reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ p[prefix + ".Wk"] + p[prefix + ".bk"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    v = (xkv @ p[prefix + ".Wv"] + p[prefix + ".bv"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    ctx = causal_attention(q, k, v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return ctx @ p[prefix + ".Wo"] + p[prefix + ".bo"]


def ffn(x, p, prefix):
    return gelu(x @ p[prefix + ".W1"] + p[prefix + ".b1"]) @ p[prefix + ".W2"] + p[prefix + ".b2"]
