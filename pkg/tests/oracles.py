"""Independent reference implementations shared by the test modules."""
from __future__ import annotations

import numpy as np

from ratplus.attention import MixingParams

def reference_block(x, p: MixingParams, base=10000.0):
    """Dense causal block written with complex-safe primitives only (no max shift, no clipping)."""
    T = x.shape[0]
    H, hd = p.heads, p.head_dim
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    q = (x @ p.wq).reshape(T, H, hd)
    k = (x @ p.wk).reshape(T, H, hd)
    v = (x @ p.wv).reshape(T, H, hd)
    g = sig(x @ p.wg).reshape(T, H, hd)
    kt, vt = [], []
    hk = hv = 0.0
    for t in range(T):
        hk = g[t] * hk + (1 - g[t]) * k[t]
        hv = g[t] * hv + (1 - g[t]) * v[t]
        kt.append(hk)
        vt.append(hv)
    kt, vt = np.stack(kt), np.stack(vt)
    ang = np.arange(T)[:, None] * base ** (-np.arange(0, hd, 2) / hd)[None, :]
    c, s = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]

    def rot(a):
        out = np.empty_like(a)
        out[..., 0::2] = a[..., 0::2] * c - a[..., 1::2] * s
        out[..., 1::2] = a[..., 0::2] * s + a[..., 1::2] * c
        return out

    qr, kr = rot(q), rot(kt)
    causal = np.tril(np.ones((T, T)))
    heads = []
    for h in range(H):
        w = np.exp(qr[:, h] @ kr[:, h].T / np.sqrt(hd)) * causal
        heads.append((w / w.sum(axis=1, keepdims=True)) @ vt[:, h])
    return (sig(x @ p.wog) * np.concatenate(heads, axis=1)) @ p.wo


def complex_step_grad(f, x, h=1e-30):
    """Exact-to-rounding derivative of a real-analytic scalar ``f`` at ``x``."""
    out = np.zeros(x.shape)
    for i in np.ndindex(x.shape):
        xc = x.astype(complex)
        xc[i] += 1j * h
        out[i] = f(xc).imag / h
    return out


def reference_lm(tokens, model):
    """Dense language model assembled from :func:`reference_block` and plain numpy."""
    c, p = model.config, model.params
    rms = lambda x, w: w * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-5)
    x = p["embed"][np.asarray(tokens)]
    for i in range(c.layers):
        pre = f"layers.{i}."
        mix = model.mixing(i)
        x = x + reference_block(rms(x, p[pre + "norm1"]), mix, c.rope_base)
        hn = rms(x, p[pre + "norm2"])
        a = hn @ p[pre + "ffn.w1"]
        x = x + (a / (1 + np.exp(-a)) * (hn @ p[pre + "ffn.w3"])) @ p[pre + "ffn.w2"]
    return rms(x, p["norm_f"]) @ model.head
