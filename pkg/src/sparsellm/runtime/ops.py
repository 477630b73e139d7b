"""Deterministic float32 building blocks for the inference runtime.

Each routine processes rows independently with a fixed sequential reduction
order, so results for a token do not depend on how many other tokens share the
call. That is what makes cached decoding bit-identical to full recomputation.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def rmsnorm(x, gain, eps):
    rows, d = x.shape
    out = np.empty_like(x)
    for i in range(rows):
        ss = np.float32(0.0)
        for j in range(d):
            ss += x[i, j] * x[i, j]
        r = np.float32(1.0) / np.sqrt(ss / np.float32(d) + np.float32(eps))
        for j in range(d):
            out[i, j] = x[i, j] * r * gain[j]
    return out


@njit(cache=True)
def causal_attention(q, k_cache, v_cache, start, n_heads):
    """Multi-head attention of ``q`` (rows at positions ``start..``) over cache rows ``[0, pos]``."""
    t_new, d = q.shape
    hd = d // n_heads
    scale = np.float32(1.0) / np.sqrt(np.float32(hd))
    out = np.zeros((t_new, d), np.float32)
    scores = np.empty(start + t_new, np.float32)
    for t in range(t_new):
        pos = start + t
        for h in range(n_heads):
            o = h * hd
            m = np.float32(-np.inf)
            for j in range(pos + 1):
                s = np.float32(0.0)
                for c in range(hd):
                    s += q[t, o + c] * k_cache[j, o + c]
                s *= scale
                scores[j] = s
                if s > m:
                    m = s
            total = np.float32(0.0)
            for j in range(pos + 1):
                e = np.exp(scores[j] - m)
                scores[j] = e
                total += e
            inv = np.float32(1.0) / total
            for j in range(pos + 1):
                p = scores[j] * inv
                for c in range(hd):
                    out[t, o + c] += p * v_cache[j, o + c]
    return out


@njit(cache=True)
def relu(x):
    out = np.empty_like(x)
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        v = flat_in[i]
        flat_out[i] = v if v > 0 else np.float32(0.0)
    return out
