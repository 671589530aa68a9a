"""Pure-numpy kernels; the reference behaviour for the compiled module."""
from __future__ import annotations

import math

import numpy as np

GELU_C = 0.7978845608028654
GELU_K = 0.044715


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (y * dy).sum(axis=1, keepdims=True))


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].astype(x.dtype)


def layer_norm_bwd(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gamma: np.ndarray):
    g = dy * gamma
    a = g.mean(axis=1, keepdims=True)
    b = (g * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - a - xhat * b)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _sig2u(x: np.ndarray, x2: np.ndarray) -> np.ndarray:
    # sigmoid(2u); exp overflows to inf for very negative x, the right limit
    t = x2 * (-2.0 * GELU_C * GELU_K)
    t -= 2.0 * GELU_C
    t *= x
    with np.errstate(over="ignore"):
        np.exp(t, out=t)
    t += 1.0
    return np.reciprocal(t, out=t)


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    # tanh form rewritten as x * sigmoid(2u)
    s = _sig2u(x, x * x)
    s *= x
    return s


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # dy * s * (1 + x (1 - s) du)
    x2 = x * x
    s = _sig2u(x, x2)
    x2 *= 2.0 * GELU_C * 3.0 * GELU_K
    x2 += 2.0 * GELU_C
    x2 *= x
    t = 1.0 - s
    t *= x2
    t += 1.0
    t *= s
    t *= dy
    return t


def running_mean_update(mean: np.ndarray, w: np.ndarray, count: int) -> None:
    mean += (w - mean) / count


def pairwise_l2(rows: np.ndarray) -> np.ndarray:
    r = rows.astype(np.float64)
    diff = r[:, None, :] - r[None, :, :]
    out = np.sqrt((diff * diff).sum(axis=2))
    # exact symmetry and zero diagonal
    out = np.triu(out, 1)
    return out + out.T


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def attention_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, num_heads: int):
    b, s, d = q.shape
    qh, kh, vh = (_heads(t, num_heads) for t in (q, k, v))
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) / math.sqrt(d // num_heads)
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)
    ctx = np.matmul(p, vh).transpose(0, 2, 1, 3).reshape(b, s, d)
    return np.ascontiguousarray(ctx, dtype=q.dtype), np.ascontiguousarray(p, dtype=q.dtype)


def attention_bwd(dctx, q, k, v, p):
    b, s, d = q.shape
    h = p.shape[1]
    scale = 1.0 / math.sqrt(d // h)
    qh, kh, vh, gh = (_heads(t, h) for t in (q, k, v, dctx))
    dv = np.matmul(p.transpose(0, 1, 3, 2), gh)
    dp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = np.matmul(ds, kh)
    dk = np.matmul(ds.transpose(0, 1, 3, 2), qh)

    def merge(t):
        return np.ascontiguousarray(t.transpose(0, 2, 1, 3).reshape(b, s, d).astype(q.dtype))

    return merge(dq), merge(dk), merge(dv)
