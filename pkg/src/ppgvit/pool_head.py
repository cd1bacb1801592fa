"""Mask-aware attention pooling and the LN -> Linear -> GELU -> Linear head."""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import EmptyPoolError, NumericError
from .vit import gelu, gelu_grad, layer_norm, layer_norm_backward


def init_pool(width: int) -> dict:
    # zero scores = uniform average over valid positions at the start
    return {"pool/w_s": np.zeros(width)}


def init_head(width: int, hidden: int, target: str, rng: np.random.Generator) -> dict:
    pre = f"head/{target}/"
    return {
        pre + "ln/g": np.ones(width),
        pre + "ln/b": np.zeros(width),
        pre + "fc1/W": rng.standard_normal((width, hidden)) / np.sqrt(width),
        pre + "fc1/b": np.zeros(hidden),
        pre + "fc2/w": rng.standard_normal(hidden) / np.sqrt(hidden),
        pre + "fc2/b": np.zeros(()),
    }


def _flatten(F, M):
    F = np.asarray(F, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    single = F.ndim == 3
    if single:
        F, M = F[None], M[None]
    B, D = F.shape[:2]
    feats = F.reshape(B, D, -1).transpose(0, 2, 1)  # (B, N, D), row-major positions
    return feats, M.reshape(B, -1), single


def pool_tokens(feats, mask, w_s):
    """Pool ``(B, N, D)`` features; returns ``(p (B, D), alpha (B, N))``."""
    if not np.all(mask.any(axis=1)):
        raise EmptyPoolError("attention pooling over an all-invalid mask")
    scores = feats @ w_s
    alpha = kernels.masked_softmax(scores, mask)
    p = np.einsum("bn,bnd->bd", alpha, feats)
    return p, alpha


def pool_backward(dp, feats, alpha, w_s):
    dfeats = alpha[..., None] * dp[:, None, :]
    dalpha = feats @ dp[..., None]
    dalpha = dalpha[..., 0]
    ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dw_s = np.einsum("bn,bnd->d", ds, feats)
    dfeats += ds[..., None] * w_s
    return dfeats, dw_s


def attention_pool(F, M, params, return_weights=False):
    """Softmax-weighted average of feature-map columns over valid positions.

    ``F`` is ``(D, H_f, W_f)`` or batched ``(B, D, H_f, W_f)``; ``M`` the
    matching spatial mask. Weights are exactly zero on invalid positions and
    sum to one over valid ones.
    """
    feats, mask, single = _flatten(F, M)
    p, alpha = pool_tokens(feats, mask, params["pool/w_s"])
    if single:
        p, alpha = p[0], alpha[0]
    if return_weights:
        return p, alpha
    return p


def head_forward(p, params, target):
    pre = f"head/{target}/"
    ln, ln_cache = layer_norm(p, params[pre + "ln/g"], params[pre + "ln/b"])
    a = ln @ params[pre + "fc1/W"] + params[pre + "fc1/b"]
    g = gelu(a)
    y = g @ params[pre + "fc2/w"] + params[pre + "fc2/b"]
    for name, arr in (("layernorm", ln), ("fc1", a), ("output", y)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in head layer {name!r}")
    return y, (ln, ln_cache, a, g)


def head_backward(dy, cache, params, target):
    pre = f"head/{target}/"
    ln, ln_cache, a, g = cache
    grads = {
        pre + "fc2/w": g.T @ dy,
        pre + "fc2/b": np.asarray(dy.sum()),
    }
    dg = dy[:, None] * params[pre + "fc2/w"]
    da = dg * gelu_grad(a)
    grads[pre + "fc1/W"] = ln.T @ da
    grads[pre + "fc1/b"] = da.sum(axis=0)
    dln = da @ params[pre + "fc1/W"].T
    dp, grads[pre + "ln/g"], grads[pre + "ln/b"] = layer_norm_backward(dln, ln_cache)
    return dp, grads


def regress(p, params, target):
    """``w2 . GELU(W1 LN(p) + b1) + b2`` for one pooled vector or a batch."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    y, _ = head_forward(p[None] if single else p, params, target)
    return float(y[0]) if single else y
