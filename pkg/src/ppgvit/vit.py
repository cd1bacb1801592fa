"""Desk-scale ViT encoder in plain numpy, with a hand-written backward pass.

Parameters live in a flat ``dict[str, ndarray]`` (the same names the
checkpoint container uses). Linear maps are stored input-major, ``(in, out)``,
so a projection is ``x @ W + b``.

Block layout is pre-norm::

    z = z + m * Attn(LN1(z))
    z = z + m * MLP(LN2(z))

where ``m`` is the token mask: masked tokens are never attended to and their
rows are carried through unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ConfigError, InvalidInputError
from .tensorize import BackboneProfile, PatchSet

LN_EPS = 1e-6
QKV = ("q", "k", "v")

EncoderParams = dict  # name -> ndarray


# -- primitive layers ---------------------------------------------------------

def layer_norm(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=lead)
    db = np.sum(dy, axis=lead)
    dxhat = dy * g
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dg, db


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _linear_backward(dy, x, W):
    """Gradients of ``y = x @ W + b`` for arbitrary leading dims."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


# -- LoRA ---------------------------------------------------------------------

@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = QKV

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / rank) * B @ A`` on one frozen projection.

    ``A`` is ``(rank, D_in)``, ``B`` is ``(D_out, rank)``. Dropout acts on the
    adapter's input only, and only in training mode.
    """

    layer: int
    matrix: str
    rank: int
    alpha: float
    dropout: float
    A: np.ndarray
    B: np.ndarray

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def forward(self, h, train=False, rng=None):
        if train and self.dropout > 0:
            if rng is None:
                raise ConfigError("training-mode LoRA dropout needs an rng")
            keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
            hd = h * keep
        else:
            keep = None
            hd = h
        low = hd @ self.A.T
        return self.scale * (low @ self.B.T), (hd, low, keep)

    def backward(self, ddelta, cache):
        hd, low, keep = cache
        r = self.rank
        dd2 = ddelta.reshape(-1, ddelta.shape[-1])
        dB = self.scale * (dd2.T @ low.reshape(-1, r))
        dlow = self.scale * (ddelta @ self.B)
        dA = dlow.reshape(-1, r).T @ hd.reshape(-1, hd.shape[-1])
        dh = dlow @ self.A
        if keep is not None:
            dh = dh * keep
        return dh, dA, dB


def lora_wrap(layer_id: int, matrix_id: str, cfg: LoraConfig, width: int,
              rng: np.random.Generator) -> LoraAdapter:
    """Fresh adapter: ``B = 0`` so the wrapped projection is unchanged."""
    if matrix_id not in QKV:
        raise ConfigError(f"LoRA targets Q, K or V, got {matrix_id!r}")
    if cfg.rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    if cfg.rank > width:
        raise ConfigError(f"LoRA rank {cfg.rank} exceeds width {width}")
    bound = 1.0 / math.sqrt(width)
    A = rng.uniform(-bound, bound, size=(cfg.rank, width))
    B = np.zeros((width, cfg.rank))
    return LoraAdapter(layer_id, matrix_id, cfg.rank, cfg.alpha, cfg.dropout, A, B)


def make_adapters(profile: BackboneProfile, cfg: LoraConfig, rng) -> dict[tuple[int, str], LoraAdapter]:
    return {
        (layer, m): lora_wrap(layer, m, cfg, profile.width, rng)
        for layer in range(profile.depth)
        for m in cfg.targets
    }


def adapter_arrays(adapters) -> dict[str, np.ndarray]:
    out = {}
    for (layer, m), ad in adapters.items():
        out[f"lora/block{layer}/{m}/A"] = ad.A
        out[f"lora/block{layer}/{m}/B"] = ad.B
    return out


# -- parameters ---------------------------------------------------------------

def init_encoder(profile: BackboneProfile, rng: np.random.Generator, std: float = 0.02) -> EncoderParams:
    """Random ViT parameters (truncated-normal-ish, biases zero, LN identity)."""
    D, P = profile.width, profile.patch_dim
    H = profile.mlp_ratio * D
    R = profile.n_registers

    def w(*shape, s=std):
        return np.clip(rng.standard_normal(shape), -2.0, 2.0) * s

    p = {
        "embed/W": w(P, D, s=1.0 / math.sqrt(P)),
        "embed/b": np.zeros(D),
        "cls": w(D),
        "registers": w(R, D),
        "pos/special": w(1 + R, D),
        "pos/row": w(profile.max_grid, D),
        "pos/col": w(profile.max_grid, D),
    }
    for layer in range(profile.depth):
        pre = f"block{layer}/"
        p[pre + "ln1/g"] = np.ones(D)
        p[pre + "ln1/b"] = np.zeros(D)
        for m in ("q", "k", "v", "o"):
            p[pre + f"attn/{m}/W"] = w(D, D, s=1.0 / math.sqrt(D))
            p[pre + f"attn/{m}/b"] = np.zeros(D)
        p[pre + "ln2/g"] = np.ones(D)
        p[pre + "ln2/b"] = np.zeros(D)
        p[pre + "mlp/fc1/W"] = w(D, H, s=1.0 / math.sqrt(D))
        p[pre + "mlp/fc1/b"] = np.zeros(H)
        p[pre + "mlp/fc2/W"] = w(H, D, s=1.0 / math.sqrt(H))
        p[pre + "mlp/fc2/b"] = np.zeros(D)
    p["norm/g"] = np.ones(D)
    p["norm/b"] = np.zeros(D)
    return p


def block_names(layer: int) -> list[str]:
    pre = f"block{layer}/"
    names = [pre + "ln1/g", pre + "ln1/b", pre + "ln2/g", pre + "ln2/b"]
    names += [pre + f"attn/{m}/{s}" for m in ("q", "k", "v", "o") for s in ("W", "b")]
    names += [pre + f"mlp/{fc}/{s}" for fc in ("fc1", "fc2") for s in ("W", "b")]
    return names


# -- tokens -------------------------------------------------------------------

@dataclass
class TokenBatch:
    """Token sequences for a batch of images sharing one patch grid.

    ``tokens`` is ``(B, 1 + R + N, D)``: row 0 is CLS, rows ``1..R`` the
    registers, the rest patch tokens in row-major grid order.
    """

    tokens: np.ndarray
    token_mask: np.ndarray  # (B, 1 + R + N) bool
    grid: tuple[int, int]
    n_registers: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_special(self) -> int:
        return 1 + self.n_registers


def _as_batch(patches, patch_mask):
    if isinstance(patches, PatchSet):
        patch_mask = patches.patch_mask
        patches = patches.patches
    U = np.asarray(patches, dtype=np.float64)
    M = np.asarray(patch_mask, dtype=bool)
    if U.ndim == 2:
        U, M = U[None], M[None]
    return U, M


def _grid_index(grid, max_grid):
    h_f, w_f = grid
    if h_f > max_grid or w_f > max_grid:
        raise ConfigError(f"patch grid {h_f}x{w_f} exceeds positional table size {max_grid}")
    rows = np.repeat(np.arange(h_f), w_f)
    cols = np.tile(np.arange(w_f), h_f)
    return rows, cols


def embed_patches(patches, params: EncoderParams, grid=None, patch_mask=None, return_cache=False):
    """Project patches to width D, prepend CLS + registers, add positions.

    ``patches`` is a :class:`PatchSet` or an array ``(B, N, 3p^2)`` (with
    ``patch_mask`` ``(B, N)`` and ``grid`` ``(H_f, W_f)``).
    """
    if isinstance(patches, PatchSet):
        grid = patches.grid[:2]
    U, M = _as_batch(patches, patch_mask)
    W, b = params["embed/W"], params["embed/b"]
    if U.shape[-1] != W.shape[0]:
        raise ConfigError(f"patch length {U.shape[-1]} does not match projector input {W.shape[0]}")
    Bsz, N, _ = U.shape
    if grid is None or grid[0] * grid[1] != N:
        raise InvalidInputError(f"grid {grid} inconsistent with {N} patches")
    R = params["registers"].shape[0]
    D = W.shape[1]
    rows, cols = _grid_index(grid, params["pos/row"].shape[0])
    x = U @ W + b + params["pos/row"][rows] + params["pos/col"][cols]
    special = np.concatenate([params["cls"][None], params["registers"]], axis=0) + params["pos/special"]
    tokens = np.concatenate([np.broadcast_to(special, (Bsz, 1 + R, D)), x], axis=1)
    tmask = np.concatenate([np.ones((Bsz, 1 + R), dtype=bool), M], axis=1)
    tb = TokenBatch(tokens, tmask, tuple(grid), R)
    if return_cache:
        return tb, (U, rows, cols)
    return tb


def embed_backward(dtokens, cache, params):
    U, rows, cols = cache
    R = params["registers"].shape[0]
    dspecial = dtokens[:, : 1 + R].sum(axis=0)
    dx = dtokens[:, 1 + R:]
    dx2 = dx.reshape(-1, dx.shape[-1])
    grads = {
        "embed/W": U.reshape(-1, U.shape[-1]).T @ dx2,
        "embed/b": dx2.sum(axis=0),
        "cls": dspecial[0].copy(),
        "registers": dspecial[1:].copy(),
        "pos/special": dspecial,
    }
    dxs = dx.sum(axis=0)  # (N, D)
    prow = np.zeros_like(params["pos/row"])
    pcol = np.zeros_like(params["pos/col"])
    np.add.at(prow, rows, dxs)
    np.add.at(pcol, cols, dxs)
    grads["pos/row"] = prow
    grads["pos/col"] = pcol
    return grads


# -- encoder ------------------------------------------------------------------

def _split_heads(x, n_heads):
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _block_forward(z, m, params, layer, n_heads, adapters, train, rng):
    pre = f"block{layer}/"
    mf = m[..., None].astype(z.dtype)
    h, ln1 = layer_norm(z, params[pre + "ln1/g"], params[pre + "ln1/b"])
    proj, lcache = {}, {}
    for name in QKV:
        y = h @ params[pre + f"attn/{name}/W"] + params[pre + f"attn/{name}/b"]
        ad = adapters.get((layer, name)) if adapters else None
        if ad is not None:
            delta, lcache[name] = ad.forward(h, train, rng)
            y = y + delta
        proj[name] = _split_heads(y, n_heads)
    q, k, v = proj["q"], proj["k"], proj["v"]
    dh = q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    att = kernels.masked_softmax(scores, m[:, None, None, :])
    ctx = _merge_heads(att @ v)
    a_out = ctx @ params[pre + "attn/o/W"] + params[pre + "attn/o/b"]
    z1 = z + a_out * mf

    h2, ln2 = layer_norm(z1, params[pre + "ln2/g"], params[pre + "ln2/b"])
    pre_act = h2 @ params[pre + "mlp/fc1/W"] + params[pre + "mlp/fc1/b"]
    act = gelu(pre_act)
    m_out = act @ params[pre + "mlp/fc2/W"] + params[pre + "mlp/fc2/b"]
    z2 = z1 + m_out * mf
    cache = dict(mf=mf, h=h, ln1=ln1, q=q, k=k, v=v, att=att, ctx=ctx, lcache=lcache,
                 h2=h2, ln2=ln2, pre_act=pre_act, act=act)
    return z2, cache


def _block_backward(dz2, cache, params, layer, n_heads, adapters, grads):
    pre = f"block{layer}/"
    mf = cache["mf"]
    # MLP branch
    dm_out = dz2 * mf
    dact, grads[pre + "mlp/fc2/W"], grads[pre + "mlp/fc2/b"] = _linear_backward(
        dm_out, cache["act"], params[pre + "mlp/fc2/W"])
    dpre = dact * gelu_grad(cache["pre_act"])
    dh2, grads[pre + "mlp/fc1/W"], grads[pre + "mlp/fc1/b"] = _linear_backward(
        dpre, cache["h2"], params[pre + "mlp/fc1/W"])
    dz1_ln, grads[pre + "ln2/g"], grads[pre + "ln2/b"] = layer_norm_backward(dh2, cache["ln2"])
    dz1 = dz2 + dz1_ln

    # attention branch
    da_out = dz1 * mf
    dctx, grads[pre + "attn/o/W"], grads[pre + "attn/o/b"] = _linear_backward(
        da_out, cache["ctx"], params[pre + "attn/o/W"])
    dctx = _split_heads(dctx, n_heads)
    q, k, v, att = cache["q"], cache["k"], cache["v"], cache["att"]
    datt = dctx @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    dscores /= math.sqrt(q.shape[-1])
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    h = cache["h"]
    dh = np.zeros_like(h)
    for name, d in zip(QKV, (dq, dk, dv)):
        d = _merge_heads(d)
        dh_part, grads[pre + f"attn/{name}/W"], grads[pre + f"attn/{name}/b"] = _linear_backward(
            d, h, params[pre + f"attn/{name}/W"])
        dh += dh_part
        if name in cache["lcache"]:
            ad = adapters[(layer, name)]
            dh_lora, dA, dB = ad.backward(d, cache["lcache"][name])
            dh += dh_lora
            grads[f"lora/block{layer}/{name}/A"] = dA
            grads[f"lora/block{layer}/{name}/B"] = dB
    dz_ln, grads[pre + "ln1/g"], grads[pre + "ln1/b"] = layer_norm_backward(dh, cache["ln1"])
    return dz1 + dz_ln


def encoder_forward(tb: TokenBatch, params: EncoderParams, profile: BackboneProfile,
                    adapters=None, train=False, rng=None, return_cache=False):
    """Run all blocks plus the final LayerNorm.

    Depth 0 is the identity (no blocks, no final norm). Dropout (LoRA input
    path) is only active with ``train=True`` and draws from ``rng``.
    """
    if adapters:
        for (layer, name), ad in adapters.items():
            if layer >= profile.depth or ad.A.shape[1] != profile.width or ad.B.shape[0] != profile.width:
                raise ConfigError(f"adapter {(layer, name)} does not fit profile {profile.name}")
    z = tb.tokens
    m = tb.token_mask
    caches = []
    for layer in range(profile.depth):
        z, c = _block_forward(z, m, params, layer, profile.n_heads, adapters, train, rng)
        caches.append(c)
    norm_cache = None
    if profile.depth > 0:
        z, norm_cache = layer_norm(z, params["norm/g"], params["norm/b"])
    out = TokenBatch(z, m, tb.grid, tb.n_registers)
    if return_cache:
        return out, (caches, norm_cache)
    return out


def encoder_backward(dtokens, cache, params, profile, adapters=None):
    """Returns ``(d tokens_in, grads)``."""
    caches, norm_cache = cache
    grads = {}
    dz = dtokens
    if norm_cache is not None:
        dz, grads["norm/g"], grads["norm/b"] = layer_norm_backward(dz, norm_cache)
    for layer in reversed(range(profile.depth)):
        dz = _block_backward(dz, caches[layer], params, layer, profile.n_heads, adapters, grads)
    return dz, grads


def extract_feature_map(tb: TokenBatch):
    """Drop CLS/registers; return ``F (B, D, H_f, W_f)`` and ``M (B, H_f, W_f)``."""
    h_f, w_f = tb.grid
    s = tb.n_special
    if tb.n_tokens != s + h_f * w_f:
        raise AssertionError(f"token count {tb.n_tokens} != {s} + {h_f}*{w_f}")
    patch = tb.tokens[:, s:]
    B, N, D = patch.shape
    F = patch.reshape(B, h_f, w_f, D).transpose(0, 3, 1, 2)
    M = tb.token_mask[:, s:].reshape(B, h_f, w_f)
    return F, M
