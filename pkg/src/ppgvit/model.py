"""Full regressor: patches -> tokens -> encoder (+LoRA) -> pooling -> head."""
from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .pool_head import head_backward, head_forward, init_head, init_pool, pool_backward, pool_tokens
from .seeding import RNG_ENCODER, RNG_HEAD, RNG_LORA, derived_rng
from .tensorize import BackboneProfile
from .vit import (
    LoraConfig,
    adapter_arrays,
    block_names,
    embed_backward,
    embed_patches,
    encoder_backward,
    encoder_forward,
    init_encoder,
    make_adapters,
)

SELECTORS = ("head_only", "lora_pool_head", "lora_lastblock", "full")


def param_shapes(profile: BackboneProfile, target: str, lora: LoraConfig | None = LoraConfig()) -> dict:
    """Name -> shape for every array a :class:`VitRegressor` would hold, without allocating."""
    D, P, R = profile.width, profile.patch_dim, profile.n_registers
    Hm, Hh, G = profile.mlp_ratio * D, profile.head_hidden, profile.max_grid
    shapes = {"embed/W": (P, D), "embed/b": (D,), "cls": (D,), "registers": (R, D),
              "pos/special": (1 + R, D), "pos/row": (G, D), "pos/col": (G, D)}
    for layer in range(profile.depth):
        pre = f"block{layer}/"
        for ln in ("ln1", "ln2"):
            shapes[pre + f"{ln}/g"] = shapes[pre + f"{ln}/b"] = (D,)
        for m in ("q", "k", "v", "o"):
            shapes[pre + f"attn/{m}/W"], shapes[pre + f"attn/{m}/b"] = (D, D), (D,)
        shapes[pre + "mlp/fc1/W"], shapes[pre + "mlp/fc1/b"] = (D, Hm), (Hm,)
        shapes[pre + "mlp/fc2/W"], shapes[pre + "mlp/fc2/b"] = (Hm, D), (D,)
    shapes["norm/g"] = shapes["norm/b"] = (D,)
    shapes["pool/w_s"] = (D,)
    pre = f"head/{target}/"
    shapes.update({pre + "ln/g": (D,), pre + "ln/b": (D,), pre + "fc1/W": (D, Hh), pre + "fc1/b": (Hh,),
                   pre + "fc2/w": (Hh,), pre + "fc2/b": ()})
    if lora:
        for layer in range(profile.depth):
            for m in lora.targets:
                shapes[f"lora/block{layer}/{m}/A"] = (lora.rank, D)
                shapes[f"lora/block{layer}/{m}/B"] = (D, lora.rank)
    return shapes


def select_names(names, selector: str, target: str, depth: int) -> list[str]:
    """Names of the arrays a trainable-set selector unfreezes."""
    names = list(names)
    head = [n for n in names if n.startswith(f"head/{target}/")]
    pool = [n for n in names if n.startswith("pool/")]
    lora = [n for n in names if n.startswith("lora/")]
    if selector == "head_only":
        return head
    if selector == "lora_pool_head":
        return lora + pool + head
    if selector == "lora_lastblock":
        last = block_names(depth - 1) + ["norm/g", "norm/b"] if depth else []
        return lora + last + pool + head
    if selector == "full":
        return names
    raise ValueError(f"unknown trainable selector {selector!r}; choose from {SELECTORS}")


def count_params(profile: BackboneProfile, target: str, lora: LoraConfig | None, selector: str) -> tuple[int, int]:
    """(total, trainable) parameter counts."""
    shapes = param_shapes(profile, target, lora)
    size = {n: int(np.prod(s, dtype=np.int64)) for n, s in shapes.items()}
    trainable = select_names(shapes, selector, target, profile.depth)
    return sum(size.values()), sum(size[n] for n in trainable)


class VitRegressor:
    """Scalar regressor for one target.

    The head predicts the target in standardized units; ``target_shift`` and
    ``target_scale`` map that back to physical units in :meth:`predict`.
    """

    def __init__(self, profile: BackboneProfile, target: str, lora: LoraConfig | None = LoraConfig(),
                 seed: int = 0):
        self.profile = profile
        self.target = target
        self.lora = lora
        self.seed = seed
        self.params = init_encoder(profile, derived_rng(seed, RNG_ENCODER))
        self.params.update(init_pool(profile.width))
        self.params.update(init_head(profile.width, profile.head_hidden, target, derived_rng(seed, RNG_HEAD)))
        self.adapters = make_adapters(profile, lora, derived_rng(seed, RNG_LORA)) if lora else {}
        self.target_shift = 0.0
        self.target_scale = 1.0

    # -- parameter bookkeeping --------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter array by checkpoint name (live references)."""
        out = dict(self.params)
        out.update(adapter_arrays(self.adapters))
        return out

    def trainable_names(self, selector: str) -> list[str]:
        return select_names(self.named_arrays(), selector, self.target, self.profile.depth)

    def param_counts(self, selector: str = "lora_pool_head") -> tuple[int, int]:
        arrays = self.named_arrays()
        total = sum(a.size for a in arrays.values())
        trainable = sum(arrays[n].size for n in self.trainable_names(selector))
        return total, trainable

    # -- forward / backward -----------------------------------------------

    def forward(self, U, M, grid, train=False, rng=None):
        """Standardized predictions ``(B,)`` and a cache for :meth:`backward`."""
        tb, ecache = embed_patches(U, self.params, grid=grid, patch_mask=M, return_cache=True)
        out, enc_cache = encoder_forward(tb, self.params, self.profile, self.adapters,
                                         train=train, rng=rng, return_cache=True)
        s = out.n_special
        feats = out.tokens[:, s:]
        mask = out.token_mask[:, s:]
        p, alpha = pool_tokens(feats, mask, self.params["pool/w_s"])
        y, hcache = head_forward(p, self.params, self.target)
        cache = dict(ecache=ecache, enc=enc_cache, feats=feats, alpha=alpha, hcache=hcache,
                     n_special=s, n_tokens=out.n_tokens)
        return y, cache

    def backward(self, dy, cache) -> dict[str, np.ndarray]:
        dp, grads = head_backward(dy, cache["hcache"], self.params, self.target)
        dfeats, grads["pool/w_s"] = pool_backward(dp, cache["feats"], cache["alpha"], self.params["pool/w_s"])
        B, N, D = dfeats.shape
        dtok = np.zeros((B, cache["n_tokens"], D))
        dtok[:, cache["n_special"]:] = dfeats
        dtok, egrads = encoder_backward(dtok, cache["enc"], self.params, self.profile, self.adapters)
        grads.update(egrads)
        grads.update(embed_backward(dtok, cache["ecache"], self.params))
        return grads

    def predict(self, U, M, grid, batch_size: int = 64) -> np.ndarray:
        """Predictions in target units (eval mode, no dropout)."""
        outs = []
        for i in range(0, len(U), batch_size):
            y, _ = self.forward(U[i:i + batch_size], M[i:i + batch_size], grid)
            outs.append(y)
        y = np.concatenate(outs) if outs else np.zeros(0)
        return y * self.target_scale + self.target_shift

    # -- serialization ----------------------------------------------------

    def manifest(self) -> dict:
        return {
            "profile": asdict(self.profile),
            "target": self.target,
            "lora": asdict(self.lora) if self.lora else None,
            "seed": self.seed,
            "target_shift": self.target_shift,
            "target_scale": self.target_scale,
        }

    @classmethod
    def from_arrays(cls, arrays: dict, manifest: dict) -> "VitRegressor":
        prof = dict(manifest["profile"])
        prof["channel_mean"] = tuple(prof["channel_mean"])
        prof["channel_std"] = tuple(prof["channel_std"])
        lora = manifest.get("lora")
        if lora:
            lora = dict(lora)
            lora["targets"] = tuple(lora["targets"])
            lora = LoraConfig(**lora)
        model = cls(BackboneProfile(**prof), manifest["target"], lora, manifest["seed"])
        live = model.named_arrays()
        missing = set(live) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks arrays: {sorted(missing)[:5]}")
        for name, arr in live.items():
            src = np.asarray(arrays[name])
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src
        model.target_shift = float(manifest["target_shift"])
        model.target_scale = float(manifest["target_scale"])
        return model
