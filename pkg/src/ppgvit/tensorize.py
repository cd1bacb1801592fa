"""Backbone profiles, channel normalization, padding and patch extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, InvalidInputError
from .imagify import ImageTriplet

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.5, 0.5, 0.5)
CLIP_STD = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class BackboneProfile:
    name: str
    patch: int
    channel_mean: tuple[float, float, float]
    channel_std: tuple[float, float, float]
    n_registers: int
    width: int
    depth: int
    n_heads: int
    head_hidden: int
    mlp_ratio: int = 4
    max_grid: int = 64  # largest H_f or W_f the positional tables cover

    def __post_init__(self):
        if self.patch < 1:
            raise ConfigError("patch size must be >= 1")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError("channel std components must be positive")
        if self.n_registers < 0 or self.depth < 0:
            raise ConfigError("register count and depth must be non-negative")
        if self.width < 1 or self.n_heads < 1 or self.width % self.n_heads:
            raise ConfigError(f"width {self.width} must be a positive multiple of n_heads {self.n_heads}")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden must be >= 1")

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    def grid(self, height: int, width: int) -> tuple[int, int, int]:
        """(H_f, W_f, N) for an ``height x width`` image."""
        h_f = math.ceil(height / self.patch)
        w_f = math.ceil(width / self.patch)
        return h_f, w_f, h_f * w_f


# width, depth, heads per preset; "full" mirrors ViT-B and is only meant for shape checks
PRESETS = {
    "tiny": (64, 2, 4),
    "small": (128, 4, 4),
    "full": (768, 12, 12),
}

_FAMILIES = {
    "dinov3_like": dict(patch=16, channel_mean=IMAGENET_MEAN, channel_std=IMAGENET_STD, n_registers=4),
    "siglip2_like": dict(patch=14, channel_mean=CLIP_MEAN, channel_std=CLIP_STD, n_registers=0),
}

PROFILE_NAMES = tuple(_FAMILIES)


def get_profile(name: str, preset: str = "tiny", **overrides) -> BackboneProfile:
    if name not in _FAMILIES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILE_NAMES}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {tuple(PRESETS)}")
    width, depth, heads = PRESETS[preset]
    prof = BackboneProfile(name=name, width=width, depth=depth, n_heads=heads,
                           head_hidden=width, **_FAMILIES[name])
    return replace(prof, **overrides) if overrides else prof


@dataclass
class PaddedImage:
    channels: np.ndarray  # (3, H_t, W_t)
    valid_mask: np.ndarray  # (H_t, W_t) bool
    grid: tuple[int, int, int]  # (H_f, W_f, N)
    patch: int
    profile_name: str
    orig_shape: tuple[int, int]


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, 3 p^2), channel-major then row then column inside a patch
    patch_mask: np.ndarray  # (N,) bool
    grid: tuple[int, int, int]
    patch: int

    @property
    def n_patches(self) -> int:
        return self.grid[2]


def normalize_channels(img: ImageTriplet, profile: BackboneProfile) -> ImageTriplet:
    """Per-channel ``(I_c - mean_c) / std_c`` with the backbone's statistics."""
    mean = np.asarray(profile.channel_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(profile.channel_std, dtype=np.float64)[:, None, None]
    return ImageTriplet((img.channels - mean) / std, img.valid_mask.copy(), img.repr_tag, dict(img.meta))


def resize_image(img: ImageTriplet, height: int, width: int) -> ImageTriplet:
    """Bilinear resize of all channels; the mask is resized nearest-neighbour."""
    from scipy.ndimage import zoom

    h, w = img.shape
    factors = (height / h, width / w)
    chans = np.stack([zoom(c, factors, order=1, grid_mode=True, mode="nearest") for c in img.channels])
    mask = zoom(img.valid_mask.astype(np.uint8), factors, order=0, grid_mode=True, mode="nearest") > 0
    return ImageTriplet(chans, mask, img.repr_tag, dict(img.meta))


def pad_and_mask(img: ImageTriplet, profile: BackboneProfile,
                 resize_to: tuple[int, int] | None = None) -> PaddedImage:
    """Zero-pad right/bottom to patch multiples and record where real data lives.

    ``resize_to`` (off by default) first resizes the image to a fixed size.
    """
    if resize_to is not None:
        img = resize_image(img, *resize_to)
    f, t = img.shape
    if f < 1 or t < 1:
        raise InvalidInputError("image must be at least 1x1")
    p = profile.patch
    h_f, w_f, n = profile.grid(f, t)
    h_t, w_t = h_f * p, w_f * p
    chans = np.zeros((3, h_t, w_t))
    chans[:, :f, :t] = img.channels
    mask = np.zeros((h_t, w_t), dtype=bool)
    mask[:f, :t] = img.valid_mask
    return PaddedImage(chans, mask, (h_f, w_f, n), p, profile.name, (f, t))


def patchify(pimg: PaddedImage) -> PatchSet:
    p = pimg.patch
    h_f, w_f, n = pimg.grid
    blocks = pimg.channels.reshape(3, h_f, p, w_f, p).transpose(1, 3, 0, 2, 4)
    patches = np.ascontiguousarray(blocks.reshape(n, 3 * p * p))
    pmask = pimg.valid_mask.reshape(h_f, p, w_f, p).any(axis=(1, 3)).reshape(n)
    return PatchSet(patches, pmask, pimg.grid, p)


def unpatchify(ps: PatchSet) -> np.ndarray:
    """Inverse of :func:`patchify`: back to a ``(3, H_t, W_t)`` array."""
    p = ps.patch
    h_f, w_f, n = ps.grid
    blocks = ps.patches.reshape(h_f, w_f, 3, p, p).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(blocks.reshape(3, h_f * p, w_f * p))


def image_to_patches(img: ImageTriplet, profile: BackboneProfile,
                     resize_to: tuple[int, int] | None = None) -> PatchSet:
    """normalize -> pad -> patchify in one call."""
    return patchify(pad_and_mask(normalize_channels(img, profile), profile, resize_to))
