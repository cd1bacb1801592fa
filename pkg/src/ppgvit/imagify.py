"""1D PPG window -> 3-channel 2D image.

Three representations are produced, each an :class:`ImageTriplet`:

``stft``
    z-scored log-power spectrogram copied into all three channels.
``stft_phase``
    z-scored log-power, z-scored cos(phase), z-scored sin(phase).
``recurrence``
    z-scored Gaussian-soft recurrence plots of the (z-scored, downsampled)
    signal, its slope and its curvature.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from . import kernels
from .errors import ConfigError, InvalidInputError, NumericError
from .signal import discrete_diff, downsample, zscore

REPR_TAGS = ("stft", "stft_phase", "recurrence")

_WINDOWS = {
    "hann": "hann",
    "hamming": "hamming",
    "blackman": "blackman",
    "rect": "boxcar",
    "boxcar": "boxcar",
}


@dataclass(frozen=True)
class StftConfig:
    n_window: int = 128
    hop: int = 32
    n_fft: int = 128
    window_kind: str = "hann"
    eps: float = 1e-10
    one_sided: bool = True

    def __post_init__(self):
        if not 0 < self.n_window <= self.n_fft:
            raise ConfigError(f"need 0 < n_window <= n_fft, got {self.n_window}, {self.n_fft}")
        if not 0 < self.hop <= self.n_window:
            raise ConfigError(f"need 0 < hop <= n_window, got {self.hop}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.window_kind not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window_kind!r}; choose from {sorted(_WINDOWS)}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1 if self.one_sided else self.n_fft

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.n_window) // self.hop + 1

    def window(self) -> np.ndarray:
        # periodic (DFT-even) tapers, the usual choice for spectral analysis
        return get_window(_WINDOWS[self.window_kind], self.n_window, fftbins=True).astype(np.float64)


@dataclass(frozen=True)
class RecurrenceConfig:
    sigma: float = 1.0
    target_len: int = 240

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.target_len < 3:
            raise ConfigError("target_len must be at least 3")


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # complex, (F, T)
    config: StftConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def log_power(self) -> np.ndarray:
        return np.log(np.abs(self.values) ** 2 + self.config.eps)

    def phase(self) -> np.ndarray:
        """atan2(Im, Re) in (-pi, pi], with the all-zero bin mapped to 0."""
        re, im = self.values.real, self.values.imag
        phi = np.arctan2(im, re)
        # atan2(+-0, -0) would give +-pi; an empty bin has no phase, call it 0
        return np.where((re == 0) & (im == 0), 0.0, phi)


@dataclass
class ImageTriplet:
    channels: np.ndarray  # (3, H, W)
    valid_mask: np.ndarray  # (H, W) bool
    repr_tag: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise InvalidInputError(f"channels must be (3, H, W), got {self.channels.shape}")
        if self.valid_mask.shape != self.channels.shape[1:]:
            raise InvalidInputError("valid_mask shape does not match channels")
        if self.repr_tag not in REPR_TAGS:
            raise InvalidInputError(f"unknown repr_tag {self.repr_tag!r}")
        if not np.all(np.isfinite(self.channels)):
            raise NumericError("image contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


def stft(x, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Windowed DFT per frame, ``X[f, t] = sum_m x[tH + m] w[m] exp(-2j pi f m / N_fft)``.

    Frames are zero-padded from ``n_window`` to ``n_fft``. Frame count is
    ``(len(x) - n_window) // hop + 1``; no centering or edge padding.
    """
    cfg = cfg or StftConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("stft expects a 1D signal")
    if x.size < cfg.n_window:
        raise InvalidInputError(f"signal of {x.size} samples is shorter than one window ({cfg.n_window})")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("signal contains non-finite values")
    frames = kernels.frame_signal(x, cfg.window(), cfg.hop)
    if cfg.one_sided:
        spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    else:
        spec = np.fft.fft(frames, n=cfg.n_fft, axis=1)
    return ComplexSpectrogram(np.ascontiguousarray(spec.T), cfg)


def _full_mask(shape) -> np.ndarray:
    return np.ones(shape, dtype=bool)


def make_stft_image(x, cfg: StftConfig | None = None) -> ImageTriplet:
    spec = stft(x, cfg)
    img = zscore(spec.log_power())
    return ImageTriplet(np.stack([img, img, img]), _full_mask(img.shape), "stft")


def make_stft_phase_image(x, cfg: StftConfig | None = None) -> ImageTriplet:
    spec = stft(x, cfg)
    phi = spec.phase()
    chans = np.stack([zscore(spec.log_power()), zscore(np.cos(phi)), zscore(np.sin(phi))])
    return ImageTriplet(chans, _full_mask(phi.shape), "stft_phase")


def recurrence_matrix(v, sigma: float) -> np.ndarray:
    """Gaussian-soft recurrence: symmetric, unit diagonal, entries in (0, 1]."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise InvalidInputError("recurrence needs a 1D sequence of length >= 2")
    return kernels.gaussian_recurrence(v, sigma)


def _left_pad(v: np.ndarray, n: int) -> np.ndarray:
    return np.concatenate([np.full(n, v[0]), v])


def recurrence_sequences(x, cfg: RecurrenceConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized signal, slope and curvature, each of length ``cfg.target_len``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < cfg.target_len:
        raise InvalidInputError(f"signal of {x.size} samples is shorter than target_len {cfg.target_len}")
    xt = downsample(zscore(x), cfg.target_len)
    d1 = _left_pad(discrete_diff(xt, 1), 1)
    d2 = _left_pad(discrete_diff(xt, 2), 2)
    return xt, d1, d2


def make_recurrence_image(x, cfg: RecurrenceConfig | None = None) -> ImageTriplet:
    cfg = cfg or RecurrenceConfig()
    seqs = recurrence_sequences(x, cfg)
    chans = np.stack([zscore(recurrence_matrix(v, cfg.sigma)) for v in seqs])
    return ImageTriplet(chans, _full_mask(chans.shape[1:]), "recurrence")


def make_image(x, repr_tag: str, stft_cfg: StftConfig | None = None,
               rec_cfg: RecurrenceConfig | None = None) -> ImageTriplet:
    if repr_tag == "stft":
        return make_stft_image(x, stft_cfg)
    if repr_tag == "stft_phase":
        return make_stft_phase_image(x, stft_cfg)
    if repr_tag == "recurrence":
        return make_recurrence_image(x, rec_cfg)
    raise ConfigError(f"unknown representation {repr_tag!r}; choose from {REPR_TAGS}")


def config_dict(cfg) -> dict:
    return asdict(cfg)


def save_preview(img: ImageTriplet, prefix) -> list[Path]:
    """Write one lossy 8-bit grayscale PNG per channel (min-max scaled).

    For eyeballing only; nothing downstream reads these back.
    """
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(3):
        ch = img.channels[c]
        lo, hi = ch.min(), ch.max()
        scaled = np.zeros_like(ch) if hi <= lo else (ch - lo) / (hi - lo)
        arr = np.round(scaled * 255.0).astype(np.uint8)
        if img.repr_tag != "recurrence":
            # low frequency at the bottom, the usual spectrogram orientation
            arr = np.flipud(arr)
        path = prefix.with_name(f"{prefix.name}_ch{c + 1}.png")
        Image.fromarray(arr, mode="L").save(path)
        paths.append(path)
    return paths
