"""Synthetic PPG with known HR/RR, plus dataset loading and splitting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError
from .seeding import RNG_SPLIT, RNG_SYNTH, derived_rng
from .signal import PpgRecord, read_jsonl

@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 100
    fs: float = 40.0
    duration_s: float = 30.0
    hr_range: tuple[float, float] = (50.0, 120.0)
    rr_range: tuple[float, float] = (8.0, 20.0)
    noise_std: float = 0.05
    seed: int = 0
    am_depth: float = 0.3
    harmonic_gain: float = 0.5

    def __post_init__(self):
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        if self.fs <= 0 or self.duration_s <= 0:
            raise ConfigError("fs and duration_s must be positive")
        n = self.fs * self.duration_s
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(f"duration_s * fs = {n} is not an integer sample count")
        for name in ("hr_range", "rr_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        nyquist = self.fs / 2
        if 2 * self.hr_range[1] / 60 >= nyquist:
            raise ConfigError(
                f"second harmonic of {self.hr_range[1]} BPM reaches Nyquist ({nyquist} Hz)")
        if self.rr_range[1] / 60 >= nyquist:
            raise ConfigError("respiratory rate above Nyquist")

    @property
    def n_samples(self) -> int:
        return int(round(self.fs * self.duration_s))


def synth_record(cfg: SynthConfig, index: int) -> PpgRecord:
    rng = derived_rng(cfg.seed, RNG_SYNTH, index)
    hr = rng.uniform(*cfg.hr_range)
    rr = rng.uniform(*cfg.rr_range)
    ph_card, ph_harm, ph_resp = rng.uniform(0, 2 * math.pi, size=3)
    t = np.arange(cfg.n_samples) / cfg.fs
    theta = 2 * math.pi * hr / 60 * t + ph_card
    cardiac = np.sin(theta) + cfg.harmonic_gain * np.sin(2 * theta + ph_harm)
    envelope = 1.0 + cfg.am_depth * np.sin(2 * math.pi * rr / 60 * t + ph_resp)
    x = envelope * cardiac + cfg.noise_std * rng.standard_normal(cfg.n_samples)
    return PpgRecord(id=f"synth-{cfg.seed}-{index:05d}", fs=cfg.fs, samples=x,
                     labels={"hr": float(hr), "rr": float(rr)})


def synth_ppg(cfg: SynthConfig) -> list[PpgRecord]:
    """Cardiac fundamental + half-amplitude 2nd harmonic, AM by respiration, plus noise.

    Each record draws from its own stream derived from ``(seed, index)``, so
    records can be generated in any order or in parallel.
    """
    return [synth_record(cfg, i) for i in range(cfg.n_records)]


def load_dataset(path) -> list[PpgRecord]:
    return read_jsonl(path)


def split(records, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded permutation into (train, val, test).

    Val and test get ``floor(fraction * n)`` records; the remainder goes to
    train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise InvalidInputError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"fractions must sum to 1, got {sum(fractions)}")
    records = list(records)
    n = len(records)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    perm = derived_rng(seed, RNG_SPLIT).permutation(n)
    picked = [records[i] for i in perm]
    return picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]
