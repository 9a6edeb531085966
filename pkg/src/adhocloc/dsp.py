"""STFT analysis and the stacked imaginary/real node feature."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .acoustics import MultiChannelWave


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 256
    window: str = "hann"
    first_bin: int = 1
    n_bins: int = 256

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must lie in (0, fft_size], got {self.hop}")
        if self.first_bin < 0 or self.first_bin + self.n_bins > self.fft_size // 2 + 1:
            raise ValueError(f"bins {self.first_bin}..{self.first_bin + self.n_bins - 1} exceed "
                             f"the {self.fft_size // 2 + 1} one-sided bins")

    @property
    def n_features(self) -> int:
        return 2 * self.n_bins

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.fft_size:
            raise ValueError(f"signal of {n_samples} samples is shorter than one "
                             f"{self.fft_size}-sample frame")
        return (n_samples - self.fft_size) // self.hop + 1

    def analysis_window(self) -> np.ndarray:
        if self.window in ("rect", "rectangular", "boxcar"):
            return np.ones(self.fft_size)
        # periodic window, the usual choice for overlap-add analysis
        return get_window(self.window, self.fft_size, fftbins=True)


@dataclass
class FeatureBlock:
    data: np.ndarray  # (N, 2F, T)

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_freq_pairs(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]


def stft(signal, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """One-sided STFT without padding, shape ``(fft_size // 2 + 1, T)``."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("stft expects a mono signal")
    cfg.n_frames(len(x))
    frames = sliding_window_view(x, cfg.fft_size)[::cfg.hop]
    return np.fft.rfft(frames * cfg.analysis_window(), axis=1).T


def extract_features(wave: MultiChannelWave | np.ndarray, cfg: StftConfig = StftConfig(),
                     dtype=np.float32) -> FeatureBlock:
    """Per node: keep bins ``first_bin..first_bin+n_bins-1`` and stack [imag; real]."""
    channels = wave.channels if isinstance(wave, MultiChannelWave) else np.atleast_2d(wave)
    cfg.n_frames(channels.shape[1])
    frames = sliding_window_view(channels.astype(float, copy=False), cfg.fft_size, axis=1)
    frames = frames[:, ::cfg.hop]  # (N, T, fft)
    spec = np.fft.rfft(frames * cfg.analysis_window(), axis=2)
    spec = spec[:, :, cfg.first_bin:cfg.first_bin + cfg.n_bins]
    feats = np.concatenate([spec.imag, spec.real], axis=2)  # (N, T, 2F)
    return FeatureBlock(np.ascontiguousarray(feats.transpose(0, 2, 1), dtype=dtype))
