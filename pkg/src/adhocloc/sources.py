"""Source signals: a synthetic speech-like generator and WAV corpus segments."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .acoustics import read_wav

SEGMENT_SECONDS = 2.0


def _resonator(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    return [1 - r], [1.0, -2 * r * np.cos(theta), r * r]


def synthetic_speech(n_samples: int, sample_rate: int = 16000, seed: int = 0) -> np.ndarray:
    """Syllable-like bursts of formant-filtered excitation with an amplitude envelope.

    Each syllable (120-320 ms) mixes a jittered glottal pulse train with
    aspiration noise, passes it through three formant resonators with randomly
    drawn centre frequencies, and gets a raised-cosine envelope; short pauses
    separate syllables. Output has unit RMS.
    """
    rng = np.random.default_rng(seed)
    out = np.zeros(n_samples)
    pos = int(rng.integers(0, int(0.05 * sample_rate)))
    f0_base = rng.uniform(90, 240)
    while pos < n_samples:
        n = int(rng.uniform(0.12, 0.32) * sample_rate)
        n = min(n, n_samples - pos)
        f0 = f0_base * rng.uniform(0.85, 1.2) * np.linspace(1.0, rng.uniform(0.85, 1.15), n)
        phase = np.cumsum(f0 / sample_rate)
        pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0])) > 0
        voiced = pulses.astype(float) * np.sqrt(sample_rate / f0_base)
        exc = rng.uniform(0.3, 1.0) * voiced + rng.uniform(0.05, 0.6) * rng.standard_normal(n)
        seg = np.zeros(n)
        for lo, hi, bw in ((250, 900, 80), (850, 2400, 120), (2000, 3600, 180)):
            b, a = _resonator(rng.uniform(lo, hi), bw, sample_rate)
            seg += lfilter(b, a, exc)
        if rng.random() < 0.3:
            # fricative-like high band burst
            b, a = _resonator(rng.uniform(3500, 6500), 900, sample_rate)
            seg += 0.5 * lfilter(b, a, rng.standard_normal(n))
        env = np.abs(np.sin(np.pi * np.arange(n) / max(n - 1, 1))) ** 0.7
        out[pos:pos + n] = seg * env * rng.uniform(0.4, 1.0)
        pos += n + int(rng.uniform(0.0, 0.12) * sample_rate)
    rms = np.sqrt(np.mean(out ** 2))
    return out / rms if rms > 0 else out


def corpus_segments(directory, sample_rate: int = 16000,
                    seconds: float = SEGMENT_SECONDS) -> list[tuple[str, int]]:
    """All full-length segments ``(relative_path, start_sample)`` in a WAV directory.

    Recordings are cut into consecutive segments; a trailing remainder shorter
    than ``seconds`` is discarded.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"source corpus directory {root} does not exist")
    seg = int(round(seconds * sample_rate))
    out = []
    for path in sorted(root.rglob("*.wav")):
        data, _ = read_wav(path, expected_rate=sample_rate)
        for start in range(0, len(data) - seg + 1, seg):
            out.append((str(path.relative_to(root)), start))
    return out


def load_segment(directory, rel_path: str, start: int, sample_rate: int = 16000,
                 seconds: float = SEGMENT_SECONDS) -> np.ndarray:
    data, _ = read_wav(Path(directory) / rel_path, expected_rate=sample_rate)
    return data[start:start + int(round(seconds * sample_rate))]
