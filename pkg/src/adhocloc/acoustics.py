"""Room acoustics: image-source RIRs, diffuse noise and scene rendering."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, lfilter

from .grid import GridSpec, RoomDims, locate_area

SPEED_OF_SOUND = 340.0
FD_TAPS = 81
MAX_RIR_SECONDS = 2.0


class GeometryError(ValueError):
    pass


class ReverberationError(ValueError):
    pass


@dataclass(frozen=True)
class ScenePoint:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def inside(self, room: RoomDims) -> bool:
        return (0 <= self.x <= room.x_len and 0 <= self.y <= room.y_len
                and 0 <= self.z <= room.z_len)


@dataclass
class Scene:
    room: RoomDims
    nodes: list[ScenePoint]
    speaker: ScenePoint
    t60: float
    snr_db: float
    sample_rate: int = 16000
    source_id: str = ""

    def __post_init__(self):
        if len(self.nodes) < 1:
            raise GeometryError("a scene needs at least one node")
        for i, p in enumerate([self.speaker, *self.nodes]):
            if not p.inside(self.room):
                who = "speaker" if i == 0 else f"node {i - 1}"
                raise GeometryError(f"{who} at {p} is outside the room")
        if not self.t60 > 0:
            raise ReverberationError(f"t60 must be positive, got {self.t60}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def nearest_node(self) -> int:
        sp = self.speaker.as_array()
        d = [np.linalg.norm(n.as_array() - sp) for n in self.nodes]
        return int(np.argmin(d))


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int


@dataclass
class MultiChannelWave:
    channels: np.ndarray  # (N, n_samples)
    sample_rate: int

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels))

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]


@dataclass
class Sample:
    waves: MultiChannelWave
    node_areas: list[int]
    speaker_area: int
    speaker_xy: tuple[float, float]
    scene: Scene
    meta: dict = field(default_factory=dict)


def t60_to_reflection(room: RoomDims, t60: float) -> float:
    """Uniform wall reflection coefficient for ``t60`` via Sabine's formula."""
    if not t60 > 0:
        raise ReverberationError(f"t60 must be positive, got {t60}")
    alpha = 0.161 * room.volume / (room.surface * t60)
    if alpha >= 1.0:
        raise ReverberationError(
            f"t60={t60} s is unreachable in a {room.x_len}x{room.y_len}x{room.z_len} m room "
            f"(Sabine absorption {alpha:.3f} >= 1)")
    alpha = min(max(alpha, 1e-12), 0.9999)
    return math.sqrt(1.0 - alpha)


def default_rir_length(t60: float, sample_rate: int) -> int:
    return int(math.ceil(min(t60, MAX_RIR_SECONDS) * sample_rate))


def schroeder_t60(h, sample_rate: int, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """T60 from a line fit to the backward-integrated energy decay between two levels."""
    e = np.cumsum(np.asarray(h, dtype=float)[::-1] ** 2)[::-1]
    if e[0] <= 0:
        raise ValueError("impulse response has no energy")
    edc = 10 * np.log10(np.maximum(e / e[0], 1e-300))
    i0 = int(np.argmax(edc <= lo_db))
    i1 = int(np.argmax(edc <= hi_db))
    if i1 <= i0 + 1:
        raise ValueError("decay curve does not span the fitting range")
    t = np.arange(i0, i1) / sample_rate
    slope = np.polyfit(t, edc[i0:i1], 1)[0]
    return -60.0 / slope


@functools.lru_cache(maxsize=256)
def match_reflection(room: RoomDims, t60: float, sample_rate: int = 16000,
                     c: float = SPEED_OF_SOUND) -> float:
    """Reflection coefficient whose image-source RIR decays with the target ``t60``.

    Sabine's formula assumes a diffuse field; in flat shoebox rooms the image
    model decays markedly slower than that. Here the coefficient is found by
    bisection on the Schroeder T60 of the image energy histogram for a fixed
    reference source/microphone pair, over an RIR of the default length.
    """
    beta0 = t60_to_reflection(room, t60)
    dims = np.array(room.as_tuple())
    src = dims * np.array([0.31, 0.43, 0.52])
    mic = dims * np.array([0.68, 0.61, 0.41])
    length = default_rir_length(t60, sample_rate)
    radius = length / sample_rate * c + float(np.linalg.norm(dims))
    pos, order = _image_sources(room, src, beta0, radius)
    dist = np.linalg.norm(pos - mic, axis=1)
    delay = np.floor(dist / c * sample_rate).astype(np.int64)
    keep = delay < length
    dist, delay, order = dist[keep], delay[keep], order[keep]
    inv_d2 = 1.0 / dist ** 2

    def fitted(beta):
        energy = np.bincount(delay, weights=inv_d2 * np.power(beta * beta, order), minlength=length)
        return schroeder_t60(np.sqrt(energy), sample_rate)

    # bisection on log(-log(beta)), which is monotone in the decay rate
    lo, hi = math.log(-math.log(0.999999)), math.log(-math.log(1e-3))
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        beta = math.exp(-math.exp(mid))
        try:
            t = fitted(beta)
        except ValueError:
            t = 0.0
        if t > t60:
            lo = mid
        else:
            hi = mid
    return math.exp(-math.exp(0.5 * (lo + hi)))


@numba.njit(cache=True)
def _accumulate_images(h, delays, amps, half):
    n = h.shape[0]
    width = 2 * half + 1
    cos_j = np.empty(width)
    sin_j = np.empty(width)
    for j in range(-half, half + 1):
        cos_j[j + half] = math.cos(2.0 * math.pi * j / width)
        sin_j[j + half] = math.sin(2.0 * math.pi * j / width)
    for i in range(delays.shape[0]):
        d = delays[i]
        n0 = int(math.floor(d + 0.5))
        frac = d - n0  # in [-0.5, 0.5)
        s = math.sin(math.pi * frac)
        cf = math.cos(2.0 * math.pi * frac / width)
        sf = math.sin(2.0 * math.pi * frac / width)
        a = amps[i]
        for j in range(-half, half + 1):
            k = n0 + j
            if k < 0 or k >= n:
                continue
            t = j - frac
            if abs(t) < 1e-9:
                sinc = 1.0
            else:
                # sin(pi * (j - frac)) == (-1)**(j + 1) * sin(pi * frac)
                sgn = -1.0 if (j % 2 == 0) else 1.0
                sinc = sgn * s / (math.pi * t)
            # Hann window at t, from the angle-difference identity
            w = 0.5 * (1.0 + cos_j[j + half] * cf + sin_j[j + half] * sf)
            h[k] += a * w * sinc


def _image_sources(room, src, beta, radius):
    """Mirror images within ``radius`` of the room origin cell, with amplitudes."""
    dims = np.array(room.as_tuple())
    axes = []
    for a in range(3):
        n_max = int(math.ceil(radius / (2 * dims[a]))) + 1
        n = np.arange(-n_max, n_max + 1)
        pos = np.concatenate([src[a] + 2 * n * dims[a], -src[a] + 2 * n * dims[a]])
        refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
        axes.append((pos, refl))
    (px, rx), (py, ry), (pz, rz) = axes
    pos = np.stack(np.meshgrid(px, py, pz, indexing="ij"), axis=-1).reshape(-1, 3)
    order = (rx[:, None, None] + ry[None, :, None] + rz[None, None, :]).reshape(-1)
    return pos, order


def generate_rir(room: RoomDims, src: ScenePoint, mic: ScenePoint, beta: float,
                 sample_rate: int = 16000, length: int | None = None,
                 c: float = SPEED_OF_SOUND, t60: float | None = None,
                 high_pass: bool = True) -> Rir:
    """Allen-Berkley image-source impulse response between ``src`` and ``mic``.

    Each image adds ``beta**reflections / (4 pi d)`` at delay ``d / c`` through an
    81-tap Hann-windowed sinc fractional-delay interpolator.
    """
    s, m = src.as_array(), mic.as_array()
    if np.linalg.norm(s - m) < 1e-6:
        raise GeometryError(f"source and microphone coincide at {src}")
    if not src.inside(room) or not mic.inside(room):
        raise GeometryError("source and microphone must both be inside the room")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"reflection coefficient must lie in [0, 1), got {beta}")
    if length is None:
        if t60 is None:
            raise ValueError("give either length or t60")
        length = default_rir_length(t60, sample_rate)
    h = np.zeros(int(length))
    if beta == 0.0:
        pos = s[None, :]
        order = np.zeros(1)
    else:
        radius = length / sample_rate * c + np.linalg.norm(room.as_tuple())
        pos, order = _image_sources(room, s, beta, radius)
    dist = np.linalg.norm(pos - m, axis=1)
    delays = dist / c * sample_rate
    keep = delays < length
    amps = np.power(beta, order[keep]) / (4 * np.pi * dist[keep])
    _accumulate_images(h, delays[keep], amps, FD_TAPS // 2)
    if high_pass:
        h = allen_berkley_highpass(h, sample_rate)
    return Rir(h, sample_rate)


def allen_berkley_highpass(h, sample_rate: int, cutoff: float = 100.0) -> np.ndarray:
    """Remove the DC build-up of summed positive image pulses."""
    w = 2 * math.pi * cutoff / sample_rate
    r1 = math.exp(-w)
    b1 = 2 * r1 * math.cos(w)
    b2 = -r1 * r1
    a1 = -(1 + r1)
    return lfilter([1.0, a1, r1], [1.0, -b1, -b2], h)


@numba.njit(cache=True)
def _delay_and_sum(spec, tau, df):
    # sum_k spec[k, f] * exp(-2j pi f df tau_k), phasors advanced by recurrence
    n_waves, n_freq = spec.shape
    out = np.zeros(n_freq, dtype=np.complex128)
    for k in range(n_waves):
        step = complex(math.cos(2 * math.pi * df * tau[k]), -math.sin(2 * math.pi * df * tau[k]))
        ph = complex(1.0, 0.0)
        for f in range(n_freq):
            out[f] += spec[k, f] * ph
            ph *= step
            if f % 1024 == 1023:
                ph = ph / abs(ph)
    return out


def _sphere_directions(k: int, rng: np.random.Generator) -> np.ndarray:
    # Fibonacci lattice under a random rotation: uniform on the sphere in
    # distribution, with lower quadrature error than i.i.d. draws
    i = np.arange(k) + 0.5
    z = 1 - 2 * i / k
    phi = np.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    q, rr = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(rr))
    return u @ q.T


def diffuse_noise(positions, duration: int, sample_rate: int = 16000, seed: int = 0,
                  n_waves: int = 64, c: float = SPEED_OF_SOUND) -> MultiChannelWave:
    """Spherically isotropic noise from ``n_waves`` white plane waves.

    Per-node delays are applied in the frequency domain (circularly), so every
    wave stays white and the inter-node coherence follows sin(kd)/(kd).
    Channels are scaled to unit power.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if pos.shape[0] < 1 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {pos.shape}")
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    dirs = _sphere_directions(n_waves, rng)
    waves = rng.standard_normal((n_waves, duration))
    spec = np.fft.rfft(waves, axis=1)  # (K, F)
    df = sample_rate / duration
    out = np.empty((pos.shape[0], duration))
    for n, p in enumerate(pos):
        tau = -(dirs @ p) / c  # arrival time offset of each wave at this node
        out[n] = np.fft.irfft(_delay_and_sum(spec, tau, df), n=duration)
    out /= np.sqrt(np.mean(out ** 2, axis=1, keepdims=True))
    return MultiChannelWave(out, sample_rate)


def render_components(scene: Scene, source, seed: int = 0, c: float = SPEED_OF_SOUND,
                      beta: float | None = None, high_pass: bool = True):
    """Reverberant speech and SNR-scaled noise per node, before mixing.

    Returns ``(speech, noise, nearest)`` with ``speech`` and ``noise`` of shape
    ``(N, len(source))``; ``nearest`` is the node whose SNR equals the target.
    ``beta`` overrides the reflection coefficient fitted to ``scene.t60``.
    """
    src = np.asarray(source, dtype=float)
    if src.ndim != 1:
        raise ValueError("source must be a mono sequence")
    if len(src) < 2 * scene.sample_rate:
        raise ValueError(f"source has {len(src)} samples; need at least 2 s "
                         f"({2 * scene.sample_rate} samples at {scene.sample_rate} Hz)")
    if beta is None:
        beta = match_reflection(scene.room, scene.t60, scene.sample_rate, c)
    length = default_rir_length(scene.t60, scene.sample_rate)
    n_out = len(src)
    speech = np.empty((len(scene.nodes), n_out))
    for i, node in enumerate(scene.nodes):
        rir = generate_rir(scene.room, scene.speaker, node, beta, scene.sample_rate, length, c=c,
                           high_pass=high_pass)
        speech[i] = fftconvolve(src, rir.taps)[:n_out]
    nearest = scene.nearest_node()
    if math.isinf(scene.snr_db) and scene.snr_db > 0:
        return speech, np.zeros_like(speech), nearest
    noise = diffuse_noise([n.as_array() for n in scene.nodes], n_out, scene.sample_rate,
                          seed=seed, c=c).channels
    p_speech = np.mean(speech[nearest] ** 2)
    p_noise = np.mean(noise[nearest] ** 2)
    gain = math.sqrt(p_speech / (p_noise * 10 ** (scene.snr_db / 10)))
    return speech, gain * noise, nearest


def render_scene(scene: Scene, source, grid: GridSpec, seed: int = 0,
                 c: float = SPEED_OF_SOUND, **overrides) -> Sample:
    speech, noise, nearest = render_components(scene, source, seed=seed, c=c, **overrides)
    waves = MultiChannelWave(speech + noise, scene.sample_rate)
    return Sample(
        waves=waves,
        node_areas=[locate_area((n.x, n.y), grid) for n in scene.nodes],
        speaker_area=locate_area((scene.speaker.x, scene.speaker.y), grid),
        speaker_xy=(scene.speaker.x, scene.speaker.y),
        scene=scene,
        meta={"snr_node": nearest},
    )


def write_wav(path, signal, sample_rate: int) -> None:
    """Write a mono 32-bit float little-endian WAV."""
    wavfile.write(str(path), int(sample_rate), np.asarray(signal, dtype="<f4"))


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a mono WAV as float64; integer PCM is scaled to [-1, 1)."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype.kind == "i":
        data = data / float(2 ** (8 * data.dtype.itemsize - 1))
    elif data.dtype.kind == "u":
        data = (data.astype(float) - 128.0) / 128.0
    data = np.asarray(data, dtype=float)
    if data.ndim > 1:
        data = data.mean(axis=1)
    return data, rate
