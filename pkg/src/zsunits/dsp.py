"""Signal processing: STFT/ISTFT, mel filterbank, MFCC + deltas, Griffin-Lim.

Frames are never centered: frame ``t`` covers samples
``[t * hop, t * hop + window_length)``, so an utterance of ``n`` samples
yields ``1 + (n - window_length) // hop`` frames. Windowed frames are
zero-padded to ``fft_size`` before the FFT.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.signal import resample_poly

DEFAULT_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
FEATURE_DIMS = {"mfcc39": 39, "mel80": 80}


class EmptyInputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def resampled(self, rate):
        """Polyphase resampling to ``rate`` Hz (no-op when already there)."""
        if rate == self.sample_rate:
            return self
        g = gcd(rate, self.sample_rate)
        out = resample_poly(self.samples, rate // g, self.sample_rate // g)
        return AudioBuffer(out, rate)


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 2048
    window_length: int = 400
    hop_length: int = 160
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size & (self.fft_size - 1):
            raise ConfigurationError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop_length <= self.window_length <= self.fft_size:
            raise ConfigurationError(
                "need 0 < hop_length <= window_length <= fft_size, got "
                f"{self.hop_length}, {self.window_length}, {self.fft_size}"
            )
        if self.window not in ("hann", "rect"):
            raise ConfigurationError(f"unknown window {self.window!r}")

    @classmethod
    def from_ms(cls, sample_rate=DEFAULT_SAMPLE_RATE, window_ms=25.0, hop_ms=10.0, fft_size=2048):
        return cls(
            fft_size=fft_size,
            window_length=int(round(sample_rate * window_ms / 1000.0)),
            hop_length=int(round(sample_rate * hop_ms / 1000.0)),
        )

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    def window_array(self):
        n = self.window_length
        if self.window == "rect":
            return np.ones(n)
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)

    def n_frames(self, n_samples):
        if n_samples < self.window_length:
            return 0
        return 1 + (n_samples - self.window_length) // self.hop_length

    def n_samples(self, n_frames):
        return (n_frames - 1) * self.hop_length + self.window_length if n_frames else 0


@dataclass
class Spectrogram:
    """Time-major spectrogram (T_s x n_bins), complex or magnitude."""

    frames: np.ndarray
    config: StftConfig
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def is_complex(self):
        return np.iscomplexobj(self.frames)

    def magnitude(self):
        return Spectrogram(np.abs(self.frames), self.config, self.sample_rate)


@dataclass
class FeatureSequence:
    frames: np.ndarray
    feature_kind: str
    frame_rate: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        want = FEATURE_DIMS.get(self.feature_kind)
        if want is not None and self.frames.shape[1] != want:
            raise ConfigurationError(f"{self.feature_kind} needs {want} dims, got {self.frames.shape[1]}")

    def __len__(self):
        return self.frames.shape[0]


def stft(audio: AudioBuffer, cfg: StftConfig) -> Spectrogram:
    x = audio.samples
    if x.size < cfg.window_length:
        raise EmptyInputError(
            f"audio has {x.size} samples, shorter than one {cfg.window_length}-sample window"
        )
    frames = sliding_window_view(x, cfg.window_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * cfg.window_array(), n=cfg.fft_size, axis=1)
    return Spectrogram(spec, cfg, audio.sample_rate)


def window_envelope(cfg: StftConfig, n_frames):
    """Overlap-added squared window, the ISTFT normalizer."""
    w2 = cfg.window_array() ** 2
    env = np.zeros(cfg.n_samples(n_frames))
    for t in range(n_frames):
        start = t * cfg.hop_length
        env[start : start + cfg.window_length] += w2
    return env


def istft(spec: Spectrogram, cfg: StftConfig | None = None) -> AudioBuffer:
    """Least-squares inverse: overlap-add of window * frame, divided by sum of window**2.

    Samples where the envelope vanishes (no window support) come out as 0.
    """
    if cfg is None:
        cfg = spec.config
    elif cfg != spec.config:
        raise ConfigurationError(f"spectrogram was made with {spec.config}, asked to invert with {cfg}")
    frames = np.asarray(spec.frames)
    if frames.ndim != 2 or frames.shape[1] != cfg.n_bins:
        raise ConfigurationError(f"expected (T, {cfg.n_bins}) frames, got {frames.shape}")
    n_frames = frames.shape[0]
    w = cfg.window_array()
    time_frames = np.fft.irfft(frames, n=cfg.fft_size, axis=1)[:, : cfg.window_length] * w
    out = np.zeros(cfg.n_samples(n_frames))
    for t in range(n_frames):
        start = t * cfg.hop_length
        out[start : start + cfg.window_length] += time_frames[t]
    env = window_envelope(cfg, n_frames)
    nz = env > 1e-12 * max(env.max(initial=0.0), 1e-300)
    out[nz] /= env[nz]
    out[~nz] = 0.0
    return AudioBuffer(out, spec.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, cfg: StftConfig, sample_rate=DEFAULT_SAMPLE_RATE):
    """Triangular filters (peak 1) equally spaced on the mel scale from 0 Hz to Nyquist."""
    if n_mels < 1:
        raise ConfigurationError("n_mels must be >= 1")
    if n_mels > cfg.n_bins:
        raise ConfigurationError(f"n_mels={n_mels} exceeds {cfg.n_bins} frequency bins")
    bin_hz = np.arange(cfg.n_bins) * sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (mid - lo)
    falling = (hi - bin_hz[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrogram(audio, cfg):
    return np.abs(stft(audio, cfg).frames) ** 2


def log_mel(audio, cfg, n_mels=80):
    fb = mel_filterbank(n_mels, cfg, audio.sample_rate)
    return np.log(np.maximum(power_spectrogram(audio, cfg) @ fb.T, LOG_FLOOR))


def deltas(features, window=2):
    """Regression deltas with edge frames replicated."""
    c = np.asarray(features, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise EmptyInputError("deltas needs a (T >= 1, D) matrix")
    n_frames = c.shape[0]
    padded = np.pad(c, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(c)
    for n in range(1, window + 1):
        out += n * (padded[window + n : window + n + n_frames] - padded[window - n : window - n + n_frames])
    return out / denom


def mfcc(audio: AudioBuffer, cfg: StftConfig, n_mfcc=13, n_mels=40, delta_window=2, first="c0"):
    """13 orthonormal DCT-II cepstra (c0..c12) of log-mel energies plus deltas and delta-deltas.

    ``first="log_energy"`` replaces c0 with the log of the frame's power-spectrum sum.
    """
    if first not in ("c0", "log_energy"):
        raise ConfigurationError(f"first coefficient must be 'c0' or 'log_energy', got {first!r}")
    power = power_spectrogram(audio, cfg)
    fb = mel_filterbank(n_mels, cfg, audio.sample_rate)
    logmel = np.log(np.maximum(power @ fb.T, LOG_FLOOR))
    cep = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_mfcc]
    if first == "log_energy":
        cep[:, 0] = np.log(np.maximum(power.sum(axis=1), LOG_FLOOR))
    d1 = deltas(cep, delta_window)
    d2 = deltas(d1, delta_window)
    frames = np.concatenate([cep, d1, d2], axis=1)
    kind = "custom" if frames.shape[1] != 39 else "mfcc39" if first == "c0" else "mfcc39e"
    return FeatureSequence(frames, kind, audio.sample_rate / cfg.hop_length)


def mfcc_log_energy(audio: AudioBuffer, cfg: StftConfig):
    return mfcc(audio, cfg, first="log_energy")


def mel80(audio: AudioBuffer, cfg: StftConfig):
    return FeatureSequence(log_mel(audio, cfg, 80), "mel80", audio.sample_rate / cfg.hop_length)


def linear_magnitude(audio: AudioBuffer, cfg: StftConfig):
    return FeatureSequence(np.abs(stft(audio, cfg).frames), "linear", audio.sample_rate / cfg.hop_length)


EXTRACTORS = {"mfcc39": mfcc, "mfcc39e": mfcc_log_energy, "mel80": mel80, "linear": linear_magnitude}


def extract(audio, cfg, kind="mfcc39"):
    try:
        return EXTRACTORS[kind](audio, cfg)
    except KeyError:
        raise ConfigurationError(f"unknown feature kind {kind!r}") from None


def magnitude_error(x, mag, cfg):
    """Frobenius distance between |STFT(x)| and a target magnitude."""
    return float(np.linalg.norm(np.abs(stft(x, cfg).frames) - mag))


@dataclass
class GriffinLimResult:
    audio: AudioBuffer
    errors: list
    spectral_convergence: float


def griffin_lim(mag, cfg: StftConfig, iterations=60, seed=0, sample_rate=DEFAULT_SAMPLE_RATE):
    """Recover a waveform whose STFT magnitude approximates ``mag``.

    Starts from a uniformly random phase drawn from ``seed``. ``errors[k]``
    is ``||STFT(x_k)| - mag||_F`` after iteration ``k + 1``; the returned
    spectral convergence is the last error divided by ``||mag||_F``.
    """
    if isinstance(mag, Spectrogram):
        sample_rate = mag.sample_rate
        mag = mag.frames
    mag = np.asarray(mag, dtype=np.float64)
    if iterations < 1:
        raise ConfigurationError("iterations must be >= 1")
    if not np.all(np.isfinite(mag)):
        raise ValueError("magnitude spectrogram contains non-finite values")
    if np.any(mag < 0):
        raise ValueError("magnitude spectrogram must be nonnegative")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    spec = mag * np.exp(1j * phase)
    norm = float(np.linalg.norm(mag))
    errors = []
    x = None
    for _ in range(iterations):
        x = istft(Spectrogram(spec, cfg, sample_rate), cfg)
        rebuilt = stft(x, cfg).frames
        errors.append(float(np.linalg.norm(np.abs(rebuilt) - mag)))
        spec = mag * np.exp(1j * np.angle(rebuilt))
    sc = errors[-1] / norm if norm > 0 else 0.0
    return GriffinLimResult(x, errors, sc)
