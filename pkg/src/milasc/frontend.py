"""Audio front end: WAV reading, STFT power, HTK mel filterbank, log-mel."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 44100
FRAME_SECONDS = 0.040
N_MELS = 40
LOG_FLOOR = 1e-10


class WavError(ValueError):
    """Unreadable or unsupported WAV file."""


@dataclass
class AudioClip:
    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.rate}")
        if self.samples.size == 0:
            raise ValueError("audio clip is empty")

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


def frame_params(rate: int = SAMPLE_RATE) -> tuple[int, int]:
    """(frame, hop) in samples for 40 ms frames with 50% hop."""
    frame = int(round(FRAME_SECONDS * rate))
    return frame, frame // 2


def hann(n: int) -> np.ndarray:
    # periodic Hann: exact two-neighbour leakage for bin-centred tones
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip, frame: int, hop: int) -> np.ndarray:
    """Squared-magnitude STFT, shape (frames, frame // 2 + 1).

    Frame count is ``floor(N / hop)``; the tail is zero-padded so the last
    frame is complete.
    """
    x = clip.samples
    n_frames = x.size // hop
    if n_frames < 1:
        raise ValueError(f"clip of {x.size} samples is shorter than one hop ({hop})")
    need = (n_frames - 1) * hop + frame
    if need > x.size:
        x = np.concatenate([x, np.zeros(need - x.size)])
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * hann(frame), axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bins: int, n_bands: int = N_MELS, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters (unnormalised peak 1), shape (n_bands, n_bins).

    Centres are equally spaced in HTK mel between 0 Hz and Nyquist; each
    triangle reaches zero at its neighbours' centres.
    """
    if n_bands < 1 or n_bins < n_bands:
        raise ValueError(f"need 1 <= bands <= bins, got bands={n_bands}, bins={n_bins}")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(rate / 2.0), n_bands + 2))
    freqs = np.arange(n_bins) * (rate / 2.0) / (n_bins - 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(~(fb > 0).any(axis=1))
    if empty.size:
        raise ValueError(f"mel bands {empty.tolist()} contain no FFT bin; too many bands for "
                         f"{n_bins} bins")
    return fb


def log_mel(clip: AudioClip, n_bands: int = N_MELS) -> np.ndarray:
    """Log-mel spectrogram ordered (bands, frames)."""
    if clip.rate != SAMPLE_RATE:
        warnings.warn(f"clip sampled at {clip.rate} Hz, expected {SAMPLE_RATE}; not resampled")
    frame, hop = frame_params(clip.rate)
    power = stft_power(clip, frame, hop)
    fb = mel_filterbank(power.shape[1], n_bands, clip.rate)
    return np.log(fb @ power.T + LOG_FLOOR)


def read_wav(path) -> AudioClip:
    """Read a PCM/float WAV as mono samples in [-1, 1]."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise WavError(f"{path}: {exc}") from exc
    if data.size == 0:
        raise WavError(f"{path}: empty data chunk")
    kind = data.dtype
    if kind == np.int16:
        x = data / 32768.0
    elif kind == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data / 2147483648.0
    elif kind == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif kind in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample type {kind}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(rate))
