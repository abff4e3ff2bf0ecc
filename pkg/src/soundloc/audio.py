"""Waveform handling and the log-mel front end fed to the audio encoder.

Defaults produce a 201 x 64 matrix for one second of 16 kHz audio:
Hann window of 160 samples, hop 80, reflect center padding, 64 HTK mel
bands over 0-8000 Hz and ``log(x + 1e-6)`` compression.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import InvalidInputError

SAMPLE_RATE = 16000
WIN_LENGTH = 160
HOP_LENGTH = 80
N_MELS = 64
# zero-padded FFT size; a 160-point FFT leaves the lowest mel bands empty
N_FFT = 512
LOG_EPS = 1e-6
F_MIN = 0.0
F_MAX = 8000.0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio samples must be finite")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling (scipy ``resample_poly``) to ``target_rate``.

    Output length is ``ceil(n * target_rate / sample_rate)``, so duration is
    preserved to within one output sample period.
    """
    if len(clip) == 0:
        raise InvalidInputError("cannot resample an empty clip")
    if target_rate <= 0:
        raise InvalidInputError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    g = gcd(int(target_rate), int(clip.sample_rate))
    up, down = target_rate // g, clip.sample_rate // g
    out = resample_poly(clip.samples, up, down)
    return AudioClip(out, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS,
                   f_min=F_MIN, f_max=F_MAX) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``, peak 1."""
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (mid - lo)
    falling = (hi - bin_hz[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def stft_magnitude(x: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH,
                   n_fft: int = N_FFT) -> np.ndarray:
    """Center-padded Hann STFT magnitude, shape ``(frames, n_fft // 2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    if win > n_fft:
        raise InvalidInputError("window longer than FFT size")
    pad = n_fft // 2
    mode = "reflect" if len(x) > pad else "constant"
    padded = np.pad(x, pad, mode=mode)
    n_frames = 1 + (len(padded) - n_fft) // hop
    # periodic Hann, centred inside the n_fft frame
    window = np.zeros(n_fft)
    offset = (n_fft - win) // 2
    window[offset:offset + win] = np.hanning(win + 1)[:-1]
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * window, axis=-1))


def log_mel(clip: AudioClip, win: int = WIN_LENGTH, hop: int = HOP_LENGTH,
            n_mels: int = N_MELS, n_fft: int = N_FFT, eps: float = LOG_EPS) -> np.ndarray:
    """Log-mel spectrogram of a 16 kHz clip, shape ``(len // hop + 1, n_mels)``."""
    if clip.sample_rate != SAMPLE_RATE:
        raise InvalidInputError(
            f"log_mel expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate}; resample first")
    if len(clip) < win:
        raise InvalidInputError(f"clip of {len(clip)} samples is shorter than one window ({win})")
    mag = stft_magnitude(clip.samples, win, hop, n_fft)
    fb = mel_filterbank(clip.sample_rate, n_fft, n_mels)
    return np.log(mag @ fb.T + eps)


def read_wav(path) -> AudioClip:
    """Read PCM16 or float32 WAV; multichannel input is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(data, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write mono PCM16; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, pcm)


def fit_length(clip: AudioClip, n_samples: int) -> AudioClip:
    """Crop or zero-pad at the end to exactly ``n_samples``."""
    x = clip.samples[:n_samples]
    if len(x) < n_samples:
        x = np.pad(x, (0, n_samples - len(x)))
    return AudioClip(x, clip.sample_rate)


def load_spectrogram(path, duration_s: float | None = None) -> np.ndarray:
    """WAV file -> float32 log-mel matrix under the default settings.

    With ``duration_s`` the resampled signal is cropped or zero-padded first.
    """
    clip = read_wav(path)
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    if duration_s is not None:
        clip = fit_length(clip, int(round(duration_s * SAMPLE_RATE)))
    return log_mel(clip).astype(np.float32)
