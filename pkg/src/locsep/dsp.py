"""Core time/frequency types, STFT analysis/synthesis and WAV I/O.

Shape conventions used throughout the toolkit:
    waves:        (channels, samples), float64
    spectrograms: (channels, frames, bins), complex128
    masks/planes: (frames, bins), float64
"""

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DimensionError, ValidationError

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class MultichannelWave:
    """Time-domain sample buffer, one row per microphone channel."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2:
            raise ValidationError("samples must be a (channels, samples) array")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channel_count(self):
        return self.samples.shape[0]

    @property
    def num_samples(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.num_samples / self.sample_rate

    def channel(self, index):
        if not 0 <= index < self.channel_count:
            raise DimensionError(f"channel {index} out of range (I={self.channel_count})")
        return self.samples[index]


@dataclass
class Spectrogram:
    """Complex narrowband representation indexed (channel, frame, bin)."""

    data: np.ndarray
    sample_rate: int
    hop: int
    window_len: int
    fft_len: int
    window: str = "hann"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 3:
            raise DimensionError("spectrogram data must be (channels, frames, bins)")
        if self.data.shape[2] != self.fft_len // 2 + 1:
            raise ConfigError(
                f"bin_count {self.data.shape[2]} inconsistent with fft_len {self.fft_len}"
            )
        if not (self.hop <= self.window_len <= self.fft_len):
            raise ConfigError("need hop <= window_len <= fft_len")

    @property
    def channel_count(self):
        return self.data.shape[0]

    @property
    def frame_count(self):
        return self.data.shape[1]

    @property
    def bin_count(self):
        return self.data.shape[2]

    @property
    def bin_freqs_hz(self):
        return np.arange(self.bin_count) * self.sample_rate / self.fft_len

    def same_geometry(self, other):
        return (
            self.sample_rate == other.sample_rate
            and self.hop == other.hop
            and self.window_len == other.window_len
            and self.fft_len == other.fft_len
        )


@dataclass(frozen=True)
class StftConfig:
    """Analysis geometry. Defaults give 50 ms / 25 ms frames and 801 bins at 16 kHz.

    fft_len=None doubles the window length, the minimal zero-padding that
    yields an odd bin count of window_len+1.
    """

    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_len_ms: float = 50.0
    hop_ms: float = 25.0
    fft_len: int | None = None
    window: str = "hann"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.window not in ("hann", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.window_len_ms <= 0 or self.hop_ms <= 0:
            raise ConfigError("window/hop must be positive")
        if self.hop_len > self.window_len:
            raise ConfigError("hop longer than window breaks COLA")
        if self.window_len % self.hop_len != 0:
            raise ConfigError("COLA requires hop to divide the window length")
        if self.fft_length < self.window_len:
            raise ConfigError("fft_len shorter than window")

    @property
    def window_len(self):
        return int(round(self.window_len_ms * self.sample_rate / 1000.0))

    @property
    def hop_len(self):
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def fft_length(self):
        return self.fft_len if self.fft_len is not None else 2 * self.window_len

    @property
    def bin_count(self):
        return self.fft_length // 2 + 1

    def window_array(self):
        n = self.window_len
        if self.window == "rect":
            return np.ones(n)
        # periodic Hann, exact COLA at hop = window/k
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count_for(num_samples, cfg):
    """Number of frames produced for a signal of the given length."""
    padded = num_samples + 2 * (cfg.window_len // 2)
    if padded <= cfg.window_len:
        return 1
    return 1 + int(np.ceil((padded - cfg.window_len) / cfg.hop_len))


def _frame_signal(x, cfg):
    """Split a centered, zero-padded copy of x into (frames, window_len)."""
    pad = cfg.window_len // 2
    n_frames = frame_count_for(x.shape[-1], cfg)
    total = (n_frames - 1) * cfg.hop_len + cfg.window_len
    buf = np.zeros(x.shape[:-1] + (total,))
    buf[..., pad : pad + x.shape[-1]] = x
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop_len * np.arange(n_frames)[:, None]
    return buf[..., idx]


def stft(wave, cfg):
    """Windowed FFT analysis of every channel.

    Arguments:
        wave: MultichannelWave
        cfg: StftConfig; cfg.sample_rate must match the wave
    Return:
        Spectrogram of shape (channels, frames, bins)
    """
    if wave.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"wave sample rate {wave.sample_rate} != config {cfg.sample_rate}"
        )
    if wave.num_samples == 0:
        raise ValidationError("empty wave")
    frames = _frame_signal(wave.samples, cfg)  # (I, T, window_len)
    win = cfg.window_array()
    data = np.fft.rfft(frames * win, n=cfg.fft_length, axis=-1)
    return Spectrogram(
        data=data,
        sample_rate=cfg.sample_rate,
        hop=cfg.hop_len,
        window_len=cfg.window_len,
        fft_len=cfg.fft_length,
        window=cfg.window,
    )


def istft(spec, cfg, length=None, trim_padding=True):
    """Weighted overlap-add synthesis, the inverse of :func:`stft`.

    The center padding added by stft is trimmed (trim_padding=False keeps
    it, useful for spectrograms built by hand); pass `length` to trim the
    synthesis to the original sample count as well.
    """
    if (
        spec.sample_rate != cfg.sample_rate
        or spec.hop != cfg.hop_len
        or spec.window_len != cfg.window_len
        or spec.fft_len != cfg.fft_length
    ):
        raise ConfigError("spectrogram geometry does not match the config")
    win = cfg.window_array()
    n_frames = spec.frame_count
    total = (n_frames - 1) * cfg.hop_len + cfg.window_len
    frames = np.fft.irfft(spec.data, n=cfg.fft_length, axis=-1)[..., : cfg.window_len]
    num = np.zeros((spec.channel_count, total))
    den = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * cfg.hop_len, t * cfg.hop_len + cfg.window_len)
        num[:, sl] += frames[:, t, :] * win
        den[sl] += win * win
    out = num / np.maximum(den, 1e-12)
    if trim_padding:
        pad = cfg.window_len // 2
        out = out[:, pad : total - pad]
    if length is not None:
        out = out[:, :length]
    return MultichannelWave(samples=out, sample_rate=cfg.sample_rate)


def apply_mask(spec, mask):
    """Multiply every channel of a spectrogram by a (frames, bins) mask."""
    values = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if values.shape != (spec.frame_count, spec.bin_count):
        raise DimensionError(
            f"mask shape {values.shape} != (frames, bins) "
            f"({spec.frame_count}, {spec.bin_count})"
        )
    return Spectrogram(
        data=spec.data * values[None, :, :],
        sample_rate=spec.sample_rate,
        hop=spec.hop,
        window_len=spec.window_len,
        fft_len=spec.fft_len,
        window=spec.window,
    )


def read_wav(path):
    """Load a RIFF WAV file (PCM16 or IEEE float) as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim == 1:
        data = data[:, None]
    data = data.T  # (channels, samples)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    return MultichannelWave(samples=data, sample_rate=int(rate))


def write_wav(path, wave, encoding="float32"):
    """Write a wave as little-endian RIFF, either IEEE float32 or PCM16."""
    data = wave.samples.T
    if encoding == "float32":
        wavfile.write(path, wave.sample_rate, data.astype(np.float32))
    elif encoding == "pcm16":
        clipped = np.clip(data, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, wave.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ConfigError(f"unknown encoding {encoding!r}")
