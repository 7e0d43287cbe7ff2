import numpy as np
import pytest

from locsep import dsp
from locsep.errors import ConfigError, DimensionError, ValidationError


def dft_direct(x, n_fft):
    """O(N^2) DFT oracle, one-sided."""
    x = np.asarray(x, dtype=np.float64)
    n = np.arange(len(x))
    bins = n_fft // 2 + 1
    out = np.zeros(bins, dtype=np.complex128)
    for k in range(bins):
        out[k] = np.sum(x * np.exp(-2j * np.pi * k * n / n_fft))
    return out


def test_paper_profile_gives_801_bins():
    cfg = dsp.StftConfig()
    assert cfg.sample_rate == 16000
    assert cfg.window_len == 800
    assert cfg.hop_len == 400
    assert cfg.fft_length == 1600
    assert cfg.bin_count == 801


def test_stft_zero_input_is_zero():
    cfg = dsp.StftConfig()
    w = dsp.MultichannelWave(np.zeros((3, 5000)), 16000)
    spec = dsp.stft(w, cfg)
    assert np.all(spec.data == 0)


def test_stft_cosine_peak_bin_matches_direct_dft():
    sr = 16000
    cfg = dsp.StftConfig(sample_rate=sr, window_len_ms=50.0, hop_ms=25.0,
                         fft_len=800, window="rect")
    k = 100
    freq = k * sr / cfg.fft_length
    t = np.arange(4 * cfg.window_len) / sr
    x = np.cos(2 * np.pi * freq * t)
    spec = dsp.stft(dsp.MultichannelWave(x[None], sr), cfg)

    # interior frame fully inside the signal (first frames straddle padding)
    frame_idx = 4
    frame = spec.data[0, frame_idx]
    assert np.argmax(np.abs(frame)) == k
    # energy concentrated in that bin
    power = np.abs(frame) ** 2
    assert power[k] > 0.99 * power.sum()

    # compare against the O(N^2) oracle on the same windowed slice
    pad = cfg.window_len // 2
    start = frame_idx * cfg.hop_len - pad
    window_slice = x[start : start + cfg.window_len]
    oracle = dft_direct(window_slice, cfg.fft_length)
    np.testing.assert_allclose(frame, oracle, rtol=1e-9, atol=1e-9)


def test_roundtrip_random_signals():
    cfg = dsp.StftConfig()
    rng = np.random.default_rng(0)
    for _ in range(5):
        n = int(rng.integers(3000, 30000))
        ch = int(rng.integers(1, 5))
        w = dsp.MultichannelWave(rng.standard_normal((ch, n)), 16000)
        back = dsp.istft(dsp.stft(w, cfg), cfg, length=n)
        err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert err < 1e-6


def test_roundtrip_window_longer_than_signal():
    cfg = dsp.StftConfig()
    rng = np.random.default_rng(1)
    w = dsp.MultichannelWave(rng.standard_normal((2, 300)), 16000)
    spec = dsp.stft(w, cfg)  # zero-padded, never an error
    back = dsp.istft(spec, cfg, length=300)
    err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
    assert err < 1e-6


def test_istft_zero_spectrogram_is_zero():
    cfg = dsp.StftConfig()
    w = dsp.MultichannelWave(np.zeros((1, 8000)), 16000)
    spec = dsp.stft(w, cfg)
    out = dsp.istft(spec, cfg)
    assert np.all(out.samples == 0)


def test_istft_single_frame_windowed_impulse():
    cfg = dsp.StftConfig()
    win = cfg.window_array()
    pos = 613
    frame = np.zeros(cfg.window_len)
    frame[pos] = win[pos]  # windowed impulse, matching one analysis frame
    data = np.fft.rfft(frame, n=cfg.fft_length)[None, None, :]
    spec = dsp.Spectrogram(data, 16000, cfg.hop_len, cfg.window_len, cfg.fft_length)
    out = dsp.istft(spec, cfg, trim_padding=False).samples[0]

    # direct convolution oracle: irfft of the single frame is the windowed
    # impulse itself; synthesis divides out the window energy at pos
    oracle = np.fft.irfft(data[0, 0], n=cfg.fft_length)[: cfg.window_len]
    np.testing.assert_allclose(oracle, frame, atol=1e-12)

    assert np.argmax(np.abs(out)) == pos
    assert out[pos] == pytest.approx(1.0, rel=1e-9)
    rest = np.delete(out, pos)
    assert np.max(np.abs(rest)) < 1e-9


def test_stft_linearity():
    cfg = dsp.StftConfig()
    rng = np.random.default_rng(2)
    x1 = rng.standard_normal((2, 7000))
    x2 = rng.standard_normal((2, 7000))
    a, b = 1.7, -0.3
    left = dsp.stft(dsp.MultichannelWave(a * x1 + b * x2, 16000), cfg).data
    right = (a * dsp.stft(dsp.MultichannelWave(x1, 16000), cfg).data
             + b * dsp.stft(dsp.MultichannelWave(x2, 16000), cfg).data)
    np.testing.assert_allclose(left, right, atol=1e-10)


def test_parseval_per_frame_rect_window():
    sr = 16000
    cfg = dsp.StftConfig(sample_rate=sr, fft_len=1600, window="rect")
    rng = np.random.default_rng(3)
    x = rng.standard_normal(6400)
    spec = dsp.stft(dsp.MultichannelWave(x[None], sr), cfg)
    pad = cfg.window_len // 2
    padded = np.pad(x, (pad, pad + 10000))
    for t in range(spec.frame_count):
        sl = padded[t * cfg.hop_len : t * cfg.hop_len + cfg.window_len]
        frame = spec.data[0, t]
        # one-sided spectrum: double the interior bins
        spec_energy = (np.abs(frame[0]) ** 2 + np.abs(frame[-1]) ** 2
                       + 2 * np.sum(np.abs(frame[1:-1]) ** 2)) / cfg.fft_length
        sig_energy = np.sum(sl**2)
        if sig_energy > 0:
            assert abs(spec_energy - sig_energy) / sig_energy < 1e-6


def test_apply_mask_identity_zero_and_half():
    cfg = dsp.StftConfig()
    rng = np.random.default_rng(4)
    w = dsp.MultichannelWave(rng.standard_normal((2, 5000)), 16000)
    spec = dsp.stft(w, cfg)
    ones = np.ones((spec.frame_count, spec.bin_count))
    np.testing.assert_array_equal(dsp.apply_mask(spec, ones).data, spec.data)
    assert np.all(dsp.apply_mask(spec, 0.0 * ones).data == 0)
    np.testing.assert_allclose(dsp.apply_mask(spec, 0.5 * ones).data,
                               0.5 * spec.data, atol=0)


def test_apply_mask_shape_mismatch():
    cfg = dsp.StftConfig()
    spec = dsp.stft(dsp.MultichannelWave(np.zeros((1, 5000)), 16000), cfg)
    with pytest.raises(DimensionError):
        dsp.apply_mask(spec, np.ones((3, 3)))


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        dsp.StftConfig(hop_ms=60.0)  # hop > window
    with pytest.raises(ConfigError):
        dsp.StftConfig(window_len_ms=50.0, hop_ms=21.0)  # breaks COLA
    with pytest.raises(ConfigError):
        dsp.StftConfig(fft_len=100)
    with pytest.raises(ConfigError):
        dsp.StftConfig(window="kaiser")


def test_istft_geometry_mismatch():
    cfg = dsp.StftConfig()
    other = dsp.StftConfig(sample_rate=8000)
    spec = dsp.stft(dsp.MultichannelWave(np.zeros((1, 4000)), 16000), cfg)
    with pytest.raises(ConfigError):
        dsp.istft(spec, other)


def test_wav_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    w = dsp.MultichannelWave(0.15 * rng.standard_normal((4, 4000)), 16000)
    f32 = tmp_path / "f32.wav"
    dsp.write_wav(f32, w, encoding="float32")
    back = dsp.read_wav(f32)
    assert back.sample_rate == 16000
    assert back.channel_count == 4
    np.testing.assert_allclose(back.samples, w.samples, atol=1e-6)

    pcm = tmp_path / "pcm.wav"
    dsp.write_wav(pcm, w, encoding="pcm16")
    back = dsp.read_wav(pcm)
    np.testing.assert_allclose(back.samples, w.samples, atol=1.0 / 32768)

    mono = tmp_path / "mono.wav"
    dsp.write_wav(mono, dsp.MultichannelWave(w.samples[:1], 16000))
    assert dsp.read_wav(mono).channel_count == 1


def test_wave_validation():
    with pytest.raises(ValidationError):
        dsp.MultichannelWave(np.zeros((1, 10)), 0)
    with pytest.raises(ValidationError):
        dsp.stft(dsp.MultichannelWave(np.zeros((1, 0)), 16000), dsp.StftConfig())
