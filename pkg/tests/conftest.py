import numpy as np
import pytest
from scipy.signal import lfilter

from locsep import dsp
from locsep.scenes import GeneratorConfig, generate_dataset


def speechlike(rng, n_samples, sample_rate=16000, f0=120.0):
    """Synthetic speech stand-in: harmonic bursts with syllabic gaps plus
    colored noise, so VAD, pitch variety and broadband phase cues all exist."""
    t = np.arange(n_samples) / sample_rate
    f0_track = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0_track) / sample_rate
    voiced = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 10))
    noise = lfilter([1.0], [1.0, -0.92], rng.standard_normal(n_samples))
    noise /= max(np.std(noise), 1e-12)

    env = np.zeros(n_samples)
    pos = int(rng.uniform(0, 0.08) * sample_rate)
    while pos < n_samples:
        burst = int(rng.uniform(0.15, 0.4) * sample_rate)
        gap = int(rng.uniform(0.06, 0.2) * sample_rate)
        w = np.hanning(burst)
        end = min(pos + burst, n_samples)
        env[pos:end] = w[: end - pos]
        pos += burst + gap

    sig = (0.75 * voiced + 0.35 * noise) * env
    rms = np.sqrt(np.mean(sig**2))
    return 0.05 * sig / max(rms, 1e-12)


def write_corpus(root, n_speakers=6, utts_per_speaker=3, dur_s=1.4, seed=0,
                 sample_rate=16000):
    rng = np.random.default_rng(seed)
    for s in range(n_speakers):
        spk_dir = root / f"spk{s:02d}"
        spk_dir.mkdir(parents=True, exist_ok=True)
        f0 = 90.0 + 22.0 * s
        for u in range(utts_per_speaker):
            x = speechlike(rng, int(dur_s * sample_rate), sample_rate, f0=f0)
            dsp.write_wav(spk_dir / f"utt{u}.wav",
                          dsp.MultichannelWave(x[None, :], sample_rate))
    return root


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, corpus_dir):
    """Six short reverberant scenes across train/dev/test."""
    out = tmp_path_factory.mktemp("dataset")
    cfg = GeneratorConfig(
        room_dim_range=((4.0, 6.5), (4.0, 6.5), (2.5, 3.0)),
        rt60_range=(0.3, 0.45),
        source_distance_range=(0.7, 2.5),
        snr_db_range=(8.0, 15.0),
        max_utterance_s=1.0,
        split_fractions=(("train", 0.4), ("dev", 0.3), ("test", 0.3)),
    )
    manifest = generate_dataset(corpus_dir, out, cfg, count=6, seed=11)
    return manifest
