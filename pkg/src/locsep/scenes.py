"""Two-speaker scene synthesis and dataset generation with full ground truth.

A scene is built from dry mono utterances convolved with simulated room
impulse responses; the per-source spatial images, the noise image, true
azimuths, ideal ratio masks and energy VAD labels are all retained so the
separator can be trained and scored against exact references.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import dsp
from .errors import ValidationError
from .localization import azimuth_of
from .rooms import ArrayGeometry, RoomSpec, anechoic_rt60, diffuse_noise, simulate_rir

MASK_EPS = 1e-8
DEFAULT_VAD_THRESHOLD_DB = 40.0


@dataclass
class SceneSpec:
    """Everything needed to synthesize one mixture deterministically."""

    room: RoomSpec
    array_center: tuple
    source_positions: tuple
    sir_db: float
    snr_db: float
    seed: int

    def __post_init__(self):
        dims = np.asarray(self.room.dimensions)
        for pos in self.source_positions:
            p = np.asarray(pos)
            if np.any(p <= 0.0) or np.any(p >= dims):
                raise ValidationError(f"source at {pos} outside room {tuple(dims)}")


@dataclass
class SceneTruth:
    """Ground truth of a synthesized scene.

    images + noise_image sum to the mixture sample-wise; ideal_masks and vad
    are filled once an STFT geometry is known (see attach_tf_truth).
    """

    images: list
    noise_image: dsp.MultichannelWave
    doas_deg: list
    ideal_masks: list = field(default=None)
    vad: np.ndarray = field(default=None)


def synthesize_scene(spec, geometry, dry_sources, noise=None, stft_cfg=None,
                     sample_rate=dsp.DEFAULT_SAMPLE_RATE):
    """Render a reverberant noisy mixture and its ground truth.

    Arguments:
        spec: SceneSpec
        geometry: ArrayGeometry
        dry_sources: list of mono sample arrays (>= 2)
        noise: optional MultichannelWave; None synthesizes diffuse noise
        stft_cfg: optional StftConfig; when given, ideal masks and VAD labels
            are attached to the truth
    Return:
        (mixture: MultichannelWave, truth: SceneTruth)

    Speaker 1 keeps unit gain; speaker 2 is scaled so the channel-1 image
    energies differ by sir_db, and the noise so channel-1 speaker-1 energy
    over noise energy equals snr_db. snr_db=None or inf disables noise.
    The mixture length is the maximum image length (shorter images are
    zero-padded at the end).
    """
    if len(dry_sources) < 2:
        raise ValidationError("need at least 2 dry sources")
    if len(dry_sources) != len(spec.source_positions):
        raise ValidationError("one source position per dry source required")

    images = []
    for dry, pos in zip(dry_sources, spec.source_positions):
        dry = np.asarray(dry, dtype=np.float64)
        if dry.ndim != 1 or dry.size == 0:
            raise ValidationError("dry sources must be non-empty mono arrays")
        rir = simulate_rir(spec.room, pos, geometry, spec.array_center,
                           sample_rate=sample_rate)
        images.append(fftconvolve(dry[None, :], rir, axes=1))

    length = max(img.shape[1] for img in images)
    images = [np.pad(img, ((0, 0), (0, length - img.shape[1]))) for img in images]

    e_ref = np.sum(images[0][0] ** 2)
    for j in range(1, len(images)):
        e_j = np.sum(images[j][0] ** 2)
        if e_j > 0:
            images[j] *= np.sqrt(e_ref / (e_j * 10.0 ** (spec.sir_db / 10.0)))

    rng = np.random.default_rng([spec.seed, 0x6E])
    if spec.snr_db is None or np.isinf(spec.snr_db):
        noise_samples = np.zeros((geometry.mic_count, length))
    else:
        if noise is None:
            noise_samples = diffuse_noise(geometry, length, sample_rate, rng)
        else:
            if noise.channel_count != geometry.mic_count:
                raise ValidationError("noise channel count does not match the array")
            reps = int(np.ceil(length / noise.num_samples))
            noise_samples = np.tile(noise.samples, (1, reps))[:, :length].copy()
        e_noise = np.sum(noise_samples[0] ** 2)
        if e_noise > 0:
            noise_samples *= np.sqrt(e_ref / (e_noise * 10.0 ** (spec.snr_db / 10.0)))

    mixture = images[0] + images[1] + noise_samples
    truth = SceneTruth(
        images=[dsp.MultichannelWave(img, sample_rate) for img in images],
        noise_image=dsp.MultichannelWave(noise_samples, sample_rate),
        doas_deg=[azimuth_of(p, spec.array_center) for p in spec.source_positions],
    )
    mixture_wave = dsp.MultichannelWave(mixture, sample_rate)
    if stft_cfg is not None:
        attach_tf_truth(truth, mixture_wave, stft_cfg)
    return mixture_wave, truth


def ideal_mask(truth, mixture_spec, source_index, eps=MASK_EPS):
    """Ideal ratio mask of one source at channel 1 of the mixture STFT."""
    from .features import Mask  # local import: features depends on dsp only

    cfg = _cfg_from_spec(mixture_spec)
    mags = [np.abs(dsp.stft(img, cfg).data[0]) for img in truth.images]
    noise_mag = np.abs(dsp.stft(truth.noise_image, cfg).data[0])
    denom = np.sum(mags, axis=0) + noise_mag + eps
    return Mask(values=mags[source_index] / denom)


def noise_mask(truth, mixture_spec, eps=MASK_EPS):
    """Companion ratio mask of the noise image (sources + noise sum to 1)."""
    from .features import Mask

    cfg = _cfg_from_spec(mixture_spec)
    mags = [np.abs(dsp.stft(img, cfg).data[0]) for img in truth.images]
    noise_mag = np.abs(dsp.stft(truth.noise_image, cfg).data[0])
    denom = np.sum(mags, axis=0) + noise_mag + eps
    return Mask(values=noise_mag / denom)


def energy_vad(source_image, cfg, threshold_db=DEFAULT_VAD_THRESHOLD_DB):
    """Frame activity labels: channel-1 frame energy within threshold_db of
    the loudest frame."""
    frames = dsp._frame_signal(source_image.samples[0:1], cfg)[0]
    energy = np.sum((frames * cfg.window_array()) ** 2, axis=1)
    peak = energy.max()
    if peak <= 0.0:
        return np.zeros(len(energy), dtype=bool)
    return 10.0 * np.log10(np.maximum(energy, peak * 1e-30)) > (
        10.0 * np.log10(peak) - threshold_db
    )


def attach_tf_truth(truth, mixture, stft_cfg):
    """Fill the STFT-dependent truth fields (ideal masks, VAD)."""
    spec = dsp.stft(mixture, stft_cfg)
    truth.ideal_masks = [ideal_mask(truth, spec, j) for j in range(len(truth.images))]
    truth.vad = np.stack([energy_vad(img, stft_cfg) for img in truth.images])
    return truth


def _cfg_from_spec(spec):
    return dsp.StftConfig(
        sample_rate=spec.sample_rate,
        window_len_ms=spec.window_len * 1000.0 / spec.sample_rate,
        hop_ms=spec.hop * 1000.0 / spec.sample_rate,
        fft_len=spec.fft_len,
        window=spec.window,
    )


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Scene randomization ranges; defaults follow the production recipe
    except where noted as desk-scale conveniences."""

    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
    room_dim_range: tuple = ((3.0, 9.0), (3.0, 9.0), (2.4, 4.0))
    rt60_range: tuple = (0.3, 1.0)
    source_distance_range: tuple = (0.5, 5.5)
    snr_db_range: tuple = (0.0, 10.0)
    sir_db_range: tuple = (0.0, 5.0)
    split_fractions: tuple = (("train", 0.7), ("dev", 0.15), ("test", 0.15))
    mic_spacings_m: tuple = (0.0, 0.040, 0.080, 0.113)
    max_utterance_s: float = None
    anechoic: bool = False
    wall_margin_m: float = 0.3
    noise_dir: str = None

    def geometry(self):
        return ArrayGeometry.linear(self.mic_spacings_m)


def _list_corpus(corpus_dir):
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise ValidationError(f"corpus directory {corpus_dir} does not exist")
    speakers = {}
    for spk_dir in sorted(p for p in corpus_dir.iterdir() if p.is_dir()):
        wavs = sorted(spk_dir.glob("*.wav"))
        if wavs:
            speakers[spk_dir.name] = wavs
    if len(speakers) < 2:
        raise ValidationError(
            f"corpus needs >= 2 speaker subdirectories with wavs, found {len(speakers)}"
        )
    return speakers


def _split_plan(speakers, fractions, count, rng):
    """Disjoint speaker pools per split and a per-scene split assignment."""
    names = list(speakers)
    rng.shuffle(names)
    active = [(s, f) for s, f in fractions if f > 0]
    total = sum(f for _, f in active)
    pools, start = {}, 0
    for i, (split, frac) in enumerate(active):
        n = len(names) - start if i == len(active) - 1 else int(round(len(names) * frac / total))
        pools[split] = names[start : start + n]
        start += n
    for split, pool in pools.items():
        if len(pool) < 2:
            raise ValidationError(
                f"split {split!r} got {len(pool)} speakers; need >= 2 per split "
                "(add speakers or zero out the split fraction)"
            )
    counts = {split: int(np.floor(count * frac / total)) for split, frac in active}
    leftover = count - sum(counts.values())
    for split, _ in active[: leftover or 0]:
        counts[split] += 1
    assignment = [split for split, _ in active for _ in range(counts[split])]
    return pools, assignment


def _draw_scene_spec(cfg, rng):
    dims = tuple(rng.uniform(lo, hi) for lo, hi in cfg.room_dim_range)
    rt60 = anechoic_rt60(dims) if cfg.anechoic else rng.uniform(*cfg.rt60_range)
    room = RoomSpec(dimensions=dims, rt60=rt60)
    margin = cfg.wall_margin_m
    geometry = cfg.geometry()
    radius = np.abs(geometry.positions).max() + 0.05
    center = np.array([
        rng.uniform(margin + radius, dims[0] - margin - radius),
        rng.uniform(margin + radius, dims[1] - margin - radius),
        rng.uniform(1.0, min(2.0, dims[2] - margin)),
    ])
    positions = []
    for _ in range(2):
        for _attempt in range(1000):
            p = np.array([
                rng.uniform(margin, dims[0] - margin),
                rng.uniform(margin, dims[1] - margin),
                rng.uniform(margin, dims[2] - margin),
            ])
            dist = np.linalg.norm(p - center)
            lo, hi = cfg.source_distance_range
            if lo <= dist <= hi:
                positions.append(tuple(p))
                break
        else:
            raise ValidationError(
                "could not place a source in the distance range; "
                "room too small for the configured ranges"
            )
    return room, tuple(center), tuple(positions)


def _build_scene(args):
    """Worker for one scene; all randomness comes from (seed, index)."""
    out_dir, speakers, pool, cfg, seed, i, split, noise_files = args
    out_dir = Path(out_dir)
    rng = np.random.default_rng([seed, i])
    spk_a, spk_b = rng.choice(len(pool), size=2, replace=False)
    names = (pool[spk_a], pool[spk_b])
    utts = [speakers[n][rng.integers(len(speakers[n]))] for n in names]
    dry = []
    for utt in utts:
        w = dsp.read_wav(utt)
        x = w.samples[0]
        if cfg.max_utterance_s is not None:
            x = x[: int(cfg.max_utterance_s * cfg.sample_rate)]
        dry.append(x)

    room, center, positions = _draw_scene_spec(cfg, rng)
    spec = SceneSpec(
        room=room,
        array_center=center,
        source_positions=positions,
        sir_db=float(rng.uniform(*cfg.sir_db_range)),
        snr_db=float(rng.uniform(*cfg.snr_db_range)),
        seed=int(rng.integers(2**31)),
    )
    noise = None
    if noise_files:
        noise = dsp.read_wav(noise_files[rng.integers(len(noise_files))])
    mixture, truth = synthesize_scene(spec, cfg.geometry(), dry, noise=noise,
                                      sample_rate=cfg.sample_rate)

    scene_id = f"scene_{i:05d}"
    scene_dir = out_dir / split / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(scene_dir / "mixture.wav", mixture)
    image_paths = []
    for j, img in enumerate(truth.images):
        p = scene_dir / f"image{j + 1}.wav"
        dsp.write_wav(p, img)
        image_paths.append(str(p.relative_to(out_dir)))
    dsp.write_wav(scene_dir / "noise.wav", truth.noise_image)

    return {
        "id": scene_id,
        "split": split,
        "mixture_path": str((scene_dir / "mixture.wav").relative_to(out_dir)),
        "image_paths": image_paths,
        "noise_path": str((scene_dir / "noise.wav").relative_to(out_dir)),
        "doas_deg": truth.doas_deg,
        "sir_db": spec.sir_db,
        "snr_db": spec.snr_db,
        "room": {"dims": list(room.dimensions), "rt60": room.rt60},
        "seed": spec.seed,
        "array_center": list(center),
        "source_positions": [list(p) for p in positions],
        "speakers": list(names),
    }


def generate_dataset(corpus_dir, out_dir, cfg, count, seed, jobs=1):
    """Write `count` simulated scenes plus a JSON-lines manifest.

    Scene i derives all randomness from (seed, i); rerunning with the same
    inputs reproduces the manifest byte for byte regardless of jobs.
    Speakers are partitioned across splits so train/dev/test never share a
    voice. Return: path of the manifest file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with open(out_dir / "generator_config.json", "w") as f:
        json.dump({**asdict(cfg), "count": count, "seed": seed}, f, indent=2, sort_keys=True)
    if count == 0:
        manifest_path.write_text("")
        return manifest_path

    speakers = _list_corpus(corpus_dir)
    master = np.random.default_rng([seed, 0x5EED])
    pools, assignment = _split_plan(speakers, cfg.split_fractions, count, master)

    noise_files = None
    if cfg.noise_dir is not None:
        noise_files = sorted(Path(cfg.noise_dir).glob("*.wav"))
        if not noise_files:
            raise ValidationError(f"noise dir {cfg.noise_dir} has no wav files")

    tasks = [
        (str(out_dir), speakers, pools[assignment[i]], cfg, seed, i, assignment[i],
         noise_files)
        for i in range(count)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_build_scene, tasks, chunksize=1))
    else:
        records = [_build_scene(t) for t in tasks]

    with open(manifest_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return manifest_path


def load_manifest(manifest_path):
    """Parse a JSON-lines manifest into a list of dicts."""
    records = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_scene(manifest_path, record, stft_cfg=None):
    """Load the audio of one manifest record back as (mixture, SceneTruth)."""
    root = Path(manifest_path).parent
    images = [dsp.read_wav(root / p) for p in record["image_paths"]]
    noise = dsp.read_wav(root / record["noise_path"])
    mixture = dsp.read_wav(root / record["mixture_path"])
    truth = SceneTruth(images=images, noise_image=noise,
                       doas_deg=list(record["doas_deg"]))
    if stft_cfg is not None:
        attach_tf_truth(truth, mixture, stft_cfg)
    return mixture, truth
