"""The iterative separation loop: localize, mask, remove, repeat, extract.

Per mixture: estimate a first DOA and first mask from beamformed features,
multiply all features by the remainder (1 - M1), estimate the second DOA
and mask from the residual, map the second mask back to the original
signal domain (M2 = M2_residual * (1 - M1)), and extract each speaker with
a rank-1 MWF driven by its mask. M3 = 1 - M1 - M2 accounts for the noise.

DOA and mask sources are pluggable: trained networks, the classical
GCC-PHAT estimator, or scene ground truth for upper-bound runs.
"""

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp
from .beamforming import (
    extract_source,
    final_frame_weights,
    r1_mwf,
    update_covariances,
)
from .errors import ConfigError, NoEstimateError, ValidationError
from .features import (
    FeatureStack,
    Mask,
    beamformed_features,
    csipd,
    magnitude,
    mask_features,
)
from .localization import DoaGrid, DoaPosterior, gcc_phat, pool_posterior
from .models import doa_net_forward, load_net, mask_net_forward
from .scenes import ideal_mask as oracle_ideal_mask

DOA_SOURCES = ("neural", "gcc-phat", "oracle")
MASK_SOURCES = ("neural", "oracle")


@dataclass
class PipelineConfig:
    geometry: object
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    alpha: float = 0.95
    mu: float = 1.0
    doa_source: str = "neural"
    mask_source: str = "neural"
    checkpoint_dir: str = None
    beamforming_mode: str = "batch"  # batch: one filter per utterance; streaming: per frame

    def __post_init__(self):
        if self.doa_source not in DOA_SOURCES:
            raise ConfigError(f"doa_source must be one of {DOA_SOURCES}")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")
        if self.beamforming_mode not in ("batch", "streaming"):
            raise ConfigError("beamforming_mode must be 'batch' or 'streaming'")

    def required_checkpoints(self):
        needed = []
        if self.doa_source == "neural":
            needed += ["doa1", "doa2"]
        if self.mask_source == "neural":
            needed += ["mask1", "mask2"]
            if self.doa_source != "neural":
                # mask nets consume a posterior; synthesize it if no DOA nets
                pass
        return needed


@dataclass
class SpeakerEstimate:
    doa_deg: float = None
    posterior: DoaPosterior = None
    mask: Mask = None
    wave: dsp.MultichannelWave = None
    error: str = None


@dataclass
class SeparationResult:
    speakers: list
    noise_mask: Mask
    diagnostics: dict


class Separator:
    """Loads checkpoints once and separates mixtures."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.nets = {}
        for name in cfg.required_checkpoints():
            if cfg.checkpoint_dir is None:
                raise ConfigError(f"{name} checkpoint needed but no checkpoint_dir set")
            path = Path(cfg.checkpoint_dir) / f"{name}.ckpt"
            if not path.exists():
                raise ConfigError(f"missing checkpoint {path}")
            self.nets[name], _ = load_net(path)

    def _one_hot_posterior(self, doa_deg, n_frames, grid):
        probs = np.zeros((n_frames, grid.class_count))
        probs[:, grid.class_of(doa_deg)] = 1.0
        return DoaPosterior(probs)

    def separate(self, mixture, truth=None):
        """Run the full loop on one mixture.

        truth (SceneTruth with ideal masks attached or attachable) is
        required for oracle DOA/mask sources. A localization failure on one
        speaker still emits the other; the failed slot carries the error.
        """
        cfg = self.cfg
        if mixture.channel_count != cfg.geometry.mic_count:
            raise ValidationError(
                f"mixture has {mixture.channel_count} channels, array wants "
                f"{cfg.geometry.mic_count}"
            )
        if (cfg.doa_source == "oracle" or cfg.mask_source == "oracle") and truth is None:
            raise ConfigError("oracle sources need scene truth")
        grid = DoaGrid()
        spec = dsp.stft(mixture, cfg.stft)
        phase = csipd(spec)
        mag = magnitude(spec)
        diagnostics = {"eigen_fallbacks": 0, "clamped_bins": 0, "failures": []}
        spk1 = SpeakerEstimate()
        spk2 = SpeakerEstimate()

        # step 1: first DOA
        if cfg.doa_source == "neural":
            spk1.posterior = doa_net_forward(self.nets["doa1"], phase, mag)
            spk1.doa_deg = pool_posterior(spk1.posterior, grid)
        elif cfg.doa_source == "gcc-phat":
            spk1.doa_deg = gcc_phat(spec, cfg.geometry, grid)
        else:
            spk1.doa_deg = float(truth.doas_deg[0])
        if spk1.posterior is None:
            spk1.posterior = self._one_hot_posterior(spk1.doa_deg, spec.frame_count, grid)

        # step 2: first mask from beamformed features
        bf1 = beamformed_features(spec, spk1.doa_deg, cfg.geometry)
        if cfg.mask_source == "neural":
            spk1.mask = mask_net_forward(self.nets["mask1"], bf1, spk1.posterior)
        else:
            idx = _nearest(truth.doas_deg, spk1.doa_deg)
            spk1.mask = _truth_mask(truth, spec, idx)

        # step 3: remove the first source from the features
        remainder = spk1.mask.remainder()
        phase_m = mask_features(phase, remainder)
        mag_m = mask_features(mag, remainder)

        # step 4: second DOA on the residual
        try:
            if cfg.doa_source == "neural":
                spk2.posterior = doa_net_forward(self.nets["doa2"], phase_m, mag_m)
                spk2.doa_deg = pool_posterior(spk2.posterior, grid)
            elif cfg.doa_source == "gcc-phat":
                masked_spec = dsp.apply_mask(spec, remainder)
                spk2.doa_deg = gcc_phat(masked_spec, cfg.geometry, grid)
            else:
                spk2.doa_deg = float(truth.doas_deg[1])
        except NoEstimateError as exc:
            spk2.error = str(exc)
            diagnostics["failures"].append({"speaker": 2, "error": str(exc)})
        if spk2.error is None:
            if spk2.posterior is None:
                spk2.posterior = self._one_hot_posterior(spk2.doa_deg, spec.frame_count, grid)

            # step 5: second mask in the residual domain, mapped back
            bf2 = mask_features(
                beamformed_features(spec, spk2.doa_deg, cfg.geometry), remainder
            )
            if cfg.mask_source == "neural":
                m2_residual = mask_net_forward(self.nets["mask2"], bf2, spk2.posterior)
            else:
                idx2 = _nearest(truth.doas_deg, spk2.doa_deg)
                ideal2 = _truth_mask(truth, spec, idx2).values
                with np.errstate(all="ignore"):
                    ratio = np.where(remainder.values > 1e-9,
                                     ideal2 / np.maximum(remainder.values, 1e-9), 0.0)
                m2_residual = Mask(np.clip(ratio, 0.0, 1.0))
            spk2.mask = Mask(m2_residual.values * remainder.values)
        else:
            spk2.mask = Mask(np.zeros_like(spk1.mask.values))

        m3 = 1.0 - spk1.mask.values - spk2.mask.values
        diagnostics["clamped_bins"] = int(np.sum((m3 < 0.0) | (m3 > 1.0)))
        noise_mask = Mask(np.clip(m3, 0.0, 1.0))

        # extraction: covariance recursion + rank-1 MWF per speaker
        for spk in (spk1, spk2):
            if spk.error is not None:
                continue
            spk.wave = self._extract(spec, spk.mask, diagnostics)

        return SeparationResult(speakers=[spk1, spk2], noise_mask=noise_mask,
                                diagnostics=diagnostics)

    def _extract(self, spec, mask, diagnostics):
        cfg = self.cfg
        sig_s, sig_n = update_covariances(spec, mask, cfg.alpha)
        weights = r1_mwf(sig_s, sig_n, mu=cfg.mu)
        if cfg.beamforming_mode == "batch":
            weights = final_frame_weights(weights)
        diagnostics["eigen_fallbacks"] += int(weights.fallbacks.sum())
        est = extract_source(spec, weights)
        return dsp.istft(est, cfg.stft)


def _nearest(doas, doa):
    return int(np.argmin(np.abs(np.asarray(doas) - doa)))


def _truth_mask(truth, spec, idx):
    if truth.ideal_masks is not None:
        return truth.ideal_masks[idx]
    return oracle_ideal_mask(truth, spec, idx)


def save_result(result, scene_dir, stft_cfg=None):
    """Write spk1/spk2 wavs, the mask planes and diagnostics for one scene."""
    from .features import dump_features

    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    diag = dict(result.diagnostics)
    diag["speakers"] = []
    for k, spk in enumerate(result.speakers, start=1):
        if spk.wave is not None:
            dsp.write_wav(scene_dir / f"spk{k}.wav", spk.wave)
        diag["speakers"].append({
            "doa_deg": spk.doa_deg,
            "error": spk.error,
        })
    planes = np.stack([
        result.speakers[0].mask.values,
        result.speakers[1].mask.values,
        result.noise_mask.values,
    ])
    dump_features(FeatureStack(planes=planes, labels=["mask1", "mask2", "mask3"]),
                  scene_dir / "masks.bin")
    with open(scene_dir / "diagnostics.json", "w") as f:
        json.dump(diag, f, indent=2, sort_keys=True)


def separate_manifest(manifest_path, cfg, out_dir, split="test", jobs=1, log=None):
    """Separate every scene of a split, saving per-scene outputs."""
    from .scenes import load_manifest, load_scene

    records = [r for r in load_manifest(manifest_path) if r["split"] == split]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    separator = Separator(cfg)
    needs_truth = cfg.doa_source == "oracle" or cfg.mask_source == "oracle"
    tasks = [(manifest_path, rec, cfg, str(out_dir), needs_truth) for rec in records]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_separate_worker, tasks, chunksize=1))
    else:
        for t in tasks:
            _separate_worker(t, separator=separator)
            if log:
                log(f"separated {t[1]['id']}")
    return out_dir


def _separate_worker(args, separator=None):
    from .scenes import load_scene

    manifest_path, rec, cfg, out_dir, needs_truth = args
    if separator is None:
        separator = Separator(cfg)
    mixture, truth = load_scene(manifest_path, rec,
                                cfg.stft if needs_truth else None)
    result = separator.separate(mixture, truth=truth if needs_truth else None)
    save_result(result, Path(out_dir) / rec["id"])
    return rec["id"]


def mode_matrix_run(manifest_path, modes, base_cfg, out_root, split="test",
                    jobs=1, log=None):
    """Run several DOA/mask source combinations over one split.

    modes: sequence of (doa_source, mask_source) pairs. Produces per-mode
    output trees, per-mode reports, and a summary table (CSV + JSON + bar
    figure) including the unprocessed-mixture baseline. Returns the table
    as a list of dicts; an empty split gives an empty table.
    """
    from .evaluation import evaluate_split, write_report
    from .scenes import load_manifest

    records = [r for r in load_manifest(manifest_path) if r["split"] == split]
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    if not records:
        _write_mode_table([], out_root)
        return []

    table = []
    mix_median = None
    for doa_src, mask_src in modes:
        mode = f"{doa_src}+{mask_src}"
        cfg = replace(base_cfg, doa_source=doa_src, mask_source=mask_src)
        mode_dir = out_root / mode.replace("+", "_")
        if log:
            log(f"mode {mode}: separating {len(records)} scenes")
        separate_manifest(manifest_path, cfg, mode_dir, split=split, jobs=jobs)
        report = evaluate_split(mode_dir, manifest_path, split, cfg.stft)
        write_report(report, mode_dir)
        agg = report.aggregates
        if mix_median is None:
            mix_median = agg["mix_si_sdr"]["median"]
        table.append({
            "mode": mode,
            "si_sdr_median": agg["si_sdr"]["median"],
            "si_sdr_mean": agg["si_sdr"]["mean"],
            "doa_err_spk1_median": agg["doa_err_spk1"]["median"],
            "doa_err_spk2_median": agg["doa_err_spk2"]["median"],
            "mask_mse_spk1_median": agg["mask_mse_spk1"]["median"],
            "mask_mse_spk2_median": agg["mask_mse_spk2"]["median"],
            "duplicate_speaker_rate": agg["duplicate_speaker_rate"],
            "scenes": agg["scenes"],
        })
    table.append({
        "mode": "mixture", "si_sdr_median": mix_median, "si_sdr_mean": None,
        "doa_err_spk1_median": None, "doa_err_spk2_median": None,
        "mask_mse_spk1_median": None, "mask_mse_spk2_median": None,
        "duplicate_speaker_rate": None, "scenes": len(records),
    })
    _write_mode_table(table, out_root)
    return table


def _write_mode_table(table, out_root):
    with open(out_root / "mode_matrix.json", "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
    fields = ["mode", "si_sdr_median", "si_sdr_mean", "doa_err_spk1_median",
              "doa_err_spk2_median", "mask_mse_spk1_median",
              "mask_mse_spk2_median", "duplicate_speaker_rate", "scenes"]
    with open(out_root / "mode_matrix.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(table)
    if table:
        from .report import save_mode_matrix_figure

        save_mode_matrix_figure(table, out_root)
