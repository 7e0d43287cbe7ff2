"""Signal-level separation metrics and split-level reporting.

SI-SDR is measured against each speaker's reverberated channel-1 spatial
image (no dereverberation anywhere in the chain); speaker permutation is
resolved per scene by maximizing the mean SI-SDR and then applied to every
per-speaker metric consistently.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ValidationError
from .features import load_features
from .scenes import load_manifest

SI_SDR_CAP_DB = 100.0


def si_sdr(estimate, reference, cap_db=SI_SDR_CAP_DB):
    """Scale-invariant signal-to-distortion ratio in dB.

    The reference is rescaled by the projection coefficient
    a = <est, ref>/||ref||^2 and the ratio ||a ref||^2 / ||a ref - est||^2
    is returned, capped to keep aggregates finite. Lengths are trimmed to
    the shorter signal.
    """
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64).ravel()
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64).ravel()
    n = min(len(est), len(ref))
    if n == 0:
        raise ValidationError("empty signals")
    est, ref = est[:n], ref[:n]
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise ValidationError("zero reference signal: SI-SDR undefined")
    a = float(est @ ref) / ref_energy
    target = a * ref
    noise = target - est
    num = float(target @ target)
    den = float(noise @ noise)
    if den <= 0.0 or num <= 0.0 and den <= 0.0:
        return cap_db
    if num <= 0.0:
        return -cap_db
    return float(np.clip(10.0 * np.log10(num / den), -cap_db, cap_db))


def doa_error(est_deg, true_deg):
    """Absolute azimuth error; the grid is a half circle, no wraparound."""
    for v in (est_deg, true_deg):
        if not 0.0 <= v <= 180.0:
            raise ValidationError(f"DOA {v} outside [0, 180]")
    return abs(float(est_deg) - float(true_deg))


def mask_mse(mask, reference):
    a = np.asarray(getattr(mask, "values", mask))
    b = np.asarray(getattr(reference, "values", reference))
    return float(np.mean((a - b) ** 2))


def duplicate_speaker_diag(m1, m2, ideal_masks):
    """True iff both estimated masks are nearest (in MSE) to the same true
    speaker mask."""
    best1 = int(np.argmin([mask_mse(m1, im) for im in ideal_masks]))
    best2 = int(np.argmin([mask_mse(m2, im) for im in ideal_masks]))
    return best1 == best2


def resolve_permutation(estimates, references):
    """Best speaker assignment: the permutation maximizing mean SI-SDR.

    estimates/references: sequences of waves (or sample arrays). Failed
    estimates may be None; they score as no contribution.
    Return (permutation tuple, per-slot SI-SDR list after permutation).
    """
    n = len(references)
    perms = [(0, 1), (1, 0)] if n == 2 else [tuple(range(n))]
    best, best_perm, best_scores = -np.inf, perms[0], None
    for perm in perms:
        scores = []
        for slot, ref_idx in enumerate(perm):
            est = estimates[slot]
            scores.append(None if est is None else si_sdr(est, references[ref_idx]))
        valid = [s for s in scores if s is not None]
        mean = np.mean(valid) if valid else -np.inf
        if mean > best:
            best, best_perm, best_scores = mean, perm, scores
    return best_perm, best_scores


@dataclass
class MetricReport:
    split: str
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)


def _aggregate(rows, key):
    values = [r[key] for r in rows if r.get(key) is not None]
    if not values:
        return {"median": None, "mean": None}
    return {"median": float(np.median(values)), "mean": float(np.mean(values))}


def evaluate_scene(record, manifest_path, results_dir, stft_cfg=None):
    """Metrics for one scene from its saved separation outputs."""
    stft_cfg = stft_cfg or dsp.StftConfig()
    root = Path(manifest_path).parent
    scene_dir = Path(results_dir) / record["id"]
    refs = [dsp.read_wav(root / p) for p in record["image_paths"]]
    ref_ch1 = [dsp.MultichannelWave(r.samples[:1], r.sample_rate) for r in refs]

    estimates = []
    for k in (1, 2):
        p = scene_dir / f"spk{k}.wav"
        estimates.append(dsp.read_wav(p) if p.exists() else None)
    with open(scene_dir / "diagnostics.json") as f:
        diag = json.load(f)
    masks = load_features(scene_dir / "masks.bin")

    perm, sdr = resolve_permutation(estimates, ref_ch1)
    mixture = dsp.read_wav(root / record["mixture_path"])
    mix_ch1 = dsp.MultichannelWave(mixture.samples[:1], mixture.sample_rate)
    mix_sdr = [si_sdr(mix_ch1, ref_ch1[perm[slot]]) for slot in range(2)]

    from .scenes import SceneTruth, attach_tf_truth

    truth = SceneTruth(images=refs,
                       noise_image=dsp.read_wav(root / record["noise_path"]),
                       doas_deg=list(record["doas_deg"]))
    attach_tf_truth(truth, mixture, stft_cfg)
    ideal = [m.values for m in truth.ideal_masks]

    est_doas = [s.get("doa_deg") for s in diag.get("speakers", [{}, {}])]
    row = {"id": record["id"]}
    for slot in range(2):
        ref_idx = perm[slot]
        row[f"si_sdr_spk{slot + 1}"] = sdr[slot]
        row[f"mix_si_sdr_spk{slot + 1}"] = mix_sdr[slot]
        if est_doas[slot] is not None:
            row[f"doa_err_spk{slot + 1}"] = doa_error(
                est_doas[slot], record["doas_deg"][ref_idx]
            )
        else:
            row[f"doa_err_spk{slot + 1}"] = None
        row[f"mask_mse_spk{slot + 1}"] = float(
            np.mean((masks.planes[slot] - ideal[ref_idx]) ** 2)
        )
    row["si_sdr_mean"] = float(np.mean([s for s in sdr if s is not None])) if any(
        s is not None for s in sdr
    ) else None
    row["mix_si_sdr_mean"] = float(np.mean(mix_sdr))
    row["duplicate_speaker"] = bool(
        duplicate_speaker_diag(masks.planes[0], masks.planes[1], ideal)
    )
    row["eigen_fallbacks"] = diag.get("eigen_fallbacks", 0)
    row["clamped_bins"] = diag.get("clamped_bins", 0)
    return row


def evaluate_split(results_dir, manifest_path, split, stft_cfg=None):
    """Per-scene rows plus aggregates for every scene of a split.

    Scenes without saved outputs are listed under missing and excluded
    from the aggregates.
    """
    records = [r for r in load_manifest(manifest_path) if r["split"] == split]
    report = MetricReport(split=split)
    for rec in records:
        scene_dir = Path(results_dir) / rec["id"]
        if not (scene_dir / "diagnostics.json").exists():
            report.missing.append(rec["id"])
            continue
        report.rows.append(evaluate_scene(rec, manifest_path, results_dir, stft_cfg))
    rows = report.rows
    report.aggregates = {
        "scenes": len(rows),
        "si_sdr": _aggregate(rows, "si_sdr_mean"),
        "mix_si_sdr": _aggregate(rows, "mix_si_sdr_mean"),
        "doa_err_spk1": _aggregate(rows, "doa_err_spk1"),
        "doa_err_spk2": _aggregate(rows, "doa_err_spk2"),
        "mask_mse_spk1": _aggregate(rows, "mask_mse_spk1"),
        "mask_mse_spk2": _aggregate(rows, "mask_mse_spk2"),
        "duplicate_speaker_rate": (
            float(np.mean([r["duplicate_speaker"] for r in rows])) if rows else None
        ),
    }
    return report


def write_report(report, out_dir, emit_plot_data=False, figures=True):
    """CSV of per-scene rows, JSON of aggregates, optional figures/data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(report.rows, key=lambda r: r["id"])
    csv_path = out_dir / f"report_{report.split}.csv"
    if rows:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    else:
        csv_path.write_text("")
    payload = {"split": report.split, "aggregates": report.aggregates,
               "missing": sorted(report.missing)}
    with open(out_dir / f"report_{report.split}.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    if emit_plot_data:
        arrays = {
            "si_sdr_mean": [r["si_sdr_mean"] for r in rows],
            "mix_si_sdr_mean": [r["mix_si_sdr_mean"] for r in rows],
            "doa_err_spk1": [r["doa_err_spk1"] for r in rows],
            "doa_err_spk2": [r["doa_err_spk2"] for r in rows],
        }
        with open(out_dir / f"plot_data_{report.split}.json", "w") as f:
            json.dump(arrays, f, indent=2, sort_keys=True)
    if figures and rows:
        from .report import save_split_figures

        save_split_figures(report, out_dir)
    return csv_path
