"""Matplotlib figures rendered next to the delimited reports."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_split_figures(report, out_dir):
    """Histogram of per-scene SI-SDR vs the unprocessed mixture and a DOA
    error histogram; written as PNG files."""
    out_dir = Path(out_dir)
    rows = report.rows
    sdr = [r["si_sdr_mean"] for r in rows if r["si_sdr_mean"] is not None]
    mix = [r["mix_si_sdr_mean"] for r in rows if r["mix_si_sdr_mean"] is not None]

    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(min(mix + sdr, default=0) - 1, max(mix + sdr, default=1) + 1, 25)
    ax.hist(mix, bins=bins, alpha=0.6, label="mixture")
    ax.hist(sdr, bins=bins, alpha=0.6, label="separated")
    ax.set_xlabel("SI-SDR (dB)")
    ax.set_ylabel("scenes")
    ax.set_title(f"SI-SDR, split={report.split}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"si_sdr_{report.split}.png", dpi=120)
    plt.close(fig)

    errs = []
    for r in rows:
        for k in (1, 2):
            v = r.get(f"doa_err_spk{k}")
            if v is not None:
                errs.append(v)
    if errs:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(errs, bins=30)
        ax.set_xlabel("absolute DOA error (deg)")
        ax.set_ylabel("speakers")
        ax.set_title(f"DOA error, split={report.split}")
        fig.tight_layout()
        fig.savefig(out_dir / f"doa_error_{report.split}.png", dpi=120)
        plt.close(fig)


def save_mode_matrix_figure(table, out_dir, name="mode_matrix.png"):
    """Bar chart of median SI-SDR per pipeline mode."""
    out_dir = Path(out_dir)
    labels = [row["mode"] for row in table]
    values = [row["si_sdr_median"] if row["si_sdr_median"] is not None else 0.0
              for row in table]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("median SI-SDR (dB)")
    ax.set_title("Separation quality by DOA/mask source")
    fig.tight_layout()
    fig.savefig(out_dir / name, dpi=120)
    plt.close(fig)
