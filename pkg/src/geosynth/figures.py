"""Matplotlib figures written next to the delimited reports."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def loss_curve_figure(csv_path, out_path=None):
    """Training-curve figure from a loss CSV (iter, l_c, l_d, l_D*, total, lr)."""
    csv_path = Path(csv_path)
    out_path = Path(out_path) if out_path else csv_path.with_suffix(".png")
    with open(csv_path) as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty loss curve {csv_path}")
    its = np.array([int(r["iter"]) for r in rows])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key, label in (("total", "total"), ("l_c", "color"), ("l_d", "ray depth")):
        vals = np.array([float(r[key]) for r in rows])
        if np.any(vals > 0):
            ax1.semilogy(its, np.maximum(vals, 1e-12), label=label, lw=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    for l in (0, 1, 2):
        vals = np.array([float(r[f"l_D{l}"]) for r in rows])
        if np.any(vals > 0):
            ax2.semilogy(its, np.maximum(vals, 1e-12), label=f"cascade L{l}", lw=1.0)
    ax2.semilogy(its, [float(r["lr"]) for r in rows], label="lr", lw=1.0, ls="--")
    ax2.set_xlabel("iteration")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def eval_report_figure(report, out_path):
    """Per-view PSNR/SSIM bars for an EvalReport."""
    out_path = Path(out_path)
    ids = [str(r.view_id) for r in report.rows]
    psnrs = [r.psnr_db for r in report.rows]
    ssims = [r.ssim for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.bar(ids, psnrs, color="#4878cf")
    ax1.axhline(report.mean_psnr, color="k", lw=0.8, ls="--",
                label=f"mean {report.mean_psnr:.2f} dB")
    ax1.set_xlabel("held-out view")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend(fontsize=8)
    ax2.bar(ids, ssims, color="#6acc65")
    ax2.axhline(report.mean_ssim, color="k", lw=0.8, ls="--",
                label=f"mean {report.mean_ssim:.3f}")
    ax2.set_xlabel("held-out view")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.02)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def depth_figure(depth, out_path, near=None, far=None):
    """Depth-map preview with a colorbar (0 treated as invalid)."""
    out_path = Path(out_path)
    d = np.asarray(depth, dtype=np.float64)
    masked = np.ma.masked_where(d <= 0, d)
    fig, ax = plt.subplots(figsize=(4, 3.2))
    im = ax.imshow(masked, cmap="viridis", vmin=near, vmax=far)
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
