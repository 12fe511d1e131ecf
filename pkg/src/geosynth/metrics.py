"""Image quality metrics and the held-out-view evaluation protocol."""

import csv
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import pipeline
from .scenes import select_source_views


class MetricsError(Exception):
    pass


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0,1]; inf on exact match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_kernel(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    g = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Single-scale SSIM (Gaussian window, valid-convolution cropping),
    computed per channel and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise MetricsError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    kernel = torch.as_tensor(_gaussian_kernel(window, sigma)).reshape(1, 1, window, window)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    vals = []
    for c in range(a.shape[2]):
        x = torch.as_tensor(a[..., c]).reshape(1, 1, *a.shape[:2])
        y = torch.as_tensor(b[..., c]).reshape(1, 1, *b.shape[:2])
        mu_x = F.conv2d(x, kernel)
        mu_y = F.conv2d(y, kernel)
        xx = F.conv2d(x * x, kernel) - mu_x ** 2
        yy = F.conv2d(y * y, kernel) - mu_y ** 2
        xy = F.conv2d(x * y, kernel) - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2))
        vals.append(float(s.mean()))
    return float(np.mean(vals))


def holdout_split(n_views, seed):
    """Deterministic held-out set: every 8th index of a seeded shuffle."""
    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(n_views, generator=gen).tolist()
    held = sorted(order[i] for i in range(0, n_views, 8))
    train = sorted(set(range(n_views)) - set(held))
    return train, held


@dataclass
class EvalRow:
    view_id: int
    psnr_db: float
    ssim: float
    render_ms: float


@dataclass
class EvalReport:
    rows: list
    mean_psnr: float
    mean_ssim: float
    config_fingerprint: str
    held_out: list

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["view_id", "psnr_db", "ssim", "render_ms"])
            for r in self.rows:
                writer.writerow([r.view_id, f"{r.psnr_db:.6f}", f"{r.ssim:.6f}",
                                 f"{r.render_ms:.3f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}", ""])


def evaluate_holdout(model, records, seed, v_eval=9, n_coarse=96, n_fine=32,
                     fingerprint="", guidance_fn=None, use_masks=True, chunk=1024):
    """Render every held-out view from the remaining pool and score it."""
    ids = sorted(r.view_id for r in records)
    by_id = {r.view_id: r for r in records}
    train_idx, held_idx = holdout_split(len(ids), seed)
    held_ids = [ids[i] for i in held_idx]
    pool = [by_id[ids[i]] for i in train_idx]
    rows = []
    depths = {}
    for vid in held_ids:
        target = by_id[vid]
        v = min(v_eval, len(pool))
        sources = select_source_views(target.camera, pool, v)
        guidance = guidance_fn(sources) if guidance_fn is not None else None
        t0 = time.perf_counter()
        image, depth = pipeline.render_image(model, sources, target.camera,
                                             n_coarse=n_coarse, n_fine=n_fine, chunk=chunk,
                                             guidance=guidance, use_masks=use_masks)
        ms = (time.perf_counter() - t0) * 1e3
        rows.append(EvalRow(vid, psnr(image, target.image), ssim(image, target.image), ms))
        depths[vid] = (image, depth)
    finite = [r.psnr_db for r in rows if math.isfinite(r.psnr_db)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean([r.ssim for r in rows]))
    return EvalReport(rows, mean_psnr, mean_ssim, fingerprint, held_ids), depths
