"""Losses, optimizer, schedule, and the training loop.

One iteration samples a scene and a target view, reasons geometry for its V
source views, renders a batch of random target rays, and applies the combined
color / ray-depth / cascade-depth objective. Renderer chunks backpropagate
into detached geometry outputs first; the geometry graph is traversed once
with the accumulated gradients.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import pipeline, sampling
from .scenes import downsample_depth_nearest_valid, load_dataset, scale_view, select_source_views

log = logging.getLogger(__name__)

SCALE_FACTORS = (1.0, 0.75, 0.5)


class TrainError(Exception):
    pass


def smooth_l1(x):
    """Elementwise smooth L1 with beta = 1: quadratic inside the unit interval."""
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def loss_color(rendered, gt):
    """Mean over rays of the squared color error norm."""
    if rendered.shape != gt.shape:
        raise TrainError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(gt.shape)}")
    return ((rendered - gt) ** 2).sum(dim=-1).mean()


def loss_ray_depth(d_hat, d_gt):
    """Mean smooth-L1 over rays with valid ground-truth depth; 0 when none."""
    valid = d_gt > 0
    n = int(valid.sum())
    if n == 0:
        return torch.zeros((), dtype=d_hat.dtype), 0
    return smooth_l1(d_hat[valid] - d_gt[valid]).mean(), n


def loss_cascade_supervised(geom, gt_depths):
    """Per-level smooth-L1 between estimated and resized GT depth maps.

    gt_depths: (V, H, W) numpy array, 0 marking invalid pixels. Averages over
    valid pixels per view, over views, scaled by 2^-level.
    """
    out = {}
    V = gt_depths.shape[0]
    for level in (0, 1, 2):
        acc = None
        for v in range(V):
            gt = downsample_depth_nearest_valid(gt_depths[v], level)
            gt_t = torch.as_tensor(gt, dtype=geom.depth[level].dtype)
            valid = gt_t > 0
            if valid.any():
                term = smooth_l1(geom.depth[level][v][valid] - gt_t[valid]).mean()
            else:
                term = torch.zeros((), dtype=geom.depth[level].dtype)
            acc = term if acc is None else acc + term
        out[level] = (2.0 ** (-level)) / V * acc
    return out


def texture_variance_map(image):
    """Mean-over-channels population variance in the 5x5 neighborhood of each
    pixel (windows clipped at the border)."""
    img = np.asarray(image, dtype=np.float64)
    H, W, C = img.shape
    pad = 2
    # integral images over value and value^2
    ones = np.ones((H, W))
    s1 = np.zeros((H + 1, W + 1))
    cnt = np.zeros((H + 1, W + 1))
    out = np.zeros((H, W))
    np.cumsum(np.cumsum(ones, 0), 1, out=cnt[1:, 1:])
    for c in range(C):
        v = img[..., c]
        s2 = np.zeros((H + 1, W + 1))
        np.cumsum(np.cumsum(v, 0), 1, out=s1[1:, 1:])
        np.cumsum(np.cumsum(v * v, 0), 1, out=s2[1:, 1:])
        y0 = np.clip(np.arange(H) - pad, 0, H)
        y1 = np.clip(np.arange(H) + pad + 1, 0, H)
        x0 = np.clip(np.arange(W) - pad, 0, W)
        x1 = np.clip(np.arange(W) + pad + 1, 0, W)

        def box(m):
            return (m[y1][:, x1] - m[y1][:, x0] - m[y0][:, x1] + m[y0][:, x0])

        n = box(cnt)
        mean = box(s1) / n
        out += box(s2) / n - mean ** 2
    return (out / C).astype(np.float64)


def loss_cascade_selfsup(geom, rays, d_hat, c_gt, records, eps_c=0.1, eps_t=1e-4,
                         var_maps=None):
    """Self-supervised cascade loss: rendered ray depths as pseudo ground truth.

    For each ray and source view, the ray is re-expressed in that view; the
    view's estimated depth at the hit pixel is pulled toward the transformed
    pseudo depth when the warped color matches the ray's ground-truth color
    (within eps_c per channel) and the neighborhood is textured (variance
    above eps_t). Invalid projections drop out of the mean entirely.
    """
    dtype = geom.depth[0].dtype
    d_hat = d_hat.detach()
    V = len(records)
    R = len(rays)
    pts = rays.points_at(d_hat.reshape(-1, 1))[:, 0]                  # (R, 3)
    cams = [r.camera for r in records]
    u, v, z_src, inside = sampling.project_points(pts.unsqueeze(1), cams, dtype=dtype)
    u, v, z_src = u[:, :, 0], v[:, :, 0], z_src[:, :, 0]              # (V, R)
    inside = inside[:, :, 0]
    if var_maps is None:
        var_maps = [texture_variance_map(r.image) for r in records]
    losses = {0: [], 1: [], 2: []}
    n_gated = 0
    n_valid = 0
    for i in range(V):
        ok = inside[i]
        if not bool(ok.any()):
            continue
        uu, vv = u[i][ok], v[i][ok]
        n_valid += int(ok.sum())
        img = torch.as_tensor(records[i].image, dtype=dtype).permute(2, 0, 1)
        from .cameras import bilinear_sample
        warped = bilinear_sample(img, uu, vv)                         # (3, n)
        diff = (warped.T - c_gt[ok]).abs().max(dim=1).values
        iy = vv.round().long().clamp(0, records[i].camera.height - 1)
        ix = uu.round().long().clamp(0, records[i].camera.width - 1)
        var5 = torch.as_tensor(var_maps[i], dtype=dtype)[iy, ix]
        gate = (diff < eps_c) & (var5 > eps_t)
        n_gated += int(gate.sum())
        target = z_src[i][ok].detach()
        for level in (0, 1, 2):
            scale = 1.0 / (2 ** level)
            ul = (uu + 0.5) * scale - 0.5
            vl = (vv + 0.5) * scale - 0.5
            est = bilinear_sample(geom.depth[level][i].unsqueeze(0), ul, vl)[0]
            term = smooth_l1(est - target) * gate.to(dtype)
            losses[level].append(term)
    out = {}
    for level in (0, 1, 2):
        if n_valid == 0:
            out[level] = torch.zeros((), dtype=dtype)
        else:
            out[level] = (2.0 ** (-level)) * torch.cat(losses[level]).sum() / n_valid
    return out, n_gated


@dataclass
class LossReport:
    l_c: float
    l_d: float
    l_D: tuple
    lam: float
    total: float
    n_rays: int
    n_depth_rays: int
    n_selfsup_valid: int

    def check_identity(self):
        expect = self.l_c + 0.1 * self.l_d + self.lam * sum(self.l_D)
        if abs(self.total - expect) > 1e-9:
            raise TrainError(f"loss identity violated: {self.total} vs {expect}")


def total_loss(l_c, l_d, l_D, lam, finetune=False):
    """Aggregate objective; fine-tuning uses the color term alone."""
    if lam not in (1.0, 0.1):
        raise TrainError(f"lambda must be 1.0 or 0.1, got {lam}")
    if finetune:
        return l_c
    return l_c + 0.1 * l_d + lam * (l_D[0] + l_D[1] + l_D[2])


def cosine_lr(step, total_steps, base_lr):
    """Cosine decay from base_lr to 0 without restarts."""
    if not 0 <= step <= total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps)))


class AdamOptimizer:
    """Standard bias-corrected Adam over named parameters.

    Keeps first/second moment accumulators and a step count per parameter;
    a non-finite gradient skips the whole update and bumps ``skipped``.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}
        self.step_count = 0
        self.skipped = 0

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr):
        with torch.no_grad():
            for n, p in self.params:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    self.skipped += 1
                    log.warning("non-finite gradient in %s; skipping step", n)
                    return False
            self.step_count += 1
            t = self.step_count
            bc1 = 1.0 - self.beta1 ** t
            bc2 = 1.0 - self.beta2 ** t
            for n, p in self.params:
                g = p.grad
                if g is None:
                    continue
                m = self.m[n]
                v = self.v[n]
                m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)
        return True


@dataclass
class TrainConfig:
    iterations: int = 3000
    rays_per_batch: int = 512
    lr: float = 5e-4
    mode: str = "generalizable"        # generalizable | finetune
    v_train: int = 6
    v_eval: int = 9
    n_coarse: int = 96
    n_fine: int = 32
    nearby_k_min: int = 3
    nearby_k_max: int = 5
    lambda_gt: float = 1.0
    lambda_pseudo: float = 0.1
    eps_c: float = 0.1
    eps_t: float = 1e-4
    seed: int = 0
    rgbd: bool = False
    rgbd_drop: float = 0.3
    scale_aug: bool = True
    use_occlusion_masks: bool = True
    use_selfsup: bool = True
    planes: tuple = (8, 32, 48)
    checkpoint_every: int = 1000
    chunk_rays: int = 128
    log_every: int = 25

    def __post_init__(self):
        if self.mode not in ("generalizable", "finetune"):
            raise TrainError(f"unknown mode {self.mode!r}")
        if self.mode == "finetune":
            self.scale_aug = False

    def finetune(self):
        return self.mode == "finetune"


def corrupt_guidance(depth, cam, planes_l2, drop, rng):
    """Quarter-resolution sensor-style depth: nearest-valid pooled GT, quantized
    to the coarsest plane grid, with a dropped (missing) pixel fraction."""
    low = downsample_depth_nearest_valid(depth, 2)
    near, far = planes_l2[0], planes_l2[-1]
    step = (far - near) / (len(planes_l2) - 1)
    q = np.where(low > 0, near + np.round((np.clip(low, near, far) - near) / step) * step, 0.0)
    q[rng.random(q.shape) < drop] = 0.0
    return q.astype(np.float32)


class SceneData:
    """A loaded dataset directory plus cached per-view derived data."""

    def __init__(self, path, exclude_ids=()):
        self.path = Path(path)
        all_records = load_dataset(self.path)
        self.records = [r for r in all_records if r.view_id not in set(exclude_ids)]
        if not self.records:
            raise TrainError(f"no training views left in {path}")
        self.has_gt_depth = all(r.has_gt_depth for r in self.records)
        self._var_maps = {}

    def var_maps(self, records):
        key = tuple((r.view_id, r.camera.width) for r in records)
        if key not in self._var_maps:
            self._var_maps[key] = [texture_variance_map(r.image) for r in records]
        return self._var_maps[key]


class Trainer:
    def __init__(self, model, scenes, config, out_dir, run_name="train"):
        self.model = model
        self.scenes = scenes if isinstance(scenes, list) else [scenes]
        self.cfg = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.run_name = run_name
        self.opt = AdamOptimizer(model.named_parameters())
        self.gen = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.curve = []

    def _pick_scene_and_views(self):
        cfg = self.cfg
        scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
        records = scene.records
        target_idx = int(self.rng.integers(len(records)))
        target = records[target_idx]
        pool = [r for i, r in enumerate(records) if i != target_idx]
        v = min(cfg.v_train, len(pool))
        sources = select_source_views(target.camera, pool, v)
        if cfg.scale_aug:
            factor = SCALE_FACTORS[int(self.rng.integers(len(SCALE_FACTORS)))]
            target = scale_view(target, factor)
            sources = [scale_view(r, factor) for r in sources]
        return scene, target, sources

    def _guidance(self, scene, sources):
        if not self.cfg.rgbd:
            return None
        near = min(r.camera.near for r in sources)
        far = max(r.camera.far for r in sources)
        planes = np.linspace(near, far, self.cfg.planes[2])
        rng = np.random.default_rng(self.cfg.seed + 7)
        gs = [corrupt_guidance(r.depth, r.camera, planes, self.cfg.rgbd_drop, rng)
              for r in sources]
        return torch.stack([torch.as_tensor(g) for g in gs])

    def _train_iteration(self, it):
        cfg = self.cfg
        model = self.model
        dtype = next(model.parameters()).dtype
        scene, target, sources = self._pick_scene_and_views()
        cams = [r.camera for r in sources]
        k = int(self.rng.integers(cfg.nearby_k_min, cfg.nearby_k_max + 1))
        k = min(k, len(sources) - 1)
        guidance = self._guidance(scene, sources)
        geom = pipeline.run_geometry(model, sources, guidance=guidance, nearby_k=k,
                                     allow_small_v=len(sources) < 4)

        # detach geometry outputs; renderer chunks accumulate gradients into leaves
        geom_tensors = [geom.pyramids[0], geom.feat[0], geom.feat[1], geom.feat[2]]
        for level in (0, 1):
            for hyp in geom.hyp[level]:
                if hyp.depths.requires_grad:
                    geom_tensors.append(hyp.depths)
        leaves = [t.detach().requires_grad_(True) for t in geom_tensors]
        geom.pyramids[0], geom.feat[0], geom.feat[1], geom.feat[2] = leaves[:4]
        i_leaf = 4
        for level in (0, 1):
            for hyp in geom.hyp[level]:
                if hyp.depths.requires_grad:
                    hyp.depths = leaves[i_leaf]
                    i_leaf += 1

        H, W = target.camera.height, target.camera.width
        n_rays = cfg.rays_per_batch
        sel = torch.randperm(H * W, generator=self.gen)[:n_rays].numpy()
        px = np.stack([sel % W, sel // W], axis=-1).astype(np.float64)
        gt_color = torch.as_tensor(target.image.reshape(-1, 3)[sel], dtype=dtype)
        if target.depth is not None:
            gt_depth = torch.as_tensor(target.depth.reshape(-1)[sel], dtype=dtype)
        else:
            gt_depth = torch.zeros(n_rays, dtype=dtype)
        n_depth_rays = int((gt_depth > 0).sum())

        images_t = pipeline.source_images_tensor(sources, dtype)
        l_c_sum = 0.0
        l_d_sum = 0.0
        d_hat_all = []
        rays_all = []
        for lo in range(0, n_rays, cfg.chunk_rays):
            hi = min(lo + cfg.chunk_rays, n_rays)
            rays, z = pipeline.sample_rays(target.camera, px[lo:hi], geom, cams,
                                           cfg.n_coarse, cfg.n_fine, train=True,
                                           generator=self.gen, dtype=dtype)
            out, _ = pipeline.render_rays(model, rays, z, images_t, geom, cams,
                                          target.camera, use_masks=cfg.use_occlusion_masks)
            csum = ((out.c_hat - gt_color[lo:hi]) ** 2).sum(dim=-1).sum()
            chunk_loss = csum / n_rays
            dsel = gt_depth[lo:hi] > 0
            if n_depth_rays and bool(dsel.any()) and not cfg.finetune():
                dsum = smooth_l1(out.d_hat[dsel] - gt_depth[lo:hi][dsel]).sum()
                chunk_loss = chunk_loss + 0.1 * dsum / n_depth_rays
                l_d_sum += float(dsum.detach())
            chunk_loss.backward()
            l_c_sum += float(csum.detach())
            d_hat_all.append(out.d_hat.detach())
            rays_all.append(rays)
        l_c = l_c_sum / n_rays
        l_d = l_d_sum / n_depth_rays if n_depth_rays else 0.0

        # cascade depth losses live on the geometry graph
        if cfg.finetune():
            lam = 1.0 if scene.has_gt_depth else 0.1
            l_D = (torch.zeros(()), torch.zeros(()), torch.zeros(()))
            n_selfsup = 0
        elif scene.has_gt_depth:
            lam = cfg.lambda_gt
            gt_stack = np.stack([r.depth for r in sources])
            l_D_map = loss_cascade_supervised(geom, gt_stack)
            l_D = (l_D_map[0], l_D_map[1], l_D_map[2])
            n_selfsup = 0
        else:
            lam = cfg.lambda_pseudo
            if cfg.use_selfsup:
                d_hat = torch.cat(d_hat_all)
                rays = sampling.RayBatch(
                    torch.cat([r.origins for r in rays_all]),
                    torch.cat([r.dirs_z for r in rays_all]),
                    torch.cat([r.pixels for r in rays_all]),
                    rays_all[0].near, rays_all[0].far)
                l_D_map, n_selfsup = loss_cascade_selfsup(
                    geom, rays, d_hat, gt_color, sources, cfg.eps_c, cfg.eps_t,
                    var_maps=scene.var_maps(sources) if not cfg.scale_aug else None)
                l_D = (l_D_map[0], l_D_map[1], l_D_map[2])
            else:
                l_D = (torch.zeros(()), torch.zeros(()), torch.zeros(()))
                n_selfsup = 0

        geo_loss = lam * (l_D[0] + l_D[1] + l_D[2]) if not cfg.finetune() else None
        grads = [l.grad if l.grad is not None else torch.zeros_like(l) for l in leaves]
        if geo_loss is not None and geo_loss.requires_grad:
            torch.autograd.backward(geom_tensors + [geo_loss],
                                    grads + [torch.ones_like(geo_loss)])
        else:
            torch.autograd.backward(geom_tensors, grads)

        l_D_f = tuple(float(x.detach()) for x in l_D)
        total = l_c if cfg.finetune() else l_c + 0.1 * l_d + lam * sum(l_D_f)
        report = LossReport(l_c=l_c, l_d=l_d, l_D=l_D_f, lam=lam, total=total,
                            n_rays=n_rays, n_depth_rays=n_depth_rays,
                            n_selfsup_valid=n_selfsup)
        if not cfg.finetune():
            report.check_identity()
        if not math.isfinite(report.total):
            dump = self.out / f"diagnostic_iter{it}.pt"
            torch.save({"pixels": px, "gt_color": gt_color, "report": vars(report)}, dump)
            raise TrainError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
        lr = cosine_lr(it, cfg.iterations, cfg.lr)
        self.opt.step(lr)
        self.opt.zero_grad()
        return report, lr

    def run(self):
        cfg = self.cfg
        curve_path = self.out / f"{self.run_name}_loss.csv"
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "l_c", "l_d", "l_D0", "l_D1", "l_D2", "total", "lr"])
            for it in range(cfg.iterations):
                report, lr = self._train_iteration(it)
                writer.writerow([it, f"{report.l_c:.8g}", f"{report.l_d:.8g}",
                                 f"{report.l_D[0]:.8g}", f"{report.l_D[1]:.8g}",
                                 f"{report.l_D[2]:.8g}", f"{report.total:.8g}", f"{lr:.8g}"])
                self.curve.append(report.total)
                if cfg.log_every and it % cfg.log_every == 0:
                    log.info("iter %d: total %.5f (l_c %.5f) lr %.2e", it, report.total,
                             report.l_c, lr)
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                    self.model.save(self.out / f"{self.run_name}_iter{it + 1:06d}.bin")
                    fh.flush()
        self.model.save(self.out / f"{self.run_name}_final.bin")
        return curve_path
