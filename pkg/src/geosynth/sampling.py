"""Hybrid ray sampling and per-sample feature gathering.

Rays get N_c stratified-uniform samples over the depth range plus N_f samples
drawn from a stepwise coverage density (how many views' finest cost volumes
cover each depth). Sampled points are projected into every source view to
interpolate 2D/3D features and colors and to compute occlusion masks.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import bilinear_sample_batched

N_COARSE = 96
N_FINE = 32
OCCLUSION_SLACK = 0.01      # relative depth slack before a point counts as occluded
DUPLICATE_EPS = 1e-9


class SamplingError(Exception):
    pass


@dataclass
class RayBatch:
    """Rays of one novel camera, parametrized by camera depth."""
    origins: torch.Tensor    # (R, 3)
    dirs_z: torch.Tensor     # (R, 3), unit z-component in the novel frame
    pixels: torch.Tensor     # (R, 2)
    near: float
    far: float

    def points_at(self, z):
        """World points at camera depths z (R, N) -> (R, N, 3)."""
        return self.origins.unsqueeze(1) + z.unsqueeze(-1) * self.dirs_z.unsqueeze(1)

    def __len__(self):
        return self.origins.shape[0]


def make_ray_batch(cam, pixels, dtype=torch.float32):
    """RayBatch through the given (R, 2) pixel coordinates of ``cam``."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((pixels.shape[0], 1))
    dirs = np.concatenate([pixels, ones], axis=1) @ np.linalg.inv(cam.K).T @ cam.R
    origins = np.broadcast_to(cam.center, dirs.shape)
    return RayBatch(torch.as_tensor(origins.copy(), dtype=dtype),
                    torch.as_tensor(dirs, dtype=dtype),
                    torch.as_tensor(pixels, dtype=dtype), cam.near, cam.far)


@dataclass
class CoveragePDF:
    bin_edges: torch.Tensor   # (N_c + 1,)
    mass: torch.Tensor        # (R, N_c), rows sum to 1
    degenerate: torch.Tensor  # (R,) bool; True rows fell back to uniform


def sample_uniform(near, far, n, n_rays, train=False, generator=None, dtype=torch.float32):
    """Stratified samples over [near, far]: in-bin uniform draws when training,
    bin centers at evaluation."""
    if n < 2:
        raise SamplingError("need at least 2 uniform samples")
    if near >= far:
        raise SamplingError(f"need near < far, got {near} >= {far}")
    width = (far - near) / n
    if train:
        u = torch.rand(n_rays, n, generator=generator, dtype=dtype)
    else:
        u = torch.full((n_rays, n), 0.5, dtype=dtype)
    return near + (torch.arange(n, dtype=dtype) + u) * width


def project_points(points, cams, dtype=None):
    """Project (R, N, 3) world points into every camera.

    Returns (u (V,R,N), v (V,R,N), z (V,R,N), inside (V,R,N)); ``inside`` means
    in front of the camera and within the image rectangle.
    """
    dtype = dtype or points.dtype
    R_all = torch.stack([torch.as_tensor(c.K @ c.R, dtype=dtype) for c in cams])
    t_all = torch.stack([torch.as_tensor(c.K @ c.t, dtype=dtype) for c in cams])
    q = torch.einsum("vij,rnj->vrni", R_all, points) + t_all.reshape(-1, 1, 1, 3)
    z = q[..., 2]
    ok = z > 1e-9
    zs = torch.where(ok, z, torch.ones_like(z))
    u = q[..., 0] / zs
    v = q[..., 1] / zs
    inside = ok.clone()
    for i, c in enumerate(cams):
        inside[i] &= (u[i] >= 0) & (u[i] <= c.width - 1) & (v[i] >= 0) & (v[i] <= c.height - 1)
    return u, v, z, inside


def coverage_pdf(rays, geom, cams, n_bins=N_COARSE):
    """Stepwise density of per-depth covering-view counts along each ray.

    A view covers a bin center when the point projects inside its image and
    its source-frame depth lies within that pixel's finest hypothesis range
    (nearest-pixel lookup). All-zero rows degenerate to uniform.
    """
    dtype = rays.origins.dtype
    edges = torch.linspace(rays.near, rays.far, n_bins + 1, dtype=dtype)
    centers = (edges[:-1] + edges[1:]) / 2
    pts = rays.points_at(centers.expand(len(rays), n_bins))
    with torch.no_grad():
        u, v, z, inside = project_points(pts, cams, dtype=dtype)
        counts = torch.zeros(len(rays), n_bins, dtype=dtype)
        for i in range(len(cams)):
            hyp = geom.hyp[0][i].depths.detach()
            lo, hi = hyp[0], hyp[-1]
            ix = u[i].round().long().clamp(0, lo.shape[1] - 1)
            iy = v[i].round().long().clamp(0, lo.shape[0] - 1)
            lo_v = lo[iy, ix]
            hi_v = hi[iy, ix]
            covered = inside[i] & (z[i] >= lo_v) & (z[i] <= hi_v)
            counts += covered.to(dtype)
    total = counts.sum(dim=1)
    degenerate = total == 0
    mass = torch.where(degenerate.unsqueeze(1),
                       torch.full_like(counts, 1.0 / n_bins),
                       counts / total.clamp(min=1).unsqueeze(1))
    return CoveragePDF(edges, mass, degenerate)


def sample_pdf(pdf, n, train=False, generator=None):
    """Inverse-CDF draws from a stepwise coverage density (stratified uniforms)."""
    if n < 1:
        raise SamplingError("need at least 1 sample")
    mass = pdf.mass
    n_rays, n_bins = mass.shape
    dtype = mass.dtype
    if train:
        u = (torch.arange(n, dtype=dtype) +
             torch.rand(n_rays, n, generator=generator, dtype=dtype)) / n
    else:
        u = ((torch.arange(n, dtype=dtype) + 0.5) / n).expand(n_rays, n)
    cdf = torch.cumsum(mass, dim=1)
    cdf = torch.cat([torch.zeros(n_rays, 1, dtype=dtype), cdf], dim=1)
    cdf[:, -1] = 1.0
    idx = (torch.searchsorted(cdf, u.contiguous(), right=True) - 1).clamp(0, n_bins - 1)
    lo = cdf.gather(1, idx)
    m = mass.gather(1, idx)
    frac = torch.where(m > 0, (u - lo) / m.clamp(min=1e-12), torch.zeros_like(u))
    left = pdf.bin_edges[idx]
    width = pdf.bin_edges[idx + 1] - pdf.bin_edges[idx]
    return left + frac.clamp(0.0, 1.0) * width


def merge_depths(z_uniform, z_fine, near, far):
    """Sorted union of the two draws; duplicates within 1e-9 nudged apart."""
    z = torch.cat([z_uniform, z_fine], dim=1)
    z, _ = torch.sort(z, dim=1)
    bump = 1e-6 * (far - near)
    for k in range(1, z.shape[1]):
        z[:, k] = torch.maximum(z[:, k], z[:, k - 1] + (
            (z[:, k] - z[:, k - 1] < DUPLICATE_EPS).to(z.dtype) * bump))
    return z


def hybrid_sample(rays, geom, cams, n_coarse=N_COARSE, n_fine=N_FINE,
                  train=False, generator=None):
    """The full sampling rule: stratified-uniform plus coverage-guided draws."""
    zu = sample_uniform(rays.near, rays.far, n_coarse, len(rays), train, generator,
                        dtype=rays.origins.dtype)
    pdf = coverage_pdf(rays, geom, cams, n_bins=n_coarse)
    zf = sample_pdf(pdf, n_fine, train, generator)
    return merge_depths(zu, zf, rays.near, rays.far), pdf


def trilinear_sample_volume(vol, d, x, y):
    """Sample (V,C,D,h,w) volumes at fractional plane index d and pixel (x, y).

    Bilinear in-plane, linear along the plane axis, clamped to the end planes.
    All of d/x/y are (V, P). Returns (V, C, P). Differentiable w.r.t. ``vol``.
    """
    V, C, D, h, w = vol.shape
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    d = d.clamp(0, D - 1)
    x0 = x.floor().clamp(0, max(w - 2, 0))
    y0 = y.floor().clamp(0, max(h - 2, 0))
    d0 = d.floor().clamp(0, max(D - 2, 0))
    wx = (x - x0).to(vol.dtype).unsqueeze(1)
    wy = (y - y0).to(vol.dtype).unsqueeze(1)
    wd = (d - d0).to(vol.dtype).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    d0 = d0.long()
    flat = vol.reshape(V, C, D * h * w)
    base = d0 * (h * w) + y0 * w + x0
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    dd = h * w if D > 1 else 0

    def corner(off):
        return flat.gather(2, (base + off).unsqueeze(1).expand(V, C, -1))

    c000, c001 = corner(0), corner(dx)
    c010, c011 = corner(dy), corner(dy + dx)
    c100, c101 = corner(dd), corner(dd + dx)
    c110, c111 = corner(dd + dy), corner(dd + dy + dx)
    top0 = c000 + (c001 - c000) * wx
    bot0 = c010 + (c011 - c010) * wx
    p0 = top0 + (bot0 - top0) * wy
    top1 = c100 + (c101 - c100) * wx
    bot1 = c110 + (c111 - c110) * wx
    p1 = top1 + (bot1 - top1) * wy
    return p0 + (p1 - p0) * wd


@dataclass
class SampleBatch:
    """Per-ray sampled points with everything the renderer consumes."""
    x: torch.Tensor           # (R, N, 3) world points, sorted by novel depth
    z: torch.Tensor           # (R, N) novel-camera depths, strictly increasing
    f0: torch.Tensor          # (R, N, V, 8) full-res 2D features
    phi: torch.Tensor         # (R, N, V, 3, 8) per-level 3D features
    color: torch.Tensor       # (R, N, V, 3) source colors
    mask: torch.Tensor        # (R, N, V) occlusion masks (density/attention path)
    color_mask: torch.Tensor  # (R, N, V) masks relaxed so every sample keeps >= 1 view
    theta: torch.Tensor       # (R, N, V) novel-to-source viewing angles


def occlusion_masks(z_src, inside, depth0_at_pixel):
    """M = 0 where the projection is invalid or the point sits behind the
    estimated surface by more than the relative slack."""
    behind = z_src > depth0_at_pixel * (1.0 + OCCLUSION_SLACK)
    return (inside & ~behind)


def relax_masks(mask, inside):
    """Color path fallback: frustum validity when a sample loses every view,
    all views when it projects nowhere."""
    any_mask = mask.any(dim=-1, keepdim=True)
    any_inside = inside.any(dim=-1, keepdim=True)
    relaxed = torch.where(any_mask, mask, inside)
    return torch.where(any_mask | any_inside, relaxed, torch.ones_like(mask))


def interpolate_features(rays, z, views_images, geom, cams, novel_cam, use_occlusion=True):
    """Gather per-sample features, colors, angles and occlusion masks.

    rays: RayBatch (R rays); z: (R, N) sorted novel depths; views_images:
    (V, 3, H, W) tensor of source images; geom: GeometryOutput; cams: source
    CameraModels. Differentiable w.r.t. the feature maps and images.
    ``use_occlusion=False`` keeps only the frustum-validity part of the masks
    (the occlusion-reasoning ablation).
    """
    R, N = z.shape
    if N % 8:
        raise SamplingError(f"sample count {N} not divisible by 8")
    V = len(cams)
    dtype = views_images.dtype
    x = rays.points_at(z)
    with torch.no_grad():
        u, v, z_src, inside = project_points(x, cams, dtype=dtype)
        u = u.reshape(V, R * N)
        v = v.reshape(V, R * N)
        inside_rnv = inside.reshape(V, R, N).permute(1, 2, 0)
        if use_occlusion:
            # occlusion test against the finest estimated depth maps
            d0 = geom.depth[0].detach().unsqueeze(1)               # (V, 1, h, w)
            d0_at = bilinear_sample_batched(d0, u, v)[:, 0]        # (V, R*N)
            mask = occlusion_masks(z_src.reshape(V, R * N), inside.reshape(V, R * N), d0_at)
            mask = mask.reshape(V, R, N).permute(1, 2, 0)
        else:
            mask = inside_rnv
        color_mask = relax_masks(mask, inside_rnv)
        # viewing angle between the novel ray and each source ray through x
        novel_c = torch.as_tensor(novel_cam.center, dtype=dtype)
        a = x.unsqueeze(0) - novel_c.reshape(1, 1, 1, 3)
        centers = torch.stack([torch.as_tensor(c.center, dtype=dtype) for c in cams])
        b = x.unsqueeze(0) - centers.reshape(V, 1, 1, 3)
        an = a / a.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        bn = b / b.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        theta = torch.acos((an * bn).sum(-1).clamp(-1.0, 1.0))
        theta = theta.permute(1, 2, 0)

    f0 = bilinear_sample_batched(geom.pyramids[0], u, v)           # (V, 8, R*N)
    f0 = f0.reshape(V, 8, R, N).permute(2, 3, 0, 1)
    color = bilinear_sample_batched(views_images, u, v)
    color = color.reshape(V, 3, R, N).permute(2, 3, 0, 1)
    zsrc_flat = z_src.reshape(V, R * N)
    phis = []
    for l in (0, 1, 2):
        scale = 1.0 / (2 ** l)
        ul = (u + 0.5) * scale - 0.5
        vl = (v + 0.5) * scale - 0.5
        # plane addressing stays differentiable w.r.t. the hypothesis grids,
        # which carry the coarser-level depth estimates
        hyp = torch.stack([h.depths for h in geom.hyp[l]])         # (V, D, h, w)
        D = hyp.shape[1]
        ends = torch.stack([hyp[:, 0], hyp[:, -1] - hyp[:, 0]], dim=1)  # lo, width
        at = bilinear_sample_batched(ends, ul, vl)                 # (V, 2, R*N)
        lo, width = at[:, 0], at[:, 1]
        frac = (zsrc_flat - lo) / width.clamp(min=1e-12) * (D - 1)
        phis.append(trilinear_sample_volume(geom.feat[l], frac, ul, vl))
    phi = torch.stack(phis, dim=2)                                 # (V, 8, 3, R*N)
    phi = phi.reshape(V, 8, 3, R, N).permute(3, 4, 0, 2, 1)
    return SampleBatch(x, z, f0, phi, color,
                       mask.to(dtype), color_mask.to(dtype), theta)
