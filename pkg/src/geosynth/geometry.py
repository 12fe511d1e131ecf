"""Geometry reasoner: per-view feature pyramids, cascaded plane-sweep cost volumes
with group-wise correlation, and 3D hourglass regularization into depth maps and
feature volumes. Optionally consumes a binary depth-guidance volume at the
coarsest level (RGBD variant).
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import bilinear_sample_batched
from .scenes import select_nearby_set

DEFAULT_PLANES = (8, 32, 48)   # D^(0), D^(1), D^(2)
GROUPS = 8
CASCADE_FACTOR = 4.0           # refined range = factor x coarser plane spacing


class GeometryError(Exception):
    pass


def ConvBnReLU2d(cin, cout, k, s):
    return nn.Sequential(nn.Conv2d(cin, cout, k, s, padding=k // 2, bias=False),
                         nn.BatchNorm2d(cout, momentum=0.1), nn.ReLU(inplace=True))


def ConvBnReLU3d(cin, cout, k=3, s=1):
    return nn.Sequential(nn.Conv3d(cin, cout, k, s, padding=k // 2, bias=False),
                         nn.BatchNorm3d(cout, momentum=0.1), nn.ReLU(inplace=True))


def TrpsConvBnReLU3d(cin, cout):
    return nn.Sequential(nn.ConvTranspose3d(cin, cout, 3, 2, padding=1, output_padding=1, bias=False),
                         nn.BatchNorm3d(cout, momentum=0.1), nn.ReLU(inplace=True))


class FeaturePyramidNet(nn.Module):
    """Three-scale 2D features: (H,W,8), (H/2,W/2,16), (H/4,W/4,32)."""

    def __init__(self):
        super().__init__()
        self.conv0_0 = ConvBnReLU2d(3, 8, 3, 1)
        self.conv0 = ConvBnReLU2d(8, 8, 3, 1)
        self.conv1_0 = ConvBnReLU2d(8, 16, 5, 2)
        self.conv1_1 = ConvBnReLU2d(16, 16, 3, 1)
        self.conv1 = ConvBnReLU2d(16, 16, 3, 1)
        self.conv2_0 = ConvBnReLU2d(16, 32, 5, 2)
        self.conv2_1 = ConvBnReLU2d(32, 32, 3, 1)
        self.conv2 = ConvBnReLU2d(32, 32, 3, 1)
        self.feat2 = nn.Conv2d(32, 32, 1, 1)
        self.lat1 = nn.Conv2d(16, 32, 1, 1)
        self.lat0 = nn.Conv2d(8, 32, 1, 1)
        self.feat1 = nn.Conv2d(32, 16, 3, 1, padding=1)
        self.feat0 = nn.Conv2d(32, 8, 3, 1, padding=1)

    @staticmethod
    def _upsample_add(x, y):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False) + y

    def forward(self, images):
        if images.shape[-2] % 4 or images.shape[-1] % 4:
            raise GeometryError(f"image size {tuple(images.shape[-2:])} not divisible by 4")
        c0 = self.conv0(self.conv0_0(images))
        c1 = self.conv1(self.conv1_1(self.conv1_0(c0)))
        c2 = self.conv2(self.conv2_1(self.conv2_0(c1)))
        f2 = self.feat2(c2)
        f1 = self._upsample_add(f2, self.lat1(c1))
        f0 = self._upsample_add(f1, self.lat0(c0))
        return {0: self.feat0(f0), 1: self.feat1(f1), 2: f2}


class Hourglass3D(nn.Module):
    """3D encoder-decoder regularizer with probability and feature heads."""

    def __init__(self, in_channels=GROUPS):
        super().__init__()
        self.conv0 = ConvBnReLU3d(in_channels, 8)
        self.conv1 = ConvBnReLU3d(8, 16, s=2)
        self.conv2 = ConvBnReLU3d(16, 16)
        self.conv3 = ConvBnReLU3d(16, 32, s=2)
        self.conv4 = ConvBnReLU3d(32, 32)
        self.conv5 = ConvBnReLU3d(32, 64, s=2)
        self.conv6 = ConvBnReLU3d(64, 64)
        self.up0 = TrpsConvBnReLU3d(64, 32)
        self.up1 = TrpsConvBnReLU3d(32, 16)
        self.up2 = TrpsConvBnReLU3d(16, 8)
        self.prob_0 = ConvBnReLU3d(8, 8)
        self.prob = nn.Conv3d(8, 1, 3, padding=1)
        self.feat = ConvBnReLU3d(8, 8)

    def forward(self, volume):
        dims = volume.shape[-3:]
        bad = [d for d in dims if d % 8]
        if bad:
            need = [(8 - d % 8) % 8 for d in dims]
            raise GeometryError(
                f"volume dims {tuple(dims)} must be divisible by 8; pad by {tuple(need)}")
        c0 = self.conv0(volume)
        c2 = self.conv2(self.conv1(c0))
        c4 = self.conv4(self.conv3(c2))
        x = self.conv6(self.conv5(c4))
        x = self.up0(x) + c4
        x = self.up1(x) + c2
        x = self.up2(x) + c0
        return self.prob(self.prob_0(x)).squeeze(1), self.feat(x)


@dataclass
class HypothesisVolume:
    level: int
    depths: torch.Tensor          # (D, h, w), strictly increasing along the plane axis
    spacing: float                # nominal plane spacing at this level
    clamped: int = 0              # pixels whose previous estimate needed clamping


def build_hypotheses(level, near, far, n_planes, prev=None, prev_spacing=None,
                     out_hw=None, dtype=torch.float32):
    """Per-pixel depth hypothesis planes for one cascade level.

    The coarsest level spans [near, far] with shared planes; finer levels span
    ``CASCADE_FACTOR`` coarser plane spacings around the (bilinearly upsampled)
    previous estimate, clamped to [near, far].
    """
    if level == 2 or prev is None:
        if prev is not None or level != 2:
            raise GeometryError("coarsest level takes no previous estimate")
        h, w = out_hw
        planes = torch.linspace(near, far, n_planes, dtype=dtype)
        depths = planes.reshape(-1, 1, 1).expand(n_planes, h, w)
        return HypothesisVolume(level, depths, (far - near) / (n_planes - 1))
    clamped = int(((prev < near) | (prev > far)).sum().item())
    prev = prev.clamp(near, far)
    up = F.interpolate(prev.unsqueeze(0).unsqueeze(0), size=out_hw,
                       mode="bilinear", align_corners=False)[0, 0]
    r = CASCADE_FACTOR * prev_spacing
    lo = (up - r / 2).clamp(min=near)
    hi = (up + r / 2).clamp(max=far)
    steps = torch.arange(n_planes, dtype=dtype).reshape(-1, 1, 1) / (n_planes - 1)
    depths = lo.unsqueeze(0) + (hi - lo).unsqueeze(0) * steps
    return HypothesisVolume(level, depths, r / (n_planes - 1), clamped)


def groupwise_correlation(f_ref, f_src, groups=GROUPS):
    """Group-wise correlation: mean elementwise product within contiguous channel groups.

    Channel dimension first; any trailing shape. Returns (groups, ...).
    """
    C = f_ref.shape[0]
    if C % groups:
        raise GeometryError(f"{C} channels not divisible by {groups} groups")
    shape = f_ref.shape[1:]
    prod = (f_ref * f_src).reshape(groups, C // groups, *shape)
    return prod.mean(dim=1)


def camera_level_tensors(cam, level, dtype=torch.float32):
    """(K, R, t) torch tensors of a camera rescaled to pyramid level ``level``."""
    scale = 1.0 / (2 ** level)
    c = cam.scaled(scale) if level else cam
    return (torch.as_tensor(c.K, dtype=dtype), torch.as_tensor(c.R, dtype=dtype),
            torch.as_tensor(c.t, dtype=dtype))


def warp_to_ref(src_feats, ref_kr, src_krs, depths):
    """Warp source features onto the reference sweep planes.

    src_feats: (S, C, h, w) level-l features of the nearby views.
    ref_kr/src_krs: camera tensors at the same level.
    depths: (D, h, w) per-pixel plane depths in the reference frame.
    Returns (warped (S, C, D, h, w), valid (S, D, h, w)). Differentiable w.r.t.
    features and depths.
    """
    S, C, h, w = src_feats.shape
    D = depths.shape[0]
    dtype = src_feats.dtype
    K_ref, R_ref, t_ref = ref_kr
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    pix = torch.stack([xs, ys, torch.ones_like(xs)], dim=0).reshape(3, -1)
    ref_dirs = torch.linalg.inv(K_ref) @ pix                      # (3, h*w), unit ref-camera z
    pts = depths.reshape(D, 1, h * w) * ref_dirs.unsqueeze(0)     # ref-camera coordinates
    us, vs, valids = [], [], []
    for K_src, R_src, t_src in src_krs:
        R_rel = R_src @ R_ref.T
        t_rel = t_src - R_rel @ t_ref
        q = torch.einsum("ij,djk->dik", K_src @ R_rel, pts) + (K_src @ t_rel).reshape(1, 3, 1)
        z = q[:, 2]
        ok = z > 1e-6
        zs = torch.where(ok, z, torch.ones_like(z))
        u = q[:, 0] / zs
        v = q[:, 1] / zs
        eps = 1e-6  # tolerate round-off at the image border
        valids.append(ok & (u >= -eps) & (u <= w - 1 + eps) & (v >= -eps) & (v <= h - 1 + eps))
        us.append(u)
        vs.append(v)
    u = torch.stack(us)                                           # (S, D, h*w)
    v = torch.stack(vs)
    valid = torch.stack(valids)
    warped = bilinear_sample_batched(src_feats, u, v)             # (S, C, D, h*w)
    return warped.reshape(S, C, D, h, w), valid.reshape(S, D, h, w)


def build_cost_volume(ref_feat, nearby_feats, ref_kr, nearby_krs, hyp, groups=GROUPS):
    """Validity-weighted mean of group-wise correlations against the nearby views.

    Returns (sim (G, D, h, w), valid_fraction (D, h, w)).
    """
    if len(nearby_feats) == 0:
        raise GeometryError("empty nearby view set")
    warped, valid = warp_to_ref(torch.stack(list(nearby_feats)), ref_kr, nearby_krs, hyp.depths)
    S, C, D, h, w = warped.shape
    ref = ref_feat.unsqueeze(1)                                   # (C, 1, h, w)
    vmask = valid.to(warped.dtype).unsqueeze(1)                   # (S, 1, D, h, w)
    corr = torch.stack([groupwise_correlation(ref.expand(C, D, h, w), warped[s], groups)
                        for s in range(S)])                       # (S, G, D, h, w)
    corr = corr * vmask
    weight = valid.to(warped.dtype).sum(dim=0)                    # (D, h, w)
    sim = corr.sum(dim=0) / weight.clamp(min=1.0).unsqueeze(0)
    sim = torch.where(weight.unsqueeze(0) > 0, sim, torch.zeros_like(sim))
    return sim, weight / S


def pad_to_multiple(volume, multiple=8):
    """Right-pad the trailing three dims of (..., D, h, w) to multiples of ``multiple``."""
    D, h, w = volume.shape[-3:]
    pd = (multiple - D % multiple) % multiple
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if pd or ph or pw:
        volume = F.pad(volume, (0, pw, 0, ph, 0, pd))
    return volume, (D, h, w)


def regularize_3d(hourglass, volumes, hyp):
    """Run the hourglass on padded volumes and regress soft-argmin depths.

    volumes: (V, C, D, h, w) cost volumes (plus guidance channel at level 2).
    Returns (depth (V, h, w), feat (V, 8, D, h, w), prob (V, D, h, w)).
    """
    padded, (D, h, w) = pad_to_multiple(volumes)
    logits, feat = hourglass(padded)
    logits = logits[:, :D, :h, :w]
    feat = feat[:, :, :D, :h, :w]
    prob = torch.softmax(logits, dim=1)
    depth = (prob * hyp.depths.unsqueeze(0)).sum(dim=1)
    return depth, feat, prob


def build_binary_volume(depth_lowres, hyp):
    """One-hot nearest-plane encoding of an incomplete low-resolution depth map.

    Zero (missing) pixels give all-zero columns; values are clamped to
    [near, far] before quantization; exact ties take the nearer plane.
    """
    planes = hyp.depths[:, 0, 0]                                  # level-2 planes are shared
    D = planes.shape[0]
    h, w = depth_lowres.shape
    missing = depth_lowres <= 0
    d = depth_lowres.clamp(float(planes[0]), float(planes[-1]))
    dist = (d.reshape(1, h, w) - planes.reshape(D, 1, 1)).abs()
    idx = dist.argmin(dim=0)                                      # first minimum: nearer plane on ties
    onehot = F.one_hot(idx, num_classes=D).permute(2, 0, 1).to(depth_lowres.dtype)
    return onehot * (~missing).to(depth_lowres.dtype).reshape(1, h, w)


@dataclass
class GeometryOutput:
    """Per-level outputs for all V source views."""
    depth: dict                   # level -> (V, h_l, w_l)
    feat: dict                    # level -> (V, 8, D_l, h_l, w_l)
    prob: dict                    # level -> (V, D_l, h_l, w_l)
    hyp: dict = field(default_factory=dict)        # level -> [HypothesisVolume] per view
    pyramids: dict = field(default_factory=dict)   # level -> (V, C_l, h_l, w_l)
    clamped: int = 0


class GeometryNet(nn.Module):
    """FPN plus three cascade-level hourglass regularizers."""

    def __init__(self, planes=DEFAULT_PLANES, groups=GROUPS, rgbd=False):
        super().__init__()
        self.planes = tuple(planes)
        self.groups = groups
        self.rgbd = rgbd
        self.fpn = FeaturePyramidNet()
        self.reg = nn.ModuleDict({
            "2": Hourglass3D(groups + (1 if rgbd else 0)),
            "1": Hourglass3D(groups),
            "0": Hourglass3D(groups),
        })

    def forward(self, images, cams, nearby, guidance=None):
        """Reason geometry for all V source views.

        images: (V, 3, H, W); cams: list of CameraModel; nearby: list of index
        lists (cost-volume warp set per view); guidance: optional (V, H/4, W/4)
        incomplete low-res depths for the RGBD variant.
        """
        V = images.shape[0]
        dtype = images.dtype
        near = min(c.near for c in cams)
        far = max(c.far for c in cams)
        pyramids = self.fpn(images)
        cam_t = {l: [camera_level_tensors(c, l, dtype) for c in cams] for l in (0, 1, 2)}
        out = GeometryOutput({}, {}, {}, {}, pyramids)
        prev_depth, prev_spacing = None, None
        for level in (2, 1, 0):
            feats = pyramids[level]
            h, w = feats.shape[-2:]
            n_planes = self.planes[level]
            hyps, volumes = [], []
            for v in range(V):
                if level == 2:
                    hyp = build_hypotheses(2, near, far, n_planes, out_hw=(h, w), dtype=dtype)
                else:
                    hyp = build_hypotheses(level, near, far, n_planes,
                                           prev=prev_depth[v], prev_spacing=prev_spacing,
                                           out_hw=(h, w), dtype=dtype)
                    out.clamped += hyp.clamped
                sim, _ = build_cost_volume(feats[v], [feats[j] for j in nearby[v]],
                                           cam_t[level][v], [cam_t[level][j] for j in nearby[v]],
                                           hyp, self.groups)
                if level == 2 and self.rgbd:
                    if guidance is None:
                        raise GeometryError("rgbd model needs guidance depths")
                    binary = build_binary_volume(guidance[v].to(sim.dtype), hyp)
                    sim = torch.cat([sim, binary.unsqueeze(0)], dim=0)
                hyps.append(hyp)
                volumes.append(sim)
            stacked = torch.stack(volumes)
            padded, (D, hh, ww) = pad_to_multiple(stacked)
            logits, feat3 = self.reg[str(level)](padded)
            logits = logits[:, :D, :hh, :ww]
            feat3 = feat3[:, :, :D, :hh, :ww]
            prob = torch.softmax(logits, dim=1)
            depth = torch.stack([(prob[v] * hyps[v].depths).sum(dim=0) for v in range(V)])
            out.depth[level] = depth
            out.feat[level] = feat3
            out.prob[level] = prob
            out.hyp[level] = hyps
            prev_depth, prev_spacing = depth, hyps[0].spacing
        return out


def nearby_indices(records, k, allow_any_k=False):
    """Cost-volume warp sets as index lists into ``records`` (not view ids)."""
    pos = {r.view_id: i for i, r in enumerate(records)}
    out = []
    for r in records:
        sel = select_nearby_set(r.view_id, records, k, allow_any_k=allow_any_k)
        out.append([pos[s.view_id] for s in sel])
    return out


def geometry_reason(records, net, guidance=None, nearby_k=None, allow_small_v=False):
    """Full per-view cascade for a list of source ViewRecords.

    nearby_k defaults to min(5, V-1); V must be at least 4 unless
    ``allow_small_v`` (micro-instances) is set.
    """
    V = len(records)
    if V < 4 and not allow_small_v:
        raise GeometryError(f"need V >= 4 source views, got {V}")
    k = nearby_k if nearby_k is not None else min(5, V - 1)
    k = min(k, V - 1)
    nearby = nearby_indices(records, k, allow_any_k=allow_small_v or k < 3)
    dtype = next(net.parameters()).dtype
    images = torch.stack([torch.as_tensor(r.image, dtype=dtype).permute(2, 0, 1) for r in records])
    cams = [r.camera for r in records]
    return net(images, cams, nearby, guidance=guidance)
