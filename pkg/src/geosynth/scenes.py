"""Analytic synthetic scenes: reference ray tracer, dataset IO, source-view selection.

Scenes are textured rectangles and spheres under a fixed directional light with
an ambient term, so colors are view-independent unless a specular gloss term is
explicitly enabled. Ground-truth depth is the camera-frame z of the nearest hit
at the pixel center; colors are 2x2 supersampled and box-downsampled.
"""

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import CameraModel, camera_rays, load_cameras, look_at_camera, save_cameras


class SceneError(Exception):
    pass


@dataclass(frozen=True)
class Texture:
    kind: str = "const"            # const | checker | sine
    base_color: tuple = (1.0, 1.0, 1.0)
    freq: tuple = (1.0, 1.0)       # cycles per world unit along the two local axes
    contrast: float = 0.8

    def value(self, a, b):
        """Scalar texture field in [0,1] over local surface coordinates."""
        if self.kind == "const":
            return np.ones_like(a)
        if self.kind == "checker":
            s = (np.floor(a * self.freq[0]) + np.floor(b * self.freq[1])) % 2
            return 0.5 + self.contrast * (s - 0.5)
        if self.kind == "sine":
            return 0.5 + 0.5 * self.contrast * np.sin(2 * np.pi * self.freq[0] * a) \
                * np.sin(2 * np.pi * self.freq[1] * b)
        raise SceneError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class PlanePrimitive:
    """Finite textured rectangle: center, two orthonormal in-plane axes, half extents."""
    center: tuple
    axis_a: tuple
    axis_b: tuple
    half_a: float
    half_b: float
    texture: Texture = Texture()
    gloss_strength: float = 0.0
    gloss_exponent: float = 32.0

    def frame(self):
        c = np.asarray(self.center, dtype=np.float64)
        ea = np.asarray(self.axis_a, dtype=np.float64)
        ea = ea / np.linalg.norm(ea)
        eb = np.asarray(self.axis_b, dtype=np.float64)
        eb = eb - (eb @ ea) * ea
        eb = eb / np.linalg.norm(eb)
        n = np.cross(ea, eb)
        return c, ea, eb, n

    def intersect(self, origins, dirs):
        """Ray parameter of the hit (inf where missed), and shading normals."""
        c, ea, eb, n = self.frame()
        denom = dirs @ n
        ok = np.abs(denom) > 1e-12
        s = np.where(ok, ((c - origins) @ n) / np.where(ok, denom, 1.0), np.inf)
        hit = origins + s[..., None] * dirs
        local = hit - c
        a = local @ ea
        b = local @ eb
        inside = ok & (s > 1e-9) & (np.abs(a) <= self.half_a) & (np.abs(b) <= self.half_b)
        s = np.where(inside, s, np.inf)
        return s, n

    def shade_coords(self, hit):
        c, ea, eb, _ = self.frame()
        local = hit - c
        return local @ ea, local @ eb

    def normal_at(self, hit):
        _, _, _, n = self.frame()
        return np.broadcast_to(n, hit.shape)


@dataclass(frozen=True)
class SpherePrimitive:
    center: tuple
    radius: float
    texture: Texture = Texture()
    gloss_strength: float = 0.0
    gloss_exponent: float = 32.0

    def intersect(self, origins, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origins - c
        A = np.einsum("...i,...i->...", dirs, dirs)
        B = 2.0 * np.einsum("...i,...i->...", oc, dirs)
        C = np.einsum("...i,...i->...", oc, oc) - self.radius ** 2
        disc = B * B - 4 * A * C
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s0 = (-B - sq) / (2 * A)
        s1 = (-B + sq) / (2 * A)
        s = np.where(s0 > 1e-9, s0, s1)
        s = np.where(ok & (s > 1e-9), s, np.inf)
        return s, None

    def shade_coords(self, hit):
        c = np.asarray(self.center, dtype=np.float64)
        local = (hit - c) / self.radius
        a = np.arctan2(local[..., 1], local[..., 0]) / (2 * np.pi) * (2 * np.pi * self.radius)
        b = np.arccos(np.clip(local[..., 2], -1, 1)) / np.pi * (np.pi * self.radius)
        return a, b

    def normal_at(self, hit):
        c = np.asarray(self.center, dtype=np.float64)
        n = hit - c
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass
class SceneSpec:
    primitives: list
    background: tuple = (0.05, 0.05, 0.08)
    light_dir: tuple = (0.3, -0.5, 0.8)
    ambient: float = 0.35
    seed: int = 0


@dataclass
class ViewRecord:
    view_id: int
    camera: CameraModel
    image: np.ndarray              # H x W x 3 float32 in [0,1]
    depth: np.ndarray = None       # H x W float32, 0 = invalid
    has_gt_depth: bool = False


def _shade(scene, prim, hit, normals, view_dirs):
    a, b = prim.shade_coords(hit)
    tex = prim.texture.value(a, b)[..., None] * np.asarray(prim.texture.base_color)
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = scene.ambient + (1.0 - scene.ambient) * np.abs(normals @ light)
    color = tex * lam[..., None]
    if prim.gloss_strength > 0:
        half = light - view_dirs
        half = half / np.maximum(np.linalg.norm(half, axis=-1, keepdims=True), 1e-12)
        spec = np.maximum(np.abs(np.einsum("...i,...i->...", normals, half)), 0.0) ** prim.gloss_exponent
        color = color + prim.gloss_strength * spec[..., None]
    return np.clip(color, 0.0, 1.0)


def _trace(scene, origins, dirs):
    """Nearest-hit color and ray parameter; with unit-z directions the parameter is camera depth."""
    n = origins.shape[0]
    best = np.full(n, np.inf)
    idx = np.full(n, -1)
    for i, prim in enumerate(scene.primitives):
        s, _ = prim.intersect(origins, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        idx = np.where(closer, i, idx)
    color = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (n, 3)).copy()
    for i, prim in enumerate(scene.primitives):
        sel = idx == i
        if not sel.any():
            continue
        hit = origins[sel] + best[sel, None] * dirs[sel]
        normals = prim.normal_at(hit)
        vdir = dirs[sel] / np.linalg.norm(dirs[sel], axis=-1, keepdims=True)
        color[sel] = _shade(scene, prim, hit, normals, vdir)
    depth = np.where(np.isfinite(best), best, 0.0)
    return color, depth


def raytrace_reference(scene, cam, supersample=2):
    """Reference render. Returns (image H,W,3 in [0,1], depth H,W with 0 = background).

    Color is ``supersample`` x ``supersample`` stratified and box-averaged;
    depth comes from the pixel-center ray so edges never mix depths.
    """
    H, W = cam.height, cam.width
    origins, dirs, pixels = camera_rays(cam)
    color = np.zeros((H * W, 3))
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for du in offsets:
        for dv in offsets:
            _, d, _ = camera_rays(cam, pixels + np.array([du, dv]))
            c, _ = _trace(scene, origins, d)
            color += c
    color /= supersample ** 2
    _, depth = _trace(scene, origins, dirs)
    valid = depth > 0
    if valid.any():
        dmin, dmax = depth[valid].min(), depth[valid].max()
        if dmin < cam.near or dmax > cam.far:
            raise SceneError(
                f"scene hits outside camera depth bounds: [{dmin:.3f},{dmax:.3f}] vs [{cam.near},{cam.far}]")
    return color.reshape(H, W, 3).astype(np.float32), depth.reshape(H, W).astype(np.float32)


@dataclass
class RigSpec:
    kind: str = "arc"              # arc | grid
    target: tuple = (0.0, 0.0, 4.0)
    radius: float = 4.0
    span_deg: float = 40.0
    elevation_deg: float = 8.0
    focal: float = 90.0
    width: int = 64
    height: int = 64
    near: float = 2.0
    far: float = 7.0


def rig_cameras(rig, n_views):
    """Deterministic camera rig: an arc (or small grid) of poses looking at the target."""
    target = np.asarray(rig.target, dtype=np.float64)
    cams = []
    if rig.kind == "arc":
        angles = np.linspace(-rig.span_deg / 2, rig.span_deg / 2, n_views) * np.pi / 180
        elev = rig.elevation_deg * np.pi / 180
        for ang in angles:
            pos = target + rig.radius * np.array([
                np.sin(ang) * np.cos(elev), -np.sin(elev), -np.cos(ang) * np.cos(elev)])
            cams.append(look_at_camera(pos, target, [0, 1, 0], rig.focal,
                                       rig.width, rig.height, rig.near, rig.far))
    elif rig.kind == "grid":
        cols = int(math.ceil(math.sqrt(n_views)))
        rows = int(math.ceil(n_views / cols))
        span = rig.radius * math.tan(rig.span_deg / 2 * math.pi / 180)
        xs = np.linspace(-span, span, cols) if cols > 1 else [0.0]
        ys = np.linspace(-span / 2, span / 2, rows) if rows > 1 else [0.0]
        for i in range(n_views):
            r, c = divmod(i, cols)
            pos = target + np.array([xs[c], ys[r], -rig.radius])
            cams.append(look_at_camera(pos, target, [0, 1, 0], rig.focal,
                                       rig.width, rig.height, rig.near, rig.far))
    else:
        raise SceneError(f"unknown rig kind {rig.kind!r}")
    return cams


def write_pfm(path, data):
    """Little-endian grayscale PFM, scale -1.0, rows bottom to top."""
    data = np.asarray(data, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise SceneError(f"not a PFM file: {path}")
        dims = fh.readline().decode()
        m = re.match(r"^(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise SceneError(f"malformed PFM dimensions: {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(fh.readline().decode().strip())
        endian = "<" if scale < 0 else ">"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(fh.read(4 * w * h * channels), dtype=endian + "f4")
        data = data.reshape((h, w) if channels == 1 else (h, w, 3))
        return np.flipud(data).copy()


def save_image_png(path, image):
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path):
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def generate_dataset(scene, rig, n_views, out_dir, no_depth=False):
    """Render ``n_views`` rig poses to disk: cameras.json, images/*.png, depth/*.pfm."""
    if n_views < 6:
        raise SceneError("need at least 6 views to support V=6 training source views")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if not no_depth:
        (out / "depth").mkdir(parents=True, exist_ok=True)
    cams = rig_cameras(rig, n_views)
    for i, cam in enumerate(cams):
        image, depth = raytrace_reference(scene, cam)
        save_image_png(out / "images" / f"view_{i:03d}.png", image)
        if not no_depth:
            write_pfm(out / "depth" / f"view_{i:03d}.pfm", depth)
    save_cameras(out / "cameras.json", cams)
    return out


def load_dataset(data_dir):
    """Load a dataset directory written by :func:`generate_dataset`."""
    data_dir = Path(data_dir)
    ids, cams = load_cameras(data_dir / "cameras.json")
    records = []
    for i, cam in zip(ids, cams):
        image = load_image_png(data_dir / "images" / f"view_{i:03d}.png")
        depth_path = data_dir / "depth" / f"view_{i:03d}.pfm"
        if depth_path.exists():
            depth = read_pfm(depth_path).astype(np.float32)
            records.append(ViewRecord(i, cam, image, depth, True))
        else:
            records.append(ViewRecord(i, cam, image, None, False))
    return records


def pose_distance(cam, other, center_scale):
    """Angular distance of optical axes plus 0.1 x normalized camera-center distance."""
    cosang = float(np.clip(cam.optical_axis @ other.optical_axis, -1.0, 1.0))
    ang = math.acos(cosang)
    dist = float(np.linalg.norm(cam.center - other.center))
    return ang + 0.1 * dist / center_scale


def _center_scale(novel, pool):
    dists = [float(np.linalg.norm(r.camera.center - novel.center)) for r in pool]
    m = max(dists)
    return m if m > 0 else 1.0


def select_source_views(novel, pool, V):
    """The V pool views closest to ``novel`` in pose distance; ties break on view id."""
    if len(pool) < V:
        raise SceneError(f"pool has {len(pool)} views, need {V}")
    scale = _center_scale(novel, pool)
    ranked = sorted(pool, key=lambda r: (pose_distance(novel, r.camera, scale), r.view_id))
    return ranked[:V]


def select_nearby_set(ref_id, pool, k, allow_any_k=False):
    """The k nearest other views to ``ref_id`` (the cost-volume warp set)."""
    if not allow_any_k and not 3 <= k <= 5:
        raise SceneError(f"nearby set size {k} outside [3,5]; pass allow_any_k to override")
    ref = next((r for r in pool if r.view_id == ref_id), None)
    if ref is None:
        raise SceneError(f"view {ref_id} not in pool")
    others = [r for r in pool if r.view_id != ref_id]
    if len(others) < k:
        raise SceneError(f"pool has {len(others)} other views, need {k}")
    scale = _center_scale(ref.camera, others)
    ranked = sorted(others, key=lambda r: (pose_distance(ref.camera, r.camera, scale), r.view_id))
    return ranked[:k]


_POOL_ORDER_CACHE = {}


def downsample_depth_nearest_valid(depth, level):
    """Downsample a GT depth map by 2^level x 2^level nearest-valid pooling.

    Each output pixel takes the valid depth nearest to its block center
    (0 when the whole block is invalid); no averaging across discontinuities.
    """
    f = 2 ** level
    if level == 0:
        return depth.copy()
    H, W = depth.shape
    if H % f or W % f:
        raise SceneError(f"depth shape {depth.shape} not divisible by {f}")
    order = _POOL_ORDER_CACHE.get(f)
    if order is None:
        c = (f - 1) / 2.0
        cells = sorted(((r, col) for r in range(f) for col in range(f)),
                       key=lambda rc: ((rc[0] - c) ** 2 + (rc[1] - c) ** 2, rc[0], rc[1]))
        order = _POOL_ORDER_CACHE[f] = cells
    blocks = depth.reshape(H // f, f, W // f, f).transpose(0, 2, 1, 3)
    out = np.zeros((H // f, W // f), dtype=depth.dtype)
    filled = np.zeros((H // f, W // f), dtype=bool)
    for r, c in order:
        v = blocks[:, :, r, c]
        take = (~filled) & (v > 0)
        out[take] = v[take]
        filled |= take
    return out


def scale_view(record, factor):
    """Resize a view record (image bilinear, depth nearest, intrinsics consistently)."""
    import torch
    import torch.nn.functional as F

    if factor == 1.0:
        return record
    cam = record.camera.scaled(factor)
    img = torch.from_numpy(record.image).permute(2, 0, 1).unsqueeze(0)
    img = F.interpolate(img, size=(cam.height, cam.width), mode="bilinear", align_corners=False)
    image = img[0].permute(1, 2, 0).numpy()
    depth = None
    if record.depth is not None:
        d = torch.from_numpy(record.depth)[None, None]
        d = F.interpolate(d, size=(cam.height, cam.width), mode="nearest-exact")
        depth = d[0, 0].numpy()
    return ViewRecord(record.view_id, cam, image, depth, record.has_gt_depth)
