"""Pinhole cameras, projection, planar homographies and cross-view ray transforms.

Conventions: world-to-camera maps are x_cam = R @ X + t with z forward
(OpenCV style). Integer pixel coordinates address pixel centers. Depth always
means the camera-frame z coordinate, not distance along the ray.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class CameraError(Exception):
    pass


class BehindCameraError(CameraError):
    pass


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray          # 3x3 intrinsics, pixels
    R: np.ndarray          # 3x3 world-to-camera rotation
    t: np.ndarray          # 3-vector translation
    near: float
    far: float
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise CameraError("R must be orthonormal with determinant +1")
        if not (0 < self.near < self.far):
            raise CameraError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("K must be upper-triangular with positive focal entries")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def optical_axis(self):
        """Unit viewing direction (camera +z) in world coordinates."""
        return self.R[2].copy()

    def scaled(self, factor):
        """Camera for an image resized by ``factor`` (pixel-center convention)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        K = self.K.copy()
        K[0, 0] *= factor
        K[1, 1] *= factor
        K[0, 1] *= factor
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return CameraModel(K, self.R, self.t, self.near, self.far, w, h)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray      # world units
    direction: np.ndarray   # unit vector
    pixel: tuple            # (u, v) in the novel camera
    z_scale: float = 1.0    # ray length per unit of camera depth along this ray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise CameraError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    def point_at(self, depth):
        """World point on the ray at camera depth ``depth`` (z in the novel frame)."""
        return self.origin + depth * self.z_scale * self.direction


def look_at_camera(position, target, up, focal, width, height, near, far):
    """Camera at ``position`` looking at ``target``; principal point at the image center."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise CameraError("up vector parallel to viewing direction")
    x = x / n
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    # re-orthonormalize to stay inside the 1e-9 invariant
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = -R @ position
    K = np.array([[focal, 0.0, (width - 1) / 2.0],
                  [0.0, focal, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraModel(K, R, t, near, far, width, height)


def project(cam, X):
    """Project a world point; returns (u, v, z). Raises if the point is behind the camera."""
    X = np.asarray(X, dtype=np.float64)
    xc = cam.R @ X + cam.t
    if xc[2] <= 1e-9:
        raise BehindCameraError(f"point has camera depth {xc[2]:.3g}")
    p = cam.K @ xc
    return p[0] / p[2], p[1] / p[2], xc[2]


def project_batch(cam, X):
    """Vectorized projection of (...,3) points. Returns (uv (...,2), z (...), valid (...))."""
    X = np.asarray(X, dtype=np.float64)
    xc = X @ cam.R.T + cam.t
    z = xc[..., 2]
    valid = z > 1e-9
    zsafe = np.where(valid, z, 1.0)
    p = xc @ cam.K.T
    uv = p[..., :2] / zsafe[..., None]
    return uv, z, valid


def backproject(cam, u, v, z):
    """Inverse of :func:`project`: world point at pixel (u, v) and camera depth z."""
    if np.any(np.asarray(z) <= 0):
        raise CameraError("depth must be positive")
    Kinv = np.linalg.inv(cam.K)
    p = np.stack(np.broadcast_arrays(np.asarray(u, dtype=np.float64),
                                     np.asarray(v, dtype=np.float64),
                                     np.ones_like(np.asarray(u, dtype=np.float64))), axis=-1)
    xc = np.asarray(z, dtype=np.float64)[..., None] * (p @ Kinv.T)
    return (xc - cam.t) @ cam.R


def relative_pose(ref, src):
    """(R_rel, t_rel) mapping ref-camera coordinates to src-camera coordinates."""
    R_rel = src.R @ ref.R.T
    t_rel = src.t - R_rel @ ref.t
    return R_rel, t_rel


def planar_homography(ref, src, d):
    """Homography sending ref pixels to src pixels for the fronto-parallel plane z_ref = d."""
    if d <= 0:
        raise CameraError("plane depth must be positive")
    R_rel, t_rel = relative_pose(ref, src)
    n = np.array([0.0, 0.0, -1.0])
    H = src.K @ (R_rel - np.outer(t_rel, n) / d) @ np.linalg.inv(ref.K)
    return H


def bilinear_sample(feat, x, y):
    """Bilinear lookup of ``feat`` (C,H,W) at pixel coordinates x, y (any shape).

    Integer coordinates address pixel centers and reproduce stored values
    exactly. Coordinates are clamped to the image rectangle; use the validity
    masks computed by callers to zero out-of-frame samples. Differentiable
    w.r.t. ``feat``. Returns (C, *x.shape).
    """
    C, H, W = feat.shape
    shape = x.shape
    x = x.reshape(-1).clamp(0, W - 1)
    y = y.reshape(-1).clamp(0, H - 1)
    x0 = x.floor().clamp(0, W - 2) if W > 1 else torch.zeros_like(x)
    y0 = y.floor().clamp(0, H - 2) if H > 1 else torch.zeros_like(y)
    wx = (x - x0).to(feat.dtype)
    wy = (y - y0).to(feat.dtype)
    x0 = x0.long()
    y0 = y0.long()
    flat = feat.reshape(C, H * W)
    i00 = y0 * W + x0
    v00 = flat[:, i00]
    v01 = flat[:, i00 + (1 if W > 1 else 0)]
    v10 = flat[:, i00 + (W if H > 1 else 0)]
    v11 = flat[:, i00 + ((W + 1) if (H > 1 and W > 1) else 0)]
    top = v00 + (v01 - v00) * wx
    bot = v10 + (v11 - v10) * wx
    out = top + (bot - top) * wy
    return out.reshape(C, *shape)


def bilinear_sample_batched(feat, x, y):
    """Per-image bilinear lookup: feat (B,C,H,W), x/y (B,...). Returns (B,C,...)."""
    B, C, H, W = feat.shape
    shape = x.shape[1:]
    x = x.reshape(B, -1).clamp(0, W - 1)
    y = y.reshape(B, -1).clamp(0, H - 1)
    x0 = x.floor().clamp(0, W - 2) if W > 1 else torch.zeros_like(x)
    y0 = y.floor().clamp(0, H - 2) if H > 1 else torch.zeros_like(y)
    wx = (x - x0).to(feat.dtype).unsqueeze(1)
    wy = (y - y0).to(feat.dtype).unsqueeze(1)
    i00 = (y0.long() * W + x0.long()).unsqueeze(1).expand(B, C, -1)
    flat = feat.reshape(B, C, H * W)
    dx = 1 if W > 1 else 0
    dy = W if H > 1 else 0
    v00 = flat.gather(2, i00)
    v01 = flat.gather(2, i00 + dx)
    v10 = flat.gather(2, i00 + dy)
    v11 = flat.gather(2, i00 + dx + dy)
    top = v00 + (v01 - v00) * wx
    bot = v10 + (v11 - v10) * wx
    out = top + (bot - top) * wy
    return out.reshape(B, C, *shape)


def warp_features(feat, H, out_size):
    """Inverse-warp ``feat`` (H'xW'xC torch tensor) with a 3x3 homography.

    For every output pixel p the source is sampled bilinearly at H @ p.
    Out-of-frame or near-infinity locations give 0 with valid=False.
    Differentiable w.r.t. ``feat``. Returns (warped (Ho,Wo,C), valid (Ho,Wo)).
    """
    Ho, Wo = out_size
    Hs, Ws = feat.shape[0], feat.shape[1]
    dtype = feat.dtype
    Ht = torch.as_tensor(H, dtype=dtype)
    ys, xs = torch.meshgrid(torch.arange(Ho, dtype=dtype), torch.arange(Wo, dtype=dtype), indexing="ij")
    pix = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1).reshape(-1, 3)
    q = pix @ Ht.T
    w = q[:, 2]
    ok = w.abs() > 1e-9
    wsafe = torch.where(ok, w, torch.ones_like(w))
    x = q[:, 0] / wsafe
    y = q[:, 1] / wsafe
    valid = (ok & (w > 0) & (x >= 0) & (x <= Ws - 1) & (y >= 0) & (y <= Hs - 1)).reshape(Ho, Wo)
    out = bilinear_sample(feat.permute(2, 0, 1), x.reshape(Ho, Wo), y.reshape(Ho, Wo))
    out = out.permute(1, 2, 0) * valid.to(dtype).unsqueeze(-1)
    return out, valid


def transform_ray(ray, depth, src):
    """Map a novel-camera ray at rendered depth into a source view.

    Lifts the ray's pixel to its world point at camera depth ``depth`` and
    projects into ``src``. Returns (u, v, z_src, valid); valid is False when
    the point falls behind the source camera (such terms are excluded from
    losses rather than raising).
    """
    if depth <= 0:
        raise CameraError("depth must be positive")
    X = ray.point_at(depth)
    uv, z, valid = project_batch(src, X[None])
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0]), bool(valid[0])


def angle_theta(x, cam_a, cam_b):
    """Angle at world point x between the two camera-center-to-x directions."""
    x = np.asarray(x, dtype=np.float64)
    va = x - cam_a.center
    vb = x - cam_b.center
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na < 1e-9 or nb < 1e-9:
        raise CameraError("point coincides with a camera center")
    c = np.clip(va @ vb / (na * nb), -1.0, 1.0)
    return float(np.arccos(c))


def camera_rays(cam, pixels=None):
    """Rays through the given pixels (or every pixel) of ``cam``.

    Returns (origins (N,3), dirs_z (N,3), pixels (N,2)) where ``origins + z * dirs_z``
    is the world point at camera depth z: dirs_z has unit z-component in the
    camera frame, so the parameter is exactly the camera depth.
    """
    if pixels is None:
        vs, us = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        pixels = np.stack([us.reshape(-1), vs.reshape(-1)], axis=-1).astype(np.float64)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((pixels.shape[0], 1))
    p = np.concatenate([pixels, ones], axis=1)
    dirs = p @ np.linalg.inv(cam.K).T @ cam.R
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return origins, dirs, pixels


def make_ray(cam, u, v):
    """A unit-direction Ray through pixel (u, v) of ``cam``."""
    _, dirs, _ = camera_rays(cam, [[u, v]])
    d = dirs[0]
    n = np.linalg.norm(d)
    return Ray(cam.center, d / n, (float(u), float(v)), z_scale=float(n))


def save_cameras(path, cams, ids=None):
    """Write cameras.json: [{id, K, R, t, near, far, width, height}] with row-major matrices."""
    if ids is None:
        ids = list(range(len(cams)))
    records = []
    for i, cam in zip(ids, cams):
        records.append({
            "id": int(i),
            "K": [float(x) for x in cam.K.reshape(-1)],
            "R": [float(x) for x in cam.R.reshape(-1)],
            "t": [float(x) for x in cam.t],
            "near": float(cam.near),
            "far": float(cam.far),
            "width": int(cam.width),
            "height": int(cam.height),
        })
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)


def load_cameras(path):
    """Read cameras.json; returns (ids, [CameraModel]) sorted by id."""
    with open(path) as fh:
        records = json.load(fh)
    records.sort(key=lambda r: r["id"])
    cams = [CameraModel(np.array(r["K"]).reshape(3, 3), np.array(r["R"]).reshape(3, 3),
                        np.array(r["t"]), r["near"], r["far"], r["width"], r["height"])
            for r in records]
    return [r["id"] for r in records], cams
