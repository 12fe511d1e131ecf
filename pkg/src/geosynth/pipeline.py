"""End-to-end model: geometry reasoner + attention renderer, with helpers to
render rays or whole images for a novel pose from a set of source views."""

import numpy as np
import torch
import torch.nn as nn

from . import sampling
from .geometry import GeometryNet, geometry_reason
from .render import RendererNet
from .substrate import init_parameters, load_checkpoint, save_checkpoint


class Model(nn.Module):
    """The full view-synthesis model."""

    def __init__(self, planes=(8, 32, 48), rgbd=False, delta_weighted=False):
        super().__init__()
        self.geometry = GeometryNet(planes=planes, rgbd=rgbd)
        self.renderer = RendererNet(delta_weighted=delta_weighted)

    def initialize(self, seed):
        gen = torch.Generator().manual_seed(seed)
        init_parameters(self, gen)
        return self

    def save(self, path):
        save_checkpoint(path, dict(self.state_dict()))

    def load(self, path):
        state = load_checkpoint(path)
        own = self.state_dict()
        converted = {}
        for k, v in state.items():
            if k not in own:
                raise KeyError(f"checkpoint parameter {k!r} unknown to this model")
            converted[k] = v.to(own[k].dtype).reshape(own[k].shape)
        self.load_state_dict(converted)
        return self


def source_images_tensor(records, dtype):
    return torch.stack([torch.as_tensor(r.image, dtype=dtype).permute(2, 0, 1) for r in records])


def run_geometry(model, records, guidance=None, nearby_k=None, allow_small_v=False):
    return geometry_reason(records, model.geometry, guidance=guidance,
                           nearby_k=nearby_k, allow_small_v=allow_small_v)


def sample_rays(novel_cam, pixels, geom, cams, n_coarse, n_fine, train=False,
                generator=None, dtype=torch.float32):
    """Hybrid-sample depths for rays through ``pixels`` of the novel camera."""
    rays = sampling.make_ray_batch(novel_cam, pixels, dtype=dtype)
    if n_fine > 0:
        z, _ = sampling.hybrid_sample(rays, geom, cams, n_coarse=n_coarse, n_fine=n_fine,
                                      train=train, generator=generator)
    else:
        z = sampling.sample_uniform(rays.near, rays.far, n_coarse, len(rays), train,
                                    generator, dtype=dtype)
    return rays, z


def render_rays(model, rays, z, images_t, geom, cams, novel_cam, use_masks=True):
    """Interpolate features for the sampled points and run the renderer."""
    batch = sampling.interpolate_features(rays, z, images_t, geom, cams, novel_cam,
                                          use_occlusion=use_masks)
    return model.renderer(batch), batch


def render_image(model, records, novel_cam, n_coarse=96, n_fine=32, chunk=1024,
                 guidance=None, nearby_k=None, use_masks=True):
    """Deterministic full-image render. Returns (image (H,W,3), depth (H,W)) numpy."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        geom = run_geometry(model, records, guidance=guidance, nearby_k=nearby_k)
        cams = [r.camera for r in records]
        images_t = source_images_tensor(records, dtype)
        H, W = novel_cam.height, novel_cam.width
        vs, us = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pixels = np.stack([us.reshape(-1), vs.reshape(-1)], axis=-1).astype(np.float64)
        colors, depths = [], []
        for lo in range(0, pixels.shape[0], chunk):
            px = pixels[lo:lo + chunk]
            rays, z = sample_rays(novel_cam, px, geom, cams, n_coarse, n_fine,
                                  train=False, dtype=dtype)
            out, _ = render_rays(model, rays, z, images_t, geom, cams, novel_cam,
                                 use_masks=use_masks)
            colors.append(out.c_hat)
            depths.append(out.d_hat)
        image = torch.cat(colors).reshape(H, W, 3).clamp(0, 1).cpu().numpy()
        depth = torch.cat(depths).reshape(H, W).cpu().numpy()
    if was_training:
        model.train()
    return image, depth
