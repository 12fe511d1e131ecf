"""Finite-difference verification suite over every differentiable path.

Micro-instances (8x8 images, V=3, N=8, 8 planes per level) in double
precision with h = 1e-5. Composite paths are piecewise smooth, so those
checks compare only at locally smooth coordinates (consistency filter).
"""

import numpy as np
import torch

from . import geometry, pipeline, sampling, substrate
from .cameras import warp_features
from .render import RendererNet
from .scenes import PlanePrimitive, RigSpec, SceneSpec, SpherePrimitive, Texture, ViewRecord, \
    raytrace_reference, rig_cameras

TOLERANCE = 1e-3
MICRO_PLANES = (8, 8, 8)


def _micro_views(n=3, width=8, height=8):
    scene = SceneSpec([
        PlanePrimitive((0, 0, 4.6), (1, 0, 0), (0, 1, 0), 8.0, 8.0,
                       Texture("sine", (0.9, 0.8, 0.7), (1.2, 1.0))),
        SpherePrimitive((0.2, -0.1, 3.4), 0.6, Texture("sine", (0.6, 0.85, 0.9), (1.0, 1.3))),
    ])
    rig = RigSpec(width=width, height=height, near=2.0, far=7.0, span_deg=35.0)
    views = []
    for i, cam in enumerate(rig_cameras(rig, n)):
        image, depth = raytrace_reference(scene, cam)
        views.append(ViewRecord(i, cam, image, depth, True))
    return views


def check_substrate(gen):
    mlp = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.ELU(),
                              torch.nn.Linear(8, 8), torch.nn.ELU(),
                              torch.nn.Linear(8, 1)).double()
    substrate.init_parameters(mlp, gen)
    for m in mlp.modules():
        if isinstance(m, torch.nn.Linear):
            with torch.no_grad():
                m.bias.uniform_(-0.1, 0.1, generator=gen)
    x = torch.rand(5, 4, generator=gen, dtype=torch.float64) * 2 - 1
    report = substrate.gradcheck_parameters(lambda: (mlp(x) ** 2).mean(), mlp,
                                            coords_per_param=8, generator=gen)
    return max(report.values())


def check_warp(gen):
    H = np.array([[0.95, 0.05, 0.4], [-0.03, 1.02, 0.1], [0.001, -0.002, 1.0]])
    probe = torch.rand(8, 8, 2, generator=gen, dtype=torch.float64)

    def f(t):
        out, _ = warp_features(t.reshape(8, 8, 2), H, (8, 8))
        return (out * probe).sum()

    x = torch.rand(128, generator=gen, dtype=torch.float64)
    return substrate.gradcheck_scalar_fn(f, x, n_coords=24, generator=gen)


def check_fpn(gen):
    net = geometry.FeaturePyramidNet().double()
    substrate.init_parameters(net, gen)
    x = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    report = substrate.gradcheck_parameters(lambda: net(x)[0].sum(), net,
                                            coords_per_param=3, generator=gen)
    return max(report.values())


def check_hourglass(gen):
    hg = geometry.Hourglass3D().double()
    substrate.init_parameters(hg, gen)
    hyp = geometry.build_hypotheses(2, 2.0, 6.0, 8, out_hw=(8, 8), dtype=torch.float64)
    vol = torch.rand(2, 8, 8, 8, 8, generator=gen, dtype=torch.float64)

    def loss():
        logits, feat = hg(vol)
        prob = torch.softmax(logits, dim=1)
        return (prob[0] * hyp.depths).sum(0).mean() + 0.1 * feat.mean()

    report, kept, _ = substrate.gradcheck_parameters_filtered(loss, hg, coords_per_param=3,
                                                              generator=gen)
    assert kept >= 30
    return max(report.values())


def check_interpolation(gen):
    views = _micro_views()
    cams = [v.camera for v in views]
    net = geometry.GeometryNet(planes=MICRO_PLANES).double()
    substrate.init_parameters(net, gen)
    with torch.no_grad():
        geom = geometry.geometry_reason(views, net, allow_small_v=True)
    rays = sampling.make_ray_batch(cams[1], [[3.2, 4.1], [5.5, 2.5]], dtype=torch.float64)
    z = torch.linspace(2.4, 6.5, 8, dtype=torch.float64).expand(2, 8)
    images_t = pipeline.source_images_tensor(views, torch.float64)
    probe = torch.rand(2, 8, 3, 3, 8, generator=gen, dtype=torch.float64)
    base = geom.feat[1].clone()

    def f(t):
        geom.feat[1] = t.reshape(base.shape)
        batch = sampling.interpolate_features(rays, z, images_t, geom, cams, cams[1])
        return (batch.phi * probe).sum()

    return substrate.gradcheck_scalar_fn(f, base.reshape(-1), n_coords=24, generator=gen)


def check_renderer(gen):
    net = RendererNet().double()
    substrate.init_parameters(net, gen)
    R, N, V = 2, 8, 3

    def rnd(*shape):
        return torch.rand(*shape, generator=gen, dtype=torch.float64)

    from .sampling import SampleBatch
    z = torch.linspace(2.0, 6.0, N, dtype=torch.float64).expand(R, N).clone()
    mask = (rnd(R, N, V) > 0.3).double()
    mask[..., 0] = 1.0
    batch = SampleBatch(rnd(R, N, 3), z, rnd(R, N, V, 8), rnd(R, N, V, 3, 8),
                        rnd(R, N, V, 3), mask, mask.clone(), rnd(R, N, V) * 3.0)
    target = rnd(R, 3)

    def loss():
        out = net(batch)
        return ((out.c_hat - target) ** 2).sum(dim=1).mean() + out.d_hat.mean()

    report = substrate.gradcheck_parameters(loss, net, coords_per_param=3, generator=gen)
    return max(report.values())


def check_full_pipeline(gen):
    """Scalar color loss against every parameter group on a 2-ray micro-instance."""
    views = _micro_views()
    cams = [v.camera for v in views]
    model = pipeline.Model(planes=MICRO_PLANES).double()
    substrate.init_parameters(model, gen)
    images_t = pipeline.source_images_tensor(views, torch.float64)
    target = torch.rand(2, 3, generator=gen, dtype=torch.float64)
    px = np.array([[2.2, 3.1], [5.0, 4.4]])

    def loss():
        geom = pipeline.run_geometry(model, views, allow_small_v=True)
        rays, z = pipeline.sample_rays(cams[1], px, geom, cams, 8, 0, train=False,
                                       dtype=torch.float64)
        out, _ = pipeline.render_rays(model, rays, z, images_t, geom, cams, cams[1])
        return ((out.c_hat - target) ** 2).sum(dim=1).mean()

    report, kept, skipped = substrate.gradcheck_parameters_filtered(
        loss, model, coords_per_param=2, generator=gen)
    assert kept >= len(report)  # at least one smooth coordinate per parameter on average
    return max(report.values())


CHECKS = {
    "substrate": (check_substrate, 0),
    "camgeom_warp": (check_warp, 1),
    "geomreason_fpn": (check_fpn, 2),
    "geomreason_hourglass": (check_hourglass, 3),
    "raysampler_interp": (check_interpolation, 4),
    "renderer": (check_renderer, 5),
    "full_pipeline": (check_full_pipeline, 7),
}


def run_gradcheck(names=None, verbose=True):
    """Run the suite; returns {check_name: max relative error}."""
    results = {}
    for name, (fn, seed) in CHECKS.items():
        if names and name not in names:
            continue
        gen = torch.Generator().manual_seed(seed)
        err = fn(gen)
        results[name] = err
        if verbose:
            status = "ok" if err < TOLERANCE else "FAIL"
            print(f"{name:24s} max rel err {err:.3e}  [{status}]")
    return results
