import math

import numpy as np
import pytest
import torch

from geosynth import config as configmod
from geosynth import pipeline, train
from geosynth.train import (AdamOptimizer, LossReport, TrainConfig, Trainer, cosine_lr,
                            loss_cascade_supervised, loss_color, loss_ray_depth, smooth_l1,
                            total_loss)


class TestLossColor:
    def test_identical_zero(self):
        x = torch.rand(8, 3, dtype=torch.float64)
        assert loss_color(x, x).item() == 0.0

    def test_single_ray_closed_form(self):
        a = torch.tensor([[0.1, 0.0, 0.0]], dtype=torch.float64)
        b = torch.zeros(1, 3, dtype=torch.float64)
        assert loss_color(a, b).item() == pytest.approx(0.01, abs=1e-15)

    def test_matches_scalar_loop(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.rand(16, 3, generator=gen, dtype=torch.float64)
        b = torch.rand(16, 3, generator=gen, dtype=torch.float64)
        acc = 0.0
        for r in range(16):
            for c in range(3):
                acc += (float(a[r, c]) - float(b[r, c])) ** 2
        assert loss_color(a, b).item() == pytest.approx(acc / 16, abs=1e-12)


class TestSmoothL1:
    def test_quadratic_branch(self):
        assert smooth_l1(torch.tensor(0.5, dtype=torch.float64)).item() == 0.125

    def test_linear_branch(self):
        assert smooth_l1(torch.tensor(2.0, dtype=torch.float64)).item() == 1.5

    def test_c1_at_transition(self):
        f = lambda x: smooth_l1(torch.tensor(x, dtype=torch.float64)).item()
        assert f(1.0) == pytest.approx(0.5, abs=1e-12)
        h = 1e-7
        left = (f(1.0) - f(1.0 - h)) / h
        right = (f(1.0 + h) - f(1.0)) / h
        assert left == pytest.approx(1.0, abs=1e-6)
        assert right == pytest.approx(1.0, abs=1e-6)


class TestRayDepthLoss:
    def test_empty_set_zero(self):
        val, n = loss_ray_depth(torch.ones(4, dtype=torch.float64),
                                torch.zeros(4, dtype=torch.float64))
        assert val.item() == 0.0 and n == 0

    def test_residual_half(self):
        d = torch.full((6,), 3.5, dtype=torch.float64)
        gt = torch.full((6,), 3.0, dtype=torch.float64)
        val, n = loss_ray_depth(d, gt)
        assert val.item() == pytest.approx(0.125, abs=1e-12)
        assert n == 6


class TestCascadeSupervised:
    def _geom(self, depth_val, shape=(8, 8)):
        from geosynth.geometry import GeometryOutput

        depth = {l: torch.full((2, shape[0] >> l, shape[1] >> l), depth_val,
                               dtype=torch.float64) for l in (0, 1, 2)}
        return GeometryOutput(depth, {}, {})

    def test_perfect_depths_zero(self):
        geom = self._geom(4.0)
        gt = np.full((2, 8, 8), 4.0, dtype=np.float32)
        out = loss_cascade_supervised(geom, gt)
        assert all(out[l].item() == 0.0 for l in (0, 1, 2))

    def test_level_weights(self):
        geom = self._geom(4.5)
        gt = np.full((2, 8, 8), 4.0, dtype=np.float32)
        out = loss_cascade_supervised(geom, gt)
        assert out[0].item() == pytest.approx(0.125)
        assert out[1].item() == pytest.approx(0.5 * 0.125)
        assert out[2].item() == pytest.approx(0.25 * 0.125)

    def test_invalid_pixels_excluded(self):
        geom = self._geom(4.5)
        gt = np.zeros((2, 8, 8), dtype=np.float32)
        gt[:, :4] = 4.0
        out = loss_cascade_supervised(geom, gt)
        assert out[0].item() == pytest.approx(0.125)


class TestTotalLoss:
    def test_lambda_values(self):
        zero3 = (torch.tensor(0.1), torch.tensor(0.2), torch.tensor(0.3))
        t = total_loss(torch.tensor(1.0), torch.tensor(0.5), zero3, 1.0)
        assert t.item() == pytest.approx(1.0 + 0.05 + 0.6)
        t = total_loss(torch.tensor(1.0), torch.tensor(0.5), zero3, 0.1)
        assert t.item() == pytest.approx(1.0 + 0.05 + 0.06)

    def test_finetune_color_only(self):
        zero3 = (torch.tensor(9.0),) * 3
        t = total_loss(torch.tensor(1.25), torch.tensor(4.0), zero3, 1.0, finetune=True)
        assert t.item() == 1.25

    def test_bad_lambda_rejected(self):
        with pytest.raises(train.TrainError):
            total_loss(torch.tensor(1.0), torch.tensor(0.0), (torch.tensor(0.0),) * 3, 0.5)

    def test_report_identity(self):
        rep = LossReport(1.0, 0.5, (0.1, 0.2, 0.3), 1.0, 1.0 + 0.05 + 0.6, 8, 8, 0)
        rep.check_identity()
        bad = LossReport(1.0, 0.5, (0.1, 0.2, 0.3), 1.0, 2.0, 8, 8, 0)
        with pytest.raises(train.TrainError):
            bad.check_identity()


class TestAdam:
    def test_first_step_matches_scalar_reference(self):
        # ten-line scalar Adam as the oracle
        p = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
        opt = AdamOptimizer([("p", p)])
        g = 0.3
        p.grad = torch.tensor([g], dtype=torch.float64)
        opt.step(lr=1e-2)

        m = (1 - 0.9) * g
        v = (1 - 0.999) * g * g
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        expect = 0.5 - 1e-2 * mhat / (math.sqrt(vhat) + 1e-8)
        assert p.item() == pytest.approx(expect, abs=1e-12)

    def test_multi_step_matches_scalar_reference(self):
        p = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
        opt = AdamOptimizer([("p", p)])
        ref = 0.5
        m = v = 0.0
        for t, g in enumerate([0.3, -0.1, 0.25, 0.7], start=1):
            p.grad = torch.tensor([g], dtype=torch.float64)
            opt.step(lr=1e-2)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p.item() == pytest.approx(ref, abs=1e-12)

    def test_zero_grad_fixed_point(self):
        p = torch.tensor([1.0], requires_grad=True)
        opt = AdamOptimizer([("p", p)])
        p.grad = torch.zeros(1)
        opt.step(lr=1e-2)
        assert p.item() == 1.0

    def test_nonfinite_grad_skipped_and_counted(self):
        p = torch.tensor([1.0], requires_grad=True)
        opt = AdamOptimizer([("p", p)])
        p.grad = torch.tensor([float("nan")])
        assert not opt.step(lr=1e-2)
        assert opt.skipped == 1
        assert p.item() == 1.0
        assert opt.step_count == 0

    def test_moment_shapes_and_step_monotonicity(self):
        p = torch.zeros(3, 4, requires_grad=True)
        opt = AdamOptimizer([("p", p)])
        assert opt.m["p"].shape == p.shape and opt.v["p"].shape == p.shape
        for i in range(3):
            p.grad = torch.ones(3, 4)
            opt.step(lr=1e-3)
            assert opt.step_count == i + 1


class TestCosineLR:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 5e-4) == pytest.approx(5e-4, abs=1e-15)
        assert cosine_lr(100, 100, 5e-4) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(50, 100, 5e-4) == pytest.approx(2.5e-4, abs=1e-15)

    def test_out_of_range_rejected(self):
        with pytest.raises(train.TrainError):
            cosine_lr(101, 100, 1e-3)


class TestTextureVariance:
    def test_constant_patch_zero(self):
        img = np.full((9, 9, 3), 0.5, dtype=np.float64)
        v = train.texture_variance_map(img)
        assert v.max() == pytest.approx(0.0, abs=1e-15)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        img = rng.random((8, 10, 3))
        v = train.texture_variance_map(img)
        for (y, x) in [(0, 0), (3, 4), (7, 9), (2, 8)]:
            y0, y1 = max(0, y - 2), min(8, y + 3)
            x0, x1 = max(0, x - 2), min(10, x + 3)
            patch = img[y0:y1, x0:x1]
            expect = np.mean([patch[..., c].var() for c in range(3)])
            assert v[y, x] == pytest.approx(expect, rel=1e-10)


class TestGateMonotonicity:
    def test_eps_monotone(self):
        # raising eps_t or lowering eps_c never gates more pixels in
        rng = np.random.default_rng(2)
        diff = torch.tensor(rng.random(500))
        var5 = torch.tensor(rng.random(500) * 1e-3)

        def gated(eps_c, eps_t):
            return int(((diff < eps_c) & (var5 > eps_t)).sum())

        assert gated(0.1, 2e-4) >= gated(0.1, 4e-4)
        assert gated(0.1, 2e-4) >= gated(0.05, 2e-4)


def make_dataset(tmp_path, name="d", kind="plane_sphere", n_views=8, width=32, height=32,
                 no_depth=False):
    from geosynth.scenes import generate_dataset

    cfg = configmod.load_config()
    cfg["scene"]["kind"] = kind
    cfg["scene"]["width"] = width
    cfg["scene"]["height"] = height
    cfg["scene"]["n_views"] = n_views
    scene, rig = configmod.build_scene(cfg)
    return generate_dataset(scene, rig, n_views, tmp_path / name, no_depth=no_depth)


class TestTrainerSmoke:
    def test_loss_decreases_and_curve_schema(self, tmp_path):
        # spec smoke oracle: final color loss under its early moving average
        out = make_dataset(tmp_path, n_views=8, width=32, height=32)
        scene = train.SceneData(out)
        cfg = TrainConfig(iterations=60, rays_per_batch=64, v_train=5, n_coarse=24,
                          n_fine=8, seed=0, scale_aug=False, planes=(8, 8, 8),
                          checkpoint_every=0, chunk_rays=64, log_every=0)
        model = pipeline.Model(planes=(8, 8, 8)).initialize(0)
        trainer = Trainer(model, [scene], cfg, tmp_path / "run")
        curve_path = trainer.run()
        with open(curve_path) as fh:
            header = fh.readline().strip()
        assert header == "iter,l_c,l_d,l_D0,l_D1,l_D2,total,lr"
        import csv

        with open(curve_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 60
        l_c = [float(r["l_c"]) for r in rows]
        early = np.mean(l_c[5:15])
        late = np.mean(l_c[-10:])
        assert late < early
        assert (tmp_path / "run" / "train_final.bin").exists()

    def test_determinism_same_seed(self, tmp_path):
        out = make_dataset(tmp_path, n_views=6, width=16, height=16)

        def run(tag):
            scene = train.SceneData(out)
            cfg = TrainConfig(iterations=5, rays_per_batch=16, v_train=5, n_coarse=8,
                              n_fine=8, seed=3, scale_aug=False, planes=(8, 8, 8),
                              checkpoint_every=0, chunk_rays=16, log_every=0)
            model = pipeline.Model(planes=(8, 8, 8)).initialize(3)
            trainer = Trainer(model, [scene], cfg, tmp_path / tag)
            trainer.run()
            return trainer.curve

        assert run("a") == run("b")

    def test_selfsup_path_runs_without_depth(self, tmp_path):
        out = make_dataset(tmp_path, name="nd", n_views=6, width=16, height=16, no_depth=True)
        scene = train.SceneData(out)
        assert not scene.has_gt_depth
        cfg = TrainConfig(iterations=3, rays_per_batch=16, v_train=5, n_coarse=8, n_fine=8,
                          seed=1, scale_aug=False, planes=(8, 8, 8), checkpoint_every=0,
                          chunk_rays=16, log_every=0)
        model = pipeline.Model(planes=(8, 8, 8)).initialize(1)
        trainer = Trainer(model, [scene], cfg, tmp_path / "run_nd")
        rep, _ = trainer._train_iteration(0)
        assert rep.lam == 0.1
        assert rep.n_depth_rays == 0

    def test_finetune_mode_color_only(self, tmp_path):
        out = make_dataset(tmp_path, name="ft", n_views=6, width=16, height=16)
        scene = train.SceneData(out)
        cfg = TrainConfig(iterations=3, rays_per_batch=16, v_train=5, n_coarse=8, n_fine=8,
                          seed=1, mode="finetune", lr=2e-4, planes=(8, 8, 8),
                          checkpoint_every=0, chunk_rays=16, log_every=0)
        assert not cfg.scale_aug
        model = pipeline.Model(planes=(8, 8, 8)).initialize(1)
        trainer = Trainer(model, [scene], cfg, tmp_path / "run_ft")
        rep, lr = trainer._train_iteration(0)
        assert rep.total == rep.l_c
        assert lr == pytest.approx(2e-4, abs=1e-12)

    def test_rgbd_guidance_threaded(self, tmp_path):
        out = make_dataset(tmp_path, name="rgbd", n_views=6, width=16, height=16)
        scene = train.SceneData(out)
        cfg = TrainConfig(iterations=2, rays_per_batch=16, v_train=5, n_coarse=8, n_fine=8,
                          seed=2, rgbd=True, scale_aug=False, planes=(8, 8, 8),
                          checkpoint_every=0, chunk_rays=16, log_every=0)
        model = pipeline.Model(planes=(8, 8, 8), rgbd=True).initialize(2)
        trainer = Trainer(model, [scene], cfg, tmp_path / "run_rgbd")
        rep, _ = trainer._train_iteration(0)
        assert math.isfinite(rep.total)


def test_corrupt_guidance_quantizes_and_drops():
    rng = np.random.default_rng(0)
    depth = np.where(rng.random((16, 16)) < 0.8,
                     rng.uniform(2.0, 6.0, (16, 16)), 0.0).astype(np.float32)
    planes = np.linspace(2.0, 6.0, 9)
    from geosynth.train import corrupt_guidance

    g = corrupt_guidance(depth, None, planes, drop=0.25, rng=np.random.default_rng(1))
    assert g.shape == (4, 4)
    vals = g[g > 0]
    step = 0.5
    assert np.allclose((vals - 2.0) / step, np.round((vals - 2.0) / step), atol=1e-6)
