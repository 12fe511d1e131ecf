import json

import numpy as np
import pytest
import torch

from geosynth import cameras
from geosynth.cameras import CameraModel, Ray


def identity_cam(width=80, height=60, focal=100.0, near=1.0, far=10.0, cx=40.0, cy=30.0):
    K = np.array([[focal, 0, cx], [0, focal, cy], [0, 0, 1.0]])
    return CameraModel(K, np.eye(3), np.zeros(3), near, far, width, height)


def random_cam(rng, width=64, height=48):
    # random rotation via QR, positive determinant
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    t = rng.normal(size=3) * 0.5
    f = rng.uniform(60, 140)
    K = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1.0]])
    return CameraModel(K, q.T, t, 0.5, 20.0, width, height)


def random_rig_cam(rng, width=64, height=48, near=1.0, far=12.0):
    """Random camera looking roughly at the world region around (0,0,4)."""
    pos = rng.normal(size=3) * np.array([1.5, 1.5, 0.8])
    target = np.array([0, 0, 4.0]) + rng.normal(size=3) * 0.3
    f = rng.uniform(60, 140)
    return cameras.look_at_camera(pos, target, [0, 1, 0], f, width, height, near, far)


class TestCameraModel:
    def test_invariants_enforced(self):
        with pytest.raises(cameras.CameraError):
            CameraModel(np.eye(3), np.eye(3) * 1.001, np.zeros(3), 1, 2, 8, 8)
        with pytest.raises(cameras.CameraError):
            CameraModel(np.eye(3), np.eye(3), np.zeros(3), 2, 1, 8, 8)
        bad_K = np.array([[100, 0, 4], [3, 100, 4], [0, 0, 1.0]])
        with pytest.raises(cameras.CameraError):
            CameraModel(bad_K, np.eye(3), np.zeros(3), 1, 2, 8, 8)

    def test_ray_direction_must_be_unit(self):
        with pytest.raises(cameras.CameraError):
            Ray(np.zeros(3), np.array([0, 0, 2.0]), (0, 0))


class TestProject:
    def test_optical_axis_point(self):
        cam = identity_cam()
        u, v, z = cameras.project(cam, [0, 0, 2.0])
        assert (u, v, z) == (40.0, 30.0, 2.0)

    def test_offset_point_closed_form(self):
        cam = identity_cam()
        u, v, z = cameras.project(cam, [0.2, 0, 2.0])
        assert u == pytest.approx(50.0)  # 40 + 100 * 0.1
        assert (v, z) == (30.0, 2.0)

    def test_behind_camera_raises(self):
        cam = identity_cam()
        with pytest.raises(cameras.BehindCameraError):
            cameras.project(cam, [0, 0, -1.0])

    def test_roundtrip_with_backproject(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cam = random_cam(rng)
            u = rng.uniform(0, cam.width - 1, size=50)
            v = rng.uniform(0, cam.height - 1, size=50)
            z = rng.uniform(cam.near, cam.far, size=50)
            X = cameras.backproject(cam, u, v, z)
            uv, z2, valid = cameras.project_batch(cam, X)
            assert valid.all()
            assert np.abs(uv[:, 0] - u).max() < 1e-9
            assert np.abs(uv[:, 1] - v).max() < 1e-9
            assert np.abs(z2 - z).max() < 1e-9


class TestBackproject:
    def test_inverse_of_project(self):
        cam = identity_cam()
        X = cameras.backproject(cam, 40.0, 30.0, 2.0)
        assert np.allclose(X, [0, 0, 2.0])

    def test_corner_lies_on_near_frustum(self):
        cam = identity_cam()
        X = cameras.backproject(cam, 0.0, 0.0, cam.near)
        u, v, z = cameras.project(cam, X)
        assert (u, v) == pytest.approx((0.0, 0.0))
        assert z == pytest.approx(cam.near)

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(cameras.CameraError):
            cameras.backproject(identity_cam(), 1.0, 1.0, 0.0)


class TestPlanarHomography:
    def test_identity_when_src_equals_ref(self):
        cam = identity_cam()
        for d in (1.0, 3.7, 9.0):
            H = cameras.planar_homography(cam, cam, d)
            assert np.allclose(H / H[2, 2], np.eye(3), atol=1e-12)

    def test_matches_backproject_project_oracle(self):
        # brute-force per-pixel oracle over random camera pairs and plane depths
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(50):
            ref = random_rig_cam(rng)
            src = random_rig_cam(rng)
            d = rng.uniform(2.0, ref.far)
            H = cameras.planar_homography(ref, src, d)
            u = rng.uniform(0, ref.width - 1, size=20)
            v = rng.uniform(0, ref.height - 1, size=20)
            X = cameras.backproject(ref, u, v, np.full_like(u, d))
            uv, _, valid = cameras.project_batch(src, X)
            p = np.stack([u, v, np.ones_like(u)], axis=-1) @ H.T
            hu, hv = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]
            if valid.any():
                assert np.abs(hu[valid] - uv[valid, 0]).max() < 1e-8
                assert np.abs(hv[valid] - uv[valid, 1]).max() < 1e-8
                checked += int(valid.sum())
        assert checked > 500

    def test_pure_rotation_independent_of_depth(self):
        rng = np.random.default_rng(2)
        ref = identity_cam()
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        src = CameraModel(ref.K, q.T, np.zeros(3), ref.near, ref.far, ref.width, ref.height)
        H1 = cameras.planar_homography(ref, src, 2.0)
        H2 = cameras.planar_homography(ref, src, 7.0)
        assert np.allclose(H1, H2, atol=1e-12)

    def test_rejects_nonpositive_depth(self):
        cam = identity_cam()
        with pytest.raises(cameras.CameraError):
            cameras.planar_homography(cam, cam, 0.0)


class TestWarpFeatures:
    def test_identity_warp_exact(self):
        torch.manual_seed(0)
        feat = torch.rand(6, 7, 3, dtype=torch.float64)
        out, valid = cameras.warp_features(feat, np.eye(3), (6, 7))
        assert valid.all()
        assert torch.equal(out, feat)

    def test_translation_on_ramp(self):
        H, W = 8, 10
        u = torch.arange(W, dtype=torch.float64).expand(H, W).unsqueeze(-1).clone()
        shift = np.array([[1, 0, 1.0], [0, 1, 0], [0, 0, 1]])
        out, valid = cameras.warp_features(u, shift, (H, W))
        # interior: f(u) = u + 1
        assert torch.allclose(out[:, : W - 1, 0], u[:, : W - 1, 0] + 1.0)
        assert valid[:, : W - 1].all()
        assert not valid[:, W - 1].any()

    def test_constant_image_preserved_on_valid(self):
        feat = torch.full((6, 6, 2), 0.75, dtype=torch.float64)
        H = np.array([[0.9, 0.02, 0.3], [-0.01, 1.1, 0.2], [0.0001, 0.0, 1.0]])
        out, valid = cameras.warp_features(feat, H, (6, 6))
        assert torch.allclose(out[valid], torch.tensor(0.75, dtype=torch.float64))

    def test_gradient_matches_finite_differences(self):
        from geosynth import substrate

        torch.manual_seed(1)
        gen = torch.Generator().manual_seed(1)
        H = np.array([[0.95, 0.05, 0.4], [-0.03, 1.02, 0.1], [0.001, -0.002, 1.0]])

        def f(t):
            out, _ = cameras.warp_features(t.reshape(5, 5, 2), H, (5, 5))
            return (out * probe).sum()

        probe = torch.rand(5, 5, 2, generator=gen, dtype=torch.float64)
        x = torch.rand(50, generator=gen, dtype=torch.float64)
        err = substrate.gradcheck_scalar_fn(f, x, n_coords=25, generator=gen)
        assert err < 1e-4


class TestTransformRay:
    def test_identity_transform(self):
        cam = identity_cam()
        ray = cameras.make_ray(cam, 13.0, 22.0)
        u, v, z, ok = cameras.transform_ray(ray, 3.0, cam)
        assert ok
        assert (u, v, z) == (pytest.approx(13.0), pytest.approx(22.0), pytest.approx(3.0))

    def test_point_on_src_optical_axis(self):
        novel = identity_cam()
        src = cameras.look_at_camera([1.0, 0.0, 0.0], [0.0, 0.0, 4.0], [0, 1, 0], 100.0, 80, 60, 1.0, 10.0)
        # the novel axis point at depth 4 lies on src's optical axis by construction
        ray = cameras.make_ray(novel, 40.0, 30.0)
        u, v, z, ok = cameras.transform_ray(ray, 4.0, src)
        assert ok
        assert u == pytest.approx(src.K[0, 2])
        assert v == pytest.approx(src.K[1, 2])

    def test_matches_project_backproject_composition(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            novel = random_cam(rng)
            src = random_cam(rng)
            u, v = rng.uniform(0, novel.width - 1), rng.uniform(0, novel.height - 1)
            depth = rng.uniform(novel.near, novel.far)
            ray = cameras.make_ray(novel, u, v)
            X = cameras.backproject(novel, u, v, depth)
            uv, z, valid = cameras.project_batch(src, X[None])
            su, sv, sz, ok = cameras.transform_ray(ray, depth, src)
            assert ok == bool(valid[0])
            if ok:
                assert abs(su - uv[0, 0]) < 1e-9
                assert abs(sv - uv[0, 1]) < 1e-9
                assert abs(sz - z[0]) < 1e-9


class TestAngleTheta:
    def test_collinear_zero(self):
        a = identity_cam()
        b = CameraModel(a.K, a.R, np.array([0, 0, 1.0]), 1, 10, 80, 60)  # center at z=-1 on axis
        x = np.array([0, 0, 5.0])
        assert cameras.angle_theta(x, a, b) == pytest.approx(0.0, abs=1e-12)

    def test_perpendicular_construction(self):
        a = identity_cam()  # center origin
        x = np.array([0, 0, 2.0])
        b = cameras.look_at_camera([2.0, 0, 2.0], [0, 0, 2.0], [0, 1, 0], 100, 80, 60, 1, 10)
        assert cameras.angle_theta(x, a, b) == pytest.approx(np.pi / 2)

    def test_symmetric_in_cameras(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a, b = random_cam(rng), random_cam(rng)
            x = rng.normal(size=3) * 3 + np.array([0, 0, 5.0])
            assert cameras.angle_theta(x, a, b) == pytest.approx(cameras.angle_theta(x, b, a))

    def test_coincident_center_rejected(self):
        a = identity_cam()
        with pytest.raises(cameras.CameraError):
            cameras.angle_theta(a.center, a, a)


def test_cameras_json_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    cams = [random_cam(rng) for _ in range(4)]
    path = tmp_path / "cameras.json"
    cameras.save_cameras(path, cams, ids=[3, 1, 0, 2])
    with open(path) as fh:
        raw = json.load(fh)
    assert {r["id"] for r in raw} == {0, 1, 2, 3}
    assert len(raw[0]["K"]) == 9 and len(raw[0]["R"]) == 9 and len(raw[0]["t"]) == 3
    ids, loaded = cameras.load_cameras(path)
    assert ids == [0, 1, 2, 3]
    orig = {i: c for i, c in zip([3, 1, 0, 2], cams)}
    for i, cam in zip(ids, loaded):
        assert np.allclose(cam.K, orig[i].K)
        assert np.allclose(cam.R, orig[i].R)
        assert np.allclose(cam.t, orig[i].t)
