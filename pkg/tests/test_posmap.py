import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gsavatar.articulation import Pose, Skeleton, SkinnedTemplate, forward_kinematics, lbs_points
from gsavatar.camera import Camera, look_at
from gsavatar.posmap import (AttributeLayout, CropSpec, HeadNotVisibleError, Side, average_canonical_face,
                             body_window, build_canonical_face, compose_crops, compute_face_crop, crop_intrinsics,
                             crop_point, densify_grid, head_region, head_window, map_camera, render_positional_map)
from gsavatar.puppet import build_puppet

from helpers import random_set


@pytest.fixture(scope="module")
def puppet():
    return build_puppet()


def box_template(half=0.5):
    v = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    idx = lambda x, y, z: 4 * x + 2 * y + z  # noqa: E731
    quads = [
        (idx(0, 0, 0), idx(0, 0, 1), idx(0, 1, 1), idx(0, 1, 0)), (idx(1, 0, 0), idx(1, 1, 0), idx(1, 1, 1), idx(1, 0, 1)),
        (idx(0, 0, 0), idx(1, 0, 0), idx(1, 0, 1), idx(0, 0, 1)), (idx(0, 1, 0), idx(0, 1, 1), idx(1, 1, 1), idx(1, 1, 0)),
        (idx(0, 0, 0), idx(0, 1, 0), idx(1, 1, 0), idx(1, 0, 0)), (idx(0, 0, 1), idx(1, 0, 1), idx(1, 1, 1), idx(0, 1, 1)),
    ]
    faces = np.array([t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))])
    sk = Skeleton(("root",), np.array([-1]), np.zeros((1, 3)))
    return SkinnedTemplate(sk, v, faces, np.ones((8, 1)), np.zeros((8, 3, 1)), np.zeros((1, 3, 1)))


class TestPositionalMap:
    @pytest.mark.parametrize("side,plane", [(Side.FRONT, 0.5), (Side.BACK, -0.5)])
    def test_box(self, side, plane):
        box = box_template()
        res = 44
        pm = render_positional_map(box, None, side, res)
        window = body_window(box)
        ppm = res / (window[1] - window[0])
        # pixel centers in canonical x/z
        cam = pm.camera
        rows, cols = np.mgrid[0:res, 0:res]
        pts = np.stack([cols + 0.5, rows + 0.5], -1)
        # invert the orthographic projection on the plane y = plane
        X = (pts[..., 0] - cam.cx) / cam.fx
        Y = (pts[..., 1] - cam.cy) / cam.fy
        world = (np.stack([X, Y, np.zeros_like(X)], -1) - cam.translation) @ cam.rotation
        inside = (np.abs(world[..., 0]) < 0.5 - 0.5 / ppm) & (np.abs(world[..., 2]) < 0.5 - 0.5 / ppm)
        outside = (np.abs(world[..., 0]) > 0.5 + 0.5 / ppm) | (np.abs(world[..., 2]) > 0.5 + 0.5 / ppm)
        assert np.all(pm.coverage[inside]) and not np.any(pm.coverage[outside])
        np.testing.assert_allclose(pm.covered_positions()[:, 1], plane, atol=1e-12)
        # uncovered pixels carry the sentinel
        assert np.all(pm.positions[~pm.coverage] == 0.0)

    @pytest.mark.parametrize("side", list(Side))
    def test_round_trip(self, puppet, side):
        pm = render_positional_map(puppet, None, side, 112)
        uv = pm.camera.project(pm.covered_positions())
        rows, cols = np.nonzero(pm.coverage)
        assert np.abs(uv[:, 0] - (cols + 0.5)).max() <= 0.5
        assert np.abs(uv[:, 1] - (rows + 0.5)).max() <= 0.5

    def test_mirror_symmetry(self, puppet):
        front = render_positional_map(puppet, None, Side.FRONT, 112)
        back = render_positional_map(puppet, None, Side.BACK, 112)
        np.testing.assert_array_equal(front.coverage, back.coverage[:, ::-1])
        assert front.n_covered > 1000

    def test_front_sees_nearest_surface(self, puppet):
        front = render_positional_map(puppet, None, Side.FRONT, 112)
        back = render_positional_map(puppet, None, Side.BACK, 112)
        f = front.positions[front.coverage][:, 1]
        b = back.positions[:, ::-1][front.coverage][:, 1]
        assert np.all(f >= b - 1e-12)

    def test_positions_on_surface(self, puppet):
        pm = render_positional_map(puppet, None, Side.FRONT, 64)
        tri = pm.triangles[pm.coverage]
        bary = pm.barycentrics[pm.coverage]
        np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-12)
        assert bary.min() >= -1e-9
        corners = puppet.vertices[puppet.faces[tri]]
        np.testing.assert_allclose(np.einsum("nk,nkc->nc", bary, corners), pm.covered_positions(), atol=1e-12)

    def test_posed_map(self, puppet):
        pose = Pose(np.random.default_rng(0).normal(0, 0.3, (12, 3)))
        pm = render_positional_map(puppet, pose, Side.FRONT, 64)
        R, t = forward_kinematics(puppet.skeleton, pose)
        ref = lbs_points(pm.covered_positions(), pm.weights[pm.coverage], R, t)
        np.testing.assert_allclose(pm.posed[pm.coverage], ref, atol=1e-14)
        assert np.all(pm.posed[~pm.coverage] == 0)

    def test_head_region(self, puppet):
        pm = render_positional_map(puppet, None, Side.FRONT, 32, head_window(puppet))
        h = head_region(pm, puppet)
        assert 0 < h.n_covered < pm.n_covered
        assert np.all(pm.weights[h.coverage][:, 3] > 0.5)

    def test_map_camera_depth_positive(self, puppet):
        for side in Side:
            cam = map_camera(side, body_window(puppet), 64)
            assert cam.to_camera(puppet.vertices)[:, 2].min() > 0


class TestCropIntrinsics:
    def test_identity(self):
        K = np.array([[100.0, 0, 31.5], [0, 110.0, 40.25], [0, 0, 1]])
        np.testing.assert_array_equal(crop_intrinsics(K, CropSpec(0, 0, 1.0, 64)), K)

    def test_matrix_form(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            fx, fy, cx, cy, xc, yc, s = rng.uniform(1, 200, 7)
            K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
            Kn = crop_intrinsics(K, CropSpec(xc, yc, s, 64))
            expected = np.array([[s * fx, 0, s * (cx - xc)], [0, s * fy, s * (cy - yc)], [0, 0, 1.0]])
            np.testing.assert_array_equal(Kn, expected)

    def test_projection_round_trip(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(200):
            K = np.array([[rng.uniform(50, 500), 0, rng.uniform(0, 128)], [0, rng.uniform(50, 500), rng.uniform(0, 128)],
                          [0, 0, 1.0]])
            crop = CropSpec(rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(0.5, 8), 64)
            X = rng.uniform(-1, 1, 3) + [0, 0, 3]
            p = K @ X
            uv = p[:2] / p[2]
            q = crop_intrinsics(K, crop) @ X
            worst = max(worst, np.abs(crop_point(uv, crop) - q[:2] / q[2]).max())
        assert worst < 1e-9

    def test_composition(self):
        rng = np.random.default_rng(2)
        K = np.array([[170.0, 0, 64], [0, 170.0, 64], [0, 0, 1]])
        for _ in range(100):
            a = CropSpec(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 4), 96)
            b = CropSpec(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 4), 32)
            twice = crop_intrinsics(crop_intrinsics(K, a), b)
            once = crop_intrinsics(K, compose_crops(a, b))
            assert np.abs(twice - once).max() < 1e-9
            uv = rng.uniform(0, 128, 2)
            assert np.abs(crop_point(crop_point(uv, a), b) - crop_point(uv, compose_crops(a, b))).max() < 1e-9

    def test_camera_variant(self):
        cam = look_at([0, -3, 1], [0, 0, 1], [0, 0, 1], 170, 160, 128, 96)
        crop = CropSpec(10.0, 20.0, 2.0, 64)
        c2 = crop_intrinsics(cam, crop)
        assert (c2.width, c2.height) == (64, 64)
        np.testing.assert_array_equal(c2.K, crop_intrinsics(cam.K, crop))
        np.testing.assert_array_equal(c2.rotation, cam.rotation)

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            CropSpec(0, 0, 0.0, 64)
        with pytest.raises(ValueError):
            CropSpec(0, 0, -1.0, 64)

    def test_spec_coerces_types(self):
        c = CropSpec(np.float64(1.5), np.int64(2), np.float32(0.5), np.int64(8))
        assert type(c.x) is float and type(c.size) is int and c.window == 16.0


def head_camera(puppet, pose, offset=(0.0, 0.0), width=128, f=170.0):
    """Perspective camera 3 m in front of the posed head, principal point at the image center."""
    _, J = puppet.posed(pose)
    head = J[3]
    eye = head + np.array([0.0, 3.0, 0.0])
    cam = look_at(eye, head, [0, 0, 1], f, f, width, width)
    return cam.with_intrinsics(f, f, width / 2 + offset[0], width / 2 + offset[1])


class TestFaceCrop:
    def test_centered(self, puppet):
        pose = Pose.identity(12)
        cam = head_camera(puppet, pose)
        crop = compute_face_crop(puppet, pose, cam, 512)
        np.testing.assert_allclose([crop.x + crop.window / 2, crop.y + crop.window / 2], [cam.cx, cam.cy], atol=1e-9)
        bone = np.linalg.norm(puppet.skeleton.rest_joints[3] - puppet.skeleton.rest_joints[2])
        assert crop.window == pytest.approx(2.5 * bone * 170 / 3.0, rel=1e-9)
        assert crop.size == 512

    def test_corner_clamped(self, puppet):
        pose = Pose.identity(12)
        # shift the principal point so the head projects near the top-left corner
        cam = head_camera(puppet, pose, offset=(-60, -62))
        crop = compute_face_crop(puppet, pose, cam, 64)
        assert crop.x == 0.0 and crop.y == 0.0
        assert crop.x + crop.window <= cam.width and crop.y + crop.window <= cam.height
        cam = head_camera(puppet, pose, offset=(60, 62))
        crop = compute_face_crop(puppet, pose, cam, 64)
        assert crop.x + crop.window == pytest.approx(cam.width) and crop.y + crop.window == pytest.approx(cam.height)

    def test_contains_head_vertices(self, puppet):
        rng = np.random.default_rng(3)
        head = puppet.weights[:, 3] > 0.5
        from gsavatar.data import SynthSpec, circle_cameras
        cams = circle_cameras(SynthSpec())
        for _ in range(100):
            pose = Pose(rng.normal(0, 0.25, (12, 3)), rng.normal(0, 0.05, 3))
            cam = cams[int(rng.integers(len(cams)))]
            crop = compute_face_crop(puppet, pose, cam, 64)
            V, _ = puppet.posed(pose)
            uv = cam.project(V[head])
            assert uv[:, 0].min() >= crop.x and uv[:, 0].max() <= crop.x + crop.window
            assert uv[:, 1].min() >= crop.y and uv[:, 1].max() <= crop.y + crop.window

    def test_head_behind(self, puppet):
        pose = Pose.identity(12)
        _, J = puppet.posed(pose)
        cam = look_at(J[3] + [0, 1.0, 0], J[3] + [0, 2.0, 0], [0, 0, 1], 170, 170, 128, 128)
        with pytest.raises(HeadNotVisibleError):
            compute_face_crop(puppet, pose, cam, 64)


def _batch_oracle(grids, covs):
    out = np.zeros_like(grids[0])
    for i in range(grids[0].shape[0]):
        for j in range(grids[0].shape[1]):
            vals = [g[i, j] for g, c in zip(grids, covs) if c[i, j]]
            if vals:
                out[i, j] = sum(vals) / len(vals)
    return out


class TestAverage:
    def test_single(self):
        g = np.random.default_rng(4).normal(size=(5, 6, 3))
        cov = np.ones((5, 6), bool)
        for streaming in (True, False):
            mean, c = average_canonical_face([(g, cov)], streaming)
            np.testing.assert_array_equal(mean, g)
            assert c.all()

    def test_constant(self):
        cov = np.ones((4, 4), bool)
        mean, _ = average_canonical_face(((np.full((4, 4, 2), 0.3), cov) for _ in range(9)))
        np.testing.assert_allclose(mean, 0.3, atol=1e-15)

    def test_streaming_equals_batch(self):
        rng = np.random.default_rng(5)
        grids = [rng.normal(size=(6, 7, 5)) * 10 for _ in range(7)]
        covs = [rng.uniform(size=(6, 7)) > 0.3 for _ in range(7)]
        a, ca = average_canonical_face(zip(grids, covs), streaming=True)
        b, cb = average_canonical_face(list(zip(grids, covs)), streaming=False)
        np.testing.assert_array_equal(ca, cb)
        assert np.abs(a - b).max() < 1e-12
        assert np.abs(a - _batch_oracle(grids, covs)).max() < 1e-12
        assert np.all(a[~ca] == 0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        grids = [rng.normal(size=(5, 5, 4)) for _ in range(8)]
        covs = [rng.uniform(size=(5, 5)) > 0.2 for _ in range(8)]
        a, _ = average_canonical_face(zip(grids, covs))
        for _ in range(5):
            perm = rng.permutation(8)
            b, _ = average_canonical_face((grids[k], covs[k]) for k in perm)
            assert np.abs(a - b).max() < 1e-12

    def test_empty(self):
        for streaming in (True, False):
            with pytest.raises(ValueError):
                average_canonical_face(iter([]), streaming)


class TestDensify:
    def test_factor_one(self):
        g = np.random.default_rng(7).normal(size=(4, 5, 3))
        d, c = densify_grid(g, 1)
        np.testing.assert_array_equal(d, g)
        assert c.all()

    @pytest.mark.parametrize("factor", [2, 3, 4])
    def test_affine(self, factor):
        H, W = 5, 7
        i, j = np.mgrid[0:H, 0:W].astype(float)
        g = np.stack([0.3 * i - 1.7 * j + 0.25, -2.0 * i + 0.5 * j - 3.0], -1)
        d, c = densify_grid(g, factor)
        I, J = np.mgrid[0:factor * H, 0:factor * W] / factor
        ref = np.stack([0.3 * I - 1.7 * J + 0.25, -2.0 * I + 0.5 * J - 3.0], -1)
        assert np.abs(d[c] - ref[c]).max() < 1e-12
        # everything inside the source hull is covered
        assert c.sum() == (factor * (H - 1) + 1) * (factor * (W - 1) + 1)

    def test_midpoints(self):
        g = np.random.default_rng(8).normal(size=(4, 4, 2))
        d, _ = densify_grid(g, 2)
        for i in range(4):
            for j in range(3):
                np.testing.assert_allclose(d[2 * i, 2 * j + 1], 0.5 * (g[i, j] + g[i, j + 1]), atol=1e-15)
                np.testing.assert_allclose(d[2 * j + 1, 2 * i], 0.5 * (g[j, i] + g[j + 1, i]), atol=1e-15)
        for i in range(3):
            for j in range(3):
                np.testing.assert_allclose(d[2 * i + 1, 2 * j + 1], g[i:i + 2, j:j + 2].mean(axis=(0, 1)), atol=1e-15)

    def test_source_nodes_bit_exact(self):
        rng = np.random.default_rng(9)
        g = rng.normal(size=(6, 5, 3)) * 1e3
        cov = rng.uniform(size=(6, 5)) > 0.3
        for factor in (2, 3):
            d, c = densify_grid(np.where(cov[..., None], g, 0), factor, cov)
            src = d[::factor, ::factor]
            assert src.tobytes() == np.where(cov[..., None], g, 0).tobytes()
            np.testing.assert_array_equal(c[::factor, ::factor], cov)

    def test_uncovered_support(self):
        g = np.ones((3, 3, 1))
        cov = np.ones((3, 3), bool)
        cov[1, 1] = False
        d, c = densify_grid(g, 2, cov)
        # every node whose bilinear support touches (1, 1) is dropped
        assert not c[1:4, 1:4].any()
        assert c[0, 0] and c[0, 1] and np.all(d[~c] == 0)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            densify_grid(np.zeros((2, 2, 1)), 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3)), st.integers(1, 4))
def test_densify_convex(grid, factor):
    d, c = densify_grid(grid, factor)
    lo, hi = grid.min(axis=(0, 1)), grid.max(axis=(0, 1))
    tol = 1e-9 * (1 + np.abs(grid).max())
    assert np.all(d[c] >= lo - tol) and np.all(d[c] <= hi + tol)


class TestCanonicalFace:
    def test_identity_pose_reproduces_positions(self, puppet):
        from gsavatar.avatar import Avatar, AvatarSpec
        spec = AvatarSpec(body_resolution=48, face_resolution=10)
        body, _, _ = Avatar.canonical_body(puppet, spec)
        model = build_canonical_face(puppet, [Pose.identity(12)], body, 10, 2)
        layout = AttributeLayout(4)
        for side in Side:
            grid, cov = model.grids[side]
            pm = head_region(render_positional_map(puppet, None, side, 10, head_window(puppet)), puppet)
            np.testing.assert_array_equal(cov, pm.coverage)
            np.testing.assert_allclose(grid[cov][:, layout.slices["means"]], pm.covered_positions(), atol=1e-12)
            dense, dcov = model.dense[side]
            np.testing.assert_array_equal(dense[::2, ::2][cov][:, :3], grid[cov][:, :3])
            np.testing.assert_allclose(dense[::2, ::2][cov][:, 3:6], grid[cov][:, 3:6] - np.log(2), atol=1e-14)
        assert len(model.gaussians()) == sum(c.sum() for c in model.coverages())

    def test_layout_round_trip(self):
        gs = random_set(np.random.default_rng(10), 7)
        lay = AttributeLayout(4)
        back = lay.unpack(lay.pack(gs))
        for a in ("means", "log_scales", "quats", "opacity_logits", "sh"):
            np.testing.assert_array_equal(getattr(back, a), getattr(gs, a))

    def test_needs_frames(self, puppet):
        with pytest.raises(ValueError):
            build_canonical_face(puppet, [], random_set(np.random.default_rng(0), 3), 10, 2)
