import numpy as np
import pytest

from anchorsplat.geometry import InvalidInputError, View
from anchorsplat.losses import (
    CrossLossResult,
    LossWeights,
    curvature_mask,
    grazing_mask,
    loss_cross,
    loss_plane,
    loss_rgb,
    normal_consistency_mask,
    normal_from_depth,
    pixel_planes,
    plane_homography,
    plane_to_neighbor_frame,
    relative_pose,
    ssim,
    total_loss,
)


def make_view(w=32, h=32, f=40.0, R=None, t=None):
    return View(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                R=np.eye(3) if R is None else R,
                t=np.zeros(3) if t is None else t, width=w, height=h)


def plane_maps(view, n_world, d_world):
    """Analytic depth/normal maps of the plane {n^T X + d = 0} (world frame)."""
    n_c = view.R @ np.asarray(n_world, dtype=np.float64)
    d_c = d_world - n_c @ view.t
    rays = view.pixel_rays()
    denom = np.sum(rays * n_c, axis=-1)
    depth = -d_c / denom
    normal = np.broadcast_to(n_c, rays.shape).copy()
    # flip camera-facing
    P = depth[..., None] * rays
    flip = np.where(np.sum(normal * P, axis=-1) > 0, -1.0, 1.0)
    return depth, normal * flip[..., None]


def smooth_field(rng, h, w, scale=1.0):
    """Low-frequency random field for FD-stable masks."""
    coarse = rng.standard_normal((4, 4))
    y = np.linspace(0, 3, h)
    x = np.linspace(0, 3, w)
    from scipy.interpolate import RegularGridInterpolator
    interp = RegularGridInterpolator((np.arange(4), np.arange(4)), coarse)
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return scale * interp(np.stack([yy, xx], axis=-1))


class TestLossRgb:
    def test_identical_images(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        val, grad = loss_rgb(img, img)
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1_constant_difference(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 0.5)
        val, _ = loss_rgb(a, b, lam_ssim=0.0)
        assert val == pytest.approx(0.5)

    def test_ssim_bounds_and_identity(self):
        rng = np.random.default_rng(1)
        img = rng.random((16, 16, 3))
        v, _ = ssim(img, img)
        assert v == pytest.approx(1.0, abs=1e-12)
        v2, _ = ssim(img, rng.random((16, 16, 3)))
        assert -1.0 <= v2 <= 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        img = rng.random((10, 10, 3))
        gt = rng.random((10, 10, 3))
        val, grad = loss_rgb(img, gt, lam_ssim=0.2)
        h = 1e-6
        for _ in range(30):
            i, j, c = rng.integers(10), rng.integers(10), rng.integers(3)
            p = img.copy(); p[i, j, c] += h
            m = img.copy(); m[i, j, c] -= h
            num = (loss_rgb(p, gt, 0.2)[0] - loss_rgb(m, gt, 0.2)[0]) / (2 * h)
            assert abs(num - grad[i, j, c]) < 1e-5 * max(1.0, abs(num))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            loss_rgb(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


class TestNormalFromDepth:
    def test_fronto_parallel_plane(self):
        view = make_view()
        depth = np.full((32, 32), 5.0)
        nd, valid = normal_from_depth(depth, view)
        np.testing.assert_allclose(nd[:-1, :-1], np.broadcast_to([0, 0, -1.0], (31, 31, 3)),
                                   atol=1e-12)
        assert valid[:-1, :-1].all()

    def test_tilted_plane_analytic(self):
        view = make_view(f=60.0)
        # camera-frame plane z = 5 + 0.5 x  ->  world plane (identity pose)
        n = np.array([-0.5, 0.0, 1.0])
        depth, _ = plane_maps(view, n / np.linalg.norm(n),
                              -5.0 / np.linalg.norm(n))
        nd, valid = normal_from_depth(depth, view, depth_jump_rel=0.5)
        expected = np.array([0.5, 0.0, -1.0]) / np.linalg.norm([0.5, 0, 1])
        sel = valid
        err = np.abs(nd[sel] - expected).max()
        assert err < 1e-3

    def test_zero_depth_hole_neighbors_invalid(self):
        view = make_view()
        depth = np.full((32, 32), 5.0)
        depth[10, 10] = 0.0
        nd, valid = normal_from_depth(depth, view)
        assert not valid[10, 10]
        assert not valid[10, 9]   # +x leg hits the hole
        assert not valid[9, 10]   # +y leg hits the hole
        assert np.all(nd[10, 10] == 0)

    def test_depth_jump_guard(self):
        view = make_view()
        depth = np.full((32, 32), 5.0)
        depth[:, 16:] = 8.0  # silhouette-style jump
        nd, valid = normal_from_depth(depth, view)
        assert not valid[5, 15]  # leg crosses the jump
        assert valid[5, 5]


class TestLossPlane:
    def test_consistent_plane_is_zero(self):
        view = make_view()
        n = np.array([0.2, -0.1, 1.0])
        n /= np.linalg.norm(n)
        depth, normal = plane_maps(view, n, -4.0)
        val, gd, gn = loss_plane(depth, normal, view)
        assert val < 1e-10

    def test_antipodal_normals(self):
        view = make_view()
        depth = np.full((32, 32), 5.0)  # N_d = (0,0,-1)
        normal = np.broadcast_to([0.0, 0.0, 1.0], (32, 32, 3)).copy()
        val, _, _ = loss_plane(depth, normal, view)
        assert val == pytest.approx(2.0, abs=1e-12)

    def test_matches_per_pixel_mean(self):
        rng = np.random.default_rng(3)
        view = make_view(w=16, h=16)
        depth = 5.0 + 0.02 * smooth_field(rng, 16, 16)
        normal = np.stack([0.05 * smooth_field(rng, 16, 16),
                           0.05 * smooth_field(rng, 16, 16),
                           -np.ones((16, 16))], axis=-1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
        val, _, _ = loss_plane(depth, normal, view)
        nd, ndv = normal_from_depth(depth, view)
        mask = (ndv & normal_consistency_mask(normal)
                & grazing_mask(normal, view) & curvature_mask(depth, view))
        expect = np.sum(np.abs(nd - normal)[mask]) / np.count_nonzero(mask)
        assert val == pytest.approx(expect, rel=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        view = make_view(w=12, h=12, f=20.0)
        depth = 5.0 + 0.05 * smooth_field(rng, 12, 12)
        normal = np.stack([0.08 * smooth_field(rng, 12, 12),
                           0.08 * smooth_field(rng, 12, 12),
                           -np.ones((12, 12))], axis=-1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
        val, gd, gn = loss_plane(depth, normal, view)
        h = 1e-6
        for _ in range(25):
            i, j = rng.integers(12), rng.integers(12)
            p = depth.copy(); p[i, j] += h
            m = depth.copy(); m[i, j] -= h
            num = (loss_plane(p, normal, view)[0] - loss_plane(m, normal, view)[0]) / (2 * h)
            assert abs(num - gd[i, j]) < 1e-4 * max(1.0, abs(num))
        for _ in range(15):
            i, j, c = rng.integers(12), rng.integers(12), rng.integers(3)
            p = normal.copy(); p[i, j, c] += h
            m = normal.copy(); m[i, j, c] -= h
            num = (loss_plane(depth, p, view)[0] - loss_plane(depth, m, view)[0]) / (2 * h)
            assert abs(num - gn[i, j, c]) < 1e-4 * max(1.0, abs(num))


class TestPlaneHomography:
    def test_identity_pose(self):
        K = make_view().K
        H = plane_homography([0, 0, -1.0], 5.0, np.eye(3), np.zeros(3), K, K)
        np.testing.assert_allclose(H, np.eye(3), atol=1e-12)

    def test_nonpositive_distance_skipped(self):
        K = make_view().K
        assert plane_homography([0, 0, -1.0], 0.0, np.eye(3), np.zeros(3), K, K) is None

    def test_matches_direct_3d_projection(self):
        rng = np.random.default_rng(5)
        ref = make_view()
        # neighbor camera translated and slightly rotated
        ang = 0.2
        Rn = np.array([[np.cos(ang), 0, np.sin(ang)],
                       [0, 1, 0],
                       [-np.sin(ang), 0, np.cos(ang)]])
        nbr = make_view(R=Rn, t=np.array([-0.5, 0.1, 0.05]))
        n_w = np.array([0.1, 0.2, -1.0]); n_w /= np.linalg.norm(n_w)
        d_w = 4.0  # plane n^T X + d = 0
        R_rel, t_rel = relative_pose(ref, nbr)
        # ref frame == world frame here
        H = plane_homography(n_w, d_w, R_rel, t_rel, ref.K, nbr.K)
        for _ in range(10):
            # random point on the plane, in front of both cameras
            p = rng.uniform(-1, 1, 3)
            p[2] = 0.0
            basis = np.linalg.svd(n_w[None])[2][1:]  # plane tangent basis
            X = -d_w * n_w + basis.T @ p[:2]
            assert abs(n_w @ X + d_w) < 1e-12
            x_ref = ref.K @ X
            x_ref = x_ref[:2] / x_ref[2]
            Xn = R_rel @ X + t_rel
            x_nbr_direct = nbr.K @ Xn
            x_nbr_direct = x_nbr_direct[:2] / x_nbr_direct[2]
            v = H @ np.array([x_ref[0], x_ref[1], 1.0])
            np.testing.assert_allclose(v[:2] / v[2], x_nbr_direct, atol=1e-6)

    def test_forward_backward_identity(self):
        ref = make_view()
        ang = -0.15
        Rn = np.array([[1, 0, 0],
                       [0, np.cos(ang), -np.sin(ang)],
                       [0, np.sin(ang), np.cos(ang)]])
        nbr = make_view(R=Rn, t=np.array([0.2, -0.4, 0.1]))
        n = np.array([0.05, -0.1, -1.0]); n /= np.linalg.norm(n)
        d = 3.0
        R_rn, t_rn = relative_pose(ref, nbr)
        R_nr, t_nr = relative_pose(nbr, ref)
        H_rn = plane_homography(n, d, R_rn, t_rn, ref.K, nbr.K)
        n2, d2 = plane_to_neighbor_frame(n, d, R_rn, t_rn)
        H_nr = plane_homography(n2, d2, R_nr, t_nr, nbr.K, ref.K)
        np.testing.assert_allclose(H_nr @ H_rn, np.eye(3), atol=1e-6)


def two_view_plane_setup(w=24, h=24):
    ref = make_view(w=w, h=h)
    ang = 0.15
    Rn = np.array([[np.cos(ang), 0, np.sin(ang)],
                   [0, 1, 0],
                   [-np.sin(ang), 0, np.cos(ang)]])
    nbr = View(fx=ref.fx, fy=ref.fy, cx=ref.cx, cy=ref.cy, R=Rn,
               t=np.array([-0.6, 0.05, 0.02]), width=w, height=h)
    n_w = np.array([0.1, -0.05, -1.0]); n_w /= np.linalg.norm(n_w)
    d_w = 5.0
    rd, rn = plane_maps(ref, n_w, d_w)
    nd_, nn = plane_maps(nbr, n_w, d_w)
    return ref, nbr, rd, rn, nd_, nn


class TestLossCross:
    def test_ground_truth_plane_is_zero(self):
        ref, nbr, rd, rn, nd_, nn = two_view_plane_setup()
        res = loss_cross(ref, nbr, rd, rn, nd_, nn)
        assert not res.zero_coverage
        assert res.value < 1e-6

    def test_monotone_in_depth_perturbation(self):
        ref, nbr, rd, rn, nd_, nn = two_view_plane_setup()
        losses = []
        for eps in (0.01, 0.02, 0.04):
            res = loss_cross(ref, nbr, rd * (1 + eps), rn, nd_, nn)
            losses.append(res.value)
        assert losses[0] > 0
        assert losses[0] < losses[1] < losses[2]

    def test_single_pixel_hand_trace(self):
        ref, nbr, rd, rn, nd_, nn = two_view_plane_setup()
        rng = np.random.default_rng(6)
        rd2 = rd * (1 + 0.03 * smooth_field(rng, 24, 24, 1.0))  # break exactness
        mask = np.zeros((24, 24), dtype=bool)
        x0, y0 = 11, 9
        mask[y0, x0] = True
        res = loss_cross(ref, nbr, rd2, rn, nd_, nn, ref_mask=mask)
        assert res.n_valid == 1
        # hand composition
        n_r, d_r_map = pixel_planes(rd2, rn, ref)
        R_rn, t_rn = relative_pose(ref, nbr)
        H_rn = plane_homography(rn[y0, x0], d_r_map[y0, x0], R_rn, t_rn, ref.K, nbr.K)
        v = H_rn @ np.array([x0, y0, 1.0])
        xn = v[:2] / v[2]
        px, py = int(round(xn[0])), int(round(xn[1]))
        _, d_n_map = pixel_planes(nd_, nn, nbr)
        R_nr, t_nr = relative_pose(nbr, ref)
        H_nr = plane_homography(nn[py, px], d_n_map[py, px], R_nr, t_nr, nbr.K, ref.K)
        b = H_nr @ v
        b = b[:2] / b[2]
        expect = np.linalg.norm(b - np.array([x0, y0]))
        assert res.value == pytest.approx(expect, rel=1e-10)

    def test_no_valid_pixels_flag(self):
        ref, nbr, rd, rn, nd_, nn = two_view_plane_setup()
        res = loss_cross(ref, nbr, np.zeros_like(rd), rn, nd_, nn)
        assert res.zero_coverage
        assert res.value == 0.0

    def test_gradients_match_finite_differences(self):
        ref, nbr, rd, rn, nd_, nn = two_view_plane_setup(w=16, h=16)
        rng = np.random.default_rng(7)
        rd = rd * (1 + 0.02 * smooth_field(rng, 16, 16))
        nd_ = nd_ * (1 + 0.02 * smooth_field(rng, 16, 16))
        res = loss_cross(ref, nbr, rd, rn, nd_, nn)
        assert res.value > 0
        h = 1e-6

        def value(rd_, rn_, ndm_, nn_):
            return loss_cross(ref, nbr, rd_, rn_, ndm_, nn_).value

        for _ in range(12):
            i, j = rng.integers(16), rng.integers(16)
            p = rd.copy(); p[i, j] += h
            m = rd.copy(); m[i, j] -= h
            num = (value(p, rn, nd_, nn) - value(m, rn, nd_, nn)) / (2 * h)
            assert abs(num - res.d_ref_depth[i, j]) < 2e-4 * max(1.0, abs(num))
        for _ in range(12):
            i, j = rng.integers(16), rng.integers(16)
            p = nd_.copy(); p[i, j] += h
            m = nd_.copy(); m[i, j] -= h
            num = (value(rd, rn, p, nn) - value(rd, rn, m, nn)) / (2 * h)
            assert abs(num - res.d_nbr_depth[i, j]) < 2e-4 * max(1.0, abs(num))
        for _ in range(12):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            p = rn.copy(); p[i, j, c] += h
            m = rn.copy(); m[i, j, c] -= h
            num = (value(rd, p, nd_, nn) - value(rd, m, nd_, nn)) / (2 * h)
            assert abs(num - res.d_ref_normal[i, j, c]) < 2e-4 * max(1.0, abs(num))
        for _ in range(12):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            p = nn.copy(); p[i, j, c] += h
            m = nn.copy(); m[i, j, c] -= h
            num = (value(rd, rn, nd_, p) - value(rd, rn, nd_, m)) / (2 * h)
            assert abs(num - res.d_nbr_normal[i, j, c]) < 2e-4 * max(1.0, abs(num))


class TestTotalLoss:
    def test_photometric_only(self):
        w = LossWeights(alpha=0.0, beta=0.0)
        assert total_loss(0.7, 5.0, 9.0, w) == pytest.approx(0.7)

    def test_paper_weights(self):
        w = LossWeights(alpha=0.01, beta=0.2)
        assert total_loss(1.0, 1.0, 1.0, w) == pytest.approx(1.21)

    def test_linearity(self):
        w = LossWeights(alpha=0.01, beta=0.2)
        a = total_loss(0.5, 2.0, 3.0, w)
        b = total_loss(1.0, 4.0, 6.0, w)
        assert b == pytest.approx(2 * a)

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            LossWeights(alpha=-1.0)
