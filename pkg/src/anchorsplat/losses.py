"""Training objectives: photometric loss, depth-normal plane consistency,
forward-backward cross-view projection consistency, and the weighted total.

Every loss returns its exact gradient with respect to the rendered maps it
consumes, so the rasterizer backward can chain them to splat parameters.

Depth edges and normal creases are excluded from the geometric losses by two
documented guards (a relative depth-jump test on the finite-difference legs
and a local normal-consistency test); without them, silhouette and crease
pixels dominate both losses even on exact ground-truth maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import InvalidInputError, View

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

DEPTH_JUMP_REL = 0.05     # leg rejected when |dD| exceeds this fraction of D
NORMAL_JUMP_L1 = 0.5      # pixel rejected when +x/+y normals differ by more
GRAZING_MIN_COS = 0.25    # pixel rejected when the normal grazes the view ray
CURVATURE_JUMP_L1 = 0.05  # pixel rejected when fwd/bwd facet normals disagree
OCCLUSION_REL = 0.05      # cross-view pixel rejected on forward-depth mismatch
NORMAL_AGREE_COS = 0.7    # cross-view pixel rejected on ref/nbr plane mismatch
ALPHA_THRESH = 0.5
MIN_PLANE_DIST = 1e-6


@dataclass
class LossWeights:
    alpha: float = 0.01    # cross-view weight
    beta: float = 0.2      # plane (depth-normal) weight
    lam_ssim: float = 0.2  # D-SSIM mix inside the photometric loss

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.lam_ssim < 0:
            raise InvalidInputError("loss weights must be nonnegative")


def total_loss(l_rgb: float, l_plane: float, l_cross: float, w: LossWeights) -> float:
    """L = L_c + alpha * L_cross + beta * L_plane."""
    for v in (l_rgb, l_plane, l_cross):
        if not np.isfinite(v):
            raise InvalidInputError("loss components must be finite")
    return l_rgb + w.alpha * l_cross + w.beta * l_plane


# ---------------------------------------------------------------------------
# photometric loss
# ---------------------------------------------------------------------------

def _gauss_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


_KERNEL = _gauss_kernel1d()


def _filt(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window, 'same' size with zero padding (self-adjoint)."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def ssim(img: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM over pixels/channels and its gradient w.r.t. img."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise InvalidInputError("image shapes differ")
    x = img if img.ndim == 3 else img[..., None]
    y = gt if gt.ndim == 3 else gt[..., None]

    mu_x, mu_y = _filt(x), _filt(y)
    vx, vy, vxy = _filt(x * x), _filt(y * y), _filt(x * y)
    sx = vx - mu_x ** 2
    sy = vy - mu_y ** 2
    sxy = vxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = sx + sy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    value = float(np.mean(s))

    g = np.full_like(s, 1.0 / s.size)
    ga1 = g * a2 / (b1 * b2)
    ga2 = g * a1 / (b1 * b2)
    gb1 = -g * s / b1
    gb2 = -g * s / b2
    gsxy = 2 * ga2
    gsx = gb2
    gmu_x = ga1 * 2 * mu_y + gb1 * 2 * mu_x - gsx * 2 * mu_x - gsxy * mu_y
    grad = _filt(gmu_x) + 2 * x * _filt(gsx) + y * _filt(gsxy)
    if img.ndim == 2:
        grad = grad[..., 0]
    return value, grad


def loss_rgb(img: np.ndarray, gt: np.ndarray, lam_ssim: float = 0.2
             ) -> tuple[float, np.ndarray]:
    """(1 - lam) * L1 + lam * (1 - SSIM) / 2, with its per-pixel gradient."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise InvalidInputError("image shapes differ")
    diff = img - gt
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    if lam_ssim == 0.0:
        return l1, (1.0 - lam_ssim) * g_l1
    s_val, g_s = ssim(img, gt)
    value = (1.0 - lam_ssim) * l1 + lam_ssim * (1.0 - s_val) / 2.0
    grad = (1.0 - lam_ssim) * g_l1 - (lam_ssim / 2.0) * g_s
    return value, grad


# ---------------------------------------------------------------------------
# depth-derived normals and the plane constraint
# ---------------------------------------------------------------------------

def normal_from_depth(depth: np.ndarray, view: View,
                      depth_jump_rel: float = DEPTH_JUMP_REL
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame normals from back-projected +x/+y depth legs.

    Returns (N_d (H,W,3), valid (H,W)).  A pixel is invalid when itself or a
    leg neighbor has nonpositive depth, or when a leg crosses a relative
    depth jump larger than ``depth_jump_rel`` (silhouette guard).
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    rays = view.pixel_rays()
    P = depth[..., None] * rays

    nd = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    d0 = depth[:-1, :-1]
    dx = depth[:-1, 1:]
    dy = depth[1:, :-1]
    ok = (d0 > 0) & (dx > 0) & (dy > 0)
    ok &= np.abs(dx - d0) <= depth_jump_rel * d0
    ok &= np.abs(dy - d0) <= depth_jump_rel * d0

    e1 = P[:-1, 1:] - P[:-1, :-1]
    e2 = P[1:, :-1] - P[:-1, :-1]
    c = np.cross(e1, e2)
    norm = np.linalg.norm(c, axis=-1)
    ok &= norm > 1e-15
    safe = np.where(ok, norm, 1.0)
    n = c / safe[..., None]
    flip = np.where(np.sum(n * P[:-1, :-1], axis=-1) > 0, -1.0, 1.0)
    nd[:-1, :-1] = np.where(ok[..., None], n * flip[..., None], 0.0)
    valid[:-1, :-1] = ok
    return nd, valid


def normal_consistency_mask(normal: np.ndarray,
                            jump: float = NORMAL_JUMP_L1) -> np.ndarray:
    """True where the normal map is locally consistent along the +x/+y legs
    (crease guard).  Last row/column are False."""
    H, W = normal.shape[:2]
    mask = np.zeros((H, W), dtype=bool)
    n0 = normal[:-1, :-1]
    dx = np.sum(np.abs(normal[:-1, 1:] - n0), axis=-1)
    dy = np.sum(np.abs(normal[1:, :-1] - n0), axis=-1)
    nz = np.linalg.norm(n0, axis=-1) > 1e-12
    mask[:-1, :-1] = nz & (dx <= jump) & (dy <= jump)
    return mask


def grazing_mask(normal: np.ndarray, view: View,
                 min_cos: float = GRAZING_MIN_COS) -> np.ndarray:
    """True where the camera-facing normal makes a usable angle with the view
    ray.  Facet normals and plane distances both degenerate near grazing."""
    rays = view.pixel_rays()
    rays = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    return np.abs(np.sum(normal * rays, axis=-1)) >= min_cos


def curvature_mask(depth: np.ndarray, view: View,
                   jump: float = CURVATURE_JUMP_L1,
                   depth_jump_rel: float = DEPTH_JUMP_REL) -> np.ndarray:
    """True where the one-sided facet normal is reliable.

    The +x/+y facet normal carries a half-pixel centroid-shift bias on curved
    surfaces; the -x/-y facet disagrees with it by twice that bias and agrees
    exactly on planes, so their L1 distance flags pixels where the discrete
    normal estimator cannot be trusted at the current resolution.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    nd_f, ok_f = normal_from_depth(depth, view, depth_jump_rel)
    # backward-leg facet: flip the map, reuse the forward construction
    view_flip = View(fx=view.fx, fy=view.fy,
                     cx=(W - 1) - view.cx, cy=(H - 1) - view.cy,
                     R=view.R, t=view.t, width=W, height=H)
    nd_bf, ok_bf = normal_from_depth(depth[::-1, ::-1], view_flip, depth_jump_rel)
    nd_b = nd_bf[::-1, ::-1]
    ok_b = ok_bf[::-1, ::-1]
    # flipping u,v flips two axes of the camera frame; undo for comparison
    nd_b = nd_b * np.array([-1.0, -1.0, 1.0])
    diff = np.sum(np.abs(nd_f - nd_b), axis=-1)
    return ok_f & ok_b & (diff <= jump)


def loss_plane(depth: np.ndarray, normal: np.ndarray, view: View,
               alpha_mask: np.ndarray | None = None,
               depth_jump_rel: float = DEPTH_JUMP_REL,
               normal_jump: float = NORMAL_JUMP_L1,
               curvature_jump: float = CURVATURE_JUMP_L1,
               ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean L1 between depth-derived and rendered normals over valid pixels.

    Returns (value, d_depth, d_normal)."""
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    if depth.shape != normal.shape[:2]:
        raise InvalidInputError("depth/normal map sizes differ")
    H, W = depth.shape
    nd, nd_valid = normal_from_depth(depth, view, depth_jump_rel)
    valid = nd_valid & normal_consistency_mask(normal, normal_jump)
    valid &= grazing_mask(normal, view)
    valid &= curvature_mask(depth, view, curvature_jump, depth_jump_rel)
    if alpha_mask is not None:
        valid &= alpha_mask
    count = int(np.count_nonzero(valid))
    d_depth = np.zeros_like(depth)
    d_normal = np.zeros_like(normal)
    if count == 0:
        return 0.0, d_depth, d_normal

    diff = nd - normal
    value = float(np.sum(np.abs(diff)[valid]) / count)
    g_sign = np.where(valid[..., None], np.sign(diff) / count, 0.0)
    d_normal = -g_sign

    # chain g_sign -> N_d -> cross product -> back-projected points -> depth
    rays = view.pixel_rays()
    P = depth[..., None] * rays
    e1 = P[:-1, 1:] - P[:-1, :-1]
    e2 = P[1:, :-1] - P[:-1, :-1]
    c = np.cross(e1, e2)
    norm = np.linalg.norm(c, axis=-1)
    live = valid[:-1, :-1]
    safe = np.where(norm > 1e-15, norm, 1.0)
    u = c / safe[..., None]
    flip = np.where(np.sum(u * P[:-1, :-1], axis=-1) > 0, -1.0, 1.0)

    g_nd = g_sign[:-1, :-1]
    gu = g_nd * flip[..., None]
    gc = (gu - u * np.sum(u * gu, axis=-1, keepdims=True)) / safe[..., None]
    gc = np.where(live[..., None], gc, 0.0)
    ge1 = np.cross(e2, gc)
    ge2 = np.cross(gc, e1)

    gP = np.zeros((H, W, 3))
    gP[:-1, 1:] += ge1
    gP[1:, :-1] += ge2
    gP[:-1, :-1] -= ge1 + ge2
    d_depth = np.sum(gP * rays, axis=-1)
    return value, d_depth, d_normal


# ---------------------------------------------------------------------------
# plane-induced homography and the cross-view constraint
# ---------------------------------------------------------------------------

def plane_homography(n_r: np.ndarray, d_r: float, R_rel: np.ndarray,
                     t_rel: np.ndarray, K_ref: np.ndarray, K_nbr: np.ndarray
                     ) -> np.ndarray | None:
    """H = K_nbr (R - t n^T / d) K_ref^-1 for the plane {X : n^T X + d = 0}
    in the reference camera frame.  None when d <= 0 (skip-pixel marker)."""
    if d_r <= 0:
        return None
    n_r = np.asarray(n_r, dtype=np.float64).reshape(3)
    inner = R_rel - np.outer(t_rel, n_r) / d_r
    return K_nbr @ inner @ np.linalg.inv(K_ref)


def plane_to_neighbor_frame(n: np.ndarray, d: float, R_rel: np.ndarray,
                            t_rel: np.ndarray) -> tuple[np.ndarray, float]:
    """Re-express the plane {n^T X + d = 0} in the frame X' = R X + t."""
    n2 = R_rel @ n
    return n2, float(d - n2 @ t_rel)


def relative_pose(ref: View, nbr: View) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) with X_nbr = R X_ref + t."""
    R = nbr.R @ ref.R.T
    t = nbr.t - R @ ref.t
    return R, t


def pixel_planes(depth: np.ndarray, normal: np.ndarray, view: View
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel plane (n, d) with the plane passing through the back-projected
    point: d = -depth * (n . ray); positive for camera-facing normals."""
    rays = view.pixel_rays()
    d = -np.asarray(depth, dtype=np.float64) * np.sum(normal * rays, axis=-1)
    return normal, d


@dataclass
class CrossLossResult:
    value: float
    d_ref_depth: np.ndarray
    d_ref_normal: np.ndarray
    d_nbr_depth: np.ndarray
    d_nbr_normal: np.ndarray
    n_valid: int
    zero_coverage: bool


def loss_cross(ref: View, nbr: View,
               ref_depth: np.ndarray, ref_normal: np.ndarray,
               nbr_depth: np.ndarray, nbr_normal: np.ndarray,
               ref_mask: np.ndarray | None = None,
               nbr_mask: np.ndarray | None = None,
               normal_jump: float = NORMAL_JUMP_L1) -> CrossLossResult:
    """Forward-backward projection error through per-pixel planes.

    For each valid reference pixel, transfer through the reference plane's
    homography, look up the neighbor's plane at the landing pixel, transfer
    back, and penalize the round-trip pixel distance.  The landing-pixel
    selection is nearest-neighbor and treated as constant in the backward
    pass; gradients reach both views' depth and normal maps.
    """
    H, W = np.shape(ref_depth)
    d_ref_depth = np.zeros((H, W))
    d_ref_normal = np.zeros((H, W, 3))
    d_nbr_depth = np.zeros(np.shape(nbr_depth))
    d_nbr_normal = np.zeros(np.shape(nbr_normal))

    ref_ok = (np.asarray(ref_depth) > 0) & normal_consistency_mask(ref_normal, normal_jump)
    ref_ok &= grazing_mask(ref_normal, ref)
    if ref_mask is not None:
        ref_ok &= ref_mask
    nbr_ok = (np.asarray(nbr_depth) > 0) & normal_consistency_mask(nbr_normal, normal_jump)
    nbr_ok &= grazing_mask(nbr_normal, nbr)
    if nbr_mask is not None:
        nbr_ok &= nbr_mask

    _, dr_all = pixel_planes(ref_depth, ref_normal, ref)
    ref_ok &= dr_all > MIN_PLANE_DIST
    ys, xs = np.nonzero(ref_ok)
    if ys.size == 0:
        return CrossLossResult(0.0, d_ref_depth, d_ref_normal,
                               d_nbr_depth, d_nbr_normal, 0, True)

    R_rn, t_rn = relative_pose(ref, nbr)
    R_nr, t_nr = relative_pose(nbr, ref)
    K_r, K_n = ref.K, nbr.K
    K_r_inv = np.linalg.inv(K_r)
    K_n_inv = np.linalg.inv(K_n)

    xr = np.stack([xs.astype(np.float64), ys.astype(np.float64),
                   np.ones(ys.size)], axis=-1)          # (M,3) homogeneous
    n_r = ref_normal[ys, xs]                            # (M,3)
    d_r = dr_all[ys, xs]                                # (M,)

    # forward: v = A x - a (m . x) / d_r
    A1 = K_n @ R_rn @ K_r_inv
    a1 = K_n @ t_rn
    m1 = n_r @ K_r_inv                                   # rows = K_r^-T n_r
    s1 = np.sum(m1 * xr, axis=-1) / d_r
    v = xr @ A1.T - np.outer(s1, a1)
    keep = v[:, 2] > 1e-9
    xn = np.full((ys.size, 2), -1.0)
    xn[keep] = v[keep, :2] / v[keep, 2:3]
    px = np.round(xn[:, 0]).astype(np.int64)
    py = np.round(xn[:, 1]).astype(np.int64)
    Hn, Wn = np.shape(nbr_depth)
    keep &= (px >= 0) & (px < Wn) & (py >= 0) & (py < Hn)
    px_c = np.clip(px, 0, Wn - 1)
    py_c = np.clip(py, 0, Hn - 1)
    keep &= nbr_ok[py_c, px_c]

    # occlusion check: the forward-transferred 3D point must agree with the
    # neighbor's own depth at the landing pixel
    rays_r_full = ref.pixel_rays()
    X_ref = np.asarray(ref_depth)[ys, xs, None] * rays_r_full[ys, xs]
    X_nbr = X_ref @ R_rn.T + t_rn
    Dn = np.asarray(nbr_depth)[py_c, px_c]
    keep &= X_nbr[:, 2] > 0
    keep &= np.abs(X_nbr[:, 2] - Dn) <= OCCLUSION_REL * np.maximum(Dn, 1e-9)

    # neighbor plane at the landing pixel; it must describe the same surface
    # patch as the reference plane (kills wall-vs-floor pairings near
    # contact lines that pass the depth check)
    n_n = nbr_normal[py_c, px_c]
    n_r_in_nbr = n_r @ R_rn.T
    keep &= np.sum(n_r_in_nbr * n_n, axis=-1) >= NORMAL_AGREE_COS
    rays_n = np.stack([(px_c - nbr.cx) / nbr.fx,
                       (py_c - nbr.cy) / nbr.fy,
                       np.ones(ys.size)], axis=-1)
    d_n = -Dn * np.sum(n_n * rays_n, axis=-1)
    keep &= d_n > MIN_PLANE_DIST

    if not np.any(keep):
        return CrossLossResult(0.0, d_ref_depth, d_ref_normal,
                               d_nbr_depth, d_nbr_normal, 0, True)

    A2 = K_r @ R_nr @ K_n_inv
    a2 = K_r @ t_nr
    m2 = n_n @ K_n_inv
    s2 = np.sum(m2 * v, axis=-1) / np.where(keep, d_n, 1.0)
    bh = v @ A2.T - np.outer(s2, a2)
    keep &= np.abs(bh[:, 2]) > 1e-9
    bz = np.where(keep, bh[:, 2], 1.0)
    b = bh[:, :2] / bz[:, None]
    err_vec = b - xr[:, :2]
    err = np.linalg.norm(err_vec, axis=-1)
    m_count = int(np.count_nonzero(keep))
    if m_count == 0:
        return CrossLossResult(0.0, d_ref_depth, d_ref_normal,
                               d_nbr_depth, d_nbr_normal, 0, True)
    value = float(np.sum(err[keep]) / m_count)

    # ---- backward ----
    live = keep & (err > 1e-12)
    gb = np.where(live[:, None], err_vec / np.where(err > 1e-12, err, 1.0)[:, None], 0.0)
    gb /= m_count
    gbh = np.zeros((ys.size, 3))
    gbh[:, 0] = gb[:, 0] / bz
    gbh[:, 1] = gb[:, 1] / bz
    gbh[:, 2] = -(gb[:, 0] * bh[:, 0] + gb[:, 1] * bh[:, 1]) / bz ** 2

    gs2 = -(gbh @ a2)
    safe_dn = np.where(keep, d_n, 1.0)
    gm2 = gs2[:, None] * v / safe_dn[:, None]
    gd_n = -gs2 * np.sum(m2 * v, axis=-1) / safe_dn ** 2
    gn_n = gm2 @ K_n_inv.T
    # H_nr^T gbh (the v-path through the backward homography)
    Hnr = A2[None] - (a2[None, :, None] * m2[:, None, :]) / safe_dn[:, None, None]
    gv = np.einsum("mji,mj->mi", Hnr, gbh)

    gs1 = -(gv @ a1)
    safe_dr = d_r
    gm1 = gs1[:, None] * xr / safe_dr[:, None]
    gd_r = -gs1 * np.sum(m1 * xr, axis=-1) / safe_dr ** 2
    gn_r = gm1 @ K_r_inv.T

    # d = -D (n . ray)
    rays_r = np.stack([(xs - ref.cx) / ref.fx, (ys - ref.cy) / ref.fy,
                       np.ones(ys.size)], axis=-1)
    Dr = np.asarray(ref_depth)[ys, xs]
    gD_r = -np.sum(n_r * rays_r, axis=-1) * gd_r
    gn_r += -Dr[:, None] * rays_r * gd_r[:, None]
    gD_n = -np.sum(n_n * rays_n, axis=-1) * gd_n
    gn_n += -Dn[:, None] * rays_n * gd_n[:, None]

    z = ~live
    for arr in (gn_r, gn_n):
        arr[z] = 0.0
    gD_r[z] = 0.0
    gD_n[z] = 0.0

    np.add.at(d_ref_depth, (ys, xs), gD_r)
    np.add.at(d_ref_normal, (ys, xs), gn_r)
    np.add.at(d_nbr_depth, (py_c, px_c), gD_n)
    np.add.at(d_nbr_normal, (py_c, px_c), gn_n)
    return CrossLossResult(value, d_ref_depth, d_ref_normal,
                           d_nbr_depth, d_nbr_normal, m_count, False)
