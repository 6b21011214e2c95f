"""Core geometric types and operations: quaternions, covariance construction,
perspective projection of Gaussians, and 2D Gaussian evaluation.

Conventions used throughout the package:

* Quaternions are stored as ``(w, x, y, z)`` ndarrays and are normalized
  before every rotation-matrix conversion.
* Cameras follow the computer-vision convention: ``x`` right, ``y`` down,
  ``z`` forward.  ``X_cam = R @ X_world + t``.
* Projected 2D covariances carry a low-pass floor of ``COV2D_FLOOR`` px^2
  on the diagonal so sub-pixel splats stay well conditioned.

All functions are pure; batched variants operate on leading axis N.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_NEAR = 0.01
COV2D_FLOOR = 0.3


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||. Raises for near-zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidInputError("cannot normalize zero quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert unit quaternion(s) (w, x, y, z) to rotation matrix/matrices.

    Accepts shape (4,) or (N, 4); renormalizes internally.  Returns (3, 3)
    or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = quat_normalize(np.atleast_2d(q))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient of quat_to_rotmat w.r.t. the *unnormalized* stored q.

    Accepts (4,)/(3,3) or (N,4)/(N,3,3).  Includes the chain through the
    internal normalization, so it is exact for any stored q.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    dR2 = dR.reshape(-1, 3, 3)
    norm = np.linalg.norm(q2, axis=1, keepdims=True)
    qh = q2 / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    n = q2.shape[0]
    zeros = np.zeros(n)
    # dR/d(qhat_k), rows stacked as (n, 4, 3, 3)
    dRdq = np.empty((n, 4, 3, 3))
    dRdq[:, 0] = 2 * np.stack(
        [np.stack([zeros, -z, y], axis=-1),
         np.stack([z, zeros, -x], axis=-1),
         np.stack([-y, x, zeros], axis=-1)], axis=1)
    dRdq[:, 1] = 2 * np.stack(
        [np.stack([zeros, y, z], axis=-1),
         np.stack([y, -2 * x, -w], axis=-1),
         np.stack([z, w, -2 * x], axis=-1)], axis=1)
    dRdq[:, 2] = 2 * np.stack(
        [np.stack([-2 * y, x, w], axis=-1),
         np.stack([x, zeros, z], axis=-1),
         np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    dRdq[:, 3] = 2 * np.stack(
        [np.stack([-2 * z, -w, x], axis=-1),
         np.stack([w, -2 * z, y], axis=-1),
         np.stack([x, y, zeros], axis=-1)], axis=1)
    dqh = np.einsum("nkij,nij->nk", dRdq, dR2)
    # through qhat = q / ||q||:  dq = (I - qh qh^T) dqh / ||q||
    proj = dqh - qh * np.sum(qh * dqh, axis=1, keepdims=True)
    dq = proj / norm
    return dq[0] if single else dq


def random_unit_quat(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform random unit quaternion(s)."""
    shape = (4,) if n is None else (n, 4)
    q = rng.standard_normal(shape)
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def build_covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for scale triple(s) s > 0 and quaternion(s) q.

    Accepts (3,)/(4,) or (N,3)/(N,4).
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    if np.any(s2 <= 0):
        raise InvalidInputError("scales must be positive")
    R = quat_to_rotmat(q)
    R = R.reshape(-1, 3, 3)
    RS = R * s2[:, None, :]  # columns of R scaled by s
    cov = RS @ np.swapaxes(RS, 1, 2)
    return cov[0] if single else cov


def build_covariance_backward(
    s: np.ndarray, q: np.ndarray, dcov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (ds, dq) of build_covariance for upstream dcov (full-matrix
    convention, no symmetry folding)."""
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
    dcov2 = dcov.reshape(-1, 3, 3)
    R = quat_to_rotmat(q2)
    D = s2 ** 2
    # Sigma = R D R^T:  dR = (dS + dS^T) R D ; dD = R^T dS R (diagonal)
    sym = dcov2 + np.swapaxes(dcov2, 1, 2)
    dR = sym @ (R * D[:, None, :])
    dD = np.einsum("nji,njk,nki->ni", R, dcov2, R)
    ds = 2 * s2 * dD
    dq = quat_to_rotmat_backward(q2, dR)
    if single:
        return ds[0], dq[0]
    return ds, dq


# ---------------------------------------------------------------------------
# camera views
# ---------------------------------------------------------------------------

@dataclass
class View:
    """Pinhole camera with world-to-camera rigid pose and optional GT maps."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # (3,3) world-to-camera rotation
    t: np.ndarray  # (3,) world-to-camera translation
    width: int
    height: int
    gt_color: np.ndarray | None = None   # (H,W,3) in [0,1]
    gt_depth: np.ndarray | None = None   # (H,W) camera z, 0 = background
    gt_normal: np.ndarray | None = None  # (H,W,3) camera-frame unit normals
    name: str = ""

    def __post_init__(self) -> None:
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise InvalidInputError("image size must be at least 8x8")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-6:
            raise InvalidInputError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise InvalidInputError("rotation must have det +1")

    @property
    def cam_pos(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """(H,W,3) camera-frame ray directions (unnormalized, z=1) through
        pixel centers."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx,
                         (vv - self.cy) / self.fy,
                         np.ones_like(uu)], axis=-1)


# ---------------------------------------------------------------------------
# splats
# ---------------------------------------------------------------------------

@dataclass
class GaussianSplat:
    """One renderable primitive.  The geometry pass uses the separate
    (scale_geo, quat_geo) covariance; the rendering pass uses (scale, quat)."""

    center: np.ndarray          # (3,) world
    scale: np.ndarray           # (3,) > 0, world units
    quat: np.ndarray            # (4,) unit, (w,x,y,z)
    opacity: float              # in [0,1]
    color: np.ndarray           # (3,) in [0,1]
    scale_geo: np.ndarray | None = None
    quat_geo: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.scale_geo is None:
            self.scale_geo = self.scale.copy()
        else:
            self.scale_geo = np.asarray(self.scale_geo, dtype=np.float64).reshape(3)
        if self.quat_geo is None:
            self.quat_geo = self.quat.copy()
        else:
            self.quat_geo = np.asarray(self.quat_geo, dtype=np.float64).reshape(4)
        if np.any(self.scale <= 0) or np.any(self.scale_geo <= 0):
            raise InvalidInputError("splat scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidInputError("opacity must lie in [0,1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidInputError("color must lie in [0,1]^3")

    def branch(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "render":
            return self.scale, self.quat
        if which == "geometry":
            return self.scale_geo, self.quat_geo
        raise InvalidInputError(f"unknown covariance branch {which!r}")


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_points(means: np.ndarray, view: View) -> tuple[np.ndarray, np.ndarray]:
    """World points (N,3) -> camera-space points (N,3) and pixel coords (N,2)."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    tcam = means @ view.R.T + view.t
    z = tcam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean2d = np.stack([view.fx * tcam[:, 0] / z + view.cx,
                           view.fy * tcam[:, 1] / z + view.cy], axis=-1)
    return tcam, mean2d


def projection_jacobian(tcam: np.ndarray, view: View) -> np.ndarray:
    """Local affine Jacobian (N,2,3) of the pixel projection at camera-space
    points tcam."""
    x, y, z = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    J = np.zeros((tcam.shape[0], 2, 3))
    J[:, 0, 0] = view.fx / z
    J[:, 0, 2] = -view.fx * x / z ** 2
    J[:, 1, 1] = view.fy / z
    J[:, 1, 2] = -view.fy * y / z ** 2
    return J


def project_gaussians(
    means: np.ndarray,
    covs: np.ndarray,
    view: View,
    z_near: float = Z_NEAR,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """EWA projection of batched Gaussians.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), valid (N,) bool).
    Culled entries (z <= z_near or degenerate cov2d) have valid=False;
    their other outputs are unspecified.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    tcam, mean2d = project_points(means, view)
    depth = tcam[:, 2]
    valid = depth > z_near
    J = projection_jacobian(np.where(valid[:, None], tcam, 1.0), view)
    M = J @ view.R
    cov2d = M @ covs @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    valid &= det > 1e-12
    return mean2d, cov2d, depth, valid


def project_gaussians_backward(
    means: np.ndarray,
    covs: np.ndarray,
    view: View,
    dmean2d: np.ndarray,
    dcov2d: np.ndarray,
    ddepth: np.ndarray,
    valid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients (dmeans (N,3), dcovs (N,3,3)) of project_gaussians."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    tcam, _ = project_points(means, view)
    tcam = np.where(valid[:, None], tcam, 1.0)
    x, y, z = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    J = projection_jacobian(tcam, view)
    M = J @ view.R

    dcovs = np.swapaxes(M, 1, 2) @ dcov2d @ M
    dM = (dcov2d + np.swapaxes(dcov2d, 1, 2)) @ M @ covs
    dJ = dM @ view.R.T

    dt = np.zeros_like(tcam)
    # mean2d = (fx x/z + cx, fy y/z + cy)
    dt[:, 0] += dmean2d[:, 0] * view.fx / z
    dt[:, 1] += dmean2d[:, 1] * view.fy / z
    dt[:, 2] += (-dmean2d[:, 0] * view.fx * x / z ** 2
                 - dmean2d[:, 1] * view.fy * y / z ** 2)
    # J entries
    dt[:, 0] += dJ[:, 0, 2] * (-view.fx / z ** 2)
    dt[:, 1] += dJ[:, 1, 2] * (-view.fy / z ** 2)
    dt[:, 2] += (dJ[:, 0, 0] * (-view.fx / z ** 2)
                 + dJ[:, 1, 1] * (-view.fy / z ** 2)
                 + dJ[:, 0, 2] * (2 * view.fx * x / z ** 3)
                 + dJ[:, 1, 2] * (2 * view.fy * y / z ** 3))
    dt[:, 2] += ddepth
    dt = np.where(valid[:, None], dt, 0.0)
    dcovs = np.where(valid[:, None, None], dcovs, 0.0)
    dmeans = dt @ view.R
    return dmeans, dcovs


def project_gaussian(
    g: GaussianSplat, view: View, which: str = "render", z_near: float = Z_NEAR
) -> tuple[np.ndarray, np.ndarray, float] | None:
    """Project a single splat; returns (mean2d, cov2d, depth) or None if culled."""
    s, q = g.branch(which)
    cov = build_covariance(s, q)
    mean2d, cov2d, depth, valid = project_gaussians(
        g.center[None], cov[None], view, z_near=z_near)
    if not valid[0]:
        return None
    return mean2d[0], cov2d[0], float(depth[0])


# ---------------------------------------------------------------------------
# splat normals
# ---------------------------------------------------------------------------

def splat_normals(
    scales: np.ndarray,
    quats: np.ndarray,
    centers: np.ndarray,
    cam_pos: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched splat normals: unit rotation column of the smallest scale axis,
    sign-flipped toward cam_pos.

    Returns (normals (N,3), axis indices (N,), signs (N,)); the latter two
    feed the backward pass.
    """
    scales = np.atleast_2d(np.asarray(scales, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    R = quat_to_rotmat(quats).reshape(-1, 3, 3)
    jmin = np.argmin(scales, axis=1)
    idx = np.arange(scales.shape[0])
    n = R[idx, :, jmin]
    to_cam = np.asarray(cam_pos, dtype=np.float64) - centers
    sign = np.where(np.sum(n * to_cam, axis=1) < 0, -1.0, 1.0)
    return n * sign[:, None], jmin, sign


def splat_normals_backward(
    quats: np.ndarray,
    jmin: np.ndarray,
    signs: np.ndarray,
    dnormals: np.ndarray,
) -> np.ndarray:
    """Gradient of splat_normals w.r.t. quats (axis choice and sign are
    treated as locally constant)."""
    quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    n = quats.shape[0]
    dR = np.zeros((n, 3, 3))
    idx = np.arange(n)
    dR[idx, :, jmin] = dnormals * signs[:, None]
    return quat_to_rotmat_backward(quats, dR)


def splat_normal(g: GaussianSplat, cam_pos: np.ndarray, which: str = "render") -> np.ndarray:
    """Single-splat normal (flattest covariance axis, camera-facing)."""
    s, q = g.branch(which)
    normals, _, _ = splat_normals(s[None], q[None], g.center[None], cam_pos)
    return normals[0]


# ---------------------------------------------------------------------------
# 2D evaluation
# ---------------------------------------------------------------------------

def eval_gaussian2d(mean2d: np.ndarray, cov2d: np.ndarray, pixel: np.ndarray) -> float | None:
    """exp(-1/2 d^T cov2d^-1 d); None when cov2d is singular."""
    mean2d = np.asarray(mean2d, dtype=np.float64)
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
    if abs(det) <= 1e-12:
        return None
    d = np.asarray(pixel, dtype=np.float64) - mean2d
    inv = np.array([[cov2d[1, 1], -cov2d[0, 1]],
                    [-cov2d[1, 0], cov2d[0, 0]]]) / det
    return float(np.exp(-0.5 * d @ inv @ d))


def conic_from_cov2d(cov2d: np.ndarray) -> np.ndarray:
    """Batched inverse of 2x2 covariances, returned as (N,3) = (a, b, c) for
    [[a, b], [b, c]]."""
    cov2d = cov2d.reshape(-1, 2, 2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    out = np.stack([cov2d[:, 1, 1], -cov2d[:, 0, 1], cov2d[:, 0, 0]], axis=-1)
    return out / det[:, None]
