"""Tile-based forward/backward rasterizer for batched Gaussian splats.

Produces color/depth/normal/alpha maps by front-to-back alpha blending with
per-Gaussian contribution statistics, and an exact analytic backward pass
returning per-splat gradients.

Depth is blended from per-Gaussian center z and normalized by accumulated
alpha; the normal map blends camera-frame splat normals and renormalizes the
sum.  Both normalizations are part of the differentiated graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import (
    InvalidInputError,
    View,
    build_covariance,
    build_covariance_backward,
    conic_from_cov2d,
    project_gaussians,
    project_gaussians_backward,
    splat_normals,
    splat_normals_backward,
)

DEFAULT_TILE = 16
DEFAULT_STOP_T = 1e-4
ALPHA_EPS = 1e-4  # below this, depth/normal outputs are defined as zero


@dataclass
class Splats:
    """Structure-of-arrays splat batch; the geometry pass uses the *_geo
    covariance fields."""

    means: np.ndarray        # (N,3)
    scales: np.ndarray       # (N,3) > 0
    quats: np.ndarray        # (N,4)
    opacities: np.ndarray    # (N,)
    colors: np.ndarray       # (N,3)
    scales_geo: np.ndarray | None = None
    quats_geo: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.scales_geo is None:
            self.scales_geo = self.scales
        else:
            self.scales_geo = np.asarray(self.scales_geo, dtype=np.float64).reshape(n, 3)
        if self.quats_geo is None:
            self.quats_geo = self.quats
        else:
            self.quats_geo = np.asarray(self.quats_geo, dtype=np.float64).reshape(n, 4)

    def __len__(self) -> int:
        return self.means.shape[0]

    def branch(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "render":
            return self.scales, self.quats
        if which == "geometry":
            return self.scales_geo, self.quats_geo
        raise InvalidInputError(f"unknown covariance branch {which!r}")


@dataclass
class RenderOutput:
    color: np.ndarray        # (H,W,3)
    depth: np.ndarray        # (H,W), 0 where alpha ~ 0
    normal: np.ndarray       # (H,W,3) camera-frame unit (or zero) rows
    alpha: np.ndarray        # (H,W)
    transmittance: np.ndarray  # (H,W) residual T per pixel
    wsum: np.ndarray         # (N,) per-splat sum of blending weights
    touched: np.ndarray      # (N,) per-splat contributing-pixel counts
    depth_raw: np.ndarray    # (H,W) alpha-weighted depth sum (pre-normalize)
    normal_raw: np.ndarray   # (H,W,3) blended normal sum (pre-normalize)


@dataclass
class RasterTape:
    """Everything needed to replay blending exactly for the backward pass."""

    view: View
    which: str
    stop_t: float
    tile: int
    n_tiles_x: int
    tile_starts: np.ndarray
    entry_splat: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depthz: np.ndarray
    normalcam: np.ndarray
    cov3d: np.ndarray
    jmin: np.ndarray
    signs: np.ndarray
    valid: np.ndarray
    background: np.ndarray
    n_splats: int


@dataclass
class SplatGrads:
    means: np.ndarray      # (N,3)
    scales: np.ndarray     # (N,3) gradient for the rendered branch scales
    quats: np.ndarray      # (N,4) gradient for the rendered branch quats
    opacities: np.ndarray  # (N,)
    colors: np.ndarray     # (N,3)
    mean2d: np.ndarray     # (N,2) screen-space center gradient (densify signal)
    which: str = "render"


def bin_and_sort(
    mean2d: np.ndarray,
    radius: np.ndarray,
    depth: np.ndarray,
    valid: np.ndarray,
    width: int,
    height: int,
    tile: int = DEFAULT_TILE,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Assign splats to every tile their 3-sigma box overlaps and sort each
    tile's list by ascending depth (ties by splat id).

    Returns (tile_starts (T+1,), entry_splat (E,), n_tiles_x).
    """
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    n_tiles = n_tiles_x * n_tiles_y

    mx, my = mean2d[:, 0], mean2d[:, 1]
    tx0 = np.floor((mx - radius) / tile).astype(np.int64)
    tx1 = np.floor((mx + radius) / tile).astype(np.int64)
    ty0 = np.floor((my - radius) / tile).astype(np.int64)
    ty1 = np.floor((my + radius) / tile).astype(np.int64)
    on = valid & (tx1 >= 0) & (ty1 >= 0) & (tx0 < n_tiles_x) & (ty0 < n_tiles_y)
    tx0 = np.clip(tx0, 0, n_tiles_x - 1)
    tx1 = np.clip(tx1, 0, n_tiles_x - 1)
    ty0 = np.clip(ty0, 0, n_tiles_y - 1)
    ty1 = np.clip(ty1, 0, n_tiles_y - 1)
    counts = np.where(on, (tx1 - tx0 + 1) * (ty1 - ty0 + 1), 0)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    tile_ids = np.empty(total, dtype=np.int64)
    splat_ids = np.empty(total, dtype=np.int64)
    if total:
        # degenerate ranges for skipped splats keep the fill kernel branch-free
        t0x = np.where(on, tx0, 0)
        t1x = np.where(on, tx1, -1)
        t0y = np.where(on, ty0, 0)
        t1y = np.where(on, ty1, -1)
        _kernels.fill_tile_entries(t0x, t1x, t0y, t1y, offsets[:-1],
                                   n_tiles_x, tile_ids, splat_ids)
        order = np.lexsort((splat_ids, depth[splat_ids], tile_ids))
        tile_ids = tile_ids[order]
        splat_ids = splat_ids[order]
    tile_starts = np.searchsorted(tile_ids, np.arange(n_tiles + 1)).astype(np.int64)
    return tile_starts, splat_ids, n_tiles_x


def _prepare(splats: Splats, view: View, which: str, keep: np.ndarray | None):
    scales, quats = splats.branch(which)
    cov3d = build_covariance(scales, quats)
    mean2d, cov2d, depthz, valid = project_gaussians(splats.means, cov3d, view)
    valid = valid & (splats.opacities >= _kernels.SIGMA_SKIP)
    if keep is not None:
        valid = valid & keep
    nworld, jmin, signs = splat_normals(scales, quats, splats.means, view.cam_pos)
    normalcam = nworld @ view.R.T
    conic = conic_from_cov2d(cov2d)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    return cov3d, mean2d, cov2d, conic, depthz, normalcam, jmin, signs, valid, radius


def rasterize_forward(
    splats: Splats,
    view: View,
    which: str = "render",
    stop_at_t: float = DEFAULT_STOP_T,
    tile: int = DEFAULT_TILE,
    background: np.ndarray | tuple = (0.0, 0.0, 0.0),
    keep: np.ndarray | None = None,
) -> tuple[RenderOutput, RasterTape]:
    """Render all maps for one view.  ``which`` selects the covariance branch;
    ``keep`` optionally masks splats out (pruning studies)."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    n = len(splats)
    (cov3d, mean2d, cov2d, conic, depthz, normalcam,
     jmin, signs, valid, radius) = _prepare(splats, view, which, keep)

    tile_starts, entry_splat, n_tiles_x = bin_and_sort(
        mean2d, radius, depthz, valid, view.width, view.height, tile)

    H, W = view.height, view.width
    color = np.zeros((H, W, 3))
    depth_raw = np.zeros((H, W))
    normal_raw = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    trans = np.ones((H, W))
    wsum_e = np.zeros(entry_splat.shape[0])
    touched_e = np.zeros(entry_splat.shape[0], dtype=np.int64)
    if entry_splat.shape[0]:
        _kernels.tile_forward(
            tile_starts, entry_splat, mean2d, conic,
            splats.opacities, splats.colors, depthz, normalcam,
            W, H, tile, n_tiles_x, stop_at_t,
            color, depth_raw, normal_raw, alpha, trans, wsum_e, touched_e)
    wsum = np.zeros(n)
    touched = np.zeros(n, dtype=np.int64)
    np.add.at(wsum, entry_splat, wsum_e)
    np.add.at(touched, entry_splat, touched_e)

    covered = alpha > ALPHA_EPS
    depth = np.where(covered, depth_raw / np.where(covered, alpha, 1.0), 0.0)
    nnorm = np.linalg.norm(normal_raw, axis=-1)
    nvalid = covered & (nnorm > 1e-12)
    normal = np.where(nvalid[..., None],
                      normal_raw / np.where(nvalid, nnorm, 1.0)[..., None], 0.0)
    color = color + trans[..., None] * background

    out = RenderOutput(color=color, depth=depth, normal=normal, alpha=alpha,
                       transmittance=trans, wsum=wsum, touched=touched,
                       depth_raw=depth_raw, normal_raw=normal_raw)
    tape = RasterTape(view=view, which=which, stop_t=stop_at_t, tile=tile,
                      n_tiles_x=n_tiles_x, tile_starts=tile_starts,
                      entry_splat=entry_splat, mean2d=mean2d, cov2d=cov2d,
                      conic=conic, depthz=depthz, normalcam=normalcam,
                      cov3d=cov3d, jmin=jmin, signs=signs, valid=valid,
                      background=background, n_splats=n)
    return out, tape


def rasterize_backward(
    tape: RasterTape,
    splats: Splats,
    out: RenderOutput,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_normal: np.ndarray | None = None,
    d_alpha: np.ndarray | None = None,
) -> SplatGrads:
    """Exact gradients of the rendered maps w.r.t. per-splat attributes.

    Gradients land on the covariance branch the tape was rendered with
    (``SplatGrads.which``).  Fully occluded hits receive zero gradient.
    """
    if len(splats) != tape.n_splats:
        raise InvalidInputError("tape does not match splat set")
    view = tape.view
    H, W = view.height, view.width
    zero_img = np.zeros((H, W))
    d_color = np.zeros((H, W, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64)
    d_depth = zero_img if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    d_normal = (np.zeros((H, W, 3)) if d_normal is None
                else np.asarray(d_normal, dtype=np.float64))
    d_alpha = zero_img if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    if d_color.shape != (H, W, 3) or d_depth.shape != (H, W):
        raise InvalidInputError("upstream gradient map shape mismatch")

    # chain through depth = depth_raw / alpha and normal = normalize(normal_raw)
    covered = out.alpha > ALPHA_EPS
    safe_alpha = np.where(covered, out.alpha, 1.0)
    g_depth_raw = np.where(covered, d_depth / safe_alpha, 0.0)
    g_alpha = d_alpha + np.where(
        covered, -d_depth * out.depth_raw / safe_alpha ** 2, 0.0)
    nnorm = np.linalg.norm(out.normal_raw, axis=-1)
    nvalid = covered & (nnorm > 1e-12)
    safe_norm = np.where(nvalid, nnorm, 1.0)
    nd = np.sum(out.normal * d_normal, axis=-1, keepdims=True)
    g_normal_raw = np.where(
        nvalid[..., None], (d_normal - out.normal * nd) / safe_norm[..., None], 0.0)
    u_bg = d_color @ tape.background

    E = tape.entry_splat.shape[0]
    d_mean2d_e = np.zeros((E, 2))
    d_conic_e = np.zeros((E, 4))
    d_opac_e = np.zeros(E)
    d_color_e = np.zeros((E, 3))
    d_depthz_e = np.zeros(E)
    d_normal_e = np.zeros((E, 3))
    if E:
        _kernels.tile_backward(
            tape.tile_starts, tape.entry_splat, tape.mean2d, tape.conic,
            splats.opacities, splats.colors, tape.depthz, tape.normalcam,
            W, H, tape.tile, tape.n_tiles_x, tape.stop_t,
            d_color, g_depth_raw, g_normal_raw, g_alpha, u_bg,
            d_mean2d_e, d_conic_e, d_opac_e, d_color_e, d_depthz_e, d_normal_e)

    n = tape.n_splats
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    d_opac = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_depthz = np.zeros(n)
    d_normalcam = np.zeros((n, 3))
    ids = tape.entry_splat
    np.add.at(d_mean2d, ids, d_mean2d_e)
    np.add.at(d_conic, ids, d_conic_e.reshape(E, 2, 2))
    np.add.at(d_opac, ids, d_opac_e)
    np.add.at(d_colors, ids, d_color_e)
    np.add.at(d_depthz, ids, d_depthz_e)
    np.add.at(d_normalcam, ids, d_normal_e)

    # conic = inv(cov2d):  dC = -Lambda dLambda Lambda
    lam = np.empty((n, 2, 2))
    lam[:, 0, 0] = tape.conic[:, 0]
    lam[:, 0, 1] = tape.conic[:, 1]
    lam[:, 1, 0] = tape.conic[:, 1]
    lam[:, 1, 1] = tape.conic[:, 2]
    d_cov2d = -lam @ d_conic @ lam

    d_means, d_cov3d = project_gaussians_backward(
        splats.means, tape.cov3d, view, d_mean2d, d_cov2d, d_depthz, tape.valid)

    scales, quats = splats.branch(tape.which)
    d_nworld = d_normalcam @ view.R
    dq_normal = splat_normals_backward(quats, tape.jmin, tape.signs, d_nworld)
    d_scales, d_quats = build_covariance_backward(scales, quats, d_cov3d)
    d_quats = d_quats + dq_normal

    dead = ~tape.valid
    for arr in (d_means, d_scales, d_quats, d_colors):
        arr[dead] = 0.0
    d_opac[dead] = 0.0
    d_mean2d[dead] = 0.0
    return SplatGrads(means=d_means, scales=d_scales, quats=d_quats,
                      opacities=d_opac, colors=d_colors, mean2d=d_mean2d,
                      which=tape.which)


# ---------------------------------------------------------------------------
# densification statistics
# ---------------------------------------------------------------------------

@dataclass
class DensifyStats:
    """Running per-anchor mean of screen-space gradient norms and decoded
    opacities, accumulated between densification rounds."""

    grad_sum: np.ndarray   # (A,)
    grad_count: np.ndarray  # (A,)
    opac_sum: np.ndarray   # (A,)
    opac_count: np.ndarray  # (A,)

    @classmethod
    def zeros(cls, n_anchors: int) -> "DensifyStats":
        return cls(np.zeros(n_anchors), np.zeros(n_anchors),
                   np.zeros(n_anchors), np.zeros(n_anchors))

    @property
    def grad_mean(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.grad_count, 1.0)

    @property
    def opac_mean(self) -> np.ndarray:
        return self.opac_sum / np.maximum(self.opac_count, 1.0)


def accumulate_densify_stats(
    stats: DensifyStats,
    d_mean2d: np.ndarray,
    splat_anchor: np.ndarray,
    visible: np.ndarray,
) -> DensifyStats:
    """Fold one view's per-splat screen gradients into the per-anchor running
    mean.  Each visible owned splat contributes one sample."""
    norms = np.linalg.norm(d_mean2d, axis=-1)
    sel = np.asarray(visible, dtype=bool)
    np.add.at(stats.grad_sum, splat_anchor[sel], norms[sel])
    np.add.at(stats.grad_count, splat_anchor[sel], 1.0)
    return stats


def accumulate_opacity_stats(
    stats: DensifyStats,
    opacities: np.ndarray,
    splat_anchor: np.ndarray,
) -> DensifyStats:
    """Fold one decode's per-splat opacities into the per-anchor running mean."""
    np.add.at(stats.opac_sum, splat_anchor, opacities)
    np.add.at(stats.opac_count, splat_anchor, 1.0)
    return stats
