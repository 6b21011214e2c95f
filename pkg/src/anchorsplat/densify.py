"""Geometry-guided anchor growing and pruning.

Anchors grow where the accumulated screen-space gradient plus a geometric
guidance term exceeds a threshold.  The guidance blends two clues gathered
from geometry-pass renders: the signed distance between an anchor and the
rendered surface along its view rays, and the local depth/normal
discrepancy; a Gaussian falloff concentrates growth near the rendered
zero level set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorField, voxel_keys
from .geometry import InvalidInputError, View
from .losses import normal_from_depth
from .rasterizer import DensifyStats

ANCHOR_CAP = 50_000


@dataclass
class DensifyConfig:
    omega_g: float = 0.0005      # geometric-guidance weight (gradient units)
    omega_n: float = 1.0         # normal-clue weight
    theta_sdf: float = 0.1       # SDF range threshold, world units
    sigma_zeta: float = 0.05     # width of the zero-level-set falloff
    grow_threshold: float = 0.001  # epsilon*: grow when score exceeds this
    interval: int = 100          # iterations between densification rounds
    prune_opacity: float = 0.005
    densify_start: int = 500
    densify_stop: int = 2500
    clue_views: int = 8          # views sampled per clue-gathering round
    anchor_cap: int = ANCHOR_CAP

    def __post_init__(self) -> None:
        if min(self.omega_n, self.theta_sdf, self.sigma_zeta,
               self.grow_threshold, self.interval) <= 0 or self.omega_g < 0:
            raise InvalidInputError("densify parameters must be positive")


@dataclass
class GeoClues:
    """Per-anchor aggregates over the sampled views; anchors invisible in
    every sampled view carry defined=False."""

    signed_distance: np.ndarray   # (A,) mean of D(x) - Z(x)
    mean_abs_distance: np.ndarray  # (A,) mean |D(x) - Z(x)|
    normal_discrepancy: np.ndarray  # (A,) mean L1 of N_d(x) - N(x)
    view_count: np.ndarray        # (A,)
    defined: np.ndarray           # (A,) bool


def zeta(s: np.ndarray | float, sigma: float) -> np.ndarray | float:
    """exp(-s^2 / (2 sigma^2)): 1 at the zero level set, falling with |s|."""
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    return np.exp(-np.square(s) / (2.0 * sigma * sigma))


def gather_geo_clues(field: AnchorField, views: list[View],
                     depth_maps: list[np.ndarray],
                     normal_maps: list[np.ndarray],
                     alpha_maps: list[np.ndarray],
                     alpha_thresh: float = 0.5) -> GeoClues:
    """Aggregate SDF and normal clues for every anchor over the given
    geometry-pass renders (unweighted mean over views seeing the anchor)."""
    a = field.n_anchors
    s_sum = np.zeros(a)
    abs_sum = np.zeros(a)
    n_sum = np.zeros(a)
    count = np.zeros(a)
    for view, depth, normal, alpha in zip(views, depth_maps, normal_maps,
                                          alpha_maps):
        cam = field.positions @ view.R.T + view.t
        z = cam[:, 2]
        ok = field.active & (z > 1e-9)
        u = np.round(np.where(ok, view.fx * cam[:, 0] / np.where(ok, z, 1.0)
                              + view.cx, -1)).astype(np.int64)
        v = np.round(np.where(ok, view.fy * cam[:, 1] / np.where(ok, z, 1.0)
                              + view.cy, -1)).astype(np.int64)
        ok &= (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
        uc = np.clip(u, 0, view.width - 1)
        vc = np.clip(v, 0, view.height - 1)
        ok &= alpha[vc, uc] > alpha_thresh
        ok &= depth[vc, uc] > 0
        nd, nd_ok = normal_from_depth(depth, view)
        ok &= nd_ok[vc, uc]
        s = depth[vc, uc] - z
        n_dis = np.sum(np.abs(nd[vc, uc] - normal[vc, uc]), axis=-1)
        s_sum[ok] += s[ok]
        abs_sum[ok] += np.abs(s[ok])
        n_sum[ok] += n_dis[ok]
        count[ok] += 1.0
    defined = count > 0
    safe = np.maximum(count, 1.0)
    return GeoClues(signed_distance=s_sum / safe,
                    mean_abs_distance=abs_sum / safe,
                    normal_discrepancy=n_sum / safe,
                    view_count=count, defined=defined)


def growth_score(grad_mean: np.ndarray, clues: GeoClues,
                 cfg: DensifyConfig) -> np.ndarray:
    """Per-anchor growth score: the accumulated gradient plus the geometric
    guidance; near the surface (mean |s| below the range threshold) the
    falloff is modulated by the normal clue, else applied alone."""
    z = zeta(clues.signed_distance, cfg.sigma_zeta)
    near = clues.mean_abs_distance < cfg.theta_sdf
    guidance = np.where(near, z * cfg.omega_n * clues.normal_discrepancy, z)
    score = grad_mean + cfg.omega_g * np.where(clues.defined, guidance, 0.0)
    return score


def grow_anchors(field: AnchorField, scores: np.ndarray, cfg: DensifyConfig,
                 iteration: int, rng: np.random.Generator
                 ) -> tuple[AnchorField, int]:
    """Add anchors at unoccupied voxels under the neural-Gaussian centers of
    anchors whose score exceeds the threshold.

    Returns the (possibly new) field and the number of anchors added; the
    caller extends optimizer state and statistics in lockstep.
    """
    if iteration >= cfg.densify_stop or iteration < cfg.densify_start:
        return field, 0
    over = field.active & (scores > cfg.grow_threshold)
    if not np.any(over) or field.n_anchors >= cfg.anchor_cap:
        return field, 0
    idx = np.nonzero(over)[0]
    gamma = np.exp(field.log_gamma[idx])
    centers = (field.positions[idx, None, :]
               + field.offsets[idx] * gamma[:, None, None]).reshape(-1, 3)
    parents = np.repeat(idx, field.k)
    vox = voxel_keys(centers, field.voxel_size)
    occupied = {tuple(k) for k in voxel_keys(field.positions[field.active],
                                             field.voxel_size)}
    new_pos = []
    new_parent = []
    seen = set()
    for c_vox, par in zip(map(tuple, vox), parents):
        if c_vox in occupied or c_vox in seen:
            continue
        seen.add(c_vox)
        new_pos.append((np.asarray(c_vox) + 0.5) * field.voxel_size)
        new_parent.append(par)
    if not new_pos:
        return field, 0
    budget = cfg.anchor_cap - field.n_anchors
    new_pos = np.asarray(new_pos[:budget])
    new_parent = np.asarray(new_parent[:budget])
    n_new = new_pos.shape[0]

    field.positions = np.concatenate([field.positions, new_pos])
    field.features = np.concatenate([field.features,
                                     field.features[new_parent].copy()])
    field.offsets = np.concatenate(
        [field.offsets, rng.uniform(-0.5, 0.5, (n_new, field.k, 3))])
    field.log_gamma = np.concatenate([field.log_gamma,
                                      field.log_gamma[new_parent].copy()])
    field.active = np.concatenate([field.active, np.ones(n_new, dtype=bool)])
    return field, n_new


def prune_anchors(field: AnchorField, stats: DensifyStats,
                  cfg: DensifyConfig) -> int:
    """Deactivate anchors whose mean decoded opacity over the accumulation
    interval fell below the prune threshold.  Returns the count pruned."""
    seen = stats.opac_count > 0
    dead = field.active & seen & (stats.opac_mean < cfg.prune_opacity)
    field.active[dead] = False
    return int(np.count_nonzero(dead))
