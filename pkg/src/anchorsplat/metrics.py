"""Image and surface metrics: PSNR, SSIM (shared with the losses), and
Chamfer distance / F1 against analytic scenes or reference meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import InvalidInputError
from .losses import ssim  # noqa: F401  (re-exported: eval shares the loss SSIM)
from .scenes import AnalyticScene, sample_surface_points, scene_sdf
from .surface import TriangleMesh, sample_mesh_points

PSNR_CAP = 100.0
BRUTE_FORCE_MAX = 1000


@dataclass
class SurfaceMetrics:
    precision: float
    recall: float
    f1: float
    chamfer: float
    n_pred: int
    n_gt: int
    empty: bool = False


def psnr(img: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0,1] images, capped at 100 dB."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise InvalidInputError("image shapes differ")
    mse = float(np.mean((img - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def nearest_distances(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Distance from each query to its nearest target point.

    Brute force for small target sets, spatial index (cKDTree) above
    BRUTE_FORCE_MAX; both paths are exact nearest neighbors.
    """
    queries = np.atleast_2d(queries)
    targets = np.atleast_2d(targets)
    if targets.shape[0] == 0:
        return np.full(queries.shape[0], np.inf)
    if targets.shape[0] <= BRUTE_FORCE_MAX:
        d2 = np.sum((queries[:, None, :] - targets[None, :, :]) ** 2, axis=-1)
        return np.sqrt(d2.min(axis=1))
    dist, _ = cKDTree(targets).query(queries)
    return dist


def chamfer_f1(pred: TriangleMesh | np.ndarray,
               gt: AnalyticScene | TriangleMesh,
               tau: float,
               n_samples: int = 100_000,
               rng: np.random.Generator | None = None) -> SurfaceMetrics:
    """Precision/recall/F1 at threshold tau plus symmetric Chamfer distance.

    pred may be a mesh (sampled by area) or a point set.  When gt is an
    analytic scene, pred-to-gt distances use the exact |sdf|; the reverse
    direction samples the gt surface and uses nearest neighbors over the
    pred samples.
    """
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    rng = rng or np.random.default_rng(0)
    if isinstance(pred, TriangleMesh):
        pred_pts = sample_mesh_points(pred, n_samples, rng)
    else:
        pred_pts = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if pred_pts.shape[0] == 0:
        return SurfaceMetrics(0.0, 0.0, 0.0, np.inf, 0, 0, empty=True)

    if isinstance(gt, AnalyticScene):
        gt_pts = sample_surface_points(gt, n_samples, rng)
        d_pred = np.abs(scene_sdf(gt, pred_pts))
    else:
        gt_pts = sample_mesh_points(gt, n_samples, rng)
        d_pred = nearest_distances(pred_pts, gt_pts)
    d_gt = nearest_distances(gt_pts, pred_pts)

    precision = float(np.mean(d_pred <= tau))
    recall = float(np.mean(d_gt <= tau))
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    chamfer = float(0.5 * (d_pred.mean() + d_gt.mean()))
    return SurfaceMetrics(precision=precision, recall=recall, f1=f1,
                          chamfer=chamfer, n_pred=len(pred_pts),
                          n_gt=len(gt_pts))
