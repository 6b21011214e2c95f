"""The unified scene model: spatial anchors with learned features and offsets,
MLP heads decoding k neural Gaussians per anchor, and the residual geometry
covariance head.

Decoding produces both covariance branches at once: the rendering branch from
the rgb covariance head, and the geometry branch composed in raw parameter
space (pre-exponential scale, pre-normalized quaternion) as

    y_geo = y_rgb + delta_y        (residual mode)

so a zero-initialized residual head reproduces the rendering covariance
bit-exactly.  Gradient routing is source-aware: rendering-loss gradients
train the whole model except the residual head; geometry-loss gradients
train only the residual head by default, with gates opening the opacity and
rgb-covariance paths for ablations.  The anchor trunk (features, offsets,
per-anchor scaling) never receives geometry-loss gradients, which keeps
rendering output invariant under geometry-only optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import InvalidInputError
from .mlp import MlpParams, init_mlp, mlp_backward, mlp_forward, scaled_clone
from .rasterizer import Splats, SplatGrads

FEAT_DIM = 32
HIDDEN_DIM = 32
DEFAULT_K = 10
OPACITY_SKIP = 0.005
QUAT_BIAS = np.array([1.0, 0.0, 0.0, 0.0])


class StateError(RuntimeError):
    """Raised when an operation is invoked in the wrong lifecycle state."""


@dataclass
class GateConfig:
    """Which attribute paths geometry-loss gradients may use."""

    opacity_grad_from_geometry: bool = False
    covariance_grad_from_geometry: bool = True
    rgb_branch_grad_from_geometry: bool = False


@dataclass
class AnchorField:
    """Anchor positions are fixed after creation; features, offsets and the
    per-anchor scaling are the learned trunk."""

    positions: np.ndarray   # (A,3)
    features: np.ndarray    # (A,F)
    offsets: np.ndarray     # (A,k,3)
    log_gamma: np.ndarray   # (A,), gamma = exp(log_gamma) > 0
    active: np.ndarray      # (A,) bool
    voxel_size: float
    k: int = DEFAULT_K

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        a = self.positions.shape[0]
        self.features = np.asarray(self.features, dtype=np.float64).reshape(a, -1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(a, self.k, 3)
        self.log_gamma = np.asarray(self.log_gamma, dtype=np.float64).reshape(a)
        self.active = np.asarray(self.active, dtype=bool).reshape(a)

    @property
    def n_anchors(self) -> int:
        return self.positions.shape[0]

    @property
    def gamma(self) -> np.ndarray:
        return np.exp(self.log_gamma)

    def trunk_arrays(self) -> list[np.ndarray]:
        return [self.features, self.offsets, self.log_gamma]


@dataclass
class FieldHeads:
    opacity: MlpParams
    color: MlpParams
    cov_rgb: MlpParams           # phi_1
    cov_geo: MlpParams | None = None  # phi_2 (residual or standalone)
    geo_mode: str = "render_only"     # render_only | residual | standalone
    k: int = DEFAULT_K

    def head_arrays(self) -> dict[str, list[np.ndarray]]:
        out = {"opacity": self.opacity.arrays(),
               "color": self.color.arrays(),
               "cov_rgb": self.cov_rgb.arrays()}
        if self.cov_geo is not None:
            out["cov_geo"] = self.cov_geo.arrays()
        return out


def init_heads(rng: np.random.Generator, feat_dim: int = FEAT_DIM,
               k: int = DEFAULT_K, hidden: int = HIDDEN_DIM) -> FieldHeads:
    """Two-layer ReLU heads; sigmoid outputs for opacity/color, raw outputs
    for the 7k covariance parameters (3 scale + 4 quaternion per Gaussian)."""
    in_dim = feat_dim + 4  # feature, log-distance, view direction
    return FieldHeads(
        opacity=init_mlp([in_dim, hidden, k], ["relu", "sigmoid"], rng),
        color=init_mlp([in_dim, hidden, 3 * k], ["relu", "sigmoid"], rng),
        cov_rgb=init_mlp([in_dim, hidden, 7 * k], ["relu", "none"], rng),
        cov_geo=None, geo_mode="render_only", k=k)


def attach_lite_geo(heads: FieldHeads, lam: float) -> FieldHeads:
    """Create the residual geometry head as a lam-scaled clone of the rgb
    covariance head.  One-shot: a second invocation is a state error."""
    if heads.cov_geo is not None:
        raise StateError("geometry head already attached")
    heads.cov_geo = scaled_clone(heads.cov_rgb, lam)
    heads.geo_mode = "residual"
    return heads


def attach_standalone_geo(heads: FieldHeads, rng: np.random.Generator) -> FieldHeads:
    """Create an independent geometry covariance head (no residual coupling)."""
    if heads.cov_geo is not None:
        raise StateError("geometry head already attached")
    in_dim = heads.cov_rgb.in_dim
    out_dim = heads.cov_rgb.out_dim
    hidden = heads.cov_rgb.layers[0].weight.shape[0]
    heads.cov_geo = init_mlp([in_dim, hidden, out_dim], ["relu", "none"], rng)
    heads.geo_mode = "standalone"
    return heads


# ---------------------------------------------------------------------------
# anchor initialization
# ---------------------------------------------------------------------------

def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def init_anchors(points: np.ndarray, voxel_size: float,
                 rng: np.random.Generator, k: int = DEFAULT_K,
                 feat_dim: int = FEAT_DIM) -> AnchorField:
    """One anchor per occupied voxel at the voxel-mean position.

    Features are zero-initialized; offsets uniform in [-0.5, 0.5] (scaled by
    gamma at decode time); gamma starts at the voxel size.  Anchors are
    ordered by voxel key, so the result is independent of point order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise InvalidInputError("cannot build anchors from an empty point set")
    keys = voxel_keys(points, voxel_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    a = uniq.shape[0]
    sums = np.zeros((a, 3))
    counts = np.zeros(a)
    np.add.at(sums, inverse, points)
    np.add.at(counts, inverse, 1.0)
    positions = sums / counts[:, None]
    return AnchorField(
        positions=positions,
        features=np.zeros((a, feat_dim)),
        offsets=rng.uniform(-0.5, 0.5, (a, k, 3)),
        log_gamma=np.full(a, np.log(voxel_size)),
        active=np.ones(a, dtype=bool),
        voxel_size=voxel_size, k=k)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodeTape:
    active_idx: np.ndarray       # (Aact,) original anchor indices
    inputs: np.ndarray           # (Aact, F+4)
    op_tape: list
    col_tape: list
    cov_tape: list
    geo_tape: list | None
    y_rgb: np.ndarray            # (Aact, 7k)
    y_geo: np.ndarray            # (Aact, 7k)
    mode: str                    # render_only | unified
    base_scale: float


@dataclass
class DecodeResult:
    splats: Splats
    skippable: np.ndarray        # (N,) opacity below render threshold
    anchor_ids: np.ndarray       # (N,) original anchor index per splat
    tape: DecodeTape


def _raw_to_branch(y: np.ndarray, k: int, base_scale: float
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Raw 7k head output -> (scales (A*k,3), quats (A*k,4))."""
    a = y.shape[0]
    y = y.reshape(a * k, 7)
    scales = base_scale * np.exp(y[:, :3])
    q_raw = y[:, 3:] + QUAT_BIAS
    q = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True)
    return scales, q


def decode_anchors(field: AnchorField, heads: FieldHeads, cam_pos: np.ndarray,
                   mode: str = "unified") -> DecodeResult:
    """Decode every active anchor into k neural Gaussians for one view.

    mode='render_only' copies the rendering covariance into the geometry
    branch; 'unified' composes it per the heads' geometry mode.
    """
    if mode not in ("render_only", "unified"):
        raise InvalidInputError(f"unknown decode mode {mode!r}")
    idx = np.nonzero(field.active)[0]
    a = idx.size
    k = field.k
    pos = field.positions[idx]
    delta = np.linalg.norm(pos - cam_pos, axis=1)
    theta = (pos - cam_pos) / np.maximum(delta, 1e-12)[:, None]
    X = np.concatenate([field.features[idx],
                        np.log1p(delta)[:, None], theta], axis=1)

    op, op_tape = mlp_forward(heads.opacity, X)
    col, col_tape = mlp_forward(heads.color, X)
    y_rgb, cov_tape = mlp_forward(heads.cov_rgb, X)

    geo_tape = None
    if mode == "render_only" or heads.cov_geo is None:
        y_geo = y_rgb
    elif heads.geo_mode == "residual":
        dy, geo_tape = mlp_forward(heads.cov_geo, X)
        y_geo = y_rgb + dy
    elif heads.geo_mode == "standalone":
        y_geo, geo_tape = mlp_forward(heads.cov_geo, X)
    else:
        raise InvalidInputError(f"unknown geometry mode {heads.geo_mode!r}")

    gamma = np.exp(field.log_gamma[idx])
    centers = pos[:, None, :] + field.offsets[idx] * gamma[:, None, None]
    base = field.voxel_size
    scales, quats = _raw_to_branch(y_rgb, k, base)
    scales_geo, quats_geo = _raw_to_branch(y_geo, k, base)

    opacities = op.reshape(a * k)
    splats = Splats(means=centers.reshape(a * k, 3), scales=scales, quats=quats,
                    opacities=opacities, colors=col.reshape(a * k, 3),
                    scales_geo=scales_geo, quats_geo=quats_geo)
    tape = DecodeTape(active_idx=idx, inputs=X, op_tape=op_tape,
                      col_tape=col_tape, cov_tape=cov_tape, geo_tape=geo_tape,
                      y_rgb=np.atleast_2d(y_rgb), y_geo=np.atleast_2d(y_geo),
                      mode=mode, base_scale=base)
    return DecodeResult(splats=splats, skippable=opacities < OPACITY_SKIP,
                        anchor_ids=np.repeat(idx, k), tape=tape)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class FieldGrads:
    """Gradients aligned with AnchorField/FieldHeads parameter slots; head
    entries are None when the path is closed."""

    features: np.ndarray
    offsets: np.ndarray
    log_gamma: np.ndarray
    opacity: MlpParams | None = None
    color: MlpParams | None = None
    cov_rgb: MlpParams | None = None
    cov_geo: MlpParams | None = None


def _branch_raw_grad(y: np.ndarray, k: int, base_scale: float,
                     d_scales: np.ndarray, d_quats: np.ndarray) -> np.ndarray:
    """Chain (d_scales, d_quats) back to the raw 7k head output."""
    a = y.shape[0]
    yf = y.reshape(a * k, 7)
    dy = np.empty_like(yf)
    scales = base_scale * np.exp(yf[:, :3])
    dy[:, :3] = d_scales * scales
    q_raw = yf[:, 3:] + QUAT_BIAS
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    qh = q_raw / norm
    proj = d_quats - qh * np.sum(qh * d_quats, axis=1, keepdims=True)
    dy[:, 3:] = proj / norm
    return dy.reshape(a, 7 * k)


def decode_backward(field: AnchorField, heads: FieldHeads, tape: DecodeTape,
                    grads: SplatGrads, source: str,
                    gates: GateConfig | None = None) -> FieldGrads:
    """Chain per-splat gradients back to anchor trunk and head parameters.

    source='render' uses the rendering branch and never touches the residual
    head.  source='geometry' updates only head parameters admitted by the
    gates and leaves the trunk frozen.
    """
    if source not in ("render", "geometry"):
        raise InvalidInputError(f"unknown loss source {source!r}")
    gates = gates or GateConfig()
    idx = tape.active_idx
    a = idx.size
    k = field.k
    fg = FieldGrads(features=np.zeros_like(field.features),
                    offsets=np.zeros_like(field.offsets),
                    log_gamma=np.zeros_like(field.log_gamma))
    if a == 0:
        return fg
    d_inputs = np.zeros_like(tape.inputs)
    feat_dim = field.features.shape[1]

    opacity_open = source == "render" or gates.opacity_grad_from_geometry
    cov_open = source == "render" or gates.covariance_grad_from_geometry

    if opacity_open and np.any(grads.opacities):
        g_op, g_x = mlp_backward(heads.opacity, tape.op_tape,
                                 grads.opacities.reshape(a, k))
        fg.opacity = g_op
        d_inputs += g_x

    if source == "render" and np.any(grads.colors):
        g_col, g_x = mlp_backward(heads.color, tape.col_tape,
                                  grads.colors.reshape(a, 3 * k))
        fg.color = g_col
        d_inputs += g_x

    if cov_open and (np.any(grads.scales) or np.any(grads.quats)):
        if source == "render":
            dy = _branch_raw_grad(tape.y_rgb, k, tape.base_scale,
                                  grads.scales, grads.quats)
            g_cov, g_x = mlp_backward(heads.cov_rgb, tape.cov_tape, dy)
            fg.cov_rgb = g_cov
            d_inputs += g_x
        else:
            dy = _branch_raw_grad(tape.y_geo, k, tape.base_scale,
                                  grads.scales, grads.quats)
            if tape.mode == "render_only" or heads.cov_geo is None:
                g_cov, _ = mlp_backward(heads.cov_rgb, tape.cov_tape, dy)
                fg.cov_rgb = g_cov
            elif heads.geo_mode == "standalone":
                g_geo, _ = mlp_backward(heads.cov_geo, tape.geo_tape, dy)
                fg.cov_geo = g_geo
            else:  # residual: y_geo = y_rgb + dy_head
                g_geo, _ = mlp_backward(heads.cov_geo, tape.geo_tape, dy)
                fg.cov_geo = g_geo
                if gates.rgb_branch_grad_from_geometry:
                    g_cov, _ = mlp_backward(heads.cov_rgb, tape.cov_tape, dy)
                    fg.cov_rgb = g_cov

    if source == "render":
        # centers = x + offsets * gamma
        d_centers = grads.means.reshape(a, k, 3)
        gamma = np.exp(field.log_gamma[idx])
        fg.offsets[idx] = d_centers * gamma[:, None, None]
        d_gamma = np.sum(field.offsets[idx] * d_centers, axis=(1, 2))
        fg.log_gamma[idx] = d_gamma * gamma
        fg.features[idx] = d_inputs[:, :feat_dim]
    # geometry source: trunk (features/offsets/gamma) stays frozen so
    # geometry-only optimization cannot move the rendering output
    return fg
