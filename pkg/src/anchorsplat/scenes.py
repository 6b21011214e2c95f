"""Analytic SDF scenes with a ray-traced reference renderer.

This is the ground-truth factory: exact signed distances, sphere-traced
color/depth/normal maps, look-at camera rigs, surface point sampling, and
the three canonical test scenes ("sphere", "blocks", "room").  Every
geometric claim in the package is ultimately tested against these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidInputError, View, quat_to_rotmat

HIT_EPS = 1e-5
NORMAL_H = 1e-4
MAX_STEPS = 256
AMBIENT = 0.3
DIFFUSE = 0.7


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    checker: float = 0.0  # checker cell size in world units; 0 = flat albedo

    kind = "sphere"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    checker: float = 0.0

    kind = "box"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        R = quat_to_rotmat(self.quat)
        q = np.abs((x - self.center) @ R) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def area(self) -> float:
        a, b, c = self.half_extents * 2
        return 2.0 * (a * b + b * c + c * a)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a, b, c = self.half_extents * 2
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, (n, 2))
        pts = np.empty((n, 3))
        h = self.half_extents
        for f in range(6):
            sel = face == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            pts[sel, axis] = sign * h[axis]
            pts[sel, others[0]] = u[sel, 0] * h[others[0]]
            pts[sel, others[1]] = u[sel, 1] * h[others[1]]
        R = quat_to_rotmat(self.quat)
        return pts @ R.T + self.center


@dataclass
class Plane:
    """Half-space boundary {n . x = offset}; positive side is outside."""

    normal: np.ndarray
    offset: float
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    checker: float = 0.0

    kind = "plane"

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.normal = n / np.linalg.norm(n)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return x @ self.normal - self.offset

    def area(self) -> float:  # patch area resolved against the scene bbox
        return 0.0

    def sample_surface(self, n: int, rng: np.random.Generator,
                       bbox: np.ndarray | None = None) -> np.ndarray:
        if bbox is None:
            raise InvalidInputError("plane sampling needs the scene bbox")
        lo, hi = bbox
        center = (lo + hi) / 2.0
        center = center - (center @ self.normal - self.offset) * self.normal
        # orthonormal tangent basis
        t1 = np.cross(self.normal, [1.0, 0.0, 0.0])
        if np.linalg.norm(t1) < 1e-6:
            t1 = np.cross(self.normal, [0.0, 1.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(self.normal, t1)
        ext = 0.5 * np.linalg.norm(hi - lo)
        u = rng.uniform(-ext, ext, (n, 2))
        return center + u[:, :1] * t1 + u[:, 1:] * t2


PRIMITIVE_KINDS = {"sphere": Sphere, "box": Box, "plane": Plane}


@dataclass
class AnalyticScene:
    """Min-union of primitives with an explicit evaluation bounding box."""

    primitives: list
    bbox: np.ndarray  # (2,3): min, max

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)


def scene_sdf(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Signed distance: min over the primitives, negative inside."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    d = np.full(pts.shape[0], np.inf)
    for p in scene.primitives:
        d = np.minimum(d, p.sdf(pts))
    return d[0] if single else d


def scene_normal(scene: AnalyticScene, x: np.ndarray, h: float = NORMAL_H) -> np.ndarray:
    """Unit SDF gradient by central differences."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.empty_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (scene_sdf(scene, pts + e) - scene_sdf(scene, pts - e)) / (2 * h)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    g = g / np.maximum(norm, 1e-15)
    return g[0] if np.asarray(x).ndim == 1 else g


def scene_albedo(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Albedo of the closest primitive, with optional checker modulation."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dists = np.stack([p.sdf(pts) for p in scene.primitives], axis=0)
    owner = np.argmin(np.abs(dists), axis=0)
    out = np.empty((pts.shape[0], 3))
    for i, prim in enumerate(scene.primitives):
        sel = owner == i
        if not np.any(sel):
            continue
        alb = np.broadcast_to(prim.albedo, (int(sel.sum()), 3)).copy()
        if prim.checker > 0:
            cells = np.floor(pts[sel] / prim.checker).astype(np.int64)
            parity = (cells.sum(axis=1) % 2).astype(np.float64)
            alb = alb * (1.0 - 0.6 * parity)[:, None]
        out[sel] = alb
    return out


# ---------------------------------------------------------------------------
# ray tracing
# ---------------------------------------------------------------------------

def sphere_trace(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray,
                 t_max: float = 50.0) -> tuple[np.ndarray, np.ndarray]:
    """March each ray to |sdf| < HIT_EPS.  Returns (t values, hit mask)."""
    n = origins.shape[0]
    t = np.zeros(n)
    live = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(MAX_STEPS):
        if not np.any(live):
            break
        p = origins[live] + t[live, None] * dirs[live]
        d = scene_sdf(scene, p)
        conv = np.abs(d) < HIT_EPS
        idx = np.nonzero(live)[0]
        hit[idx[conv]] = True
        t[idx] += np.where(conv, 0.0, d)
        live[idx] = ~conv & (t[idx] < t_max)
    return t, hit


def raytrace_view(scene: AnalyticScene, view: View
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """GT maps for one view: color (headlight + ambient shading), camera-z
    depth, camera-frame normals.  Background: black / 0 / 0."""
    rays_cam = view.pixel_rays().reshape(-1, 3)
    dirs = rays_cam @ view.R  # world directions, R^T applied row-wise
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = view.cam_pos
    origins = np.broadcast_to(origin, dirs.shape).copy()
    t, hit = sphere_trace(scene, origins, dirs)

    H, W = view.height, view.width
    color = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    normal = np.zeros((H * W, 3))
    if np.any(hit):
        p = origins[hit] + t[hit, None] * dirs[hit]
        n_world = scene_normal(scene, p)
        light = -dirs[hit]
        lam = np.maximum(np.sum(n_world * light, axis=1), 0.0)
        alb = scene_albedo(scene, p)
        color[hit] = np.clip(alb * (AMBIENT + DIFFUSE * lam)[:, None], 0.0, 1.0)
        p_cam = p @ view.R.T + view.t
        depth[hit] = p_cam[:, 2]
        n_cam = n_world @ view.R.T
        flip = np.where(np.sum(n_cam * p_cam, axis=1) > 0, -1.0, 1.0)
        normal[hit] = n_cam * flip[:, None]
    return (color.reshape(H, W, 3), depth.reshape(H, W), normal.reshape(H, W, 3))


def raytrace_views(scene: AnalyticScene, views: list[View]) -> list[View]:
    """Attach GT maps to each view in place and return the list."""
    for v in views:
        c, d, n = raytrace_view(scene, v)
        v.gt_color, v.gt_depth, v.gt_normal = c, d, n
    return views


# ---------------------------------------------------------------------------
# camera rigs
# ---------------------------------------------------------------------------

def look_at_view(pos: np.ndarray, target: np.ndarray, fov_deg: float,
                 width: int, height: int, name: str = "") -> View:
    """CV-convention camera (x right, y down, z forward) looking at target,
    world y-up."""
    pos = np.asarray(pos, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ pos
    fx = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return View(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                R=R, t=t, width=width, height=height, name=name)


def make_camera_rig(n: int, radius: float, elevation_deg: float,
                    target: np.ndarray, fov_deg: float = 60.0,
                    width: int = 128, height: int = 128,
                    rings: int = 1, inward: bool = True,
                    second_elevation_deg: float | None = None) -> list[View]:
    """n cameras at equal azimuth spacing on 1 or 2 elevation rings, all with
    look-at orientation toward (or away from, for indoor rigs) the target."""
    if n < 2 or radius <= 0:
        raise InvalidInputError("need n >= 2 cameras and positive radius")
    target = np.asarray(target, dtype=np.float64)
    views = []
    if rings == 1:
        ring_elevs = [elevation_deg]
    else:
        second = (elevation_deg + 25.0 if second_elevation_deg is None
                  else second_elevation_deg)
        ring_elevs = [elevation_deg, second]
    per = [n // rings + (1 if i < n % rings else 0) for i in range(rings)]
    vi = 0
    for ring, (elev, cnt) in enumerate(zip(ring_elevs, per)):
        el = np.radians(elev)
        for j in range(cnt):
            az = 2 * np.pi * j / cnt + (0.5 * ring * 2 * np.pi / max(cnt, 1))
            pos = target + radius * np.array(
                [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
            look = target if inward else pos + (pos - target)
            views.append(look_at_view(pos, look, fov_deg, width, height,
                                      name=f"view_{vi:03d}"))
            vi += 1
    return views


# ---------------------------------------------------------------------------
# point sampling
# ---------------------------------------------------------------------------

def project_to_surface(scene: AnalyticScene, pts: np.ndarray,
                       iters: int = 12) -> np.ndarray:
    """Newton projection along the SDF gradient."""
    p = np.array(pts, dtype=np.float64)
    for _ in range(iters):
        d = scene_sdf(scene, p)
        g = scene_normal(scene, p)
        p = p - d[:, None] * g
    return p


def sample_init_points(scene: AnalyticScene, count: int, noise: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Surface points (|sdf| < 1e-3 before jitter) with isotropic Gaussian
    noise, exactly ``count`` of them."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    lo, hi = scene.bbox
    out = []
    have = 0
    while have < count:
        cand = rng.uniform(lo, hi, (max(count, 256), 3))
        proj = project_to_surface(scene, cand)
        keep = np.abs(scene_sdf(scene, proj)) < 1e-3
        inside = np.all((proj >= lo) & (proj <= hi), axis=1)
        sel = proj[keep & inside]
        out.append(sel)
        have += sel.shape[0]
    pts = np.concatenate(out)[:count]
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts


def sample_surface_points(scene: AnalyticScene, count: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Area-weighted samples on the union surface, clipped to the bbox.

    Samples landing inside another primitive (not on the union surface) are
    rejected via |scene_sdf| and re-drawn.
    """
    lo, hi = scene.bbox
    diag = np.linalg.norm(hi - lo)
    areas = []
    for p in scene.primitives:
        a = p.area()
        if a == 0.0:  # plane: bbox patch
            a = diag * diag
        areas.append(a)
    areas = np.asarray(areas)
    probs = areas / areas.sum()
    out = []
    have = 0
    while have < count:
        n_draw = max(count - have, 256)
        counts = rng.multinomial(n_draw, probs)
        batch = []
        for prim, c in zip(scene.primitives, counts):
            if c == 0:
                continue
            if prim.kind == "plane":
                batch.append(prim.sample_surface(c, rng, bbox=scene.bbox))
            else:
                batch.append(prim.sample_surface(c, rng))
        pts = np.concatenate(batch)
        keep = np.abs(scene_sdf(scene, pts)) < 1e-6
        keep &= np.all((pts >= lo) & (pts <= hi), axis=1)
        out.append(pts[keep])
        have += out[-1].shape[0]
    return np.concatenate(out)[:count]


# ---------------------------------------------------------------------------
# canonical scenes
# ---------------------------------------------------------------------------

def scene_sphere() -> AnalyticScene:
    """One checkered sphere resting on a checkered ground plane."""
    return AnalyticScene(
        primitives=[
            Sphere(center=[0.0, 0.08, 0.0], radius=0.5,
                   albedo=[0.85, 0.45, 0.30], checker=0.35),
            Plane(normal=[0.0, 1.0, 0.0], offset=-0.6,
                  albedo=[0.55, 0.60, 0.70], checker=0.5),
        ],
        bbox=np.array([[-1.6, -0.62, -1.6], [1.6, 0.75, 1.6]]))


def scene_blocks() -> AnalyticScene:
    """Two rotated boxes and a sphere on a plane: creases and high-frequency
    normals for the densification tests."""
    r2 = np.sqrt(2) / 2
    return AnalyticScene(
        primitives=[
            Box(center=[-0.55, -0.25, -0.15], half_extents=[0.28, 0.35, 0.24],
                quat=[np.cos(np.pi / 12), 0, np.sin(np.pi / 12), 0],
                albedo=[0.80, 0.35, 0.30], checker=0.3),
            Box(center=[0.50, -0.38, 0.30], half_extents=[0.24, 0.22, 0.22],
                quat=[np.cos(-np.pi / 16), 0, np.sin(-np.pi / 16), 0],
                albedo=[0.30, 0.65, 0.35], checker=0.25),
            Sphere(center=[0.12, -0.28, -0.52], radius=0.32,
                   albedo=[0.35, 0.45, 0.85], checker=0.3),
            Plane(normal=[0.0, 1.0, 0.0], offset=-0.6,
                  albedo=[0.60, 0.60, 0.62], checker=0.5),
        ],
        bbox=np.array([[-1.5, -0.62, -1.5], [1.5, 0.55, 1.5]]))


def scene_room() -> AnalyticScene:
    """Inward-facing box (walls, floor, ceiling, with creases at every
    junction): indoor-style views."""
    return AnalyticScene(
        primitives=[
            Plane(normal=[0, 1, 0], offset=-0.6, albedo=[0.62, 0.60, 0.58], checker=0.5),
            Plane(normal=[0, -1, 0], offset=-0.8, albedo=[0.70, 0.70, 0.72]),
            Plane(normal=[1, 0, 0], offset=-1.1, albedo=[0.75, 0.45, 0.40], checker=0.55),
            Plane(normal=[-1, 0, 0], offset=-1.1, albedo=[0.42, 0.60, 0.75], checker=0.55),
            Plane(normal=[0, 0, 1], offset=-1.1, albedo=[0.55, 0.70, 0.50], checker=0.55),
            Plane(normal=[0, 0, -1], offset=-1.1, albedo=[0.72, 0.68, 0.45], checker=0.55),
        ],
        bbox=np.array([[-1.12, -0.62, -1.12], [1.12, 0.82, 1.12]]))


SCENES = {"sphere": scene_sphere, "blocks": scene_blocks, "room": scene_room}

RIG_DEFAULTS = {
    "sphere": dict(radius=3.0, elevation_deg=28.0, target=[0.0, 0.0, 0.0],
                   fov_deg=75.0, rings=2, second_elevation_deg=58.0, inward=True),
    "blocks": dict(radius=2.9, elevation_deg=28.0, target=[0.0, -0.15, 0.0],
                   fov_deg=75.0, rings=2, second_elevation_deg=58.0, inward=True),
    "room": dict(radius=0.8, elevation_deg=-28.0, target=[0.0, 0.05, 0.0],
                 fov_deg=85.0, rings=2, second_elevation_deg=28.0, inward=True),
}


def canonical_rig(scene_name: str, n_views: int, width: int, height: int,
                  **overrides) -> list[View]:
    if scene_name not in RIG_DEFAULTS:
        raise InvalidInputError(f"unknown scene {scene_name!r}")
    kw = dict(RIG_DEFAULTS[scene_name])
    kw.update(overrides)
    return make_camera_rig(n_views, width=width, height=height, **kw)
