"""Mesh extraction: TSDF fusion of depth maps, marching cubes, and mesh I/O.

The voxel grid stores truncated signed distances (normalized to [-1, 1] by
the truncation distance) at node positions ``origin + index * voxel_size``,
with per-node integration weights.  Unobserved nodes keep tsdf = 1.

File formats:
  * PLY: binary little-endian; vertex properties float32 x,y,z (and optional
    nx,ny,nz); faces as ``uchar count + 3 * uint32`` index lists.
  * OBJ: text ``v``/``vn``/``f`` lines, 1-based indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion
from skimage.measure import marching_cubes

from .geometry import InvalidInputError, View

DEFAULT_VOXEL_FRACTION = 1.0 / 128.0  # of the largest bbox edge
DEFAULT_TRUNC_VOXELS = 3.0
BBOX_INFLATE = 0.10


class MeshIOError(RuntimeError):
    pass


@dataclass
class TsdfVolume:
    origin: np.ndarray      # (3,) world position of node (0,0,0)
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf: np.ndarray        # (nx,ny,nz) in [-1,1]
    weight: np.ndarray      # (nx,ny,nz) >= 0

    @classmethod
    def for_bbox(cls, bbox: np.ndarray, voxel_size: float | None = None,
                 inflate: float = BBOX_INFLATE) -> "TsdfVolume":
        bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        center = bbox.mean(axis=0)
        half = (bbox[1] - bbox[0]) / 2.0 * (1.0 + inflate)
        lo, hi = center - half, center + half
        if voxel_size is None:
            voxel_size = float(np.max(hi - lo)) * DEFAULT_VOXEL_FRACTION
        dims = tuple(int(np.ceil(e / voxel_size)) + 1 for e in (hi - lo))
        if min(dims) < 2:
            raise InvalidInputError("volume needs at least 2 nodes per axis")
        return cls(origin=lo, voxel_size=voxel_size, dims=dims,
                   tsdf=np.ones(dims), weight=np.zeros(dims))

    def node_positions(self) -> np.ndarray:
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (V,3)
    faces: np.ndarray                    # (F,3) int
    normals: np.ndarray | None = None    # (V,3)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face indices out of range")

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def fusion_depth(depth: np.ndarray, normal: np.ndarray | None, view: View,
                 alpha: np.ndarray | None = None,
                 alpha_thresh: float = 0.5,
                 min_cos: float = 0.25) -> np.ndarray:
    """Depth map with unreliable pixels zeroed for fusion.

    Drops low-coverage pixels (alpha) and grazing-incidence pixels, whose
    half-pixel projection rounding otherwise plants false signed distances
    near slanted surfaces.
    """
    depth = np.asarray(depth, dtype=np.float64).copy()
    if alpha is not None:
        depth[alpha <= alpha_thresh] = 0.0
    if normal is not None:
        rays = view.pixel_rays()
        rays = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
        cosang = np.abs(np.sum(normal * rays, axis=-1))
        depth[cosang < min_cos] = 0.0
    return depth


def tsdf_integrate(vol: TsdfVolume, depth: np.ndarray, view: View,
                   trunc: float | None = None) -> TsdfVolume:
    """Fuse one depth map (camera z, 0 = invalid) into the volume in place.

    Every node projecting to a valid pixel with signed distance
    sd = depth - node_z > -trunc receives the running weighted average of
    clamp(sd / trunc, -1, 1) with unit view weight.
    """
    if trunc is None:
        trunc = DEFAULT_TRUNC_VOXELS * vol.voxel_size
    if trunc < vol.voxel_size:
        raise InvalidInputError("truncation must be at least one voxel")
    depth = np.asarray(depth, dtype=np.float64)
    pts = vol.node_positions()
    cam = pts @ view.R.T + view.t
    z = cam[:, 2]
    ok = z > 1e-9
    u = np.full(z.shape, -1.0)
    v = np.full(z.shape, -1.0)
    u[ok] = view.fx * cam[ok, 0] / z[ok] + view.cx
    v[ok] = view.fy * cam[ok, 1] / z[ok] + view.cy
    # bilinear depth lookup: nearest-pixel rounding plants false signed
    # distances near slanted surfaces; corners straddling a depth edge or a
    # hole invalidate the sample instead of blending across it
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    ok &= (x0 >= 0) & (x0 + 1 < view.width) & (y0 >= 0) & (y0 + 1 < view.height)
    x0c = np.clip(x0, 0, view.width - 2)
    y0c = np.clip(y0, 0, view.height - 2)
    d00 = depth[y0c, x0c]
    d01 = depth[y0c, x0c + 1]
    d10 = depth[y0c + 1, x0c]
    d11 = depth[y0c + 1, x0c + 1]
    dmin = np.minimum(np.minimum(d00, d01), np.minimum(d10, d11))
    dmax = np.maximum(np.maximum(d00, d01), np.maximum(d10, d11))
    ok &= dmin > 0
    ok &= (dmax - dmin) <= 0.05 * np.maximum(dmin, 1e-9)
    fx = u - x0c
    fy = v - y0c
    d = (d00 * (1 - fx) * (1 - fy) + d01 * fx * (1 - fy)
         + d10 * (1 - fx) * fy + d11 * fx * fy)
    sd = d - z
    ok &= sd > -trunc
    sample = np.clip(sd / trunc, -1.0, 1.0)

    flat_t = vol.tsdf.reshape(-1)
    flat_w = vol.weight.reshape(-1)
    idx = np.nonzero(ok)[0]
    w_old = flat_w[idx]
    t_old = np.where(w_old > 0, flat_t[idx], 0.0)  # unobserved default replaced
    flat_t[idx] = (t_old * w_old + sample[idx]) / (w_old + 1.0)
    flat_w[idx] = w_old + 1.0
    return vol


def extract_mesh(vol: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Marching cubes over observed nodes; empty mesh when no crossing.

    The observed mask is eroded by a full 3x3x3 element because the marching
    cubes implementation still evaluates cells with partially masked corners;
    unobserved default values would otherwise fabricate surfaces along the
    observation boundary.
    """
    observed = vol.weight > 0
    observed = binary_erosion(observed, structure=np.ones((3, 3, 3), dtype=bool))
    vmin = vol.tsdf[observed].min() if observed.any() else 1.0
    vmax = vol.tsdf[observed].max() if observed.any() else 1.0
    if not (vmin < iso < vmax):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, normals, _ = marching_cubes(
            vol.tsdf, level=iso,
            spacing=(vol.voxel_size,) * 3, mask=observed)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = verts + vol.origin
    mesh = TriangleMesh(verts, faces.astype(np.int64), normals)
    areas = mesh.face_areas()
    keep = areas > 1e-12
    if not np.all(keep):
        mesh = TriangleMesh(mesh.vertices, mesh.faces[keep],
                            mesh.normals)
    return mesh


def sample_mesh_points(mesh: TriangleMesh, n: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area barycentric samples on the mesh surface."""
    if mesh.is_empty or n == 0:
        return np.zeros((0, 3))
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    face = rng.choice(len(probs), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = mesh.vertices[mesh.faces[face, 0]]
    b = mesh.vertices[mesh.faces[face, 1]]
    c = mesh.vertices[mesh.faces[face, 2]]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b \
        + (r1 * r2)[:, None] * c


# ---------------------------------------------------------------------------
# mesh I/O
# ---------------------------------------------------------------------------

def write_mesh(mesh: TriangleMesh, path: str | Path) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        _write_ply(mesh, path)
    elif ext == ".obj":
        _write_obj(mesh, path)
    else:
        raise MeshIOError(f"unsupported mesh extension {ext!r}")


def read_mesh(path: str | Path) -> TriangleMesh:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        return _read_ply(path)
    if ext == ".obj":
        return _read_obj(path)
    raise MeshIOError(f"unsupported mesh extension {ext!r}")


def _write_ply(mesh: TriangleMesh, path: Path) -> None:
    has_n = mesh.normals is not None
    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z"]
    if has_n:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [f"element face {len(mesh.faces)}",
              "property list uchar uint vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        if has_n:
            data = np.hstack([mesh.vertices, mesh.normals]).astype("<f4")
        else:
            data = mesh.vertices.astype("<f4")
        f.write(data.tobytes())
        counts = np.full((len(mesh.faces), 1), 3, dtype=np.uint8)
        idx = mesh.faces.astype("<u4")
        face_bytes = b"".join(
            counts.tobytes("C")[i:i + 1] + idx[i].tobytes()
            for i in range(len(mesh.faces)))
        f.write(face_bytes)


def _read_ply(path: Path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise MeshIOError(f"{path}: not a PLY file (offset 0)")
    header = raw[:end].decode("ascii", "replace").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise MeshIOError(f"{path}: only binary little-endian PLY supported")
    n_vert = n_face = 0
    props: list[str] = []
    elem = ""
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            elem = parts[1]
            if elem == "vertex":
                n_vert = int(parts[2])
            elif elem == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and elem == "vertex" and parts[1] == "float":
            props.append(parts[2])
    has_n = "nx" in props
    stride = 4 * len(props)
    off = end + len(b"end_header\n")
    need = n_vert * stride
    if len(raw) < off + need:
        raise MeshIOError(f"{path}: truncated vertex block at offset {len(raw)}")
    vdata = np.frombuffer(raw[off:off + need], dtype="<f4").reshape(n_vert, len(props))
    off += need
    verts = vdata[:, :3].astype(np.float64)
    normals = vdata[:, 3:6].astype(np.float64) if has_n else None
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        if len(raw) < off + 1:
            raise MeshIOError(f"{path}: truncated face block at offset {len(raw)}")
        cnt = raw[off]
        off += 1
        if cnt != 3:
            raise MeshIOError(f"{path}: non-triangle face at offset {off - 1}")
        if len(raw) < off + 12:
            raise MeshIOError(f"{path}: truncated face block at offset {len(raw)}")
        faces[i] = struct.unpack("<III", raw[off:off + 12])
        off += 12
    return TriangleMesh(verts, faces, normals)


def _write_obj(mesh: TriangleMesh, path: Path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.normals is not None:
            for n in mesh.normals:
                f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for tri in mesh.faces + 1:
            f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")


def _read_obj(path: Path) -> TriangleMesh:
    verts, normals, faces = [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshIOError(f"{path}:{ln}: malformed vertex")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshIOError(f"{path}:{ln}: only triangles supported")
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not verts:
        raise MeshIOError(f"{path}: no vertices found")
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64),
                        np.asarray(normals) if normals else None)
