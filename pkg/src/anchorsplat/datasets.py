"""Dataset directory I/O.

Layout written by the synth command and consumed by train/eval:

    out/
      scene.json          structured manifest: primitives, bbox, cameras
      images/view_XXX.png 8-bit color
      depth/view_XXX.f32  float map, 16-byte header (magic,width,height,channels)
      normal/view_XXX.f32 float map, 3 channels

Float maps are little-endian float32 row-major after the header; the magic is
b"FMAP".  PPM (binary P6) read/write is provided for debugging.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import InvalidInputError, View
from .scenes import PRIMITIVE_KINDS, AnalyticScene

FLOATMAP_MAGIC = b"FMAP"
TEST_EVERY = 8  # every 8th view is held out


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# float maps
# ---------------------------------------------------------------------------

def write_float_map(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(FLOATMAP_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(arr.astype("<f4").tobytes())


def read_float_map(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FLOATMAP_MAGIC:
        raise DatasetError(f"{path}: not a float map (bad magic at offset 0)")
    w, h, c = struct.unpack("<III", raw[4:16])
    expect = 16 + w * h * c * 4
    if len(raw) != expect:
        raise DatasetError(
            f"{path}: truncated float map at offset {len(raw)} (expected {expect})")
    arr = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, c)
    return arr[..., 0] if c == 1 else arr


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_png(path: str | Path, img: np.ndarray) -> None:
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(u8.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary PPM")
    parts = raw.split(maxsplit=4)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4]
    if len(data) < w * h * 3:
        raise DatasetError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(data[:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# scene manifest
# ---------------------------------------------------------------------------

def _primitive_to_json(p) -> dict:
    d = {"kind": p.kind, "albedo": list(map(float, p.albedo)),
         "checker": float(p.checker)}
    if p.kind == "sphere":
        d.update(center=list(map(float, p.center)), radius=float(p.radius))
    elif p.kind == "box":
        d.update(center=list(map(float, p.center)),
                 half_extents=list(map(float, p.half_extents)),
                 quat=list(map(float, p.quat)))
    else:
        d.update(normal=list(map(float, p.normal)), offset=float(p.offset))
    return d


def _primitive_from_json(d: dict):
    kind = d["kind"]
    cls = PRIMITIVE_KINDS.get(kind)
    if cls is None:
        raise DatasetError(f"unknown primitive kind {kind!r}")
    kw = {k: v for k, v in d.items() if k != "kind"}
    return cls(**kw)


def _view_to_json(v: View, files: dict) -> dict:
    return {"name": v.name, "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
            "R": [float(x) for x in v.R.reshape(-1)],
            "t": [float(x) for x in v.t],
            "width": v.width, "height": v.height, "files": files}


def write_dataset(out_dir: str | Path, scene: AnalyticScene | None,
                  views: list[View], scene_name: str = "",
                  extra: dict | None = None) -> Path:
    """Write GT-bearing views plus the scene manifest.  Views must carry
    gt_color/gt_depth/gt_normal maps."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "normal").mkdir(exist_ok=True)
    cams = []
    for i, v in enumerate(views):
        if v.gt_color is None or v.gt_depth is None or v.gt_normal is None:
            raise InvalidInputError(f"view {i} is missing GT maps")
        name = v.name or f"view_{i:03d}"
        files = {"image": f"images/{name}.png",
                 "depth": f"depth/{name}.f32",
                 "normal": f"normal/{name}.f32"}
        write_png(out / files["image"], v.gt_color)
        write_float_map(out / files["depth"], v.gt_depth)
        write_float_map(out / files["normal"], v.gt_normal)
        cams.append(_view_to_json(v, files))
    manifest = {
        "format": "anchorsplat-dataset-v1",
        "scene_name": scene_name,
        "test_every": TEST_EVERY,
        "primitives": ([_primitive_to_json(p) for p in scene.primitives]
                       if scene is not None else None),
        "bbox": ([list(map(float, b)) for b in scene.bbox]
                 if scene is not None else None),
        "cameras": cams,
    }
    if extra:
        manifest.update(extra)
    with open(out / "scene.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out


def load_dataset(path: str | Path
                 ) -> tuple[AnalyticScene | None, list[View], dict]:
    """Load (scene or None, views with GT maps attached, manifest dict)."""
    root = Path(path)
    mf = root / "scene.json"
    if not mf.exists():
        raise DatasetError(f"{root}: no scene.json manifest")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != "anchorsplat-dataset-v1":
        raise DatasetError(f"{root}: unsupported dataset format")
    scene = None
    if manifest.get("primitives") is not None:
        scene = AnalyticScene(
            primitives=[_primitive_from_json(d) for d in manifest["primitives"]],
            bbox=np.asarray(manifest["bbox"]))
    views = []
    for cam in manifest["cameras"]:
        v = View(fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"],
                 R=np.asarray(cam["R"]).reshape(3, 3), t=np.asarray(cam["t"]),
                 width=cam["width"], height=cam["height"], name=cam["name"])
        files = cam["files"]
        v.gt_color = read_png(root / files["image"])
        v.gt_depth = read_float_map(root / files["depth"])
        v.gt_normal = read_float_map(root / files["normal"])
        views.append(v)
    return scene, views, manifest


def train_test_split(n_views: int, test_every: int = TEST_EVERY
                     ) -> tuple[list[int], list[int]]:
    test = list(range(0, n_views, test_every))
    train = [i for i in range(n_views) if i not in test]
    return train, test
