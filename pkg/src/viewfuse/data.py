"""Capture ingestion, train/test splitting, and synthetic scene generation.

The manifest is a schema-versioned JSON document holding shared pinhole
intrinsics, scene bounds, and one record per frame (image path, time in
[0, 1], camera-to-world matrix, split tag). Ingestion consumes a directory
of frames plus a camera file of per-frame 4x4 matrices with shared
intrinsics, applies temporal down-sampling and a center crop + resize, and
rescales the intrinsics consistently.

The synthetic generator builds an analytic scene (textured triangulated
ellipsoid over a flat backdrop) and renders ground-truth frames with the
package's own rasterizer, so every later stage can be checked against known
geometry, motion, and texture.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, look_at
from .images import load_image, save_image
from .texture import MeshFit, MeshFitView, TextureAtlas, _rasterize_mesh, save_atlas, save_meshfit
from .train_nerf import TrainingSet

log = logging.getLogger(__name__)

__all__ = [
    "FrameRecord",
    "Manifest",
    "ingest",
    "split",
    "generate_synthetic",
    "load_training_set",
    "SyntheticScene",
]

MANIFEST_SCHEMA = 1


@dataclass
class FrameRecord:
    image: str          # path relative to the manifest
    time: float
    c2w: np.ndarray     # (4, 4)
    split: str = "train"


@dataclass
class Manifest:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    frames: list[FrameRecord] = dc_field(default_factory=list)
    base_dir: Path | None = None

    def __post_init__(self):
        times = [f.time for f in self.frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("frame times must be nondecreasing")

    def camera(self, index: int) -> Camera:
        f = self.frames[index]
        return Camera(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                      width=self.width, height=self.height, c2w=f.c2w,
                      near=self.near, far=self.far, time=f.time)

    def indices(self, split_tag: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == split_tag]

    def image_path(self, index: int) -> Path:
        if self.base_dir is None:
            raise ValueError("manifest has no base directory")
        return self.base_dir / self.frames[index].image

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "schema": MANIFEST_SCHEMA,
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                           "width": self.width, "height": self.height},
            "near": self.near,
            "far": self.far,
            "frames": [
                {"image": f.image, "time": f.time,
                 "c2w": np.asarray(f.c2w, dtype=float).tolist(), "split": f.split}
                for f in self.frames
            ],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema in {path}")
        intr = doc["intrinsics"]
        frames = [FrameRecord(image=f["image"], time=f["time"],
                              c2w=np.asarray(f["c2w"], dtype=np.float64),
                              split=f.get("split", "train"))
                  for f in doc["frames"]]
        return cls(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                   width=intr["width"], height=intr["height"],
                   near=doc["near"], far=doc["far"], frames=frames,
                   base_dir=path.parent)


def _center_crop_resize(img: Image.Image, target: int) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    ox, oy = (w - side) // 2, (h - side) // 2
    return img.crop((ox, oy, ox + side, oy + side)).resize((target, target),
                                                           Image.Resampling.BILINEAR)


def rescale_intrinsics(fx, fy, cx, cy, width, height, target):
    """Intrinsics after a centered square crop followed by a resize."""
    side = min(width, height)
    ox, oy = (width - side) // 2, (height - side) // 2
    k = target / side
    return k * fx, k * fy, k * (cx - ox), k * (cy - oy)


def ingest(frames_dir, camera_file, out_dir, stride: int = 1,
           target: int = 512) -> Manifest:
    """Build a processed dataset from raw frames and a camera file.

    Keeps every ``stride``-th frame, center-crops to a square, resizes to
    ``target`` x ``target``, renormalizes times over the kept frames, and
    rescales intrinsics to match the crop and resize.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    frames_dir, out_dir = Path(frames_dir), Path(out_dir)
    doc = json.loads(Path(camera_file).read_text())
    poses = {f["image"]: np.asarray(f["c2w"], dtype=np.float64) for f in doc["frames"]}

    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    names = sorted(p.name for p in frames_dir.iterdir() if p.suffix.lower() in exts)
    kept = names[::stride]
    if not kept:
        raise ValueError(f"no frames found under {frames_dir}")
    missing = [n for n in kept if n not in poses]
    if missing:
        raise ValueError(f"camera file has no entry for frames: {', '.join(missing)}")

    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    records = []
    for j, name in enumerate(kept):
        with Image.open(frames_dir / name) as im:
            out = _center_crop_resize(im.convert("RGB"), target)
        rel = f"frames/{j:04d}.png"
        out.save(out_dir / rel)
        t = j / (len(kept) - 1) if len(kept) > 1 else 0.0
        records.append(FrameRecord(image=rel, time=t, c2w=poses[name]))

    with Image.open(frames_dir / kept[0]) as im:
        w, h = im.size
    fx, fy, cx, cy = rescale_intrinsics(doc["fx"], doc["fy"], doc["cx"], doc["cy"],
                                        w, h, target)
    manifest = Manifest(fx=fx, fy=fy, cx=cx, cy=cy, width=target, height=target,
                        near=doc["near"], far=doc["far"], frames=records,
                        base_dir=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def split(manifest: Manifest, test_fraction: float = 0.16) -> Manifest:
    """Tag round(fraction * N) frames as test, spread at uniform stride.

    At least one frame is always held out; train and test partition the
    frames exactly.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {test_fraction}")
    n = len(manifest.frames)
    if n == 0:
        raise ValueError("manifest has no frames")
    count = max(1, int(np.floor(test_fraction * n + 0.5)))
    test_idx = {int(np.floor((j + 0.5) * n / count)) for j in range(count)}
    for i, f in enumerate(manifest.frames):
        f.split = "test" if i in test_idx else "train"
    return manifest


def load_training_set(manifest: Manifest, split_tag: str = "train") -> TrainingSet:
    idx = manifest.indices(split_tag)
    if not idx:
        raise ValueError(f"no frames tagged {split_tag!r}")
    images = np.stack([load_image(manifest.image_path(i)) for i in idx])
    cameras = [manifest.camera(i) for i in idx]
    return TrainingSet(images=images, cameras=cameras, near=manifest.near, far=manifest.far)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    """Everything the acceptance suite can check a pipeline stage against."""

    manifest: Manifest
    meshfit: MeshFit
    atlas: TextureAtlas
    truth: dict
    out_dir: Path


def _ellipsoid_mesh(n_lat: int = 18, n_lon: int = 28,
                    radii=(0.45, 0.58, 0.40)):
    """Lat/long triangulated ellipsoid with a duplicated UV seam column."""
    a, b, c = radii
    iv, jv = np.meshgrid(np.arange(n_lat + 1), np.arange(n_lon + 1), indexing="ij")
    lat = np.pi * iv / n_lat
    lon = 2 * np.pi * jv / n_lon
    x = a * np.sin(lat) * np.sin(lon)
    y = b * np.cos(lat)
    z = c * np.sin(lat) * np.cos(lon)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1)
    uv = np.stack([(jv / n_lon).ravel(), (iv / n_lat).ravel()], axis=-1)
    # unit normals of an ellipsoid: gradient of the implicit surface
    normals = verts / np.array([a * a, b * b, c * c])
    norms = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 1e-12)

    def vid(i, j):
        return i * (n_lon + 1) + j

    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            v00, v01 = vid(i, j), vid(i, j + 1)
            v10, v11 = vid(i + 1, j), vid(i + 1, j + 1)
            if i > 0:
                faces.append([v00, v01, v10])
            if i < n_lat - 1:
                faces.append([v01, v11, v10])
    faces = np.asarray(faces, dtype=np.int64)

    # orient all faces outward (positive dot with the face normal direction)
    tri = verts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    outward = (fn * tri.mean(axis=1)).sum(axis=-1)
    swap = outward < 0
    faces[swap] = faces[swap][:, [0, 2, 1]]
    return verts, faces, uv, normals


def _face_atlas(s: int, rng: np.random.Generator) -> TextureAtlas:
    """Smooth skin-like base with a few darker blobs as point details."""
    ys, xs = np.meshgrid((np.arange(s) + 0.5) / s, (np.arange(s) + 0.5) / s, indexing="ij")
    r = 0.72 + 0.12 * np.sin(2 * np.pi * (xs * 1.3 + 0.1)) + 0.06 * np.cos(2 * np.pi * ys)
    g = 0.55 + 0.10 * np.sin(2 * np.pi * (ys * 1.1 + 0.4)) + 0.05 * np.cos(2 * np.pi * xs * 0.7)
    b = 0.46 + 0.08 * np.cos(2 * np.pi * (xs + ys) * 0.8)
    pixels = np.stack([r, g, b], axis=-1)
    for _ in range(8):
        cx_, cy_ = rng.uniform(0.15, 0.85, 2)
        rad = rng.uniform(0.012, 0.03)
        amp = rng.uniform(0.25, 0.5)
        d2 = (xs - cx_) ** 2 + (ys - cy_) ** 2
        pixels *= 1.0 - amp * np.exp(-d2 / (2 * rad ** 2))[..., None]
    pixels = np.clip(pixels, 0.0, 1.0)
    return TextureAtlas(pixels=pixels, mask=np.ones((s, s)), weight=np.ones((s, s)))


def _backdrop_atlas(s: int) -> TextureAtlas:
    ys, xs = np.meshgrid((np.arange(s) + 0.5) / s, (np.arange(s) + 0.5) / s, indexing="ij")
    r = 0.25 + 0.15 * xs + 0.08 * np.sin(2 * np.pi * ys * 2.0)
    g = 0.35 + 0.20 * ys
    b = 0.45 + 0.15 * np.sin(2 * np.pi * (xs * 1.5 + ys))
    pixels = np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)
    return TextureAtlas(pixels=pixels, mask=np.ones((s, s)), weight=np.ones((s, s)))


def _backdrop_mesh(half: float = 5.5, z: float = 1.0):
    verts = np.array([[-half, -half, z], [half, -half, z],
                      [half, half, z], [-half, half, z]])
    faces = np.array([[0, 2, 1], [0, 3, 2]])  # normals toward -z (the cameras)
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return verts, faces, uv


def _arc_camera(index: int, n_views: int, resolution: int, near: float,
                far: float, time: float) -> Camera:
    frac = index / max(n_views - 1, 1)
    azimuth = np.deg2rad(-25.0 + 50.0 * frac)
    eye = np.array([2.35 * np.sin(azimuth),
                    0.28 * np.sin(2.4 * np.pi * frac),
                    -2.35 * np.cos(azimuth)])
    c2w = look_at(eye, target=[0.0, 0.0, 0.0])
    f = 1.2 * resolution
    return Camera(fx=f, fy=f, cx=resolution / 2, cy=resolution / 2,
                  width=resolution, height=resolution, c2w=c2w,
                  near=near, far=far, time=time)


def _motion(kind: str, truth: dict, verts: np.ndarray, t: float) -> np.ndarray:
    if kind == "static":
        return verts
    if kind == "rigid":
        return verts + np.asarray(truth["velocity"]) * t
    if kind == "deforming":
        posed = verts.copy()
        posed[:, 1] *= 1.0 + truth["bulge"] * np.sin(np.pi * t)
        posed += np.asarray(truth["velocity"]) * t
        return posed
    raise ValueError(f"unknown synthetic scene kind {kind!r}")


def generate_synthetic(kind: str, n_views: int, resolution: int, seed: int,
                       out_dir, atlas_size: int = 256,
                       supersample: int = 4) -> SyntheticScene:
    """Create a synthetic dataset with every checkable ground-truth artifact.

    Emits processed frames, a manifest with a 16% test split, the face
    MeshFit (with per-view projections, visibility, posed vertices), the
    ground-truth face atlas, and a truth record describing the motion.
    """
    if kind not in ("static", "rigid", "deforming"):
        raise ValueError(f"unknown synthetic scene kind {kind!r}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    near, far = 1.0, 5.2

    verts, faces, uv, normals = _ellipsoid_mesh()
    atlas = _face_atlas(atlas_size, rng)
    bd_verts, bd_faces, bd_uv = _backdrop_mesh()
    bd_atlas = _backdrop_atlas(atlas_size)

    truth = {"kind": kind, "seed": seed}
    if kind == "rigid":
        truth["velocity"] = [0.25, 0.0, 0.0]
    elif kind == "deforming":
        truth["velocity"] = [0.10, 0.0, 0.0]
        truth["bulge"] = 0.13
    else:
        truth["velocity"] = [0.0, 0.0, 0.0]

    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    frames: list[FrameRecord] = []
    views: dict[str, MeshFitView] = {}
    ss = supersample
    for i in range(n_views):
        t = i / max(n_views - 1, 1)
        cam = _arc_camera(i, n_views, resolution, near, far, t)
        cam_ss = Camera(fx=cam.fx * ss, fy=cam.fy * ss, cx=cam.cx * ss, cy=cam.cy * ss,
                        width=resolution * ss, height=resolution * ss,
                        c2w=cam.c2w, near=near, far=far, time=t)
        posed = _motion(kind, truth, verts, t)
        image, mask, zbuf = _rasterize_mesh(bd_verts, bd_faces, bd_uv, bd_atlas, cam_ss)
        image, mask, zbuf = _rasterize_mesh(posed, faces, uv, atlas, cam_ss,
                                            image=image, zbuf=zbuf, mask=mask)
        frame = image.reshape(resolution, ss, resolution, ss, 3).mean(axis=(1, 3))
        rel = f"frames/{i:04d}.png"
        save_image(out_dir / rel, frame)
        frames.append(FrameRecord(image=rel, time=t, c2w=cam.c2w))

        projected, _ = cam.project(posed)
        to_cam = cam.position - posed
        to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
        visible = (normals * to_cam).sum(axis=-1) > 0.15
        views[f"{i:04d}"] = MeshFitView(projected=projected, visible=visible,
                                        posed_vertices=posed)

    meshfit = MeshFit(vertices=verts, faces=faces, uv=uv, views=views)
    manifest = Manifest(fx=1.2 * resolution, fy=1.2 * resolution,
                        cx=resolution / 2, cy=resolution / 2,
                        width=resolution, height=resolution, near=near, far=far,
                        frames=frames, base_dir=out_dir)
    split(manifest)
    manifest.save(out_dir / "manifest.json")
    save_meshfit(out_dir / "meshfit.json", meshfit)
    save_atlas(out_dir / "atlas.png", out_dir / "atlas_mask.png", atlas)
    (out_dir / "truth.json").write_text(json.dumps(truth))
    log.info("synthetic %s scene: %d views at %dx%d -> %s",
             kind, n_views, resolution, resolution, out_dir)
    return SyntheticScene(manifest=manifest, meshfit=meshfit, atlas=atlas,
                          truth=truth, out_dir=out_dir)
