"""Face-texture pipeline: per-triangle UV extraction, stitching, rasterization.

Texture extraction maps each image-space triangle onto its UV-space triangle
with the (inverse) piecewise-affine warp and fills the covered texels by
bilinear lookup. Three partial atlases (right / front / left views) are
blended into one by weight-normalized averaging, then the textured mesh can
be rasterized at any camera with a z-buffer and perspective-correct
barycentric interpolation.

Pixel/texel coverage uses integer edge functions on a 1/256 subpixel grid
with a top-left fill rule, so an edge shared by two triangles is owned by
exactly one of them (no gaps, no double writes).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Camera
from .images import load_image, load_mask, save_image, save_mask

log = logging.getLogger(__name__)

__all__ = [
    "DegenerateTriangleError",
    "MeshFit",
    "MeshFitView",
    "TextureAtlas",
    "FaceRender",
    "affine_from_triangles",
    "extract_texture",
    "stitch",
    "rasterize_face",
    "overlay_paste",
    "load_meshfit",
    "save_meshfit",
    "load_atlas",
    "save_atlas",
]

_SUBPIX = 256  # subpixel snap for exact integer edge arithmetic
_FEATHER_TEXELS = 8.0


class DegenerateTriangleError(ValueError):
    """Raised when a source triangle is collinear (no affine map exists)."""


@dataclass
class MeshFitView:
    """Per-view fit data: projected vertex positions and visibility flags."""

    projected: np.ndarray                 # (V, 2) image (u, v) in pixels
    visible: np.ndarray                   # (V,) bool
    posed_vertices: np.ndarray | None = None  # (V, 3), when the mesh moves


@dataclass
class MeshFit:
    """Fitted face mesh: canonical geometry, UV layout, per-view projections."""

    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (F, 3) int
    uv: np.ndarray         # (V, 2) in [0, 1]^2
    views: dict[str, MeshFitView] = dc_field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        v = self.vertices.shape[0]
        if self.faces.size and self.faces.max() >= v:
            raise ValueError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        uv_tri = self.uv[self.faces]
        e1 = uv_tri[:, 1] - uv_tri[:, 0]
        e2 = uv_tri[:, 2] - uv_tri[:, 0]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if np.any(area <= 1e-12):
            raise ValueError(f"{int((area <= 1e-12).sum())} degenerate UV triangles")

    def posed(self, view_id: str) -> np.ndarray:
        view = self.views[view_id]
        return view.posed_vertices if view.posed_vertices is not None else self.vertices


@dataclass
class TextureAtlas:
    """UV-space color image with coverage mask and accumulation weights."""

    pixels: np.ndarray   # (S, S, 3) in [0, 1]
    mask: np.ndarray     # (S, S) in [0, 1], 0 = unwritten
    weight: np.ndarray   # (S, S) accumulation weights
    skipped_triangles: int = 0

    def __post_init__(self):
        s = self.pixels.shape[0]
        if s & (s - 1) != 0 or s == 0:
            raise ValueError(f"atlas size must be a power of two, got {s}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class FaceRender:
    """Rendered face image with its coverage mask; black outside the mask."""

    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray   # (H, W) bool
    depth: np.ndarray | None = None


def affine_from_triangles(src, dst) -> np.ndarray:
    """2x3 affine matrix mapping the src triangle onto the dst triangle.

    Solves the six linear equations given by the three vertex
    correspondences; raises ``DegenerateTriangleError`` for collinear src.
    """
    src = np.asarray(src, dtype=np.float64).reshape(3, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(3, 2)
    m = np.concatenate([src, np.ones((3, 1))], axis=1)
    if abs(np.linalg.det(m)) < 1e-12:
        raise DegenerateTriangleError("source triangle is collinear")
    return np.linalg.solve(m, dst).T


def _accepts_zero(ex: int, ey: int) -> bool:
    # top-left ownership for edge vector (ex, ey) in y-down coordinates
    return ey < 0 or (ey == 0 and ex > 0)


def _triangle_coverage(tri: np.ndarray, height: int, width: int):
    """Covered pixel centers and their barycentric coordinates.

    ``tri`` is (3, 2) continuous (x, y) coordinates; returns (rows, cols,
    bary) with bary ordered like the input vertices. Degenerate (zero-area
    after snapping) triangles cover nothing.
    """
    q = np.round(np.asarray(tri, dtype=np.float64) * _SUBPIX).astype(np.int64)
    area2 = (q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[1, 1] - q[0, 1]) * (q[2, 0] - q[0, 0])
    if area2 == 0:
        return None
    flipped = area2 < 0
    if flipped:
        q = q[[0, 2, 1]]
        area2 = -area2

    lo = np.floor(q.min(axis=0) / _SUBPIX - 0.5).astype(np.int64)
    hi = np.ceil(q.max(axis=0) / _SUBPIX + 0.5).astype(np.int64)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0] + 1, width), min(hi[1] + 1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    cols, rows = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    px = cols * _SUBPIX + _SUBPIX // 2
    py = rows * _SUBPIX + _SUBPIX // 2

    inside = np.ones(px.shape, dtype=bool)
    w = np.empty((3,) + px.shape, dtype=np.int64)
    for i, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        ex, ey = q[b, 0] - q[a, 0], q[b, 1] - q[a, 1]
        wi = ex * (py - q[a, 1]) - ey * (px - q[a, 0])
        ok = (wi > 0) | ((wi == 0) & _accepts_zero(ex, ey))
        inside &= ok
        w[i] = wi
    if not inside.any():
        return None
    rows, cols = rows[inside], cols[inside]
    bary = (w[:, inside].astype(np.float64) / float(area2)).T  # (K, 3)
    if flipped:
        bary = bary[:, [0, 2, 1]]
    return rows, cols, bary


def _bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at continuous pixel coordinates, clamped at edges."""
    h, w = image.shape[:2]
    fx = np.clip(x - 0.5, 0.0, w - 1.0)
    fy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    top = image[y0, x0] * (1 - ax) + image[y0, x1] * ax
    bot = image[y1, x0] * (1 - ax) + image[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def _triangle_view_quality(points: np.ndarray, camera: Camera) -> float:
    """max(0, cos) between the outward triangle normal and the view direction."""
    normal = np.cross(points[1] - points[0], points[2] - points[0])
    norm = np.linalg.norm(normal)
    if norm < 1e-15:
        return 0.0
    to_cam = camera.position - points.mean(axis=0)
    dist = np.linalg.norm(to_cam)
    if dist < 1e-15:
        return 0.0
    return max(0.0, float(normal @ to_cam / (norm * dist)))


def extract_texture(image: np.ndarray, meshfit: MeshFit, view_id: str,
                    atlas_size: int, camera: Camera) -> TextureAtlas:
    """Pull a partial texture atlas out of one posed view.

    Every triangle whose three vertices are visible is warped from image
    space into its UV-space footprint; covered texels are filled by bilinear
    lookup and weighted by the triangle's view quality (cosine to the
    camera). The final mask carries a feathered falloff toward the coverage
    boundary so stitched seams blend smoothly.
    """
    view = meshfit.views[view_id]
    posed = meshfit.posed(view_id)
    s = atlas_size
    color_acc = np.zeros((s, s, 3))
    weight_acc = np.zeros((s, s))
    skipped = 0

    for tri in meshfit.faces:
        if not view.visible[tri].all():
            continue
        img_tri = view.projected[tri]
        ea, eb = img_tri[1] - img_tri[0], img_tri[2] - img_tri[0]
        double_area = abs(ea[0] * eb[1] - ea[1] * eb[0])
        if double_area < 1e-9:
            skipped += 1
            continue
        cov = _triangle_coverage(meshfit.uv[tri] * s, s, s)
        if cov is None:
            continue
        rows, cols, bary = cov
        # barycentric interpolation of image vertices == the affine warp
        pos = bary @ img_tri
        colors = _bilinear(image, pos[:, 0], pos[:, 1])
        quality = _triangle_view_quality(posed[tri], camera)
        if quality == 0.0:
            continue
        color_acc[rows, cols] += quality * colors
        weight_acc[rows, cols] += quality

    if skipped:
        log.warning("extract_texture(%s): skipped %d degenerate image triangles",
                    view_id, skipped)
    covered = weight_acc > 0
    pixels = np.zeros((s, s, 3))
    pixels[covered] = color_acc[covered] / weight_acc[covered, None]
    feather = np.minimum(ndimage.distance_transform_edt(covered) / _FEATHER_TEXELS, 1.0)
    return TextureAtlas(pixels=np.clip(pixels, 0.0, 1.0), mask=feather,
                        weight=weight_acc * feather, skipped_triangles=skipped)


def stitch(partials: list[TextureAtlas]) -> TextureAtlas:
    """Blend partial atlases into one by per-texel weighted averaging.

    Inputs are canonically reordered (by content hash) before accumulation,
    so the blend is exactly invariant to the argument order.
    """
    if not partials:
        raise ValueError("no partial atlases given")
    sizes = {p.size for p in partials}
    if len(sizes) != 1:
        raise ValueError(f"atlas sizes differ: {sorted(sizes)}")

    def content_key(p: TextureAtlas) -> bytes:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(p.pixels).tobytes())
        h.update(np.ascontiguousarray(p.weight).tobytes())
        return h.digest()

    ordered = sorted(partials, key=content_key)
    s = ordered[0].size
    color_acc = np.zeros((s, s, 3))
    weight_acc = np.zeros((s, s))
    mask = np.zeros((s, s))
    for p in ordered:
        color_acc += p.weight[..., None] * p.pixels
        weight_acc += p.weight
        mask = np.maximum(mask, p.mask)
    if not (weight_acc > 0).any():
        log.warning("stitch: all partial atlases are empty")
    covered = weight_acc > 0
    pixels = np.zeros((s, s, 3))
    pixels[covered] = color_acc[covered] / weight_acc[covered, None]
    return TextureAtlas(pixels=np.clip(pixels, 0.0, 1.0), mask=mask, weight=weight_acc)


def _rasterize_mesh(vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray,
                    atlas: TextureAtlas, camera: Camera,
                    image=None, zbuf=None, mask=None):
    """Z-buffered rasterization of one textured mesh into (image, mask, zbuf).

    Buffers may be passed in to composite several meshes into one frame.
    """
    h, w = camera.height, camera.width
    if image is None:
        image = np.zeros((h, w, 3))
        zbuf = np.full((h, w), np.inf)
        mask = np.zeros((h, w), dtype=bool)
    projected, depth = camera.project(vertices)
    s = atlas.size
    for tri in faces:
        z = depth[tri]
        if np.any(z <= 1e-9):
            continue  # behind the camera; scenes here never straddle the plane
        cov = _triangle_coverage(projected[tri], h, w)
        if cov is None:
            continue
        rows, cols, bary = cov
        inv_z = bary @ (1.0 / z)
        z_px = 1.0 / inv_z
        nearer = z_px < zbuf[rows, cols]
        if not nearer.any():
            continue
        rows, cols, bary = rows[nearer], cols[nearer], bary[nearer]
        z_px = z_px[nearer]
        uv_over_z = bary @ (uv[tri] / z[:, None])
        uv_px = uv_over_z * z_px[:, None]
        colors = _bilinear(atlas.pixels, uv_px[:, 0] * s, uv_px[:, 1] * s)
        image[rows, cols] = colors
        zbuf[rows, cols] = z_px
        mask[rows, cols] = True
    return image, mask, zbuf


def rasterize_face(meshfit: MeshFit, atlas: TextureAtlas, camera: Camera,
                   vertices: np.ndarray | None = None) -> FaceRender:
    """Render the textured face mesh at a camera.

    ``vertices`` overrides the canonical positions (posed geometry for a
    specific moment); the returned image is black outside the coverage mask.
    """
    verts = meshfit.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    image, mask, zbuf = _rasterize_mesh(verts, meshfit.faces, meshfit.uv, atlas, camera)
    depth = np.where(mask, zbuf, 0.0)
    return FaceRender(image=np.clip(image, 0.0, 1.0), mask=mask, depth=depth)


def overlay_paste(nerf_image: np.ndarray, face: FaceRender) -> np.ndarray:
    """Paste the face render over the field render wherever the mask covers."""
    if nerf_image.shape[:2] != face.image.shape[:2]:
        raise ValueError(f"resolution mismatch: {nerf_image.shape[:2]} vs {face.image.shape[:2]}")
    return np.where(face.mask[..., None], face.image, nerf_image)


def save_meshfit(path, meshfit: MeshFit) -> None:
    doc = {
        "schema": 1,
        "vertices": meshfit.vertices.tolist(),
        "faces": meshfit.faces.tolist(),
        "uv": meshfit.uv.tolist(),
        "views": [
            {
                "view_id": vid,
                "projected": view.projected.tolist(),
                "visible": np.asarray(view.visible, dtype=bool).tolist(),
                **({"posed_vertices": view.posed_vertices.tolist()}
                   if view.posed_vertices is not None else {}),
            }
            for vid, view in meshfit.views.items()
        ],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_meshfit(path) -> MeshFit:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != 1:
        raise ValueError(f"unsupported meshfit schema in {path}")
    views = {}
    for entry in doc["views"]:
        posed = entry.get("posed_vertices")
        views[entry["view_id"]] = MeshFitView(
            projected=np.asarray(entry["projected"], dtype=np.float64),
            visible=np.asarray(entry["visible"], dtype=bool),
            posed_vertices=None if posed is None else np.asarray(posed, dtype=np.float64),
        )
    fit = MeshFit(vertices=doc["vertices"], faces=doc["faces"], uv=doc["uv"], views=views)
    v = fit.vertices.shape[0]
    for vid, view in fit.views.items():
        if view.projected.shape != (v, 2) or view.visible.shape != (v,):
            raise ValueError(f"view {vid} arrays do not match vertex count {v}")
        all_visible = view.visible[fit.faces].all(axis=1)
        tri = view.projected[fit.faces[all_visible]]
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if area.size and area.min() <= 1e-9:
            raise ValueError(f"view {vid} has visible triangles with zero projected area")
    return fit


def save_atlas(pixels_path, mask_path, atlas: TextureAtlas, weight_path=None) -> None:
    """8-bit color + 8-bit mask images; weights go to a float TIFF if asked."""
    save_image(pixels_path, atlas.pixels)
    save_mask(mask_path, atlas.mask)
    if weight_path is not None:
        save_depth(weight_path, atlas.weight)


def load_atlas(pixels_path, mask_path, weight_path=None) -> TextureAtlas:
    pixels = load_image(pixels_path).astype(np.float64)
    mask = load_mask(mask_path).astype(np.float64)
    pixels[mask == 0] = 0.0
    if weight_path is not None and Path(weight_path).exists():
        weight = load_depth(weight_path).astype(np.float64)
    else:
        weight = mask.copy()
    return TextureAtlas(pixels=pixels, mask=mask, weight=weight)
