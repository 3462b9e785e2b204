"""Pinhole cameras, per-pixel ray generation, and stratified depth sampling.

Conventions used throughout the package:

* camera space is right-handed and looks down +z; image u grows with +x,
  image v grows with +y,
* ``c2w`` maps camera coordinates to world coordinates,
* pixel ``(row, col)`` is sampled at its center ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Camera",
    "Ray",
    "RayBundle",
    "DepthSamples",
    "look_at",
    "rays_for_pixels",
    "rays_for_image",
    "stratified_sample",
]


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid camera-to-world pose and capture time."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray
    near: float
    far: float
    time: float = 0.0

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError(f"c2w must be 4x4, got shape {c2w.shape}")
        object.__setattr__(self, "c2w", c2w)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        r = c2w[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block of c2w is not orthonormal")
        if not (0.0 <= self.time <= 1.0):
            raise ValueError(f"camera time must lie in [0, 1], got {self.time}")

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def with_time(self, time: float) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.c2w, self.near, self.far, time)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (N, 3) to continuous (u, v) pixel coordinates.

        Returns the (N, 2) image coordinates and the (N,) camera-space depth;
        points with depth <= 0 are behind the camera and project to inf.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = (p - self.position) @ self.rotation  # R^T (p - t)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(z > 0, self.fx * cam[:, 0] / z + self.cx, np.inf)
            v = np.where(z > 0, self.fy * cam[:, 1] / z + self.cy, np.inf)
        return np.stack([u, v], axis=-1), z


@dataclass(frozen=True)
class Ray:
    """Single ray: world-space origin, unit direction, and time in [0, 1]."""

    origin: np.ndarray
    direction: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit norm, got |d|={np.linalg.norm(d)}")

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


@dataclass
class RayBundle:
    """Vectorized batch of rays (struct-of-arrays form of ``Ray``)."""

    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3), unit norm
    times: np.ndarray       # (N,)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.times[i]))


@dataclass
class DepthSamples:
    """Ascending depths along a ray plus the spacing used for quadrature.

    ``delta[i] = s[i+1] - s[i]`` for interior samples; the last spacing is
    ``far - s[-1]`` so the integration support stays inside [near, far].
    """

    s: np.ndarray      # (N,)
    delta: np.ndarray  # (N,)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Build a c2w matrix for a camera at ``eye`` looking toward ``target``.

    The result is a proper rotation (det +1) with image-v pointing along
    the projection of ``-up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ValueError("eye and target coincide")
    f = forward / fn
    d0 = -np.asarray(up, dtype=np.float64)
    d = d0 - f * (f @ d0)
    dn = np.linalg.norm(d)
    if dn < 1e-12:
        raise ValueError("up direction is parallel to the view direction")
    d /= dn
    r = np.cross(d, f)
    c2w = np.eye(4)
    c2w[:3, 0] = r
    c2w[:3, 1] = d
    c2w[:3, 2] = f
    c2w[:3, 3] = eye
    return c2w


def rays_for_pixels(camera: Camera, pixels) -> RayBundle:
    """Generate world-space rays through the centers of the given pixels.

    ``pixels`` is an (N, 2) array of integer (row, col) indices. Each ray
    starts at the camera center and carries the camera's time.
    """
    px = np.asarray(pixels)
    if px.ndim == 1:
        px = px.reshape(1, 2)
    if px.shape[-1] != 2:
        raise ValueError(f"pixels must be (N, 2) of (row, col), got shape {px.shape}")
    rows = px[:, 0]
    cols = px[:, 1]
    if np.any(rows < 0) or np.any(rows >= camera.height) or np.any(cols < 0) or np.any(cols >= camera.width):
        raise ValueError("pixel index out of bounds for this camera")
    u = cols + 0.5
    v = rows + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      np.ones_like(u, dtype=np.float64)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, d_world.shape).copy()
    times = np.full(len(d_world), camera.time, dtype=np.float64)
    return RayBundle(origins, d_world, times)


def rays_for_image(camera: Camera) -> RayBundle:
    """Rays for every pixel of the camera, in row-major scan order."""
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    return rays_for_pixels(camera, pixels)


def _stratified_depths(near: float, far: float, n: int, jitter: bool,
                       rng: np.random.Generator | None, shape=()) -> np.ndarray:
    """Depths of shape ``shape + (n,)``: bin midpoints, or one draw per bin."""
    edges = np.linspace(near, far, n + 1)
    lower = edges[:-1]
    width = (far - near) / n
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.uniform(size=shape + (n,))
    else:
        u = 0.5
    return lower + u * width


def stratified_sample(near: float, far: float, n: int, jitter: bool = False,
                      seed: int = 0) -> DepthSamples:
    """Stratified depth samples over [near, far]: one sample per equal bin.

    With ``jitter`` off the samples sit at bin midpoints; with it on, each
    bin gets one uniform draw, deterministic for a fixed ``seed``.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not near < far:
        raise ValueError(f"need near < far, got near={near}, far={far}")
    rng = np.random.default_rng([seed]) if jitter else None
    s = _stratified_depths(near, far, n, jitter, rng)
    delta = np.empty_like(s)
    delta[:-1] = np.diff(s)
    delta[-1] = far - s[-1]
    return DepthSamples(s=s, delta=delta)
