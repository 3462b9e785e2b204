"""Discrete emission-absorption quadrature along rays and image rendering.

The per-ray estimate is

    C_hat = sum_i T_i * (1 - exp(-sigma_i * delta_i)) * c_i,
    T_i   = exp(-sum_{j<i} sigma_j * delta_j),

whose weights satisfy sum_i w_i + T_out = 1 exactly (telescoping), with
T_out the transmittance past the last sample. Unrendered energy stays
black; there is no background compositing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Camera, Ray, rays_for_pixels
from .geometry import _stratified_depths

__all__ = [
    "RayRadiance",
    "composite",
    "render_ray",
    "render_image",
    "render_rays_torch",
    "pixel_seed",
]


@dataclass
class RayRadiance:
    """Composited color, transmittance past the far bound, expected depth."""

    color: np.ndarray
    transmittance: float
    expected_depth: float


def composite_torch(sigmas: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor,
                    depths: torch.Tensor | None = None):
    """Batched differentiable compositing.

    sigmas/deltas are (B, N), colors (B, N, 3); returns color (B, 3),
    transmittance (B,), expected depth (B,).
    """
    tau = sigmas * deltas
    accum = torch.cumsum(tau, dim=-1)
    t_in = torch.exp(-torch.cat([torch.zeros_like(accum[..., :1]), accum[..., :-1]], dim=-1))
    weights = t_in * (1.0 - torch.exp(-tau))
    color = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    t_out = torch.exp(-accum[..., -1])
    if depths is None:
        depth = torch.zeros_like(t_out)
    else:
        wsum = weights.sum(dim=-1)
        depth = (weights * depths).sum(dim=-1) / torch.clamp(wsum, min=1e-12)
        depth = torch.where(wsum > 0, depth, torch.zeros_like(depth))
    return color, t_out, weights, depth


def composite(sigmas, colors, deltas, depths=None) -> RayRadiance:
    """Composite one ray's samples; see the module docstring for the math.

    Inputs are length-N arrays (colors N x 3). ``depths`` is optional and
    only feeds the expected-depth output.
    """
    sig = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    col = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    del_ = np.asarray(deltas, dtype=np.float64).reshape(-1)
    n = sig.shape[0]
    if n < 1 or col.shape[0] != n or del_.shape[0] != n:
        raise ValueError(f"inconsistent sample counts: {n}, {col.shape[0]}, {del_.shape[0]}")
    if np.any(sig < 0):
        raise ValueError("densities must be nonnegative")
    if np.any(del_ <= 0):
        raise ValueError("sample spacings must be positive")

    tau = sig * del_
    accum = np.cumsum(tau)
    t_in = np.exp(-np.concatenate([[0.0], accum[:-1]]))
    weights = t_in * (1.0 - np.exp(-tau))
    color = weights @ col
    t_out = float(np.exp(-accum[-1]))
    if depths is not None and weights.sum() > 0:
        d = np.asarray(depths, dtype=np.float64).reshape(-1)
        expected = float((weights * d).sum() / weights.sum())
    else:
        expected = 0.0
    return RayRadiance(color=color, transmittance=t_out, expected_depth=expected)


def pixel_seed(seed: int, pixel_index: int) -> list[int]:
    """Seed material for one pixel's sampling stream.

    Image rendering derives an independent stream per pixel so chunking and
    any parallel schedule cannot change results.
    """
    return [seed, pixel_index]


def _sample_depths(n_rays: int, near: float, far: float, n_samples: int,
                   jitter: bool, seeds) -> np.ndarray:
    if not jitter:
        return np.broadcast_to(
            _stratified_depths(near, far, n_samples, False, None), (n_rays, n_samples)).copy()
    out = np.empty((n_rays, n_samples))
    for i in range(n_rays):
        rng = np.random.default_rng(seeds[i])
        out[i] = _stratified_depths(near, far, n_samples, True, rng)
    return out


def _deltas_from_depths(depths: np.ndarray, far: float) -> np.ndarray:
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=-1)
    deltas[:, -1] = far - depths[:, -1]
    return deltas


def render_rays_torch(field, origins: torch.Tensor, directions: torch.Tensor,
                      times: torch.Tensor, depths: torch.Tensor, deltas: torch.Tensor):
    """Differentiable rendering of a ray batch at precomputed depths.

    ``field`` is any callable (points, dirs, times) -> (sigma, rgb) on torch
    tensors, typically a ``RadianceField``. Returns (color, t_out, depth).
    """
    b, n = depths.shape
    points = origins.unsqueeze(1) + directions.unsqueeze(1) * depths.unsqueeze(-1)
    dirs = directions.unsqueeze(1).expand(b, n, 3)
    ts = times.unsqueeze(1).expand(b, n)
    sigma, rgb = field(points.reshape(-1, 3), dirs.reshape(-1, 3), ts.reshape(-1))
    sigma = sigma.reshape(b, n)
    rgb = rgb.reshape(b, n, 3)
    color, t_out, _, depth = composite_torch(sigma, rgb, deltas, depths)
    return color, t_out, depth


def _render_bundle(field, origins, directions, times, near, far, n_samples,
                   jitter, seeds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    depths = _sample_depths(len(origins), near, far, n_samples, jitter, seeds)
    deltas = _deltas_from_depths(depths, far)
    with torch.no_grad():
        color, t_out, depth = render_rays_torch(
            field,
            torch.from_numpy(np.ascontiguousarray(origins)).float(),
            torch.from_numpy(np.ascontiguousarray(directions)).float(),
            torch.from_numpy(np.ascontiguousarray(times)).float(),
            torch.from_numpy(depths).float(),
            torch.from_numpy(deltas).float(),
        )
    return color.numpy(), t_out.numpy(), depth.numpy()


def render_ray(field, ray: Ray, near: float, far: float, n_samples: int,
               jitter: bool = False, seed=0) -> RayRadiance:
    """Render a single ray; deterministic for a fixed seed.

    ``seed`` is an integer or the seed material from ``pixel_seed``, which
    makes a single-ray render reproduce the matching ``render_image`` pixel.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples, got {n_samples}")
    seed_material = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    color, t_out, depth = _render_bundle(
        field,
        ray.origin.reshape(1, 3), ray.direction.reshape(1, 3),
        np.array([ray.time]), near, far, n_samples, jitter, [seed_material])
    return RayRadiance(color=np.clip(color[0], 0.0, 1.0), transmittance=float(t_out[0]),
                       expected_depth=float(depth[0]))


def render_image(field, camera: Camera, n_samples: int, jitter: bool = False,
                 seed: int = 0, chunk: int = 4096):
    """Render a full image plus depth and transmittance maps.

    Rays go through every pixel center; each pixel draws its jitter from its
    own seeded stream (see ``pixel_seed``), so the chunk size never changes
    the output.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    image = np.zeros((h * w, 3), dtype=np.float64)
    depth_map = np.zeros(h * w, dtype=np.float64)
    trans_map = np.zeros(h * w, dtype=np.float64)
    for start in range(0, h * w, chunk):
        sel = pixels[start:start + chunk]
        bundle = rays_for_pixels(camera, sel)
        seeds = [pixel_seed(seed, i) for i in range(start, start + len(sel))]
        color, t_out, depth = _render_bundle(
            field, bundle.origins, bundle.directions, bundle.times,
            camera.near, camera.far, n_samples, jitter, seeds)
        image[start:start + len(sel)] = color
        depth_map[start:start + len(sel)] = depth
        trans_map[start:start + len(sel)] = t_out
    return (np.clip(image.reshape(h, w, 3), 0.0, 1.0),
            depth_map.reshape(h, w),
            trans_map.reshape(h, w))
