"""Training loop for the radiance field: ray batches, L2 ray loss, Adam.

Batches are drawn uniformly over all (frame, pixel) pairs of the training
split, deterministically per (seed, iteration); the whole trajectory is
therefore resumable bit-for-bit from a checkpoint.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .encoding import EncodingSpec
from .field import FieldConfig, RadianceField, init_params
from .geometry import Camera, _stratified_depths, rays_for_pixels
from .render import _deltas_from_depths, render_rays_torch

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingSet",
    "RayBatch",
    "sample_ray_batch",
    "ray_loss",
    "decayed_lr",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    """Optimization schedule; defaults follow the full-scale recipe."""

    lr_init: float = 5e-4
    lr_final: float = 5e-5
    iterations: int = 800_000
    batch_rays: int = 500
    n_samples: int = 64
    jitter: bool = True
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr_init >= self.lr_final > 0:
            raise ValueError("need lr_init >= lr_final > 0")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")


@dataclass
class TrainingSet:
    """In-memory training frames: images, matching cameras, scene bounds."""

    images: np.ndarray          # (N, H, W, 3) float32 in [0, 1]
    cameras: list[Camera]
    near: float
    far: float

    def __post_init__(self):
        if len(self.cameras) != self.images.shape[0]:
            raise ValueError("one camera per image required")

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def pixels_per_frame(self) -> int:
        return self.images.shape[1] * self.images.shape[2]


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    times: np.ndarray
    targets: np.ndarray
    frame_idx: np.ndarray
    pixel_idx: np.ndarray


def sample_ray_batch(dataset: TrainingSet, batch_rays: int, seed: int,
                     iteration: int, exhaustive: bool = False) -> RayBatch:
    """Draw a batch of rays with ground-truth colors.

    Uniform over all (frame, pixel) pairs. With ``exhaustive`` the batch
    must equal the total pair count and covers each pair exactly once.
    """
    if dataset.n_frames == 0:
        raise ValueError("training split is empty")
    total = dataset.n_frames * dataset.pixels_per_frame
    rng = np.random.default_rng([seed, iteration])
    if exhaustive:
        if batch_rays != total:
            raise ValueError(f"exhaustive batch must cover all {total} pairs")
        flat = rng.permutation(total)
    else:
        flat = rng.integers(0, total, size=batch_rays)
    frame_idx = flat // dataset.pixels_per_frame
    pixel_idx = flat % dataset.pixels_per_frame
    h, w = dataset.images.shape[1:3]
    rows = pixel_idx // w
    cols = pixel_idx % w

    origins = np.empty((len(flat), 3))
    directions = np.empty((len(flat), 3))
    times = np.empty(len(flat))
    targets = dataset.images[frame_idx, rows, cols].astype(np.float64)
    for f in np.unique(frame_idx):
        sel = frame_idx == f
        bundle = rays_for_pixels(dataset.cameras[f],
                                 np.stack([rows[sel], cols[sel]], axis=-1))
        origins[sel] = bundle.origins
        directions[sel] = bundle.directions
        times[sel] = bundle.times
    return RayBatch(origins, directions, times, targets, frame_idx, pixel_idx)


def ray_loss(pred, target):
    """Mean over the batch of the squared L2 color error.

    Accepts torch tensors (differentiable) or numpy arrays; shapes must
    match as (B, 3).
    """
    if isinstance(pred, torch.Tensor):
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
        return ((pred - target) ** 2).sum(dim=-1).mean()
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(((pred - target) ** 2).sum(axis=-1).mean())


def decayed_lr(config: TrainConfig, iteration: int) -> float:
    """Smooth exponential decay from lr_init at 0 to lr_final at the end."""
    frac = iteration / config.iterations
    return config.lr_init * (config.lr_final / config.lr_init) ** frac


def train_step(field: RadianceField, optimizer: torch.optim.Adam, batch: RayBatch,
               lr: float, near: float, far: float, n_samples: int, jitter: bool,
               jitter_rng: np.random.Generator | None) -> float:
    """One Adam update on the ray loss; returns the loss value."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    n = len(batch.origins)
    if jitter:
        depths = _stratified_depths(near, far, n_samples, True, jitter_rng, shape=(n,))
    else:
        depths = np.broadcast_to(_stratified_depths(near, far, n_samples, False, None),
                                 (n, n_samples)).copy()
    deltas = _deltas_from_depths(depths, far)
    color, _, _ = render_rays_torch(
        field,
        torch.from_numpy(batch.origins).float(),
        torch.from_numpy(batch.directions).float(),
        torch.from_numpy(batch.times).float(),
        torch.from_numpy(depths).float(),
        torch.from_numpy(deltas).float(),
    )
    loss = ray_loss(color, torch.from_numpy(batch.targets).float())
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _config_to_json(config: FieldConfig) -> str:
    return json.dumps({
        "depth": config.depth, "width": config.width, "skip_layer": config.skip_layer,
        "enc_x": [config.enc_x.num_freqs, config.enc_x.include_raw],
        "enc_d": [config.enc_d.num_freqs, config.enc_d.include_raw],
        "enc_t": [config.enc_t.num_freqs, config.enc_t.include_raw],
    })


def _config_from_json(text: str) -> FieldConfig:
    d = json.loads(text)
    return FieldConfig(depth=d["depth"], width=d["width"], skip_layer=d["skip_layer"],
                       enc_x=EncodingSpec(*d["enc_x"]), enc_d=EncodingSpec(*d["enc_d"]),
                       enc_t=EncodingSpec(*d["enc_t"]))


def _optimizer_arrays(optimizer: torch.optim.Adam, params) -> list[tuple[str, np.ndarray]]:
    arrays = []
    state = optimizer.state
    for i, p in enumerate(params):
        s = state.get(p)
        if s is None:
            continue
        step = s["step"]
        step = float(step) if not isinstance(step, torch.Tensor) else float(step.item())
        arrays.append((f"opt.{i}.step", np.array(step, dtype=np.float32)))
        arrays.append((f"opt.{i}.exp_avg", s["exp_avg"].numpy()))
        arrays.append((f"opt.{i}.exp_avg_sq", s["exp_avg_sq"].numpy()))
    return arrays


def _restore_optimizer(optimizer: torch.optim.Adam, params, arrays: dict[str, np.ndarray]):
    for i, p in enumerate(params):
        key = f"opt.{i}.step"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(np.asarray(arrays[key]).reshape(-1)[0])),
            "exp_avg": torch.from_numpy(arrays[f"opt.{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{i}.exp_avg_sq"].copy()),
        }


def save_checkpoint(path, field: RadianceField, optimizer: torch.optim.Adam | None,
                    config: TrainConfig, iteration: int) -> None:
    meta = {
        "kind": "nerf",
        "iteration": str(iteration),
        "seed": str(config.seed),
        "field_config": _config_to_json(field.config),
        "train_config": json.dumps({
            "lr_init": config.lr_init, "lr_final": config.lr_final,
            "iterations": config.iterations, "batch_rays": config.batch_rays,
            "n_samples": config.n_samples, "jitter": config.jitter,
        }),
    }
    arrays = [(f"field.{name}", arr) for name, arr in field.parameter_arrays()]
    if optimizer is not None:
        arrays += _optimizer_arrays(optimizer, list(field.parameters()))
    ckpt.save_archive(path, meta, arrays)


def load_checkpoint(path) -> tuple[RadianceField, dict[str, np.ndarray], dict[str, str]]:
    """Rebuild the field from a checkpoint; returns (field, raw arrays, meta)."""
    meta, arrays = ckpt.load_archive(path)
    if meta.get("kind") != "nerf":
        raise ValueError(f"not a radiance-field checkpoint: {path}")
    config = _config_from_json(meta["field_config"])
    field = RadianceField(config)
    field.load_parameter_arrays(
        {name[len("field."):]: arr for name, arr in arrays.items() if name.startswith("field.")})
    return field, arrays, meta


def _make_optimizer(field: RadianceField, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(field.parameters(), lr=config.lr_init,
                            betas=config.adam_betas, eps=config.adam_eps)


def train(dataset: TrainingSet, config: TrainConfig,
          field_config: FieldConfig | None = None,
          out_dir=None, checkpoint_every: int = 0,
          resume=None, stop_at: int | None = None, log_every: int = 1000,
          probe_hook=None) -> tuple[RadianceField, Path | None]:
    """Train a radiance field on the given set; optionally resume/checkpoint.

    Returns the trained field and the path of the final checkpoint (when
    ``out_dir`` is given). ``stop_at`` halts early without shortening the
    learning-rate schedule, so a later resume continues the exact
    trajectory. ``probe_hook(iteration, field)`` runs at each logging
    interval and may record validation renders.
    """
    if dataset.n_frames == 0:
        raise ValueError("training split is empty")
    if resume is not None:
        field, arrays, meta = load_checkpoint(resume)
        start = int(meta["iteration"])
        optimizer = _make_optimizer(field, config)
        _restore_optimizer(optimizer, list(field.parameters()), arrays)
        log.info("resumed at iteration %d from %s", start, resume)
    else:
        field = init_params(field_config or FieldConfig(), seed=config.seed)
        optimizer = _make_optimizer(field, config)
        start = 0

    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    out_path = None
    for it in range(start, end):
        batch = sample_ray_batch(dataset, config.batch_rays, config.seed, it)
        jitter_rng = np.random.default_rng([config.seed, it, 1])
        loss = train_step(field, optimizer, batch, decayed_lr(config, it),
                          dataset.near, dataset.far, config.n_samples,
                          config.jitter, jitter_rng)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at iteration {it}; batch frames "
                f"{sorted(set(batch.frame_idx.tolist()))}")
        if log_every and it % log_every == 0:
            if probe_hook is not None:
                probe_hook(it, field)
            log.info("iter %d loss %.6f lr %.2e", it, loss, decayed_lr(config, it))
        if out_dir is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            out_path = Path(out_dir) / f"nerf_{it + 1:08d}.ckpt"
            save_checkpoint(out_path, field, optimizer, config, it + 1)
    if out_dir is not None:
        out_path = Path(out_dir) / "nerf_final.ckpt"
        save_checkpoint(out_path, field, optimizer, config, end)
    return field, out_path
