"""End-to-end orchestration: field training, texture path, fusion, reports.

Stages run in order with a content-hash guard: each stage records a digest
of its inputs and parameters, and re-running with unchanged inputs is a
no-op. Any failure aborts with the stage name and the offending artifact.

Two built-in profiles: ``desk`` (64x64-scale settings that train in
minutes on a CPU) and ``paper`` (full-scale settings matching the
reference recipe; multi-day on one GPU). A JSON config file with
``{"schema": 1, "profiles": {...}}`` can override any field.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import Manifest, load_training_set
from .encoding import EncodingSpec
from .field import FieldConfig
from .fusion import (
    FusionTrainConfig,
    build_training_pairs,
    denormalize_image,
    generator_forward,
    load_fusion_checkpoint,
    load_pairs_dir,
    normalize_image,
    train_fusion,
)
from .images import load_image, save_depth, save_image, save_mask
from .metrics import evaluate_set, write_metric_table
from .render import render_image
from .texture import (
    FaceRender,
    extract_texture,
    load_atlas,
    load_meshfit,
    overlay_paste,
    rasterize_face,
    save_atlas,
    stitch,
)
from .train_nerf import TrainConfig, load_checkpoint, train

log = logging.getLogger(__name__)

__all__ = ["PipelineConfig", "StageError", "run_pipeline", "make_grid", "PROFILES"]


class StageError(RuntimeError):
    """Pipeline failure carrying the stage name and offending artifact."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    field_depth: int = 4
    field_width: int = 64
    field_skip: int = 2
    enc_x_freqs: int = 10
    enc_d_freqs: int = 4
    enc_t_freqs: int = 10
    nerf_iterations: int = 20_000
    nerf_batch_rays: int = 256
    nerf_samples: int = 48
    nerf_lr_init: float = 5e-4
    nerf_lr_final: float = 5e-5
    render_samples: int = 64
    atlas_size: int = 256
    fusion_iterations: int = 2000
    fusion_batch: int = 8
    fusion_width: int = 16
    fusion_disc_width: int = 32
    fusion_lr_init: float = 2e-4
    fusion_lr_final: float = 2e-7
    lambda_l2: float = 1.0
    adv_mode: str = "bce"
    seed: int = 0
    no_face: bool = False

    def field_config(self) -> FieldConfig:
        return FieldConfig(depth=self.field_depth, width=self.field_width,
                           skip_layer=self.field_skip,
                           enc_x=EncodingSpec(self.enc_x_freqs, True),
                           enc_d=EncodingSpec(self.enc_d_freqs, True),
                           enc_t=EncodingSpec(self.enc_t_freqs, True))

    def nerf_config(self) -> TrainConfig:
        return TrainConfig(lr_init=self.nerf_lr_init, lr_final=self.nerf_lr_final,
                           iterations=self.nerf_iterations, batch_rays=self.nerf_batch_rays,
                           n_samples=self.nerf_samples, seed=self.seed)

    def fusion_config(self) -> FusionTrainConfig:
        return FusionTrainConfig(lr_init=self.fusion_lr_init, lr_final=self.fusion_lr_final,
                                 iterations=self.fusion_iterations, batch=self.fusion_batch,
                                 seed=self.seed, base_width=self.fusion_width,
                                 disc_base_width=self.fusion_disc_width,
                                 lambda_l2=self.lambda_l2, adv_mode=self.adv_mode)


PROFILES: dict[str, dict] = {
    "desk": {},
    "paper": {
        "field_depth": 8, "field_width": 256, "field_skip": 5,
        "nerf_iterations": 800_000, "nerf_batch_rays": 500, "nerf_samples": 64,
        "render_samples": 64, "atlas_size": 512,
        "fusion_iterations": 60_000, "fusion_width": 32, "fusion_disc_width": 64,
    },
}


def make_config(profile: str = "desk", config_file=None, **overrides) -> PipelineConfig:
    """Profile defaults, optional JSON config file, then explicit overrides."""
    values = dict(PROFILES.get(profile) or {})
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    if config_file is not None:
        doc = json.loads(Path(config_file).read_text())
        if doc.get("schema") != 1:
            raise ValueError(f"unsupported config schema in {config_file}")
        values.update(doc.get("profiles", {}).get(profile, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


class _StageGuard:
    """Skips a stage when its recorded input digest is unchanged."""

    def __init__(self, workdir: Path):
        self.stamp_dir = workdir / "stamps"
        self.stamp_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def digest(paths: list, params: dict) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(params, sort_keys=True, default=str).encode())
        for p in sorted(str(p) for p in paths):
            h.update(p.encode())
            h.update(Path(p).read_bytes())
        return h.hexdigest()

    def fresh(self, stage: str, digest: str, outputs: list) -> bool:
        stamp = self.stamp_dir / f"{stage}.json"
        if not stamp.exists():
            return False
        doc = json.loads(stamp.read_text())
        return doc.get("digest") == digest and all(Path(p).exists() for p in doc["outputs"])

    def record(self, stage: str, digest: str, outputs: list) -> None:
        (self.stamp_dir / f"{stage}.json").write_text(
            json.dumps({"digest": digest, "outputs": [str(p) for p in outputs]}))


def _frame_paths(manifest: Manifest, split_tag: str) -> list[Path]:
    return [manifest.image_path(i) for i in manifest.indices(split_tag)]


def _pick_texture_views(manifest: Manifest, meshfit) -> list[int]:
    """Right / front / left source frames: extremes and middle of the arc."""
    candidates = [i for i in manifest.indices("train") if f"{i:04d}" in meshfit.views]
    if len(candidates) < 3:
        raise StageError("extract-texture",
                         f"need 3 fitted training views, found {len(candidates)}")
    return [candidates[0], candidates[len(candidates) // 2], candidates[-1]]


def run_pipeline(manifest_path, out_dir, profile: str = "desk",
                 config: PipelineConfig | None = None) -> dict:
    """Run every stage and emit renders, metric tables, and comparison grids.

    Returns a summary dict with mean metrics per output variant.
    """
    cfg = config or make_config(profile)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    guard = _StageGuard(out_dir)

    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise StageError("ingest", f"manifest not found: {manifest_path}")
    manifest = Manifest.load(manifest_path)
    test_idx = manifest.indices("test")
    if not test_idx:
        raise StageError("split", f"no test frames tagged in {manifest_path}")

    meshfit_path = manifest_path.parent / "meshfit.json"
    meshfit = None
    if not cfg.no_face:
        if not meshfit_path.exists():
            raise StageError("extract-texture", f"mesh fit not found: {meshfit_path}")
        meshfit = load_meshfit(meshfit_path)

    # 1. train the radiance field
    nerf_ckpt = out_dir / "nerf_final.ckpt"
    digest = guard.digest([manifest_path] + _frame_paths(manifest, "train"),
                          {"stage": "train-nerf", **_nerf_params(cfg)})
    if guard.fresh("train-nerf", digest, [nerf_ckpt]):
        log.info("train-nerf: inputs unchanged, skipping")
        field, _, _ = load_checkpoint(nerf_ckpt)
    else:
        training = load_training_set(manifest)
        field, _ = train(training, cfg.nerf_config(), field_config=cfg.field_config(),
                         out_dir=out_dir, log_every=2000)
        guard.record("train-nerf", digest, [nerf_ckpt])

    # 2. render field outputs for the test views
    nerf_dir = out_dir / "nerf"
    gt_dir = out_dir / "gt"
    digest = guard.digest([nerf_ckpt, manifest_path],
                          {"stage": "render", "n": cfg.render_samples})
    render_outputs = [nerf_dir / f"{i:04d}.png" for i in test_idx]
    if not guard.fresh("render", digest, render_outputs):
        for i in test_idx:
            cam = manifest.camera(i)
            image, depth, trans = render_image(field, cam, n_samples=cfg.render_samples,
                                               jitter=False, seed=cfg.seed)
            save_image(nerf_dir / f"{i:04d}.png", image)
            save_depth(out_dir / "depth" / f"{i:04d}.tif", depth)
            shutil.copyfile(manifest.image_path(i), _ensured(gt_dir / f"{i:04d}.png"))
        guard.record("render", digest, render_outputs)
    else:
        log.info("render: inputs unchanged, skipping")

    face_renders: dict[int, FaceRender] = {}
    atlas = None
    if not cfg.no_face:
        # 3. extract three partial textures and stitch them
        atlas_path = out_dir / "atlas.png"
        view_ids = _pick_texture_views(manifest, meshfit)
        source_paths = [manifest.image_path(i) for i in view_ids]
        digest = guard.digest([meshfit_path, *source_paths],
                              {"stage": "stitch", "atlas_size": cfg.atlas_size,
                               "views": view_ids})
        if guard.fresh("stitch", digest, [atlas_path]):
            log.info("extract-texture/stitch: inputs unchanged, skipping")
            atlas = load_atlas(atlas_path, out_dir / "atlas_mask.png",
                               out_dir / "atlas_weight.tif")
        else:
            partials = []
            for i in view_ids:
                image = load_image(manifest.image_path(i)).astype(np.float64)
                partials.append(extract_texture(image, meshfit, f"{i:04d}",
                                                cfg.atlas_size, manifest.camera(i)))
            if not any(p.mask.any() for p in partials):
                raise StageError("extract-texture", "all partial atlases are empty")
            atlas = stitch(partials)
            save_atlas(atlas_path, out_dir / "atlas_mask.png", atlas,
                       weight_path=out_dir / "atlas_weight.tif")
            guard.record("stitch", digest, [atlas_path])

        # 4. rasterize the textured face at the test views
        face_dir = out_dir / "face"
        for i in test_idx:
            vid = f"{i:04d}"
            if vid not in meshfit.views:
                raise StageError("render-face", f"no mesh fit for test frame {vid}")
            render = rasterize_face(meshfit, atlas, manifest.camera(i),
                                    vertices=meshfit.posed(vid))
            face_renders[i] = render
            save_image(face_dir / f"{vid}.png", render.image)
            save_mask(face_dir / f"{vid}_mask.png", render.mask.astype(np.float64))

    # 5. training pairs for the fusion net
    pairs_dir = out_dir / "pairs"
    digest = guard.digest([nerf_ckpt, manifest_path],
                          {"stage": "build-pairs", "no_face": cfg.no_face,
                           "n": cfg.render_samples, "atlas_size": cfg.atlas_size})
    if guard.fresh("build-pairs", digest, [pairs_dir / "pairs.json"]):
        log.info("build-pairs: inputs unchanged, skipping")
        pairs = load_pairs_dir(pairs_dir)
    else:
        pairs, _, _ = build_training_pairs(field, manifest, meshfit, atlas,
                                           split_tag="train", n_samples=cfg.render_samples,
                                           seed=cfg.seed, out_dir=pairs_dir,
                                           face_from_nerf=cfg.no_face)
        guard.record("build-pairs", digest, [pairs_dir / "pairs.json"])
    if not pairs:
        raise StageError("build-pairs", "no usable training pairs")

    # 6. train the fusion net
    fusion_ckpt = out_dir / "fusion_final.ckpt"
    digest = guard.digest([pairs_dir / "pairs.json"],
                          {"stage": "train-fusion", **_fusion_params(cfg)})
    if guard.fresh("train-fusion", digest, [fusion_ckpt]):
        log.info("train-fusion: inputs unchanged, skipping")
        gen, _, _, _, _ = load_fusion_checkpoint(fusion_ckpt)
    else:
        gen, _, _ = train_fusion(pairs, cfg.fusion_config(), out_dir=out_dir, log_every=500)
        guard.record("train-fusion", digest, [fusion_ckpt])

    # 7. fuse, paste, evaluate, grid
    fused_dir = out_dir / "fused"
    paste_dir = out_dir / "paste"
    grid_dir = out_dir / "grid"
    for i in test_idx:
        vid = f"{i:04d}"
        nerf_img = load_image(nerf_dir / f"{vid}.png").astype(np.float64)
        if cfg.no_face:
            face_img = nerf_img
        else:
            face_img = face_renders[i].image
        x = np.concatenate([np.moveaxis(normalize_image(nerf_img), -1, 0),
                            np.moveaxis(normalize_image(face_img), -1, 0)], axis=0)
        fused = denormalize_image(np.moveaxis(generator_forward(gen, x), 0, -1))
        save_image(fused_dir / f"{vid}.png", fused)
        tiles = [("gt", load_image(gt_dir / f"{vid}.png")), ("nerf", nerf_img)]
        if not cfg.no_face:
            pasted = overlay_paste(nerf_img, face_renders[i])
            save_image(paste_dir / f"{vid}.png", pasted)
            tiles += [("face", face_img), ("paste", pasted)]
        tiles.append(("fused", fused))
        save_image(grid_dir / f"{vid}.png", make_grid(tiles))

    summary = {"profile": profile, "test_frames": len(test_idx), "variants": {}}
    variants = [("nerf", nerf_dir), ("fused", fused_dir)]
    if not cfg.no_face:
        variants.insert(1, ("paste", paste_dir))
    for name, directory in variants:
        rows, means = evaluate_set(directory, gt_dir)
        write_metric_table(out_dir / f"metrics_{name}.csv", rows, means)
        summary["variants"][name] = means
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    log.info("pipeline summary: %s", summary["variants"])
    return summary


def _ensured(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _nerf_params(cfg: PipelineConfig) -> dict:
    return {k: getattr(cfg, k) for k in
            ("field_depth", "field_width", "field_skip", "enc_x_freqs", "enc_d_freqs",
             "enc_t_freqs", "nerf_iterations", "nerf_batch_rays", "nerf_samples",
             "nerf_lr_init", "nerf_lr_final", "seed")}


def _fusion_params(cfg: PipelineConfig) -> dict:
    return {k: getattr(cfg, k) for k in
            ("fusion_iterations", "fusion_batch", "fusion_width", "fusion_disc_width",
             "fusion_lr_init", "fusion_lr_final", "lambda_l2", "adv_mode", "seed")}


def make_grid(images: list[tuple[str, np.ndarray]], zoom=None, zoom_scale: int = 2,
              border: int = 2, label_height: int = 12) -> np.ndarray:
    """Tile labeled images side by side, optionally with magnified insets.

    ``zoom`` is an (x, y, w, h) box in pixel coordinates, applied at the same
    position in every tile; the inset lands in the tile's bottom-right corner
    with a red outline matching the marked source box.
    """
    if not images:
        raise ValueError("no images to tile")
    shapes = {img.shape[:2] for _, img in images}
    if len(shapes) != 1:
        raise ValueError(f"tile resolutions differ: {shapes}")
    h, w = next(iter(shapes))
    if zoom is not None:
        x, y, zw, zh = zoom
        if x < 0 or y < 0 or zw <= 0 or zh <= 0 or x + zw > w or y + zh > h:
            raise ValueError(f"zoom box {zoom} out of bounds for {w}x{h} tiles")

    tile_w = w + 2 * border
    tile_h = h + 2 * border + label_height
    canvas = Image.new("RGB", (tile_w * len(images), tile_h), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    red = (255, 48, 48)
    for k, (label, img) in enumerate(images):
        arr = (np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).round().astype(np.uint8)
        tile = Image.fromarray(arr)
        if zoom is not None:
            x, y, zw, zh = zoom
            inset = tile.crop((x, y, x + zw, y + zh)).resize(
                (zw * zoom_scale, zh * zoom_scale), Image.Resampling.NEAREST)
            tdraw = ImageDraw.Draw(tile)
            tdraw.rectangle([x, y, x + zw - 1, y + zh - 1], outline=red)
            ix, iy = w - inset.width, h - inset.height
            tile.paste(inset, (ix, iy))
            tdraw = ImageDraw.Draw(tile)
            tdraw.rectangle([ix, iy, w - 1, h - 1], outline=red)
        ox = k * tile_w + border
        canvas.paste(tile, (ox, label_height + border))
        draw.text((ox, 1), label, fill=(235, 235, 235))
    return np.asarray(canvas, dtype=np.float64) / 255.0
