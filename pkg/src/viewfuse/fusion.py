"""Conditional GAN that fuses the field render with the textured-face render.

The generator consumes the 6-channel concatenation of the two renders
(each normalized to [-1, 1]) and emits a 3-channel image through tanh; an
encoder of one 7x7 stride-1 and four 3x3 stride-2 convolutions feeds four
residual blocks and a mirrored transposed-convolution decoder, with
affine-free instance normalization throughout. Two 9-channel patch
discriminators judge (candidate, conditioning) pairs at full and half
resolution.

The adversarial objective is the log/BCE form with a non-saturating
generator term, plus an L2 reconstruction term; a least-squares variant is
selectable by config.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .geometry import Camera
from .images import load_image, save_image, save_mask
from .render import render_image
from .texture import MeshFit, TextureAtlas, rasterize_face

log = logging.getLogger(__name__)

__all__ = [
    "FusionPair",
    "FusionTrainConfig",
    "Generator",
    "MultiScaleDiscriminator",
    "init_generator",
    "init_discriminator",
    "generator_forward",
    "discriminator_forward",
    "adversarial_expectations",
    "fusion_losses",
    "normalize_image",
    "denormalize_image",
    "build_training_pairs",
    "train_fusion",
    "save_fusion_checkpoint",
    "load_fusion_checkpoint",
]


@dataclass
class FusionPair:
    """Aligned (field render, face render, ground truth), all in [-1, 1]."""

    nerf_image: np.ndarray   # (H, W, 3)
    face_image: np.ndarray   # (H, W, 3), -1 outside the face mask
    ground_truth: np.ndarray

    def __post_init__(self):
        shapes = {self.nerf_image.shape, self.face_image.shape, self.ground_truth.shape}
        if len(shapes) != 1:
            raise ValueError(f"pair resolutions differ: {shapes}")


@dataclass
class FusionTrainConfig:
    lr_init: float = 2e-4
    lr_final: float = 2e-7
    iterations: int = 60_000
    batch: int = 8
    seed: int = 0
    base_width: int = 32
    disc_base_width: int = 64
    lambda_l2: float = 1.0
    adv_mode: str = "bce"  # or "lsgan"
    adam_betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if self.adv_mode not in ("bce", "lsgan"):
            raise ValueError(f"unknown adversarial mode {self.adv_mode!r}")


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ZeroPad2d(1), nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width, affine=False),
            nn.ReLU(inplace=True),
            nn.ZeroPad2d(1), nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width, affine=False),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder, four residual blocks, decoder; 6 channels in, 3 out."""

    def __init__(self, base_width: int = 32):
        super().__init__()
        w = base_width
        layers = [nn.ZeroPad2d(3), nn.Conv2d(6, w, 7),
                  nn.InstanceNorm2d(w, affine=False), nn.ReLU(inplace=True)]
        for _ in range(4):
            layers += [nn.Conv2d(w, w * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * 2, affine=False), nn.ReLU(inplace=True)]
            w *= 2
        layers += [ResidualBlock(w) for _ in range(4)]
        for _ in range(4):
            layers += [nn.ConvTranspose2d(w, w // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(w // 2, affine=False), nn.ReLU(inplace=True)]
            w //= 2
        layers += [nn.ZeroPad2d(3), nn.Conv2d(w, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[1] != 6:
            raise ValueError(f"generator expects 6 input channels, got {x.shape[1]}")
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ValueError(f"spatial size must be divisible by 16, got {tuple(x.shape[-2:])}")
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            # the bottleneck needs more than one spatial element for instance norm
            raise ValueError(f"spatial size must be at least 32, got {tuple(x.shape[-2:])}")
        return self.model(x)


class PatchDiscriminator(nn.Module):
    def __init__(self, base_width: int = 64):
        super().__init__()
        b = base_width
        self.model = nn.Sequential(
            nn.Conv2d(9, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, b * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(b * 2, affine=False), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b * 2, b * 4, 4, stride=2, padding=1),
            nn.InstanceNorm2d(b * 4, affine=False), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b * 4, b * 8, 4, stride=1, padding=1),
            nn.InstanceNorm2d(b * 8, affine=False), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b * 8, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.model(x)


class MultiScaleDiscriminator(nn.Module):
    """Full-scale and half-scale patch discriminators on (candidate, cond)."""

    def __init__(self, base_width: int = 64):
        super().__init__()
        self.scale_0 = PatchDiscriminator(base_width)
        self.scale_1 = PatchDiscriminator(base_width)

    def forward(self, candidate, conditioning):
        if candidate.shape[1] != 3 or conditioning.shape[1] != 6:
            raise ValueError("discriminator expects a 3-channel candidate and 6-channel conditioning")
        x = torch.cat([candidate, conditioning], dim=1)
        if x.shape[-1] < 48 or x.shape[-2] < 48:
            raise ValueError(f"discriminator needs inputs of at least 48 pixels, got {tuple(x.shape[-2:])}")
        return [self.scale_0(x), self.scale_1(F.avg_pool2d(x, 2))]


def _init_conv_weights(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, 0.02, generator=g)
                m.bias.zero_()


def init_generator(base_width: int = 32, seed: int = 0,
                   zero_output: bool = False) -> Generator:
    """Seeded generator; ``zero_output`` zeroes the last conv (test-only mode)."""
    gen = Generator(base_width)
    _init_conv_weights(gen, seed)
    if zero_output:
        with torch.no_grad():
            gen.model[-2].weight.zero_()
            gen.model[-2].bias.zero_()
    return gen


def init_discriminator(base_width: int = 64, seed: int = 0) -> MultiScaleDiscriminator:
    disc = MultiScaleDiscriminator(base_width)
    _init_conv_weights(disc, seed)
    return disc


def _to_torch_chw(image, channels: int):
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[1] != channels and arr.shape[-1] == channels:
        arr = np.moveaxis(arr, -1, 1)
    return torch.from_numpy(np.ascontiguousarray(arr)), single


def generator_forward(gen: Generator, x) -> np.ndarray:
    """Run the generator on a 6-channel array (HWC or CHW, numpy) -> CHW."""
    t, single = _to_torch_chw(x, 6)
    with torch.no_grad():
        out = gen(t).numpy()
    return out[0] if single else out


def discriminator_forward(disc: MultiScaleDiscriminator, candidate, x) -> list[np.ndarray]:
    """Patch-logit maps at both scales for (candidate, conditioning) arrays."""
    ct, single = _to_torch_chw(candidate, 3)
    xt, _ = _to_torch_chw(x, 6)
    with torch.no_grad():
        out = [o.numpy() for o in disc(ct, xt)]
    return [o[0, 0] if single else o[:, 0] for o in out]


def adversarial_expectations(real_logits: list[torch.Tensor],
                             fake_logits: list[torch.Tensor]):
    """(E[log sigmoid(real)], E[log(1 - sigmoid(fake))]), scale-averaged."""
    real_term = torch.stack([(-F.softplus(-r)).mean() for r in real_logits]).mean()
    fake_term = torch.stack([(-F.softplus(f)).mean() for f in fake_logits]).mean()
    return real_term, fake_term


def fusion_losses(gen: Generator, disc: MultiScaleDiscriminator,
                  nerf: torch.Tensor, face: torch.Tensor, gt: torch.Tensor,
                  lambda_l2: float = 1.0, adv_mode: str = "bce"):
    """Generator and discriminator objectives for one batch.

    The discriminator sees the candidate with the full 6-channel
    conditioning in both terms; the generator uses the non-saturating form
    plus ``lambda_l2`` times the mean squared reconstruction error.
    """
    if lambda_l2 < 0:
        raise ValueError("lambda_l2 must be >= 0")
    x = torch.cat([nerf, face], dim=1)
    fake = gen(x)
    real_logits = disc(gt, x)
    fake_logits_d = disc(fake.detach(), x)
    fake_logits_g = disc(fake, x)

    if adv_mode == "bce":
        real_term, fake_term = adversarial_expectations(real_logits, fake_logits_d)
        loss_d = -(real_term + fake_term)
        adv_g = torch.stack([F.softplus(-f).mean() for f in fake_logits_g]).mean()
    elif adv_mode == "lsgan":
        loss_d = 0.5 * (torch.stack([((r - 1.0) ** 2).mean() for r in real_logits]).mean()
                        + torch.stack([(f ** 2).mean() for f in fake_logits_d]).mean())
        adv_g = torch.stack([((f - 1.0) ** 2).mean() for f in fake_logits_g]).mean()
    else:
        raise ValueError(f"unknown adversarial mode {adv_mode!r}")
    loss_g = adv_g + lambda_l2 * F.mse_loss(fake, gt)
    return loss_g, loss_d, fake


def normalize_image(image: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return np.asarray(image, dtype=np.float32) * 2.0 - 1.0


def denormalize_image(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1], clipped."""
    return np.clip((np.asarray(image, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def build_training_pairs(field, manifest, meshfit: MeshFit, atlas: TextureAtlas,
                         split_tag: str = "train", n_samples: int = 64, seed: int = 0,
                         out_dir=None, face_from_nerf: bool = False):
    """Assemble FusionPairs for every frame of a split.

    For each frame: the field render at that frame's camera, the textured
    face rasterized with that frame's posed vertices, and the captured
    frame, all normalized to [-1, 1]. Frames without a mesh fit are skipped
    with a warning. ``face_from_nerf`` wires the no-face ablation (the face
    channels repeat the field render). Returns (pairs, masks, frame indices).
    """
    pairs, masks, indices = [], [], []
    for i in manifest.indices(split_tag):
        vid = f"{i:04d}"
        if not face_from_nerf and vid not in meshfit.views:
            log.warning("frame %s has no mesh fit; skipped", vid)
            continue
        cam = manifest.camera(i)
        nerf_img, _, _ = render_image(field, cam, n_samples=n_samples, jitter=False, seed=seed)
        gt = load_image(manifest.image_path(i)).astype(np.float64)
        if face_from_nerf:
            face_img = nerf_img.copy()
            mask = np.ones(nerf_img.shape[:2], dtype=bool)
        else:
            render = rasterize_face(meshfit, atlas, cam, vertices=meshfit.posed(vid))
            face_img, mask = render.image, render.mask
        pairs.append(FusionPair(nerf_image=normalize_image(nerf_img),
                                face_image=normalize_image(face_img),
                                ground_truth=normalize_image(gt)))
        masks.append(mask)
        indices.append(i)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for pair, mask, i in zip(pairs, masks, indices):
            save_image(out_dir / f"{i:04d}_nerf.png", denormalize_image(pair.nerf_image))
            save_image(out_dir / f"{i:04d}_face.png", denormalize_image(pair.face_image))
            save_image(out_dir / f"{i:04d}_gt.png", denormalize_image(pair.ground_truth))
            save_mask(out_dir / f"{i:04d}_mask.png", mask.astype(np.float64))
        (out_dir / "pairs.json").write_text(json.dumps({"frames": indices}))
    return pairs, masks, indices


def load_pairs_dir(pairs_dir) -> list[FusionPair]:
    pairs_dir = Path(pairs_dir)
    doc = json.loads((pairs_dir / "pairs.json").read_text())
    pairs = []
    for i in doc["frames"]:
        pairs.append(FusionPair(
            nerf_image=normalize_image(load_image(pairs_dir / f"{i:04d}_nerf.png")),
            face_image=normalize_image(load_image(pairs_dir / f"{i:04d}_face.png")),
            ground_truth=normalize_image(load_image(pairs_dir / f"{i:04d}_gt.png"))))
    return pairs


def _pairs_to_tensors(pairs: list[FusionPair]):
    nerf = torch.from_numpy(np.stack([np.moveaxis(p.nerf_image, -1, 0) for p in pairs]))
    face = torch.from_numpy(np.stack([np.moveaxis(p.face_image, -1, 0) for p in pairs]))
    gt = torch.from_numpy(np.stack([np.moveaxis(p.ground_truth, -1, 0) for p in pairs]))
    return nerf.float(), face.float(), gt.float()


def _module_arrays(module: nn.Module, prefix: str) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}.{name}", p.detach().numpy().astype(np.float32))
            for name, p in module.named_parameters()]


def _load_module_arrays(module: nn.Module, prefix: str, arrays: dict) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"{prefix}.{name}"].copy()))


def _adam_arrays(opt: torch.optim.Adam, params, prefix: str):
    out = []
    for i, p in enumerate(params):
        s = opt.state.get(p)
        if s is None:
            continue
        step = s["step"]
        step = float(step.item()) if isinstance(step, torch.Tensor) else float(step)
        out.append((f"{prefix}.{i}.step", np.array(step, dtype=np.float32)))
        out.append((f"{prefix}.{i}.exp_avg", s["exp_avg"].numpy()))
        out.append((f"{prefix}.{i}.exp_avg_sq", s["exp_avg_sq"].numpy()))
    return out


def _restore_adam(opt: torch.optim.Adam, params, prefix: str, arrays: dict) -> None:
    for i, p in enumerate(params):
        key = f"{prefix}.{i}.step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(np.asarray(arrays[key]).reshape(-1)[0])),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}.{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{i}.exp_avg_sq"].copy()),
        }


def save_fusion_checkpoint(path, gen, disc, opt_g, opt_d,
                           config: FusionTrainConfig, iteration: int) -> None:
    meta = {
        "kind": "fusion",
        "iteration": str(iteration),
        "config": json.dumps({
            "lr_init": config.lr_init, "lr_final": config.lr_final,
            "iterations": config.iterations, "batch": config.batch,
            "seed": config.seed, "base_width": config.base_width,
            "disc_base_width": config.disc_base_width,
            "lambda_l2": config.lambda_l2, "adv_mode": config.adv_mode,
        }),
    }
    arrays = _module_arrays(gen, "gen") + _module_arrays(disc, "disc")
    if opt_g is not None:
        arrays += _adam_arrays(opt_g, list(gen.parameters()), "optg")
    if opt_d is not None:
        arrays += _adam_arrays(opt_d, list(disc.parameters()), "optd")
    ckpt.save_archive(path, meta, arrays)


def load_fusion_checkpoint(path):
    meta, arrays = ckpt.load_archive(path)
    if meta.get("kind") != "fusion":
        raise ValueError(f"not a fusion checkpoint: {path}")
    cfg_doc = json.loads(meta["config"])
    config = FusionTrainConfig(**cfg_doc)
    gen = Generator(config.base_width)
    disc = MultiScaleDiscriminator(config.disc_base_width)
    _load_module_arrays(gen, "gen", arrays)
    _load_module_arrays(disc, "disc", arrays)
    return gen, disc, config, arrays, meta


def train_fusion(pairs: list[FusionPair], config: FusionTrainConfig,
                 out_dir=None, resume=None, stop_at: int | None = None,
                 log_every: int = 500):
    """Alternating discriminator/generator Adam updates; resumable.

    Returns (generator, discriminator, checkpoint path or None).
    """
    if not pairs:
        raise ValueError("no training pairs")
    if resume is not None:
        gen, disc, _, arrays, meta = load_fusion_checkpoint(resume)
        start = int(meta["iteration"])
    else:
        gen = init_generator(config.base_width, seed=config.seed)
        disc = init_discriminator(config.disc_base_width, seed=config.seed + 1)
        start = 0
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_init, betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_init, betas=config.adam_betas)
    if resume is not None:
        _restore_adam(opt_g, list(gen.parameters()), "optg", arrays)
        _restore_adam(opt_d, list(disc.parameters()), "optd", arrays)

    nerf_all, face_all, gt_all = _pairs_to_tensors(pairs)
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    for it in range(start, end):
        lr = config.lr_init * (config.lr_final / config.lr_init) ** (it / config.iterations)
        for opt in (opt_d, opt_g):
            for group in opt.param_groups:
                group["lr"] = lr
        rng = np.random.default_rng([config.seed, it])
        idx = rng.integers(0, len(pairs), size=min(config.batch, len(pairs)))
        nerf, face, gt = nerf_all[idx], face_all[idx], gt_all[idx]
        x = torch.cat([nerf, face], dim=1)
        fake = gen(x)

        # discriminator step (generator output detached)
        real_logits = disc(gt, x)
        fake_logits_d = disc(fake.detach(), x)
        if config.adv_mode == "bce":
            real_term, fake_term = adversarial_expectations(real_logits, fake_logits_d)
            loss_d = -(real_term + fake_term)
        else:
            loss_d = 0.5 * (torch.stack([((r - 1.0) ** 2).mean() for r in real_logits]).mean()
                            + torch.stack([(f ** 2).mean() for f in fake_logits_d]).mean())
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        # generator step against the updated discriminator
        fake_logits_g = disc(fake, x)
        if config.adv_mode == "bce":
            adv_g = torch.stack([F.softplus(-f).mean() for f in fake_logits_g]).mean()
        else:
            adv_g = torch.stack([((f - 1.0) ** 2).mean() for f in fake_logits_g]).mean()
        loss_g = adv_g + config.lambda_l2 * F.mse_loss(fake, gt)
        if not (torch.isfinite(loss_g) and torch.isfinite(loss_d)):
            raise RuntimeError(f"non-finite fusion loss at iteration {it} "
                               f"(G={float(loss_g)}, D={float(loss_d)})")
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        if log_every and it % log_every == 0:
            log.info("fusion iter %d loss_G %.4f loss_D %.4f lr %.2e",
                     it, float(loss_g), float(loss_d), lr)

    path = None
    if out_dir is not None:
        path = Path(out_dir) / "fusion_final.ckpt"
        save_fusion_checkpoint(path, gen, disc, opt_g, opt_d, config, end)
    return gen, disc, path
