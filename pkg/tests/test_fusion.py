import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from viewfuse.fusion import (
    FusionPair,
    FusionTrainConfig,
    adversarial_expectations,
    build_training_pairs,
    denormalize_image,
    discriminator_forward,
    fusion_losses,
    generator_forward,
    init_discriminator,
    init_generator,
    load_fusion_checkpoint,
    normalize_image,
    save_fusion_checkpoint,
    train_fusion,
)


class TestGenerator:
    def test_full_resolution_shape(self):
        gen = init_generator(base_width=4, seed=0)
        x = torch.zeros(1, 6, 512, 512)
        with torch.no_grad():
            out = gen(x)
        assert out.shape == (1, 3, 512, 512)

    def test_small_resolution_shape_and_range(self):
        gen = init_generator(base_width=8, seed=1)
        x = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (2, 6, 64, 64))).float()
        with torch.no_grad():
            out = gen(x)
        assert out.shape == (2, 3, 64, 64)
        assert out.abs().max() < 1.0  # tanh range

    def test_indivisible_size_rejected(self):
        gen = init_generator(base_width=8, seed=0)
        with pytest.raises(ValueError, match="divisible by 16"):
            gen(torch.zeros(1, 6, 60, 64))

    def test_wrong_channels_rejected(self):
        gen = init_generator(base_width=8, seed=0)
        with pytest.raises(ValueError, match="6 input channels"):
            gen(torch.zeros(1, 3, 64, 64))

    def test_zero_output_mode(self):
        gen = init_generator(base_width=8, seed=2, zero_output=True)
        x = torch.randn(1, 6, 64, 64)
        with torch.no_grad():
            out = gen(x)
        np.testing.assert_array_equal(out.numpy(), 0.0)

    def test_deterministic_forward(self):
        gen = init_generator(base_width=8, seed=3)
        x = torch.randn(1, 6, 64, 64, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            a = gen(x).numpy()
            b = gen(x).numpy()
        np.testing.assert_array_equal(a, b)

    def test_seeded_init_reproducible(self):
        a = init_generator(base_width=8, seed=4)
        b = init_generator(base_width=8, seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy())

    def test_numpy_wrapper_accepts_hwc(self):
        gen = init_generator(base_width=8, seed=5)
        x = np.random.default_rng(1).uniform(-1, 1, (64, 64, 6)).astype(np.float32)
        out = generator_forward(gen, x)
        assert out.shape == (3, 64, 64)


class TestDiscriminator:
    def test_patch_map_shapes_at_512(self):
        disc = init_discriminator(base_width=4, seed=0)
        cand = torch.zeros(1, 3, 512, 512)
        cond = torch.zeros(1, 6, 512, 512)
        with torch.no_grad():
            maps = disc(cand, cond)
        assert tuple(maps[0].shape[-2:]) == (62, 62)
        assert tuple(maps[1].shape[-2:]) == (30, 30)

    def test_patch_map_shapes_at_64(self):
        disc = init_discriminator(base_width=8, seed=1)
        with torch.no_grad():
            maps = disc(torch.zeros(1, 3, 64, 64), torch.zeros(1, 6, 64, 64))
        assert tuple(maps[0].shape[-2:]) == (6, 6)
        assert tuple(maps[1].shape[-2:]) == (2, 2)

    def test_zero_weights_zero_logits(self):
        disc = init_discriminator(base_width=8, seed=2)
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
            maps = disc(torch.randn(1, 3, 64, 64), torch.randn(1, 6, 64, 64))
        for m in maps:
            np.testing.assert_array_equal(m.numpy(), 0.0)

    @settings(max_examples=8, deadline=None)
    @given(hh=st.integers(3, 8), ww=st.integers(3, 8))
    def test_patch_shape_formula(self, hh, ww):
        h, w = 16 * hh, 16 * ww
        disc = init_discriminator(base_width=4, seed=3)
        with torch.no_grad():
            maps = disc(torch.zeros(1, 3, h, w), torch.zeros(1, 6, h, w))
        assert tuple(maps[0].shape[-2:]) == (h // 8 - 2, w // 8 - 2)
        assert tuple(maps[1].shape[-2:]) == (h // 16 - 2, w // 16 - 2)

    def test_numpy_wrapper(self):
        disc = init_discriminator(base_width=8, seed=4)
        cand = np.zeros((64, 64, 3), dtype=np.float32)
        cond = np.zeros((64, 64, 6), dtype=np.float32)
        maps = discriminator_forward(disc, cand, cond)
        assert maps[0].shape == (6, 6)
        assert maps[1].shape == (2, 2)


class TestInstanceNorm:
    def test_normalizes_per_channel_per_sample(self):
        norm = torch.nn.InstanceNorm2d(8, affine=False)
        x = torch.randn(3, 8, 32, 32) * 4.0 + 2.0
        y = norm(x)
        mean = y.mean(dim=(2, 3))
        var = y.var(dim=(2, 3), unbiased=False)
        assert mean.abs().max() < 1e-5
        assert (var - 1).abs().max() < 1e-4


class TestLosses:
    def zero_setup(self):
        gen = init_generator(base_width=8, seed=0, zero_output=True)
        disc = init_discriminator(base_width=8, seed=1)
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
        nerf = torch.zeros(1, 3, 64, 64)
        face = torch.zeros(1, 3, 64, 64)
        gt = torch.zeros(1, 3, 64, 64)  # equals G(x) for the zeroed generator
        return gen, disc, nerf, face, gt

    def test_perfect_generator_zero_logits(self):
        gen, disc, nerf, face, gt = self.zero_setup()
        loss_g, loss_d, fake = fusion_losses(gen, disc, nerf, face, gt, lambda_l2=1.0)
        log2 = float(np.log(2.0))
        assert float(loss_g) == pytest.approx(log2, rel=1e-6)       # adv only, L2 = 0
        assert float(loss_d) == pytest.approx(2 * log2, rel=1e-6)   # log2 per term
        np.testing.assert_array_equal(fake.detach().numpy(), 0.0)

    def test_lambda_zero_reduces_to_adversarial(self):
        gen, disc, nerf, face, gt = self.zero_setup()
        loss_g, _, _ = fusion_losses(gen, disc, nerf, face, gt + 0.5, lambda_l2=0.0)
        assert float(loss_g) == pytest.approx(float(np.log(2.0)), rel=1e-6)

    def test_default_lambda_is_one(self):
        assert FusionTrainConfig().lambda_l2 == 1.0

    def test_negative_lambda_rejected(self):
        gen, disc, nerf, face, gt = self.zero_setup()
        with pytest.raises(ValueError):
            fusion_losses(gen, disc, nerf, face, gt, lambda_l2=-1.0)

    def test_swapped_logits_swap_expectations(self):
        rng = torch.Generator().manual_seed(5)
        a = torch.randn(1, 1, 6, 6, generator=rng)
        b = torch.randn(1, 1, 6, 6, generator=rng)
        real_ab, fake_ab = adversarial_expectations([a], [b])
        real_ba, fake_ba = adversarial_expectations([b], [a])
        assert float(real_ab) == pytest.approx(float((-F.softplus(-a)).mean()))
        assert float(fake_ab) == pytest.approx(float((-F.softplus(b)).mean()))
        assert float(real_ba) == pytest.approx(float((-F.softplus(-b)).mean()))
        assert float(fake_ba) == pytest.approx(float((-F.softplus(a)).mean()))

    def test_lsgan_mode(self):
        gen, disc, nerf, face, gt = self.zero_setup()
        loss_g, loss_d, _ = fusion_losses(gen, disc, nerf, face, gt,
                                          lambda_l2=0.0, adv_mode="lsgan")
        assert float(loss_g) == pytest.approx(1.0)   # (0 - 1)^2
        assert float(loss_d) == pytest.approx(0.5)   # 0.5 * ((0-1)^2 + 0)


class TestNormalization:
    def test_round_trip_endpoints(self):
        img = np.array([[[0.0, 0.5, 1.0]]])
        norm = normalize_image(img)
        np.testing.assert_allclose(norm, [[[-1.0, 0.0, 1.0]]])
        np.testing.assert_allclose(denormalize_image(norm), img, atol=1e-7)

    def test_face_zero_maps_to_minus_one(self):
        face = np.zeros((4, 4, 3))
        np.testing.assert_array_equal(normalize_image(face), -1.0)


class TestGradientCheck:
    def test_generator_gradients_match_finite_differences(self):
        gen = init_generator(base_width=2, seed=7).double()
        x = torch.randn(1, 6, 32, 32, generator=torch.Generator().manual_seed(0)).double()
        target = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(1)).double()

        def loss_fn():
            return ((gen(x) - target) ** 2).mean()

        loss = loss_fn()
        loss.backward()
        params = [p for p in gen.parameters() if p.grad is not None and p.grad.abs().max() > 0]
        rng = np.random.default_rng(2)
        h = 1e-6  # small enough that ReLU kink crossings are vanishingly rare
        for _ in range(10):
            p = params[rng.integers(len(params))]
            flat = rng.integers(p.numel())
            if abs(p.grad.flatten()[flat]) < 1e-10:
                continue
            with torch.no_grad():
                orig = p.flatten()[flat].item()
                p.flatten()[flat] = orig + h
                up = loss_fn().item()
                p.flatten()[flat] = orig - h
                down = loss_fn().item()
                p.flatten()[flat] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.flatten()[flat].item()
            assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3


def tiny_pairs(n=4, size=48, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        gt = rng.uniform(-0.5, 0.5, (size, size, 3)).astype(np.float32)
        nerf = np.clip(gt + rng.normal(0, 0.1, gt.shape), -1, 1).astype(np.float32)
        face = np.full_like(gt, -1.0)
        face[8:-8, 8:-8] = np.clip(gt[8:-8, 8:-8] + 0.05, -1, 1)
        pairs.append(FusionPair(nerf_image=nerf, face_image=face, ground_truth=gt))
    return pairs


class TestTraining:
    def test_discriminator_alone_learns(self):
        # with G frozen, D's objective must fall over the first 200 steps
        pairs = tiny_pairs(4)
        gen = init_generator(base_width=4, seed=0)
        disc = init_discriminator(base_width=4, seed=1)
        opt_d = torch.optim.Adam(disc.parameters(), lr=2e-4, betas=(0.5, 0.999))
        from viewfuse.fusion import _pairs_to_tensors
        nerf, face, gt = _pairs_to_tensors(pairs)
        x = torch.cat([nerf, face], dim=1)
        with torch.no_grad():
            fake = gen(x)
        losses = []
        for _ in range(200):
            real_term, fake_term = adversarial_expectations(disc(gt, x), disc(fake, x))
            loss_d = -(real_term + fake_term)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            losses.append(float(loss_d))
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_resume_equivalence(self, tmp_path):
        pairs = tiny_pairs(3)
        cfg = FusionTrainConfig(iterations=12, batch=2, seed=3, base_width=4,
                                disc_base_width=4, lr_init=1e-4, lr_final=1e-5)
        gen_full, disc_full, _ = train_fusion(pairs, cfg, log_every=0)
        out = tmp_path / "run"
        out.mkdir()
        _, _, path = train_fusion(pairs, cfg, out_dir=out, stop_at=6, log_every=0)
        gen_res, disc_res, _ = train_fusion(pairs, cfg, resume=path, log_every=0)
        for pa, pb in zip(gen_full.parameters(), gen_res.parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy())
        for pa, pb in zip(disc_full.parameters(), disc_res.parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy())

    def test_checkpoint_round_trip(self, tmp_path):
        gen = init_generator(base_width=4, seed=0)
        disc = init_discriminator(base_width=4, seed=1)
        cfg = FusionTrainConfig(base_width=4, disc_base_width=4)
        path = tmp_path / "f.ckpt"
        save_fusion_checkpoint(path, gen, disc, None, None, cfg, 17)
        gen2, disc2, cfg2, _, meta = load_fusion_checkpoint(path)
        assert meta["iteration"] == "17"
        assert cfg2.base_width == 4
        for pa, pb in zip(gen.parameters(), gen2.parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy())


class TestBuildPairs:
    def test_pairs_from_synthetic_scene(self, tmp_path):
        from viewfuse.data import generate_synthetic

        class MeanField:
            """Cheap stand-in field: constant gray, moderately dense."""

            def __call__(self, x, d, t):
                return torch.full((x.shape[0],), 2.0), torch.full((x.shape[0], 3), 0.5)

        scene = generate_synthetic("static", 5, 32, seed=8, out_dir=tmp_path / "s",
                                   supersample=2)
        pairs, masks, idx = build_training_pairs(
            MeanField(), scene.manifest, scene.meshfit, scene.atlas,
            split_tag="train", n_samples=8, out_dir=tmp_path / "pairs")
        assert len(pairs) == len(scene.manifest.indices("train"))
        # outside the mask the normalized face channels sit exactly at -1
        p, m = pairs[0], masks[0]
        np.testing.assert_array_equal(p.face_image[~m], -1.0)
        assert (tmp_path / "pairs" / "pairs.json").exists()

    def test_missing_fit_skips_frame(self, tmp_path, caplog):
        import logging
        from viewfuse.data import generate_synthetic

        class Dark:
            def __call__(self, x, d, t):
                return torch.zeros(x.shape[0]), torch.zeros(x.shape[0], 3)

        scene = generate_synthetic("static", 5, 32, seed=9, out_dir=tmp_path / "s",
                                   supersample=2)
        first_train = scene.manifest.indices("train")[0]
        del scene.meshfit.views[f"{first_train:04d}"]
        with caplog.at_level(logging.WARNING):
            pairs, _, idx = build_training_pairs(
                Dark(), scene.manifest, scene.meshfit, scene.atlas, n_samples=4)
        assert len(pairs) == len(scene.manifest.indices("train")) - 1
        assert first_train not in idx
        assert any("no mesh fit" in r.message for r in caplog.records)
