import numpy as np
import pytest
import torch

from viewfuse.encoding import EncodingSpec, encode
from viewfuse.field import (
    FieldConfig,
    canonical_eval,
    deformation_eval,
    field_eval,
    init_params,
)


def tiny_config(**overrides):
    defaults = dict(depth=2, width=8, skip_layer=1,
                    enc_x=EncodingSpec(2, True), enc_d=EncodingSpec(1, True),
                    enc_t=EncodingSpec(2, True))
    defaults.update(overrides)
    return FieldConfig(**defaults)


def numpy_mlp_canonical(field, x, d):
    """Straight-line matrix-arithmetic re-evaluation of the canonical net."""
    cfg = field.config
    p = {k: v.detach().numpy().astype(np.float64) for k, v in field.canonical.named_parameters()}
    x_enc = encode(np.asarray(x, dtype=np.float64), cfg.enc_x)
    d_enc = encode(np.asarray(d, dtype=np.float64), cfg.enc_d)
    h = x_enc
    for i in range(cfg.depth):
        if i == cfg.skip_layer:
            h = np.concatenate([h, x_enc])
        h = np.maximum(p[f"trunk.{i}.weight"] @ h + p[f"trunk.{i}.bias"], 0.0)
    sigma = max(float((p["alpha.weight"] @ h + p["alpha.bias"])[0]), 0.0)
    feat = p["feature.weight"] @ h + p["feature.bias"]
    hv = np.maximum(p["view.weight"] @ np.concatenate([feat, d_enc]) + p["view.bias"], 0.0)
    rgb = 1.0 / (1.0 + np.exp(-(p["rgb.weight"] @ hv + p["rgb.bias"])))
    return sigma, rgb


def numpy_mlp_deformation(field, x, t):
    cfg = field.config
    p = {k: v.detach().numpy().astype(np.float64) for k, v in field.deformation.named_parameters()}
    x_enc = encode(np.asarray(x, dtype=np.float64), cfg.enc_x)
    t_enc = encode(np.asarray([t], dtype=np.float64), cfg.enc_t)
    h = np.concatenate([x_enc, t_enc])
    for i in range(cfg.depth):
        if i == cfg.skip_layer:
            h = np.concatenate([h, x_enc])
        h = np.maximum(p[f"trunk.{i}.weight"] @ h + p[f"trunk.{i}.bias"], 0.0)
    return p["head.weight"] @ h + p["head.bias"]


class TestConfig:
    def test_default_widths_match_reference_dump(self):
        cfg = FieldConfig()
        field = init_params(cfg, seed=0)
        assert field.canonical.trunk[0].in_features == 63
        assert field.canonical.trunk[5].in_features == 319
        assert field.canonical.view.in_features == 283
        assert field.deformation.trunk[0].in_features == 84
        assert field.deformation.trunk[5].in_features == 319

    def test_rejects_bad_skip(self):
        with pytest.raises(ValueError):
            FieldConfig(depth=4, skip_layer=4)
        with pytest.raises(ValueError):
            FieldConfig(depth=1)


class TestInitParams:
    def test_same_seed_bit_identical(self):
        a = init_params(tiny_config(), seed=12)
        b = init_params(tiny_config(), seed=12)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy())

    def test_different_seed_differs(self):
        a = init_params(tiny_config(), seed=12)
        b = init_params(tiny_config(), seed=13)
        assert any(not np.array_equal(pa.detach().numpy(), pb.detach().numpy())
                   for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()))

    def test_deformation_head_zero_init(self):
        field = init_params(tiny_config(), seed=5)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 3))
        t = rng.uniform(0.1, 1.0, size=20)
        np.testing.assert_array_equal(deformation_eval(field, x, t), np.zeros((20, 3)))


class TestDeformationEval:
    def test_zero_at_time_zero_regardless_of_weights(self):
        field = init_params(tiny_config(), seed=3)
        with torch.no_grad():  # scramble the head so only the gate can zero it
            field.deformation.head.weight.normal_()
            field.deformation.head.bias.normal_()
        x = np.random.default_rng(1).normal(size=(10, 3))
        np.testing.assert_array_equal(deformation_eval(field, x, 0.0), np.zeros((10, 3)))
        assert np.abs(deformation_eval(field, x, 0.5)).max() > 0

    def test_matches_numpy_reimplementation(self):
        field = init_params(tiny_config(), seed=3)
        with torch.no_grad():
            field.deformation.head.weight.normal_()
        x = np.array([0.3, -0.7, 0.2])
        got = deformation_eval(field, x, 0.5)
        want = numpy_mlp_deformation(field, x, 0.5)
        assert np.all(np.isfinite(got))
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_rejects_non_finite(self):
        field = init_params(tiny_config(), seed=3)
        with pytest.raises(ValueError, match="non-finite"):
            deformation_eval(field, [np.nan, 0, 0], 0.5)


class TestCanonicalEval:
    def test_sigma_ignores_view_direction(self):
        field = init_params(tiny_config(), seed=9)
        x = np.array([0.1, 0.2, 0.3])
        out1 = canonical_eval(field, x, [1.0, 0.0, 0.0])
        out2 = canonical_eval(field, x, [0.0, 0.0, 1.0])
        assert out1.sigma == out2.sigma  # exact: density head precedes the view branch
        assert not np.array_equal(out1.color, out2.color)

    def test_color_strictly_inside_unit_interval(self):
        field = init_params(tiny_config(), seed=9)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 3))
        d = rng.normal(size=(50, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        out = canonical_eval(field, x, d)
        assert np.all(out.color > 0) and np.all(out.color < 1)
        assert np.all(out.sigma >= 0)

    def test_matches_numpy_reimplementation(self):
        field = init_params(tiny_config(), seed=4)
        x = np.array([0.2, -0.1, 0.4])
        d = np.array([0.0, 0.6, 0.8])
        out = canonical_eval(field, x, d)
        sigma, rgb = numpy_mlp_canonical(field, x, d)
        assert out.sigma == pytest.approx(sigma, abs=1e-6)
        np.testing.assert_allclose(out.color, rgb, atol=1e-6)

    def test_rejects_non_unit_direction(self):
        field = init_params(tiny_config(), seed=4)
        with pytest.raises(ValueError, match="unit"):
            canonical_eval(field, [0, 0, 0], [1, 1, 0])


class TestFieldEval:
    def test_time_zero_equals_canonical(self):
        field = init_params(tiny_config(), seed=7)
        with torch.no_grad():
            field.deformation.head.weight.normal_()
        x = np.array([0.1, 0.3, -0.2])
        d = np.array([0.0, 0.0, 1.0])
        out_t0 = field_eval(field, x, d, 0.0)
        out_c = canonical_eval(field, x, d)
        assert out_t0.sigma == out_c.sigma
        np.testing.assert_array_equal(out_t0.color, out_c.color)

    def test_zero_init_head_any_time_equals_canonical(self):
        field = init_params(tiny_config(), seed=7)
        x = np.array([0.1, 0.3, -0.2])
        d = np.array([0.0, 0.0, 1.0])
        for t in (0.25, 0.5, 1.0):
            out = field_eval(field, x, d, t)
            ref = canonical_eval(field, x, d)
            assert out.sigma == pytest.approx(ref.sigma, abs=0)
            np.testing.assert_array_equal(out.color, ref.color)

    def test_batched_equals_looped(self):
        field = init_params(tiny_config(), seed=8)
        with torch.no_grad():
            field.deformation.head.weight.normal_()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(100, 3)).astype(np.float32)
        d = rng.normal(size=(100, 3))
        d = (d / np.linalg.norm(d, axis=-1, keepdims=True)).astype(np.float32)
        t = rng.uniform(0, 1, size=100).astype(np.float32)
        batched = field_eval(field, x, d, t)
        for i in range(0, 100, 17):
            single = field_eval(field, x[i], d[i], float(t[i]))
            assert batched.sigma[i] == pytest.approx(single.sigma, abs=1e-6)
            np.testing.assert_allclose(batched.color[i], single.color, atol=1e-6)


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self):
        cfg = tiny_config()
        field = init_params(cfg, seed=21).double()
        with torch.no_grad():
            field.deformation.head.weight.normal_(std=0.1)
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.normal(size=(4, 3)))
        d = torch.tensor(rng.normal(size=(4, 3)))
        d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
        t = torch.tensor(rng.uniform(0.1, 1.0, size=4))

        def scalar_loss():
            sigma, rgb = field(x, d, t)
            return (sigma * 0.3 + rgb.sum(-1)).sum()

        loss = scalar_loss()
        loss.backward()
        params = list(field.parameters())
        probes = []
        gen = np.random.default_rng(1)
        while len(probes) < 50:
            p = params[gen.integers(len(params))]
            if p.grad is None or p.grad.abs().max() == 0:
                continue
            flat = gen.integers(p.numel())
            if abs(p.grad.flatten()[flat]) < 1e-8:
                continue
            probes.append((p, flat))
        h = 1e-4
        for p, flat in probes:
            with torch.no_grad():
                orig = p.flatten()[flat].item()
                p.flatten()[flat] = orig + h
                up = scalar_loss().item()
                p.flatten()[flat] = orig - h
                down = scalar_loss().item()
                p.flatten()[flat] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.flatten()[flat].item()
            assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3
