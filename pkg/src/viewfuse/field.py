"""Canonical and deformation networks composing the dynamic radiance field.

The canonical network maps an encoded position (and, for color, an encoded
view direction) to a density and an RGB value. The deformation network maps
an encoded (position, time) pair to a displacement into canonical space; at
t = 0 the displacement is gated to exactly zero, which pins the canonical
space to the scene at the first timestamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoding import EncodingSpec, encode

__all__ = [
    "FieldConfig",
    "FieldOutput",
    "CanonicalNet",
    "DeformationNet",
    "RadianceField",
    "init_params",
    "canonical_eval",
    "deformation_eval",
    "field_eval",
]


@dataclass(frozen=True)
class FieldConfig:
    """Architecture hyperparameters shared by both MLPs.

    Defaults give the full-size model: 8 layers of 256 units with the
    encoded position re-concatenated at layer 5 (input widths 63 / 319 /
    283 / 84 for the canonical trunk, skip layer, view branch, and
    deformation trunk respectively).
    """

    depth: int = 8
    width: int = 256
    skip_layer: int = 5
    enc_x: EncodingSpec = dc_field(default_factory=lambda: EncodingSpec(10, True))
    enc_d: EncodingSpec = dc_field(default_factory=lambda: EncodingSpec(4, True))
    enc_t: EncodingSpec = dc_field(default_factory=lambda: EncodingSpec(10, True))

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if not 1 <= self.skip_layer < self.depth:
            raise ValueError(f"skip_layer must be in [1, depth), got {self.skip_layer}")

    @property
    def x_dim(self) -> int:
        return self.enc_x.output_dim(3)

    @property
    def d_dim(self) -> int:
        return self.enc_d.output_dim(3)

    @property
    def t_dim(self) -> int:
        return self.enc_t.output_dim(1)


@dataclass
class FieldOutput:
    """Density (nonnegative, per meter) and color (each channel in [0, 1])."""

    sigma: np.ndarray
    color: np.ndarray


def _trunk(in_dim: int, config: FieldConfig) -> nn.ModuleList:
    layers = []
    for i in range(config.depth):
        if i == 0:
            w_in = in_dim
        elif i == config.skip_layer:
            w_in = config.width + config.x_dim
        else:
            w_in = config.width
        layers.append(nn.Linear(w_in, config.width))
    return nn.ModuleList(layers)


class CanonicalNet(nn.Module):
    """Time-independent network: (encoded x, encoded d) -> (sigma, rgb).

    Density is read off before the view branch, so it cannot depend on the
    view direction. Output activations are ReLU on density and sigmoid on
    color, which makes the range contracts hold for any parameter values.
    """

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        self.trunk = _trunk(config.x_dim, config)
        self.feature = nn.Linear(config.width, config.width)
        self.alpha = nn.Linear(config.width, 1)
        self.view = nn.Linear(config.width + config.d_dim, config.width // 2)
        self.rgb = nn.Linear(config.width // 2, 3)

    def forward(self, x_enc: torch.Tensor, d_enc: torch.Tensor):
        h = x_enc
        for i, layer in enumerate(self.trunk):
            if i == self.config.skip_layer:
                h = torch.cat([h, x_enc], dim=-1)
            h = F.relu(layer(h))
        sigma = F.relu(self.alpha(h)).squeeze(-1)
        h = torch.cat([self.feature(h), d_enc], dim=-1)
        h = F.relu(self.view(h))
        rgb = torch.sigmoid(self.rgb(h))
        return sigma, rgb


class DeformationNet(nn.Module):
    """Displacement network: (encoded x, encoded t) -> delta x.

    The skip layer re-concatenates only the encoded position, mirroring the
    canonical trunk widths.
    """

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        self.trunk = _trunk(config.x_dim + config.t_dim, config)
        self.head = nn.Linear(config.width, 3)

    def forward(self, x_enc: torch.Tensor, t_enc: torch.Tensor) -> torch.Tensor:
        h = torch.cat([x_enc, t_enc], dim=-1)
        for i, layer in enumerate(self.trunk):
            if i == self.config.skip_layer:
                h = torch.cat([h, x_enc], dim=-1)
            h = F.relu(layer(h))
        return self.head(h)


class RadianceField(nn.Module):
    """Composed field F: (x, d, t) -> (sigma, c) via the canonical space."""

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        self.canonical = CanonicalNet(config)
        self.deformation = DeformationNet(config)

    def deform(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Displacement into canonical space; exactly zero where t == 0."""
        x_enc = encode(x, self.config.enc_x)
        t_enc = encode(t.unsqueeze(-1), self.config.enc_t)
        dx = self.deformation(x_enc, t_enc)
        gate = (t != 0).to(dx.dtype).unsqueeze(-1)
        return dx * gate

    def canonical_forward(self, x: torch.Tensor, d: torch.Tensor):
        x_enc = encode(x, self.config.enc_x)
        d_enc = encode(d, self.config.enc_d)
        return self.canonical(x_enc, d_enc)

    def forward(self, x: torch.Tensor, d: torch.Tensor, t: torch.Tensor):
        """Evaluate at world positions (N, 3), unit directions (N, 3), times (N,)."""
        return self.canonical_forward(x + self.deform(x, t), d)

    def parameter_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named parameters as float32 numpy arrays, in declaration order."""
        return [(name, p.detach().cpu().numpy().astype(np.float32))
                for name, p in self.named_parameters()]

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                a = arrays[name]
                if tuple(a.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name}: {a.shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(a)))


def init_params(config: FieldConfig, seed: int) -> RadianceField:
    """Deterministically initialized field for the given seed.

    Weights and biases are fan-in-scaled uniform; the deformation head is
    zeroed so the untrained field starts as a pure canonical field.
    """
    model = RadianceField(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=g)
                m.bias.uniform_(-bound, bound, generator=g)
        model.deformation.head.weight.zero_()
        model.deformation.head.bias.zero_()
    return model


def _as_batch(a, name: str, dim: int) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")
    single = arr.ndim == (0 if dim == 1 else 1)
    arr = arr.reshape(-1) if dim == 1 else arr.reshape(-1, dim)
    return torch.from_numpy(arr).float(), single


def deformation_eval(field: RadianceField, x, t) -> np.ndarray:
    """Displacement for positions (3,) or (N, 3) at times scalar or (N,)."""
    xt, single = _as_batch(x, "x", 3)
    tt, _ = _as_batch(t, "t", 1)
    if tt.numel() == 1:
        tt = tt.expand(xt.shape[0])
    with torch.no_grad():
        dx = field.deform(xt, tt).numpy()
    return dx[0] if single else dx


def canonical_eval(field: RadianceField, x, d) -> FieldOutput:
    """Canonical-space density and color; directions must be unit norm."""
    xt, single = _as_batch(x, "x", 3)
    dt, _ = _as_batch(d, "d", 3)
    if dt.shape[0] == 1 and xt.shape[0] > 1:
        dt = dt.expand_as(xt)
    norms = torch.linalg.norm(dt, dim=-1)
    if not torch.all((norms - 1.0).abs() < 1e-4):
        raise ValueError("view directions must be unit norm")
    with torch.no_grad():
        sigma, rgb = field.canonical_forward(xt, dt)
    sigma, rgb = sigma.numpy(), rgb.numpy()
    return FieldOutput(sigma[0], rgb[0]) if single else FieldOutput(sigma, rgb)


def field_eval(field: RadianceField, x, d, t) -> FieldOutput:
    """Full dynamic field: canonical evaluation at the deformed position."""
    dx = deformation_eval(field, x, t)
    return canonical_eval(field, np.asarray(x, dtype=np.float64) + dx, d)
