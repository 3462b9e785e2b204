"""Sinusoidal positional encoding for positions, view directions, and time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = ["EncodingSpec", "encode"]


@dataclass(frozen=True)
class EncodingSpec:
    """Number of frequency bands and whether the raw value is kept.

    Each input scalar p expands to ``[p?, sin(2^0 pi p), cos(2^0 pi p), ...,
    sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``. The raw value is prepended by
    default because the network input widths only reconcile when the raw
    coordinate is concatenated with the sinusoids.
    """

    num_freqs: int = 10
    include_raw: bool = True

    def __post_init__(self):
        if self.num_freqs < 0:
            raise ValueError(f"num_freqs must be >= 0, got {self.num_freqs}")

    @property
    def per_scalar(self) -> int:
        return (1 if self.include_raw else 0) + 2 * self.num_freqs

    def output_dim(self, input_dim: int) -> int:
        return input_dim * self.per_scalar


def encode(p, spec: EncodingSpec):
    """Encode the scalars along the last axis of ``p``.

    Works on numpy arrays and torch tensors alike and returns the same kind;
    output shape is ``p.shape[:-1] + (p.shape[-1] * spec.per_scalar,)`` with
    all encoded values of one scalar kept contiguous.
    """
    is_torch = isinstance(p, torch.Tensor)
    if not is_torch:
        p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        p = p.reshape(1)
    lead = p.shape[:-1]
    d = p.shape[-1]

    if is_torch:
        freqs = (2.0 ** torch.arange(spec.num_freqs, dtype=p.dtype, device=p.device)) * torch.pi
        ang = p.unsqueeze(-1) * freqs                       # (..., d, L)
        sc = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
        sc = sc.reshape(*lead, d, 2 * spec.num_freqs)       # sin/cos interleaved per band
        parts = [p.unsqueeze(-1)] if spec.include_raw else []
        out = torch.cat(parts + [sc], dim=-1)
        return out.reshape(*lead, spec.output_dim(d))

    freqs = (2.0 ** np.arange(spec.num_freqs)) * np.pi
    ang = p[..., None] * freqs
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*lead, d, 2 * spec.num_freqs)
    parts = [p[..., None]] if spec.include_raw else []
    out = np.concatenate(parts + [sc], axis=-1)
    return out.reshape(*lead, spec.output_dim(d))
