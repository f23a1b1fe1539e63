"""Tri-planar attention semantic encoder and the Stage-II style losses.

A 3D volume is summarized by sampling equidistant slices along the three
orthogonal views, encoding each slice with a pluggable 2D encoder, pooling
each view's slice sequence with a learnable attention query, and fusing the
three view descriptors through a residual MLP.  The style of a volume is the
residual between its embedding and its globally harmonized counterpart's,
which cancels shared anatomy and isolates acquisition style.

The default slice encoder is a frozen, seeded random projection: deterministic
and dependency-free.  Any callable encoder with a declared width and input
size can be registered by name and plugged in instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import sinusoidal_embedding
from .diffusion import gradient_consistency_loss

VIEWS = ("axial", "coronal", "sagittal")
_VIEW_AXIS = {"axial": 2, "coronal": 1, "sagittal": 0}


class SliceEncoder:
    """Interface: encode a (Z, S, S) slice stack into (Z, D) embeddings."""

    width: int
    input_size: int
    frozen: bool = True

    def encode(self, slices: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class RandomProjectionEncoder(SliceEncoder):
    """Frozen seeded linear projection of average-pooled slices, then tanh."""

    def __init__(self, width: int = 64, input_size: int = 64, pool_size: int = 16, seed: int = 1234):
        self.width = width
        self.input_size = input_size
        self.pool_size = pool_size
        self.frozen = True
        gen = torch.Generator().manual_seed(seed)
        n_in = pool_size * pool_size
        self.weight = torch.randn(n_in, width, generator=gen) / math.sqrt(n_in)

    def encode(self, slices: torch.Tensor) -> torch.Tensor:
        if slices.ndim != 3 or slices.shape[-1] != self.input_size:
            raise ValueError(
                f"expected (Z, {self.input_size}, {self.input_size}) slices, got {tuple(slices.shape)}"
            )
        pooled = F.adaptive_avg_pool2d(slices.unsqueeze(1), self.pool_size).squeeze(1)
        flat = pooled.reshape(slices.shape[0], -1)
        return torch.tanh(flat @ self.weight.to(flat.dtype))


_ENCODER_REGISTRY: dict[str, Callable[..., SliceEncoder]] = {
    "random-projection": RandomProjectionEncoder,
}


def register_encoder(name: str, factory: Callable[..., SliceEncoder]) -> None:
    _ENCODER_REGISTRY[name] = factory


def make_encoder(name: str, **kwargs) -> SliceEncoder:
    if name not in _ENCODER_REGISTRY:
        raise KeyError(f"unknown slice encoder {name!r}; registered: {sorted(_ENCODER_REGISTRY)}")
    return _ENCODER_REGISTRY[name](**kwargs)


def slice_indices(length: int, z: int, margin: float) -> list[int]:
    """Z equidistant indices inside [margin*L, (1-margin)*L).

    A single slice takes the midpoint of the trimmed range; multiple slices
    spread endpoint-inclusively over [lo, hi-1].
    """
    if z < 1:
        raise ValueError("need at least one slice")
    if not 0.0 <= margin <= 0.4:
        raise ValueError("margin must lie in [0, 0.4]")
    lo = math.floor(margin * length)
    hi = math.ceil((1.0 - margin) * length)
    if hi - lo < z:
        raise ValueError(f"cannot take {z} slices from range [{lo}, {hi})")
    if z == 1:
        return [(lo + hi) // 2]
    return [int(round(lo + i * (hi - 1 - lo) / (z - 1))) for i in range(z)]


def extract_view_slices(
    volume: torch.Tensor, view: str, z: int, margin: float, out_size: int
) -> torch.Tensor:
    """(Z, out_size, out_size) stack of bilinearly resized slices along a view."""
    if view not in _VIEW_AXIS:
        raise ValueError(f"view must be one of {VIEWS}")
    axis = _VIEW_AXIS[view]
    idx = slice_indices(volume.shape[axis], z, margin)
    stack = torch.index_select(volume, axis, torch.tensor(idx, device=volume.device))
    stack = torch.movedim(stack, axis, 0)
    return F.interpolate(
        stack.unsqueeze(1), size=(out_size, out_size), mode="bilinear", align_corners=False
    ).squeeze(1)


@dataclass(frozen=True)
class TriPlanarConfig:
    embed_dim: int = 64
    slices_per_view: int = 24
    margin: float = 0.1
    heads: int = 4
    slice_size: int = 64
    use_positional: bool = True
    fusion_hidden: int = 64
    alpha_init: float = 0.1
    seed: int = 7

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads:
            raise ValueError("heads must divide embed_dim")


class TriPlanarEncoder(nn.Module):
    """Learnable view embeddings, attention pooling, and residual fusion."""

    def __init__(self, config: TriPlanarConfig, encoder: SliceEncoder):
        super().__init__()
        if encoder.width != config.embed_dim:
            raise ValueError(
                f"encoder width {encoder.width} does not match embed_dim {config.embed_dim}"
            )
        self.config = config
        self.encoder = encoder
        d = config.embed_dim
        gen = torch.Generator().manual_seed(config.seed)

        def seeded(*shape, scale):
            return nn.Parameter(torch.randn(*shape, generator=gen) * scale)

        self.view_embed = seeded(len(VIEWS), d, scale=0.02)
        self.query = seeded(1, d, scale=1.0 / math.sqrt(d))
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
            lin.weight.data = torch.randn(d, d, generator=gen) / math.sqrt(d)
            lin.bias.data.zero_()
        self.norm = nn.LayerNorm(d)
        self.fusion = nn.Sequential(
            nn.Linear(3 * d, config.fusion_hidden),
            nn.SiLU(),
            nn.Linear(config.fusion_hidden, d),
        )
        self.fusion[0].weight.data = torch.randn(
            config.fusion_hidden, 3 * d, generator=gen
        ) / math.sqrt(3 * d)
        self.fusion[0].bias.data.zero_()
        nn.init.zeros_(self.fusion[-1].weight)
        nn.init.zeros_(self.fusion[-1].bias)
        self.alpha = nn.Parameter(torch.tensor(float(config.alpha_init)))

    def encode_view(self, slices: torch.Tensor, view: str) -> torch.Tensor:
        """Rows = L2Norm(encoder(slice) + positional + view embedding), (Z, D)."""
        raw = self.encoder.encode(slices)
        if raw.shape[-1] != self.config.embed_dim:
            raise ValueError("encoder output width mismatch")
        rows = raw
        if self.config.use_positional:
            pos = sinusoidal_embedding(
                torch.arange(rows.shape[0], device=rows.device), self.config.embed_dim
            )
            rows = rows + pos.to(rows.dtype)
        rows = rows + self.view_embed[VIEWS.index(view)].to(rows.dtype)
        return F.normalize(rows, p=2, dim=-1)

    def attention_pool(self, rows: torch.Tensor) -> torch.Tensor:
        """Multi-head attention of the learnable query over the rows, then LayerNorm."""
        if rows.numel() == 0:
            raise ValueError("empty embedding sequence")
        d, h = self.config.embed_dim, self.config.heads
        dh = d // h
        q = self.w_q(self.query.to(rows.dtype)).reshape(1, h, dh).transpose(0, 1)  # (h, 1, dh)
        k = self.w_k(rows).reshape(-1, h, dh).transpose(0, 1)  # (h, Z, dh)
        v = self.w_v(rows).reshape(-1, h, dh).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(dh), dim=-1)  # (h, 1, Z)
        pooled = (attn @ v).transpose(0, 1).reshape(1, d)
        return self.norm(self.w_o(pooled)).squeeze(0)

    def fuse_views(self, z_a: torch.Tensor, z_c: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
        """mean(z_a, z_c, z_s) + alpha * MLP([z_a; z_c; z_s])."""
        if not z_a.shape == z_c.shape == z_s.shape:
            raise ValueError("view descriptor widths differ")
        mean = (z_a + z_c + z_s) / 3.0
        return mean + self.alpha * self.fusion(torch.cat([z_a, z_c, z_s], dim=-1))

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        """Semantic embedding of a (H, W, D) volume."""
        pooled = []
        for view in VIEWS:
            slices = extract_view_slices(
                volume,
                view,
                self.config.slices_per_view,
                self.config.margin,
                self.encoder.input_size,
            )
            pooled.append(self.attention_pool(self.encode_view(slices, view)))
        return self.fuse_views(*pooled)

    encode_volume = forward


def style_vector(psi_raw: torch.Tensor, psi_aligned: torch.Tensor) -> torch.Tensor:
    """Residual embedding; cancels anatomy shared by the raw/aligned pair."""
    if psi_raw.shape != psi_aligned.shape:
        raise ValueError("embedding widths differ")
    return psi_raw - psi_aligned


def style_displacement_loss(
    s_ref: torch.Tensor, s_gen: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """| ||s_ref|| - ||s_gen|| | plus (1 - cosine similarity).

    The cosine denominator carries an eps guard so near-zero style vectors
    degrade deterministically instead of dividing by zero.
    """
    norm_ref = torch.linalg.vector_norm(s_ref)
    norm_gen = torch.linalg.vector_norm(s_gen)
    cosine = (s_ref * s_gen).sum() / (norm_ref * norm_gen + eps)
    return (norm_ref - norm_gen).abs() + (1.0 - cosine)


def style_consistency_loss(s_ref: torch.Tensor, s_selfgen: torch.Tensor) -> torch.Tensor:
    if s_ref.shape != s_selfgen.shape:
        raise ValueError("style vector widths differ")
    return (s_ref - s_selfgen).abs().sum()


@dataclass
class StageTwoWeights:
    style: float = 1.0
    consistency: float = 1.0
    gradient: float = 1.0


def stage2_loss(
    s_target: torch.Tensor,
    s_generated: torch.Tensor,
    s_self: torch.Tensor,
    grad_reference: torch.Tensor,
    generated: torch.Tensor,
    weights: StageTwoWeights | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Hybrid Stage-II objective: style displacement + consistency + gradient.

    grad_reference is the gradient map of the globally aligned source; the
    gradient term compares it against the generated volume's own map.
    """
    weights = weights or StageTwoWeights()
    l_style = style_displacement_loss(s_target, s_generated)
    l_consistency = style_consistency_loss(s_target, s_self)
    l_gradient = gradient_consistency_loss(grad_reference, generated)
    total = (
        weights.style * l_style
        + weights.consistency * l_consistency
        + weights.gradient * l_gradient
    )
    parts = {
        "style": float(l_style.detach()),
        "consistency": float(l_consistency.detach()),
        "gradient": float(l_gradient.detach()),
    }
    return total, parts
