"""Time-conditioned 3D encoder-decoder noise predictor.

The first layer consumes the noisy volume concatenated with its normalized
gradient map; the sequence label is embedded and added to the sinusoidal
timestep embedding; decoder residual blocks modulate their features with
AdaIN driven by the per-sequence EMA (mean, std) view.  The AdaIN projection
and every block's final convolution are zero-initialized, so an untrained
network predicts exactly zero noise and the whole DDIM machinery starts out
as the identity map.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    channels: tuple[int, ...] = (16, 32, 64)  # per resolution, coarsest last
    res_blocks: int = 1
    emb_width: int = 64
    n_sequences: int = 2
    timesteps: int = 1000
    use_gradient_condition: bool = True
    use_ema_modulation: bool = True

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    def validate_dims(self, dims: tuple[int, ...]) -> None:
        factor = 2**self.levels
        for d in dims:
            if d % factor:
                raise ValueError(f"spatial dims {dims} must be divisible by {factor}")

    def fingerprint(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# Paper-scale preset kept for reference; the desk plan above is the default.
PAPER_CHANNELS = (32, 64, 256, 256)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic [sin | cos] table over frequencies exp(-ln(P) * k / half)."""
    if dim % 2:
        raise ValueError("embedding width must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ConditionEmbedding(nn.Module):
    """Sinusoidal timestep embedding plus a learned sequence embedding, summed."""

    def __init__(self, width: int, n_sequences: int, timesteps: int):
        super().__init__()
        self.width = width
        self.n_sequences = n_sequences
        self.timesteps = timesteps
        self.sequence_embed = nn.Embedding(n_sequences, width)

    def forward(self, t: torch.Tensor, sequence: torch.Tensor) -> torch.Tensor:
        if ((t < 0) | (t > self.timesteps)).any():
            raise ValueError(f"timestep out of range [0, {self.timesteps}]")
        if ((sequence < 1) | (sequence > self.n_sequences)).any():
            raise ValueError(f"sequence id out of range [1, {self.n_sequences}]")
        return sinusoidal_embedding(t, self.width) + self.sequence_embed(sequence - 1)


class AdaIN3d(nn.Module):
    """Per-channel spatial normalization with style-driven scale/shift.

    style is a (B, 2) tensor holding the EMA (mean, std) view for each item's
    sequence.  The projection's last layer is zero-initialized so modulation
    starts as the identity on normalized features.  With enabled=False the
    module is plain normalization (the EMA-ablated variant).
    """

    def __init__(self, channels: int, hidden: int = 32, eps: float = 1e-5, enabled: bool = True):
        super().__init__()
        self.eps = eps
        self.enabled = enabled
        self.proj = nn.Sequential(nn.Linear(2, hidden), nn.SiLU(), nn.Linear(hidden, 2 * channels))
        nn.init.zeros_(self.proj[-1].weight)
        nn.init.zeros_(self.proj[-1].bias)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=(2, 3, 4), keepdim=True)
        sigma = torch.sqrt(((x - mu) ** 2).mean(dim=(2, 3, 4), keepdim=True))
        normalized = (x - mu) / (sigma + self.eps)
        if not self.enabled:
            return normalized
        scale_shift = self.proj(style.to(x.dtype))
        delta, beta = scale_shift.chunk(2, dim=1)
        delta = delta[:, :, None, None, None]
        beta = beta[:, :, None, None, None]
        return (1.0 + delta) * normalized + beta


class ResBlock3d(nn.Module):
    """Pre-activation residual block with timestep-embedding injection.

    Decoder blocks (adain=True) replace the second norm with AdaIN so the
    EMA style view modulates reconstruction; encoder blocks use GroupNorm.
    """

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, adain: bool, ema_enabled: bool = True):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.adain = AdaIN3d(out_ch, enabled=ema_enabled) if adain else None
        self.norm2 = None if adain else nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None, None]
        h = self.adain(h, style) if self.adain is not None else self.norm2(h)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention3d(nn.Module):
    """Single-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w, d = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w, d)
        return x + self.proj(out)


class DenoiserNet(nn.Module):
    """Symmetric encoder-decoder over (B, 1, H, W, D) volumes."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        emb_dim = config.emb_width
        self.condition = ConditionEmbedding(emb_dim, config.n_sequences, config.timesteps)
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.conv_in = nn.Conv3d(2, ch[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for lvl in range(config.levels):
            blocks = nn.ModuleList(
                ResBlock3d(ch[lvl], ch[lvl], emb_dim, adain=False) for _ in range(config.res_blocks)
            )
            self.enc_blocks.append(blocks)
            self.downs.append(nn.Conv3d(ch[lvl], ch[lvl + 1], 3, stride=2, padding=1))

        self.mid_block1 = ResBlock3d(ch[-1], ch[-1], emb_dim, adain=False)
        self.mid_attn = SelfAttention3d(ch[-1])
        self.mid_block2 = ResBlock3d(ch[-1], ch[-1], emb_dim, adain=False)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for lvl in reversed(range(config.levels)):
            self.ups.append(nn.Conv3d(ch[lvl + 1], ch[lvl], 3, padding=1))
            blocks = nn.ModuleList()
            for b in range(config.res_blocks):
                in_ch = ch[lvl] * 2 if b == 0 else ch[lvl]
                blocks.append(
                    ResBlock3d(
                        in_ch,
                        ch[lvl],
                        emb_dim,
                        adain=True,
                        ema_enabled=config.use_ema_modulation,
                    )
                )
            self.dec_blocks.append(blocks)

        self.out_norm = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.out_conv = nn.Conv3d(ch[0], 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        noisy: torch.Tensor,
        t: torch.Tensor,
        grad_map: torch.Tensor,
        sequence: torch.Tensor,
        style: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the noise component of `noisy`.

        noisy, grad_map: (B, 1, H, W, D); t, sequence: (B,) long; style: (B, 2)
        holding the EMA (mean, std) view for each item's sequence.
        """
        if grad_map.shape != noisy.shape:
            raise ValueError(
                f"gradient map shape {tuple(grad_map.shape)} != input {tuple(noisy.shape)}"
            )
        self.config.validate_dims(tuple(noisy.shape[2:]))
        if not self.config.use_gradient_condition:
            grad_map = torch.zeros_like(grad_map)
        emb = self.time_mlp(self.condition(t, sequence))

        x = self.conv_in(torch.cat([noisy, grad_map], dim=1))
        skips = []
        for blocks, down in zip(self.enc_blocks, self.downs):
            for block in blocks:
                x = block(x, emb, style)
            skips.append(x)
            x = down(x)

        x = self.mid_block1(x, emb, style)
        x = self.mid_attn(x)
        x = self.mid_block2(x, emb, style)

        for up, blocks in zip(self.ups, self.dec_blocks):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = torch.cat([x, skips.pop()], dim=1)
            for block in blocks:
                x = block(x, emb, style)

        return self.out_conv(F.silu(self.out_norm(x)))
