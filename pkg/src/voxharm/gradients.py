"""Percentile-normalized gradient maps: the style-agnostic anatomy descriptor.

The map is the mean of forward differences along the three axes, cropped to
the common (H-1, W-1, D-1) core, zero-padded one plane at the trailing end of
each axis to restore the input shape, then divided by the q-quantile of its
absolute values plus a stability constant.  Dividing by a robust peak makes
the map invariant to positive affine intensity changes, so the same anatomy
produces (nearly) the same map regardless of acquisition style.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_DELTA = 1e-8
DEFAULT_Q = 0.99


def gradient_map(
    volume: torch.Tensor | np.ndarray,
    delta: float = DEFAULT_DELTA,
    q: float = DEFAULT_Q,
) -> torch.Tensor | np.ndarray:
    """Normalized mean forward-difference map, same shape as the input.

    Accepts a 3D tensor or array and returns the same kind.  Differentiable
    in the tensor input (away from quantile tie points).  Constant volumes
    yield the all-zero map.
    """
    if isinstance(volume, np.ndarray):
        out = gradient_map(torch.from_numpy(np.ascontiguousarray(volume)), delta=delta, q=q)
        return out.numpy()
    if volume.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {tuple(volume.shape)}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")

    d_h = volume[1:, :, :] - volume[:-1, :, :]
    d_w = volume[:, 1:, :] - volume[:, :-1, :]
    d_d = volume[:, :, 1:] - volume[:, :, :-1]
    core = (d_h[:, :-1, :-1] + d_w[:-1, :, :-1] + d_d[:-1, :-1, :]) / 3.0
    # F.pad pads dims last-first; one trailing zero plane per axis.
    g_tilde = F.pad(core, (0, 1, 0, 1, 0, 1))
    peak = torch.quantile(g_tilde.abs().reshape(-1), q)
    return g_tilde / (peak + delta)
