"""Differentiable global style statistics and per-sequence EMA style records.

A soft histogram spreads every voxel's mass over K equispaced bins with a
Gaussian kernel and normalizes globally, so histogram bins carry analytic
gradients back to voxels.  The Wasserstein distance between two histograms is
the mean absolute difference of their cumulative sums.  Per-sequence EMA
records of (histogram, mean, std) define the unified intensity domain each
sequence is harmonized into; updates are gated to low diffusion timesteps so
noise-dominated estimates never corrupt the records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_BINS = 100
DEFAULT_RANGE = (-1.0, 1.0)
DEFAULT_DELTA = 1e-8
DEFAULT_GAMMA = 0.8
DEFAULT_TAU = 100


class HistogramMismatchError(Exception):
    """Two histograms with different bin configurations were combined."""


class RecordNotInitializedError(Exception):
    """EMA record for a sequence was read before any gated update."""


def bin_centers(k: int, v_min: float, v_max: float, dtype=torch.float64) -> torch.Tensor:
    return torch.linspace(v_min, v_max, k, dtype=dtype)


def default_bandwidth(k: int, v_min: float, v_max: float) -> float:
    """One bin width: sharp but still smooth enough to differentiate."""
    return (v_max - v_min) / (k - 1)


@dataclass
class SoftHistogram:
    """K normalized bin densities plus the configuration that produced them."""

    bins: torch.Tensor
    v_min: float
    v_max: float
    bandwidth: float
    delta: float = DEFAULT_DELTA

    @property
    def k(self) -> int:
        return int(self.bins.shape[0])

    def centers(self) -> torch.Tensor:
        return bin_centers(self.k, self.v_min, self.v_max, dtype=self.bins.dtype)

    def config(self) -> tuple[int, float, float, float]:
        return (self.k, self.v_min, self.v_max, self.bandwidth)


@dataclass
class StyleSummary:
    """One volume's differentiable style statistics."""

    histogram: SoftHistogram
    mu: torch.Tensor
    sigma: torch.Tensor


def soft_histogram(
    volume: torch.Tensor,
    k: int = DEFAULT_BINS,
    v_min: float = DEFAULT_RANGE[0],
    v_max: float = DEFAULT_RANGE[1],
    bandwidth: float | None = None,
    delta: float = DEFAULT_DELTA,
) -> SoftHistogram:
    """Gaussian-kernel soft histogram, globally normalized to sum to one."""
    if k < 2:
        raise ValueError("need at least 2 bins")
    if v_max <= v_min:
        raise ValueError("need v_max > v_min")
    h = default_bandwidth(k, v_min, v_max) if bandwidth is None else bandwidth
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    x = volume.reshape(-1, 1)
    centers = bin_centers(k, v_min, v_max, dtype=volume.dtype).reshape(1, -1)
    weights = torch.exp(-0.5 * ((x - centers) / h) ** 2)
    per_bin = weights.sum(dim=0)
    bins = per_bin / (per_bin.sum() + delta)
    return SoftHistogram(bins=bins, v_min=v_min, v_max=v_max, bandwidth=h, delta=delta)


def histogram_wd(bins_a: torch.Tensor | np.ndarray, bins_b: torch.Tensor | np.ndarray):
    """Mean absolute CDF difference between two normalized bin vectors."""
    if isinstance(bins_a, np.ndarray):
        return float(np.abs(np.cumsum(bins_a) - np.cumsum(bins_b)).mean())
    return (torch.cumsum(bins_a, dim=0) - torch.cumsum(bins_b, dim=0)).abs().mean()


def wasserstein_distance(h1: SoftHistogram, h2: SoftHistogram) -> torch.Tensor:
    """CDF-L1 Wasserstein distance between two same-config soft histograms."""
    if h1.config() != h2.config():
        raise HistogramMismatchError(f"histogram configs differ: {h1.config()} vs {h2.config()}")
    return histogram_wd(h1.bins, h2.bins)


def volume_mean_std(volume: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Population mean and std over all voxels (differentiable)."""
    if volume.numel() == 0:
        raise ValueError("empty volume")
    mu = volume.mean()
    sigma = torch.sqrt(((volume - mu) ** 2).mean())
    return mu, sigma


def style_summary(
    volume: torch.Tensor,
    k: int = DEFAULT_BINS,
    v_min: float = DEFAULT_RANGE[0],
    v_max: float = DEFAULT_RANGE[1],
    bandwidth: float | None = None,
    delta: float = DEFAULT_DELTA,
) -> StyleSummary:
    mu, sigma = volume_mean_std(volume)
    return StyleSummary(
        histogram=soft_histogram(volume, k, v_min, v_max, bandwidth, delta), mu=mu, sigma=sigma
    )


@dataclass
class _SequenceState:
    hist: torch.Tensor | None = None
    mu: float = 0.0
    sigma: float = 1.0
    initialized: bool = False


@dataclass
class EmaStyleRecord:
    """Running per-sequence {histogram, mean, std}: the unified style domain.

    Updates are plain bookkeeping: incoming summaries are detached, so no
    gradient ever flows into the record, and the record acts as a constant
    target inside the consistency loss.
    """

    sequences: tuple[int, ...]
    gamma: float = DEFAULT_GAMMA
    tau: int = DEFAULT_TAU
    k: int = DEFAULT_BINS
    v_min: float = DEFAULT_RANGE[0]
    v_max: float = DEFAULT_RANGE[1]
    bandwidth: float | None = None
    _state: dict[int, _SequenceState] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.bandwidth is None:
            self.bandwidth = default_bandwidth(self.k, self.v_min, self.v_max)
        for m in self.sequences:
            self._state.setdefault(m, _SequenceState())

    def _check_sequence(self, m: int) -> _SequenceState:
        if m not in self._state:
            raise KeyError(f"unknown sequence id {m}; record covers {self.sequences}")
        return self._state[m]

    def initialized(self, m: int) -> bool:
        return self._check_sequence(m).initialized

    def update(self, m: int, summary: StyleSummary, t: int) -> "EmaStyleRecord":
        """Gated EMA update: ignored when t > tau; first gated summary initializes."""
        state = self._check_sequence(m)
        if t > self.tau:
            return self
        hist = summary.histogram.bins.detach().to(torch.float64)
        mu = float(summary.mu.detach())
        sigma = float(summary.sigma.detach())
        if not state.initialized:
            state.hist = hist.clone()
            state.mu = mu
            state.sigma = sigma
            state.initialized = True
        else:
            g = self.gamma
            state.hist = g * state.hist + (1.0 - g) * hist
            state.mu = g * state.mu + (1.0 - g) * mu
            state.sigma = g * state.sigma + (1.0 - g) * sigma
        return self

    def consistency_loss(self, m: int, summary: StyleSummary) -> torch.Tensor:
        """WD(record hist, summary hist) + squared mean and std gaps.

        Differentiable in the summary; the record side is constant.
        """
        state = self._check_sequence(m)
        if not state.initialized:
            raise RecordNotInitializedError(f"no gated update has initialized sequence {m}")
        bins = summary.histogram.bins
        record_hist = state.hist.to(bins.dtype)
        wd = histogram_wd(record_hist, bins)
        mu_term = (summary.mu - summary.mu.new_tensor(state.mu)) ** 2
        sigma_term = (summary.sigma - summary.sigma.new_tensor(state.sigma)) ** 2
        return wd + mu_term + sigma_term

    def view(self, m: int) -> tuple[float, float]:
        """(mean, std) conditioning view; neutral (0, 1) before initialization."""
        state = self._check_sequence(m)
        return (state.mu, state.sigma) if state.initialized else (0.0, 1.0)

    def histogram(self, m: int) -> torch.Tensor:
        state = self._check_sequence(m)
        if not state.initialized:
            raise RecordNotInitializedError(f"no gated update has initialized sequence {m}")
        return state.hist.clone()

    def state_dict(self) -> dict:
        return {
            "sequences": list(self.sequences),
            "gamma": self.gamma,
            "tau": self.tau,
            "k": self.k,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "bandwidth": self.bandwidth,
            "state": {
                str(m): {
                    "hist": None if s.hist is None else s.hist.numpy().tolist(),
                    "mu": s.mu,
                    "sigma": s.sigma,
                    "initialized": s.initialized,
                }
                for m, s in self._state.items()
            },
        }

    @classmethod
    def from_state_dict(cls, payload: dict) -> "EmaStyleRecord":
        rec = cls(
            sequences=tuple(payload["sequences"]),
            gamma=payload["gamma"],
            tau=payload["tau"],
            k=payload["k"],
            v_min=payload["v_min"],
            v_max=payload["v_max"],
            bandwidth=payload["bandwidth"],
        )
        for m_str, s in payload["state"].items():
            state = rec._state[int(m_str)]
            state.hist = None if s["hist"] is None else torch.tensor(s["hist"], dtype=torch.float64)
            state.mu = s["mu"]
            state.sigma = s["sigma"]
            state.initialized = s["initialized"]
        return rec


def ema_update(record: EmaStyleRecord, m: int, summary: StyleSummary, t: int) -> EmaStyleRecord:
    return record.update(m, summary, t)


def ema_consistency_loss(record: EmaStyleRecord, m: int, summary: StyleSummary) -> torch.Tensor:
    return record.consistency_loss(m, summary)
