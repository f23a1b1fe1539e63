"""Quantitative harmonization evaluation at desk scale.

Voxel metrics (SSIM/PSNR/PCC/intensity WD) score harmonized volumes against
same-subject renders at the target site; a frozen random conv stack provides
features for site-centroid analysis and a linear site-classification probe;
the trajectory grid search maps harmonization quality over (T_f, T_r)
choices.  All functions are deterministic given their seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .stylestats import histogram_wd

PSNR_CAP = 99.0


class MetricError(Exception):
    pass


class ConstantVolumeError(MetricError):
    """Pearson correlation is undefined for a constant input."""


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0, window: int = 7) -> float:
    """Mean local SSIM over all full window^3 neighborhoods (uniform window).

    The first argument is the reference.  Local means/variances use the
    population convention; stabilization constants follow the usual
    (0.01*R)^2 and (0.03*R)^2.
    """
    a, b = _check_pair(a, b)
    if min(a.shape) < window:
        raise MetricError(f"volume smaller than the {window}^3 SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    pad = window // 2

    def local_mean(x):
        filtered = uniform_filter(x, size=window, mode="constant")
        return filtered[pad:-pad or None, pad:-pad or None, pad:-pad or None]

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    e_aa = local_mean(a * a)
    e_bb = local_mean(b * b)
    e_ab = local_mean(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio vs the reference `a`, capped at `cap` dB."""
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(data_range**2 / mse))


def pcc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over flattened voxels."""
    a, b = _check_pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    denom = np.sqrt((da**2).sum() * (db**2).sum())
    if denom == 0.0:
        raise ConstantVolumeError("correlation undefined for constant volume")
    return float((da * db).sum() / denom)


def intensity_histogram(
    a: np.ndarray, bins: int = 100, v_range: tuple[float, float] = (-1.0, 1.0)
) -> np.ndarray:
    counts, _ = np.histogram(np.asarray(a).ravel(), bins=bins, range=v_range)
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def intensity_wd(
    a: np.ndarray, b: np.ndarray, bins: int = 100, v_range: tuple[float, float] = (-1.0, 1.0)
) -> float:
    """CDF-L1 Wasserstein distance between hard intensity histograms."""
    a, b = _check_pair(a, b)
    return float(histogram_wd(intensity_histogram(a, bins, v_range), intensity_histogram(b, bins, v_range)))


class _FeatureNet(torch.nn.Module):
    """Frozen 4-stage strided conv stack with global average pooling."""

    def __init__(self, seed: int, width: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        plan = [1, 16, 32, 64, width]
        self.convs = torch.nn.ModuleList(
            torch.nn.Conv3d(plan[i], plan[i + 1], 3, stride=2, padding=1) for i in range(4)
        )
        for conv in self.convs:
            fan_in = conv.in_channels * 27
            conv.weight.data = torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
            conv.bias.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = torch.relu(conv(x))
        return x.mean(dim=(2, 3, 4))


_FEATURE_NETS: dict[int, _FeatureNet] = {}


def feature_extract(volume: np.ndarray, seed: int = 17) -> np.ndarray:
    """Deterministic frozen deep features of one volume."""
    if seed not in _FEATURE_NETS:
        _FEATURE_NETS[seed] = _FeatureNet(seed)
    net = _FEATURE_NETS[seed]
    x = torch.from_numpy(np.asarray(volume, dtype=np.float32))[None, None]
    with torch.no_grad():
        return net(x).squeeze(0).numpy()


@dataclass
class ClusterReport:
    inter_site: float
    intra_site: float
    centroids: dict[int, np.ndarray] = field(default_factory=dict)


def centroid_analysis(features: np.ndarray, site_labels: list[int]) -> ClusterReport:
    """Mean pairwise centroid distance (inter) and sample-to-centroid (intra)."""
    features = np.asarray(features, dtype=np.float64)
    sites = sorted(set(site_labels))
    if len(sites) < 2:
        raise MetricError("need at least 2 sites")
    labels = np.asarray(site_labels)
    centroids = {}
    intra = []
    for s in sites:
        mask = labels == s
        if not mask.any():
            raise MetricError(f"site {s} has no samples")
        centroids[s] = features[mask].mean(axis=0)
        intra.extend(np.linalg.norm(features[mask] - centroids[s], axis=1))
    inter = [
        np.linalg.norm(centroids[sites[i]] - centroids[sites[j]])
        for i in range(len(sites))
        for j in range(i + 1, len(sites))
    ]
    return ClusterReport(
        inter_site=float(np.mean(inter)), intra_site=float(np.mean(intra)), centroids=centroids
    )


@dataclass
class ProbeReport:
    balanced_accuracy: float
    f1: float
    precision: float
    recall: float
    n_train: int
    n_test: int


def _softmax_regression(
    x_train: np.ndarray, y_train: np.ndarray, n_classes: int, lr: float, iters: int
) -> np.ndarray:
    """Full-batch gradient descent on multinomial logistic loss; returns weights."""
    n, f = x_train.shape
    x1 = np.hstack([x_train, np.ones((n, 1))])
    w = np.zeros((f + 1, n_classes))
    onehot = np.eye(n_classes)[y_train]
    for _ in range(iters):
        logits = x1 @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (x1.T @ (p - onehot)) / n
    return w


def site_probe(
    features: np.ndarray,
    site_labels: list[int],
    split_seed: int = 5,
    train_frac: float = 0.7,
    lr: float = 0.5,
    iters: int = 300,
) -> ProbeReport:
    """Linear softmax site classifier on a stratified 70/30 split."""
    features = np.asarray(features, dtype=np.float64)
    sites = sorted(set(site_labels))
    site_to_class = {s: i for i, s in enumerate(sites)}
    y = np.array([site_to_class[s] for s in site_labels])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([split_seed])))
    train_idx, test_idx = [], []
    for c in range(len(sites)):
        idx = np.flatnonzero(y == c)
        if len(idx) < 2:
            raise MetricError(f"site {sites[c]} needs >= 2 samples for a split")
        idx = idx[rng.permutation(len(idx))]
        n_train = int(np.clip(round(train_frac * len(idx)), 1, len(idx) - 1))
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))

    mean = features[train_idx].mean(axis=0)
    std = features[train_idx].std(axis=0)
    std[std == 0] = 1.0
    xt = (features[train_idx] - mean) / std
    xv = (features[test_idx] - mean) / std

    w = _softmax_regression(xt, y[train_idx], len(sites), lr, iters)
    logits = np.hstack([xv, np.ones((len(xv), 1))]) @ w
    pred = logits.argmax(axis=1)
    truth = y[test_idx]

    n_c = len(sites)
    confusion = np.zeros((n_c, n_c), dtype=np.int64)
    for t, p in zip(truth, pred):
        confusion[t, p] += 1
    recalls, precisions, f1s = [], [], []
    for c in range(n_c):
        tp = confusion[c, c]
        rec = tp / confusion[c].sum() if confusion[c].sum() else 0.0
        prec = tp / confusion[:, c].sum() if confusion[:, c].sum() else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        recalls.append(rec)
        precisions.append(prec)
    return ProbeReport(
        balanced_accuracy=float(np.mean(recalls)),
        f1=float(np.mean(f1s)),
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        n_train=len(train_idx),
        n_test=len(test_idx),
    )


@dataclass
class GridCell:
    t_forward: int
    t_reverse: int
    mean_wd: float
    mean_ssim: float


@dataclass
class GridSearchReport:
    cells: list[GridCell]

    @property
    def best(self) -> GridCell:
        return min(self.cells, key=lambda c: c.mean_wd)


def paired_site_metrics(
    volumes: dict[tuple[int, int, int], np.ndarray],
    bins: int = 100,
) -> tuple[float, float]:
    """Mean WD and SSIM over same-(subject, sequence) cross-site pairs.

    `volumes` maps (subject, site, sequence) to arrays; traveling-subject
    layout makes each cross-site pair anatomically matched.
    """
    wds, ssims = [], []
    keys = sorted(volumes)
    for i, (sub_i, site_i, seq_i) in enumerate(keys):
        for sub_j, site_j, seq_j in keys[i + 1 :]:
            if sub_i == sub_j and seq_i == seq_j and site_i != site_j:
                a = volumes[(sub_i, site_i, seq_i)]
                b = volumes[(sub_j, site_j, seq_j)]
                wds.append(intensity_wd(a, b, bins=bins))
                ssims.append(ssim(a, b))
    if not wds:
        raise MetricError("no cross-site traveling-subject pairs found")
    return float(np.mean(wds)), float(np.mean(ssims))


def grid_search_trajectory(manifest, checkpoint, grid, split: str | None = None) -> GridSearchReport:
    """Evaluate global harmonization over a (T_f, T_r) grid.

    Each cell harmonizes every (split-filtered) manifest volume with that
    trajectory and reports the mean cross-site traveling-subject WD and SSIM.
    """
    from .config import TrajectorySection
    from .pipeline import harmonize_global

    if not grid:
        raise MetricError("empty trajectory grid")
    entries = manifest.filter(split=split) if split else list(manifest.entries)
    records = [manifest.load(e) for e in entries]
    cells = []
    for t_forward, t_reverse in grid:
        traj = TrajectorySection(t_forward=int(t_forward), t_reverse=int(t_reverse))
        harmonized = {
            (r.subject, r.site, r.sequence): harmonize_global(r, checkpoint, traj).data
            for r in records
        }
        mean_wd, mean_ssim = paired_site_metrics(harmonized)
        cells.append(
            GridCell(
                t_forward=int(t_forward),
                t_reverse=int(t_reverse),
                mean_wd=mean_wd,
                mean_ssim=mean_ssim,
            )
        )
    return GridSearchReport(cells=cells)
