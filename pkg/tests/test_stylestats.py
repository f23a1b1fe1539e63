import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from voxharm.stylestats import (
    EmaStyleRecord,
    HistogramMismatchError,
    RecordNotInitializedError,
    SoftHistogram,
    StyleSummary,
    bin_centers,
    default_bandwidth,
    ema_consistency_loss,
    ema_update,
    histogram_wd,
    soft_histogram,
    style_summary,
    volume_mean_std,
    wasserstein_distance,
)


def brute_force_soft_histogram(x, k, v_min, v_max, h, delta):
    """Double-loop oracle for the kernel histogram."""
    centers = [v_min + i * (v_max - v_min) / (k - 1) for i in range(k)]
    weights = [[math.exp(-0.5 * ((xi - b) / h) ** 2) for b in centers] for xi in x]
    per_bin = [sum(w[j] for w in weights) for j in range(k)]
    total = sum(per_bin) + delta
    return np.array([p / total for p in per_bin])


def one_hot_hist(index, k=10):
    bins = torch.zeros(k, dtype=torch.float64)
    bins[index] = 1.0
    h = default_bandwidth(k, -1.0, 1.0)
    return SoftHistogram(bins=bins, v_min=-1.0, v_max=1.0, bandwidth=h)


def test_all_mass_at_bin_center():
    centers = bin_centers(100, -1.0, 1.0)
    v = torch.full((4, 4, 4), float(centers[5]), dtype=torch.float64)
    hist = soft_histogram(v, k=100)
    assert int(torch.argmax(hist.bins)) == 5
    # kernel symmetry around the occupied bin
    assert torch.allclose(hist.bins[4], hist.bins[6], atol=1e-12)
    assert torch.allclose(hist.bins[3], hist.bins[7], atol=1e-12)


def test_two_half_volumes_average():
    # central bins keep the kernel tails clear of the range edges, so the two
    # halves carry identical total weight and normalization commutes with the mean
    centers = bin_centers(100, -1.0, 1.0)
    a = torch.full((32,), float(centers[40]), dtype=torch.float64)
    b = torch.full((32,), float(centers[60]), dtype=torch.float64)
    joint = soft_histogram(torch.cat([a, b]), k=100)
    ha = soft_histogram(a, k=100)
    hb = soft_histogram(b, k=100)
    assert torch.allclose(joint.bins, (ha.bins + hb.bins) / 2, atol=1e-9)


def test_matches_brute_force_and_gradient():
    torch.manual_seed(0)
    v = torch.rand(4, 4, 4, dtype=torch.float64) * 2 - 1
    hist = soft_histogram(v, k=16)
    oracle = brute_force_soft_histogram(
        v.reshape(-1).tolist(), 16, -1.0, 1.0, hist.bandwidth, hist.delta
    )
    assert np.abs(hist.bins.numpy() - oracle).max() < 1e-9

    # analytic gradient of a random bin contraction vs central differences
    c = torch.randn(16, dtype=torch.float64)
    x = v.clone().requires_grad_(True)
    loss = (soft_histogram(x, k=16).bins * c).sum()
    (analytic,) = torch.autograd.grad(loss, x)
    step = 1e-4
    fd = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            pert = flat.clone()
            pert[i] += sign * step
            val = (soft_histogram(pert.reshape(4, 4, 4), k=16).bins * c).sum()
            fd.reshape(-1)[i] += sign * float(val) / (2 * step)
    rel = (analytic - fd).abs().max() / analytic.abs().max()
    assert rel < 1e-4


def test_histogram_sums_to_one():
    v = torch.rand(5, 5, 5) * 2 - 1
    hist = soft_histogram(v)
    assert abs(float(hist.bins.sum()) - 1.0) < 1e-6


def test_wd_identity_and_symmetry():
    torch.manual_seed(1)
    a = soft_histogram(torch.rand(4, 4, 4) * 2 - 1)
    b = soft_histogram(torch.rand(4, 4, 4) * 2 - 1)
    assert float(wasserstein_distance(a, a)) == 0.0
    assert torch.isclose(wasserstein_distance(a, b), wasserstein_distance(b, a))


def test_wd_one_hot_distance():
    for i, j in [(0, 4), (2, 9), (5, 5)]:
        wd = wasserstein_distance(one_hot_hist(i), one_hot_hist(j))
        assert abs(float(wd) - abs(i - j) / 10) < 1e-12


@given(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)))
def test_wd_triangle_inequality_on_one_hots(indices):
    i, j, k = indices
    ab = float(wasserstein_distance(one_hot_hist(i), one_hot_hist(j)))
    bc = float(wasserstein_distance(one_hot_hist(j), one_hot_hist(k)))
    ac = float(wasserstein_distance(one_hot_hist(i), one_hot_hist(k)))
    assert ac <= ab + bc + 1e-12


def test_wd_rejects_mismatched_configs():
    a = soft_histogram(torch.rand(2, 2, 2), k=10)
    b = soft_histogram(torch.rand(2, 2, 2), k=12)
    with pytest.raises(HistogramMismatchError):
        wasserstein_distance(a, b)


def test_mean_std_constant():
    mu, sigma = volume_mean_std(torch.full((3, 3, 3), 2.5, dtype=torch.float64))
    assert float(mu) == 2.5 and float(sigma) == 0.0


def test_mean_std_symmetric_pair():
    mu, sigma = volume_mean_std(torch.tensor([-1.0, 1.0] * 8, dtype=torch.float64))
    assert abs(float(mu)) < 1e-15 and abs(float(sigma) - 1.0) < 1e-15


def test_mean_std_matches_loop_oracle():
    v = torch.rand(3, 3, 3, dtype=torch.float64)
    mu, sigma = volume_mean_std(v)
    values = v.reshape(-1).tolist()
    mean = sum(values) / len(values)
    var = sum((x - mean) ** 2 for x in values) / len(values)
    assert abs(float(mu) - mean) < 1e-12
    assert abs(float(sigma) - math.sqrt(var)) < 1e-12


def _summary_from_scalars(mu, k=10):
    bins = torch.zeros(k, dtype=torch.float64)
    bins[0] = 1.0
    hist = SoftHistogram(bins=bins, v_min=-1.0, v_max=1.0, bandwidth=default_bandwidth(k, -1, 1))
    return StyleSummary(
        histogram=hist,
        mu=torch.tensor(mu, dtype=torch.float64),
        sigma=torch.tensor(0.0, dtype=torch.float64),
    )


def test_ema_update_trivial_case():
    rec = EmaStyleRecord(sequences=(1,), gamma=0.8, tau=100, k=10)
    rec.update(1, _summary_from_scalars(0.5), t=50)
    ema_update(rec, 1, _summary_from_scalars(1.0), t=50)
    mu, _ = rec.view(1)
    assert abs(mu - 0.6) < 1e-12


def test_ema_gate_blocks_update():
    rec = EmaStyleRecord(sequences=(1,), gamma=0.8, tau=100, k=10)
    rec.update(1, _summary_from_scalars(0.5), t=50)
    before = rec.state_dict()
    rec.update(1, _summary_from_scalars(9.0), t=500)
    assert rec.state_dict() == before


def test_ema_sequence_from_uninitialized():
    rec = EmaStyleRecord(sequences=(1,), gamma=0.8, tau=100, k=10)
    expected = [1.0, 0.8, 0.84]
    for value, want in zip([1.0, 0.0, 1.0], expected):
        rec.update(1, _summary_from_scalars(value), t=10)
        assert abs(rec.view(1)[0] - want) < 1e-12


@given(st.lists(st.tuples(st.floats(-1, 1), st.integers(0, 400)), max_size=12))
def test_ema_gating_subsequence_property(stream):
    full = EmaStyleRecord(sequences=(1,), gamma=0.8, tau=100, k=10)
    gated_only = EmaStyleRecord(sequences=(1,), gamma=0.8, tau=100, k=10)
    for value, t in stream:
        full.update(1, _summary_from_scalars(value), t)
        if t <= 100:
            gated_only.update(1, _summary_from_scalars(value), t)
    assert full.state_dict() == gated_only.state_dict()


def test_ema_histogram_stays_normalized():
    rec = EmaStyleRecord(sequences=(1,), k=100)
    torch.manual_seed(2)
    for i in range(4):
        rec.update(1, style_summary(torch.rand(4, 4, 4) * 2 - 1), t=10)
        assert abs(float(rec.histogram(1).sum()) - 1.0) < 1e-6


def test_consistency_loss_zero_when_equal():
    rec = EmaStyleRecord(sequences=(1,), k=16)
    s = style_summary(torch.rand(3, 3, 3, dtype=torch.float64) * 2 - 1, k=16)
    rec.update(1, s, t=5)
    assert float(ema_consistency_loss(rec, 1, s)) < 1e-12


def test_consistency_loss_squared_mean_term():
    rec = EmaStyleRecord(sequences=(1,), gamma=0.8, tau=100, k=10)
    rec.update(1, _summary_from_scalars(0.0), t=5)
    loss = rec.consistency_loss(1, _summary_from_scalars(0.3))
    assert abs(float(loss) - 0.09) < 1e-12


def test_consistency_loss_matches_recomposition():
    rec = EmaStyleRecord(sequences=(1,), k=16)
    torch.manual_seed(3)
    rec.update(1, style_summary(torch.rand(4, 4, 4, dtype=torch.float64) * 2 - 1, k=16), t=5)
    s = style_summary(torch.rand(4, 4, 4, dtype=torch.float64) * 2 - 1, k=16)
    loss = float(rec.consistency_loss(1, s))
    wd = float(histogram_wd(rec.histogram(1), s.histogram.bins))
    mu_rec, sigma_rec = rec.view(1)
    manual = wd + (mu_rec - float(s.mu)) ** 2 + (sigma_rec - float(s.sigma)) ** 2
    assert abs(loss - manual) < 1e-12


def test_consistency_loss_requires_initialized_record():
    rec = EmaStyleRecord(sequences=(1, 2), k=16)
    rec.update(1, style_summary(torch.rand(2, 2, 2), k=16), t=5)
    with pytest.raises(RecordNotInitializedError):
        rec.consistency_loss(2, style_summary(torch.rand(2, 2, 2), k=16))
    with pytest.raises(KeyError):
        rec.update(7, style_summary(torch.rand(2, 2, 2), k=16), t=5)


def test_consistency_loss_gradient_matches_finite_differences():
    rec = EmaStyleRecord(sequences=(1,), k=12)
    torch.manual_seed(4)
    rec.update(1, style_summary(torch.rand(4, 4, 4, dtype=torch.float64) * 2 - 1, k=12), t=5)
    x = (torch.rand(4, 4, 4, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    loss = rec.consistency_loss(1, style_summary(x, k=12))
    (analytic,) = torch.autograd.grad(loss, x)
    step = 1e-4
    fd = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.clone()
            pert[i] += sign * step
            vals.append(float(rec.consistency_loss(1, style_summary(pert.reshape(4, 4, 4), k=12))))
        fd.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * step)
    rel = (analytic - fd).abs().max() / analytic.abs().max()
    assert rel < 1e-3


def test_record_serialization_roundtrip():
    rec = EmaStyleRecord(sequences=(1, 2), k=16)
    torch.manual_seed(5)
    rec.update(1, style_summary(torch.rand(3, 3, 3) * 2 - 1, k=16), t=5)
    back = EmaStyleRecord.from_state_dict(rec.state_dict())
    assert back.state_dict() == rec.state_dict()
    assert back.initialized(1) and not back.initialized(2)
