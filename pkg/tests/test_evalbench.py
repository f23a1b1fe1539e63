import numpy as np
import pytest

from voxharm.evalbench import (
    ConstantVolumeError,
    MetricError,
    ProbeReport,
    centroid_analysis,
    feature_extract,
    intensity_wd,
    paired_site_metrics,
    pcc,
    psnr,
    site_probe,
    ssim,
)


def brute_force_ssim(a, b, window=7, data_range=2.0):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w, d = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            for k in range(d - window + 1):
                wa = a[i : i + window, j : j + window, k : k + window]
                wb = b[i : i + window, j : j + window, k : k + window]
                mua, mub = wa.mean(), wb.mean()
                va, vb = wa.var(), wb.var()
                cov = ((wa - mua) * (wb - mub)).mean()
                vals.append(
                    ((2 * mua * mub + c1) * (2 * cov + c2))
                    / ((mua**2 + mub**2 + c1) * (va + vb + c2))
                )
    return float(np.mean(vals))


def test_ssim_self_is_one():
    a = np.random.default_rng(0).uniform(-1, 1, (9, 9, 9))
    assert abs(ssim(a, a) - 1.0) < 1e-12


def test_ssim_negated_zero_mean_not_positive():
    a = np.random.default_rng(1).uniform(-1, 1, (9, 9, 9))
    a -= a.mean()
    assert ssim(a, -a) <= 0.0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.uniform(-1, 1, (9, 9, 9))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), -1, 1)
    assert abs(ssim(a, b) - brute_force_ssim(a, b)) < 1e-6


def test_ssim_rejects_small_volume():
    with pytest.raises(MetricError):
        ssim(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))


def test_psnr_cap_and_closed_form():
    a = np.random.default_rng(3).uniform(-0.8, 0.8, (6, 6, 6))
    assert psnr(a, a) == 99.0
    b = a + 0.1
    assert abs(psnr(a, b) - 10 * np.log10(4.0 / 0.01)) < 1e-9


def test_pcc_cases():
    a = np.random.default_rng(4).uniform(-1, 1, (5, 5, 5))
    assert abs(pcc(a, a) - 1.0) < 1e-12
    assert abs(pcc(a, -a) + 1.0) < 1e-12
    with pytest.raises(ConstantVolumeError):
        pcc(a, np.zeros_like(a))


def test_pcc_matches_loop_oracle():
    rng = np.random.default_rng(5)
    a = rng.uniform(-1, 1, (4, 4, 4))
    b = rng.uniform(-1, 1, (4, 4, 4))
    fa, fb = a.ravel(), b.ravel()
    da, db = fa - fa.mean(), fb - fb.mean()
    manual = (da * db).sum() / np.sqrt((da**2).sum() * (db**2).sum())
    assert abs(pcc(a, b) - manual) < 1e-9


def test_intensity_wd_matches_loop_oracle():
    rng = np.random.default_rng(6)
    a = rng.uniform(-1, 1, (4, 4, 4))
    b = rng.uniform(-1, 1, (4, 4, 4))
    bins = 100
    ha, _ = np.histogram(a, bins=bins, range=(-1, 1))
    hb, _ = np.histogram(b, bins=bins, range=(-1, 1))
    ca = np.cumsum(ha / ha.sum())
    cb = np.cumsum(hb / hb.sum())
    manual = float(np.abs(ca - cb).mean())
    assert abs(intensity_wd(a, b) - manual) < 1e-12
    assert intensity_wd(a, a) == 0.0


def test_feature_extract_deterministic_and_seed_sensitive():
    v = np.random.default_rng(7).uniform(-1, 1, (32, 32, 32)).astype(np.float32)
    f1 = feature_extract(v, seed=17)
    f2 = feature_extract(v, seed=17)
    f3 = feature_extract(v, seed=18)
    assert np.array_equal(f1, f2)
    assert np.abs(f1 - f3).max() > 0


def test_feature_extract_translation_stability(cohort):
    _, manifest = cohort
    v = manifest.load(manifest.entries[0]).volume.data
    f = feature_extract(v, seed=17)
    f_shift = feature_extract(np.roll(v, 1, axis=0), seed=17)
    rel = np.linalg.norm(f - f_shift) / np.linalg.norm(f)
    assert rel < 0.2


def test_centroid_analysis_trivial_cases():
    feats = np.zeros((6, 4))
    report = centroid_analysis(feats, [1, 1, 2, 2, 3, 3])
    assert report.inter_site == 0.0 and report.intra_site == 0.0


def test_centroid_analysis_three_four_five():
    feats = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    report = centroid_analysis(feats, [1, 1, 2, 2])
    assert abs(report.inter_site - 5.0) < 1e-12
    assert report.intra_site == 0.0


def test_centroid_analysis_matches_loop_oracle():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(12, 3))
    labels = [1, 2, 3] * 4
    report = centroid_analysis(feats, labels)
    cents = {s: feats[[i for i, l in enumerate(labels) if l == s]].mean(axis=0) for s in (1, 2, 3)}
    inter = np.mean(
        [
            np.linalg.norm(cents[1] - cents[2]),
            np.linalg.norm(cents[1] - cents[3]),
            np.linalg.norm(cents[2] - cents[3]),
        ]
    )
    intra = np.mean([np.linalg.norm(f - cents[l]) for f, l in zip(feats, labels)])
    assert abs(report.inter_site - inter) < 1e-9
    assert abs(report.intra_site - intra) < 1e-9


def test_site_probe_perfectly_separable():
    labels = [1, 2, 3] * 8
    feats = np.eye(3)[[l - 1 for l in labels]]
    report = site_probe(feats, labels, split_seed=0)
    assert report.balanced_accuracy == 1.0
    assert report.f1 == 1.0


def test_site_probe_chance_on_uninformative_features():
    rng = np.random.default_rng(9)
    labels = list(np.repeat([1, 2, 3, 4], 12))
    feats = rng.normal(size=(len(labels), 6)) * 1e-9
    report = site_probe(feats, labels, split_seed=0)
    assert abs(report.balanced_accuracy - 0.25) <= 0.15


def test_site_probe_matches_sklearn_confusion_metrics():
    sklearn = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(10)
    labels = list(np.repeat([1, 2, 3], 10))
    feats = np.eye(3)[[l - 1 for l in labels]] + rng.normal(0, 0.8, (30, 3))
    report = site_probe(feats, labels, split_seed=1)

    # reproduce the split and predictions independently via the same probe
    # internals are deterministic, so rebuild predictions through sklearn metrics
    from voxharm.evalbench import _softmax_regression

    y = np.array([l - 1 for l in labels])
    rng2 = np.random.Generator(np.random.PCG64(np.random.SeedSequence([1])))
    train_idx, test_idx = [], []
    for c in range(3):
        idx = np.flatnonzero(y == c)
        idx = idx[rng2.permutation(len(idx))]
        n_train = int(np.clip(round(0.7 * len(idx)), 1, len(idx) - 1))
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    mean = feats[train_idx].mean(axis=0)
    std = feats[train_idx].std(axis=0)
    std[std == 0] = 1
    xt = (feats[train_idx] - mean) / std
    xv = (feats[test_idx] - mean) / std
    w = _softmax_regression(xt, y[train_idx], 3, 0.5, 300)
    pred = (np.hstack([xv, np.ones((len(xv), 1))]) @ w).argmax(axis=1)
    truth = y[test_idx]

    assert abs(report.balanced_accuracy - sklearn.balanced_accuracy_score(truth, pred)) < 1e-9
    assert abs(report.f1 - sklearn.f1_score(truth, pred, average="macro")) < 1e-9
    assert (
        abs(report.precision - sklearn.precision_score(truth, pred, average="macro", zero_division=0))
        < 1e-9
    )
    assert abs(report.recall - sklearn.recall_score(truth, pred, average="macro")) < 1e-9


def test_site_probe_rejects_singleton_site():
    feats = np.zeros((3, 2))
    with pytest.raises(MetricError):
        site_probe(feats, [1, 1, 2], split_seed=0)


def test_paired_site_metrics_requires_pairs():
    with pytest.raises(MetricError):
        paired_site_metrics({(1, 1, 1): np.zeros((8, 8, 8))})


def test_paired_site_metrics_identical_volumes():
    v = np.random.default_rng(11).uniform(-1, 1, (8, 8, 8))
    volumes = {(1, 1, 1): v, (1, 2, 1): v.copy()}
    wd, s = paired_site_metrics(volumes)
    assert wd == 0.0
    assert abs(s - 1.0) < 1e-12
