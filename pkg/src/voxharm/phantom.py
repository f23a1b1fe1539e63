"""Synthetic traveling-subject phantom cohorts.

Every subject is a jittered arrangement of ellipsoids over four tissue labels;
every (site, sequence) pair carries its own acquisition style (intensity
shift, contrast gamma, smooth multiplicative bias field, additive noise)
applied to the shared anatomy.  All randomness flows from integer seeds through
``np.random.SeedSequence`` so regeneration is byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import (
    DatasetManifest,
    ManifestEntry,
    Volume,
    VolumeRecord,
    save_manifest,
    write_volume,
)

BACKGROUND, TISSUE_A, TISSUE_B, TISSUE_C = 0, 1, 2, 3

# Base tissue intensity per sequence, permuted between sequences so contrast
# inverts the way T1w/T2w contrast does.  Values live in [0, 1] before style.
SEQUENCE_TISSUE_TABLES: dict[int, dict[int, float]] = {
    1: {BACKGROUND: 0.05, TISSUE_A: 0.45, TISSUE_B: 0.75, TISSUE_C: 0.95},
    2: {BACKGROUND: 0.05, TISSUE_A: 0.95, TISSUE_B: 0.45, TISSUE_C: 0.75},
}

# Fixed affine from styled intensities to the [-1, 1] output range.  A fixed
# map (rather than per-volume min-max) keeps site shifts visible in the output.
_OUT_CENTER = 0.55
_OUT_SCALE = 1.3


class PhantomError(Exception):
    pass


class UnknownSequenceError(PhantomError):
    pass


@dataclass
class SubjectAnatomy:
    """Tissue label field shared by all of a subject's renders."""

    labels: np.ndarray  # int8, values in {0..3}
    subject_seed: int

    def background_fraction(self) -> float:
        return float((self.labels == BACKGROUND).mean())


@dataclass(frozen=True)
class SiteStyle:
    """Per-(site, sequence) acquisition style parameters."""

    shift: float
    gamma: float
    bias_amplitude: float
    bias_scale: float  # smoothness scale in voxels
    noise_std: float
    site_seed: int

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise PhantomError(f"gamma must be positive, got {self.gamma}")
        if self.noise_std < 0 or self.bias_amplitude < 0:
            raise PhantomError("noise std and bias amplitude must be non-negative")


IDENTITY_STYLE = SiteStyle(
    shift=0.0, gamma=1.0, bias_amplitude=0.0, bias_scale=16.0, noise_std=0.0, site_seed=0
)


@dataclass
class PhantomSpec:
    """Cohort layout: counts, dims, seed, output location, subject splits."""

    subjects: int = 5
    sites: int = 6
    sequences: int = 2
    dims: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    out_dir: Path = field(default_factory=lambda: Path("data"))
    train_subjects: tuple[int, ...] = (1, 2, 3)
    val_subjects: tuple[int, ...] = (4,)
    test_subjects: tuple[int, ...] = (5,)
    target_site: int = 1  # rendered with minimal intra-site variability

    def __post_init__(self) -> None:
        self.out_dir = Path(self.out_dir)
        groups = (set(self.train_subjects), set(self.val_subjects), set(self.test_subjects))
        for i in range(3):
            for j in range(i + 1, 3):
                if groups[i] & groups[j]:
                    raise PhantomError("splits must be subject-disjoint")
        assigned = groups[0] | groups[1] | groups[2]
        if assigned != set(range(1, self.subjects + 1)):
            raise PhantomError(
                f"split assignment {sorted(assigned)} must cover subjects 1..{self.subjects}"
            )

    def split_of(self, subject: int) -> str:
        if subject in self.train_subjects:
            return "train"
        if subject in self.val_subjects:
            return "val"
        return "test"


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sample_subject(seed: int, dims: tuple[int, int, int] = (32, 32, 32)) -> SubjectAnatomy:
    """Deterministic anatomy for one subject: head ellipsoid, core, and blobs."""
    rng = _rng(seed, 101)
    h, w, d = dims
    grid = np.stack(
        np.meshgrid(
            np.arange(h, dtype=np.float64),
            np.arange(w, dtype=np.float64),
            np.arange(d, dtype=np.float64),
            indexing="ij",
        )
    )
    center = np.array([h, w, d], dtype=np.float64) / 2.0
    labels = np.zeros(dims, dtype=np.int8)

    def ellipsoid_mask(c, radii):
        norm = sum(((grid[a] - c[a]) / radii[a]) ** 2 for a in range(3))
        return norm <= 1.0

    # Outer head: radii jittered +-6% around (0.42, 0.38, 0.40) of each dim,
    # which keeps the background fraction inside [0.2, 0.8].
    base_frac = np.array([0.42, 0.38, 0.40])
    radii = base_frac * np.array(dims) * (1.0 + rng.uniform(-0.06, 0.06, size=3))
    head_center = center + rng.uniform(-1.5, 1.5, size=3)
    labels[ellipsoid_mask(head_center, radii)] = TISSUE_A

    # Inner core (tissue B), off-center within the head.
    core_radii = radii * rng.uniform(0.38, 0.5, size=3)
    core_center = head_center + rng.uniform(-2.0, 2.0, size=3)
    labels[ellipsoid_mask(core_center, core_radii)] = TISSUE_B

    # A few small blobs (tissue C) placed inside the head.
    for _ in range(3):
        blob_radii = radii * rng.uniform(0.10, 0.18, size=3)
        offset = rng.uniform(-0.45, 0.45, size=3) * radii
        labels[ellipsoid_mask(head_center + offset, blob_radii)] = TISSUE_C

    anatomy = SubjectAnatomy(labels=labels, subject_seed=seed)
    frac = anatomy.background_fraction()
    if not 0.2 <= frac <= 0.8:
        raise PhantomError(f"background fraction {frac:.3f} outside [0.2, 0.8]")
    return anatomy


def _bias_field(dims: tuple[int, int, int], scale: float, rng: np.random.Generator) -> np.ndarray:
    """Sum of 3 low-frequency separable cosines, normalized to [-1, 1]."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    total = np.zeros(dims, dtype=np.float64)
    for _ in range(3):
        term = np.ones((1, 1, 1), dtype=np.float64)
        for a, coords in enumerate(axes):
            freq = rng.uniform(0.5, 1.0) / scale
            phase = rng.uniform(0, 2 * np.pi)
            shape = [1, 1, 1]
            shape[a] = dims[a]
            term = term * np.cos(2 * np.pi * freq * coords + phase).reshape(shape)
        total += term
    return total / 3.0


def sample_site_style(
    site: int,
    sequence: int,
    n_sites: int,
    cohort_seed: int,
    target_site: int | None = None,
) -> SiteStyle:
    """Style for one (site, sequence) pair.

    Shifts and gammas are spread deterministically across the site range (a
    permuted grid, jittered by the site seed) so inter-site differences are
    guaranteed rather than left to i.i.d. luck.  The designated target site
    gets a neutral style with cohort-minimum noise and bias so it has the
    lowest intra-site variability.
    """
    site_seed = int(_rng(cohort_seed, 211, site, sequence).integers(0, 2**31))
    if target_site is not None and site == target_site:
        return SiteStyle(
            shift=0.0,
            gamma=1.0,
            bias_amplitude=0.02,
            bias_scale=20.0,
            noise_std=0.002,
            site_seed=site_seed,
        )
    rng = _rng(site_seed)
    others = [s for s in range(1, n_sites + 1) if target_site is None or s != target_site]
    rank = others.index(site)
    n = max(len(others), 1)
    shift_grid = np.linspace(-0.18, 0.18, n)
    gamma_grid = np.exp(np.linspace(np.log(0.88), np.log(1.13), n))
    perm_shift = _rng(cohort_seed, 223, sequence).permutation(n)
    perm_gamma = _rng(cohort_seed, 227, sequence).permutation(n)
    return SiteStyle(
        shift=float(shift_grid[perm_shift[rank]] + rng.uniform(-0.01, 0.01)),
        gamma=float(gamma_grid[perm_gamma[rank]] * np.exp(rng.uniform(-0.02, 0.02))),
        bias_amplitude=float(rng.uniform(0.03, 0.08)),
        bias_scale=float(rng.uniform(12.0, 24.0)),
        noise_std=float(rng.uniform(0.003, 0.008)),
        site_seed=site_seed,
    )


def render_volume(
    anatomy: SubjectAnatomy,
    sequence: int,
    style: SiteStyle,
    noise_seed: int,
    site: int = 0,
    subject: int = 0,
) -> VolumeRecord:
    """Render one styled volume over shared anatomy; output lies in [-1, 1].

    Style application order: tissue table lookup, gamma contrast, multiplicative
    bias field, global shift, additive noise, then the fixed affine to [-1, 1].
    """
    if sequence not in SEQUENCE_TISSUE_TABLES:
        raise UnknownSequenceError(f"no tissue-intensity table for sequence {sequence}")
    table = SEQUENCE_TISSUE_TABLES[sequence]
    lut = np.zeros(max(table) + 1, dtype=np.float64)
    for label, value in table.items():
        lut[label] = value
    u = lut[anatomy.labels]
    u = np.power(u, style.gamma)
    if style.bias_amplitude > 0:
        field_rng = _rng(style.site_seed, 301)
        u = u * (1.0 + style.bias_amplitude * _bias_field(u.shape, style.bias_scale, field_rng))
    u = u + style.shift
    if style.noise_std > 0:
        u = u + _rng(noise_seed, 303).normal(0.0, style.noise_std, size=u.shape)
    out = np.clip((u - _OUT_CENTER) * _OUT_SCALE, -1.0, 1.0)
    return VolumeRecord(
        volume=Volume(out.astype(np.float32)), sequence=sequence, site=site, subject=subject
    )


def entry_noise_seed(spec_seed: int, subject: int, site: int, sequence: int) -> int:
    return int(_rng(spec_seed, 401, subject, site, sequence).integers(0, 2**31))


def generate_dataset(spec: PhantomSpec) -> DatasetManifest:
    """Write the full subjects x sites x sequences cohort plus its manifest."""
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    styles = {
        (c, m): sample_site_style(c, m, spec.sites, spec.seed, spec.target_site)
        for c in range(1, spec.sites + 1)
        for m in range(1, spec.sequences + 1)
    }
    entries = []
    for subject in range(1, spec.subjects + 1):
        anatomy = sample_subject(
            int(_rng(spec.seed, 97, subject).integers(0, 2**31)), spec.dims
        )
        for site in range(1, spec.sites + 1):
            for sequence in range(1, spec.sequences + 1):
                rec = render_volume(
                    anatomy,
                    sequence,
                    styles[(site, sequence)],
                    entry_noise_seed(spec.seed, subject, site, sequence),
                    site=site,
                    subject=subject,
                )
                name = f"sub{subject:02d}_site{site:02d}_seq{sequence}.mmhv"
                write_volume(rec.volume, spec.out_dir / name)
                entries.append(
                    ManifestEntry(
                        path=name,
                        sequence=sequence,
                        site=site,
                        subject=subject,
                        split=spec.split_of(subject),
                    )
                )
    manifest = DatasetManifest(entries=entries, base_dir=spec.out_dir)
    save_manifest(manifest, spec.out_dir / "manifest.tsv")
    return manifest
