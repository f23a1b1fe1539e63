"""Labeled 3D volumes, their bit-exact file format, and dataset manifests.

Volume file layout (all integers little-endian):

    bytes 0-3    magic ``MMHV``
    byte  4      format version, 0x01
    byte  5      dtype code, 0x01 = float32 LE
    bytes 6-7    reserved, zero
    bytes 8-19   dims H, W, D as three uint32
    payload      H*W*D float32, H-major then W then D (C order)

Manifest files are tab-separated text with the header line
``path\tsequence\tsite\tsubject\tsplit`` and one entry per line; paths are
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMHV"
FORMAT_VERSION = 0x01
DTYPE_FLOAT32 = 0x01
HEADER_SIZE = 20

MANIFEST_COLUMNS = ("path", "sequence", "site", "subject", "split")


class VolumeError(Exception):
    """Base class for volume I/O and value errors."""


class BadMagicError(VolumeError):
    pass


class UnsupportedVersionError(VolumeError):
    pass


class UnsupportedDtypeError(VolumeError):
    pass


class TruncatedPayloadError(VolumeError):
    pass


class NonFiniteVolumeError(VolumeError):
    pass


class DegenerateRangeError(VolumeError):
    pass


class ManifestError(Exception):
    """Malformed or inconsistent dataset manifest."""


@dataclass
class Volume:
    """A 3D block of normalized intensities, float32, all values finite."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteVolumeError("volume contains non-finite values")
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class VolumeRecord:
    """A volume tagged with its acquisition sequence, site, and subject."""

    volume: Volume
    sequence: int
    site: int
    subject: int


def read_volume(path: str | Path) -> Volume:
    """Read a volume file, validating magic, version, dtype, and payload size."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a volume file (bad magic)")
    version, dtype_code = raw[4], raw[5]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if dtype_code != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"{path}: dtype code {dtype_code}, expected {DTYPE_FLOAT32}")
    h, w, d = struct.unpack("<III", raw[8:20])
    expected = h * w * d * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    if not np.isfinite(data).all():
        raise NonFiniteVolumeError(f"{path}: payload contains non-finite values")
    return Volume(data.copy())


def write_volume(volume: Volume, path: str | Path) -> None:
    """Write a volume in the bit-exact format; round-trips through read_volume."""
    arr = np.ascontiguousarray(volume.data, dtype="<f4")
    if not np.isfinite(arr).all():
        raise NonFiniteVolumeError("refusing to write non-finite volume")
    h, w, d = arr.shape
    header = MAGIC + bytes([FORMAT_VERSION, DTYPE_FLOAT32, 0, 0]) + struct.pack("<III", h, w, d)
    Path(path).write_bytes(header + arr.tobytes())


def rescale_intensity(volume: Volume | np.ndarray, lo: float, hi: float) -> Volume | np.ndarray:
    """Affinely map the input's [min, max] onto exactly [lo, hi].

    Accepts a Volume or a bare array and returns the same kind.  Constant
    inputs have no well-defined affine map and raise DegenerateRangeError.
    """
    if lo >= hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    arr = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax <= vmin:
        raise DegenerateRangeError("constant volume has no intensity range to rescale")
    # lerp form is exact at both extremes (u is exactly 0 or 1 there)
    u = (arr - vmin) / (vmax - vmin)
    out = lo * (1.0 - u) + hi * u
    if isinstance(volume, Volume):
        return Volume(out.astype(np.float32))
    return out.astype(arr.dtype, copy=False)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sequence: int
    site: int
    subject: int
    split: str


@dataclass
class DatasetManifest:
    """Entries plus the vocabularies they define; paths relative to base_dir."""

    entries: list[ManifestEntry]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        seen: set[tuple[str, int, int, int]] = set()
        for e in self.entries:
            key = (e.split, e.subject, e.site, e.sequence)
            if key in seen:
                raise ManifestError(
                    f"duplicate (subject={e.subject}, site={e.site}, sequence={e.sequence}) "
                    f"in split {e.split!r}"
                )
            seen.add(key)

    @property
    def sequences(self) -> list[int]:
        return sorted({e.sequence for e in self.entries})

    @property
    def sites(self) -> list[int]:
        return sorted({e.site for e in self.entries})

    @property
    def subjects(self) -> list[int]:
        return sorted({e.subject for e in self.entries})

    @property
    def splits(self) -> list[str]:
        return sorted({e.split for e in self.entries})

    def filter(
        self,
        split: str | None = None,
        sequence: int | None = None,
        site: int | None = None,
        subject: int | None = None,
    ) -> list[ManifestEntry]:
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if sequence is not None and e.sequence != sequence:
                continue
            if site is not None and e.site != site:
                continue
            if subject is not None and e.subject != subject:
                continue
            out.append(e)
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.base_dir / entry.path

    def load(self, entry: ManifestEntry) -> VolumeRecord:
        return VolumeRecord(
            volume=read_volume(self.resolve(entry)),
            sequence=entry.sequence,
            site=entry.site,
            subject=entry.subject,
        )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.sequence}\t{e.site}\t{e.subject}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest; with check_files, verify each volume exists and parses."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: missing or malformed header line")
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{ln}: expected 5 tab-separated fields")
        try:
            entries.append(
                ManifestEntry(
                    path=parts[0],
                    sequence=int(parts[1]),
                    site=int(parts[2]),
                    subject=int(parts[3]),
                    split=parts[4],
                )
            )
        except ValueError as exc:
            raise ManifestError(f"{path}:{ln}: {exc}") from exc
    manifest = DatasetManifest(entries=entries, base_dir=path.parent)
    if check_files:
        for e in entries:
            read_volume(manifest.resolve(e))
    return manifest
