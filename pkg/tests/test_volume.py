import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxharm.volume import (
    HEADER_SIZE,
    BadMagicError,
    DatasetManifest,
    DegenerateRangeError,
    ManifestEntry,
    ManifestError,
    NonFiniteVolumeError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    Volume,
    load_manifest,
    read_volume,
    rescale_intensity,
    save_manifest,
    write_volume,
)


def test_roundtrip_zeros(tmp_path):
    v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    path = tmp_path / "z.mmhv"
    write_volume(v, path)
    back = read_volume(path)
    assert np.array_equal(back.data, v.data)


def test_file_size_is_header_plus_payload(tmp_path):
    path = tmp_path / "z.mmhv"
    write_volume(Volume(np.zeros((4, 4, 4), dtype=np.float32)), path)
    assert path.stat().st_size == HEADER_SIZE + 64 * 4


def test_roundtrip_random_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    v = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))
    path = tmp_path / "r.mmhv"
    write_volume(v, path)
    assert np.abs(read_volume(path).data - v.data).max() == 0
    # byte-level identity on rewrite
    first = path.read_bytes()
    write_volume(read_volume(path), path)
    assert path.read_bytes() == first


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.mmhv"
    header = b"MMHV" + bytes([1, 1, 0, 0]) + struct.pack("<III", 2, 2, 2)
    path.write_bytes(header + b"\x00" * (7 * 4))  # 7 floats, header says 8
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 100)
    with pytest.raises(BadMagicError):
        read_volume(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "v.mmhv"
    path.write_bytes(b"MMHV" + bytes([9, 1, 0, 0]) + struct.pack("<III", 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(UnsupportedVersionError):
        read_volume(path)


def test_nonfinite_payload_rejected(tmp_path):
    path = tmp_path / "n.mmhv"
    payload = np.array([np.nan], dtype="<f4").tobytes()
    path.write_bytes(b"MMHV" + bytes([1, 1, 0, 0]) + struct.pack("<III", 1, 1, 1) + payload)
    with pytest.raises(NonFiniteVolumeError):
        read_volume(path)


def test_nonfinite_write_rejected(tmp_path):
    with pytest.raises(NonFiniteVolumeError):
        Volume(np.full((2, 2, 2), np.nan, dtype=np.float32))


def test_rescale_endpoints():
    v = np.array([0.0, 5.0, 10.0]).reshape(1, 1, 3)
    out = rescale_intensity(v, -1.0, 1.0)
    assert np.allclose(out, [[[-1.0, 0.0, 1.0]]])


def test_rescale_identity_when_already_spanning():
    v = np.array([-1.0, 0.25, 1.0]).reshape(1, 3, 1)
    out = rescale_intensity(v, -1.0, 1.0)
    assert np.allclose(out, v)


def test_rescale_hand_computed():
    v = np.array([2.0, 3.0, 4.0, 6.0]).reshape(1, 1, 4)
    out = rescale_intensity(v, -1.0, 1.0)
    assert np.allclose(out, [[[-1.0, -0.5, 0.0, 1.0]]])


def test_rescale_constant_raises():
    with pytest.raises(DegenerateRangeError):
        rescale_intensity(np.ones((2, 2, 2)), -1.0, 1.0)


@given(
    st.lists(st.floats(min_value=-100, max_value=100), min_size=2, max_size=16).filter(
        lambda xs: max(xs) > min(xs)
    )
)
def test_rescale_idempotent_property(values):
    v = np.array(values, dtype=np.float64).reshape(1, 1, -1)
    once = rescale_intensity(v, -1.0, 1.0)
    twice = rescale_intensity(once, -1.0, 1.0)
    assert np.allclose(once, twice, atol=1e-12)
    assert once.min() == -1.0 and once.max() == 1.0


def test_manifest_roundtrip(tmp_path):
    entries = [
        ManifestEntry("a.mmhv", 1, 1, 1, "train"),
        ManifestEntry("b.mmhv", 2, 1, 1, "train"),
    ]
    for e in entries:
        write_volume(Volume(np.zeros((4, 4, 4), dtype=np.float32)), tmp_path / e.path)
    save_manifest(DatasetManifest(entries, base_dir=tmp_path), tmp_path / "manifest.tsv")
    back = load_manifest(tmp_path / "manifest.tsv")
    assert back.entries == entries
    assert back.sequences == [1, 2]


def test_manifest_rejects_duplicate_triple():
    entries = [
        ManifestEntry("a.mmhv", 1, 1, 1, "train"),
        ManifestEntry("b.mmhv", 1, 1, 1, "train"),
    ]
    with pytest.raises(ManifestError):
        DatasetManifest(entries)


def test_manifest_allows_same_triple_across_splits():
    entries = [
        ManifestEntry("a.mmhv", 1, 1, 1, "train"),
        ManifestEntry("b.mmhv", 1, 1, 1, "val"),
    ]
    DatasetManifest(entries)


def test_manifest_missing_file(tmp_path):
    save_manifest(
        DatasetManifest([ManifestEntry("gone.mmhv", 1, 1, 1, "train")], base_dir=tmp_path),
        tmp_path / "manifest.tsv",
    )
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "manifest.tsv")
