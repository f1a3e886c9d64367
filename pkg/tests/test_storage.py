import gzip
import json
import struct

import numpy as np
import pytest

from maskguide.storage import (
    CorruptFileError, load_dataset, load_manifest, read_nifti, read_volume, save_dataset, write_phantom_set, write_volume,
)
from maskguide.volumes import PhantomParams, generate_phantoms


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int16])
def test_volume_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    arr = (rng.random((5, 4, 3)) * 100).astype(dtype)
    write_volume(tmp_path / "v.vol", arr, spacing=(0.5, 1.0, 2.5))
    back = read_volume(tmp_path / "v.vol")
    assert back.voxels.dtype == arr.dtype
    np.testing.assert_array_equal(back.voxels, arr)
    assert back.spacing == (0.5, 1.0, 2.5)


def test_volume_header_is_little_endian(tmp_path):
    write_volume(tmp_path / "v.vol", np.zeros((2, 3, 4), np.float32))
    data = (tmp_path / "v.vol").read_bytes()
    assert data[:5] == b"MGVOL"
    assert struct.unpack_from("<3I", data, 8) == (2, 3, 4)


def test_truncated_and_bad_magic(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(p, np.ones((3, 3, 3), np.float32))
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(CorruptFileError):
        read_volume(p)
    p.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CorruptFileError):
        read_volume(p)


def nifti_bytes(arr, pixdim=(1.0, 1.0, 1.0), endian="<", slope=0.0, inter=0.0):
    """Minimal single-file NIfTI-1, written field by field from the format layout."""
    codes = {np.dtype(np.int16): (4, 16), np.dtype(np.float32): (16, 32), np.dtype(np.uint8): (2, 8)}
    code, bitpix = codes[arr.dtype]
    hdr = bytearray(352)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into(endian + "2h", hdr, 70, code, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\x00"
    body = arr.astype(arr.dtype.newbyteorder(endian)).tobytes(order="F")
    return bytes(hdr) + body


@pytest.mark.parametrize("endian", ["<", ">"])
def test_nifti_import(tmp_path, endian):
    arr = np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 1000
    p = tmp_path / "ct.nii"
    p.write_bytes(nifti_bytes(arr, (0.7, 0.7, 2.0), endian))
    vol = read_nifti(p)
    np.testing.assert_array_equal(vol.voxels, arr)
    np.testing.assert_allclose(vol.spacing, (0.7, 0.7, 2.0), rtol=1e-6)


def test_nifti_gz_and_scaling(tmp_path):
    arr = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    p = tmp_path / "ct.nii.gz"
    p.write_bytes(gzip.compress(nifti_bytes(arr, slope=2.0, inter=-1024.0)))
    np.testing.assert_array_equal(read_nifti(p).voxels, arr * 2.0 - 1024.0)


def test_nifti_rejects_garbage(tmp_path):
    p = tmp_path / "x.nii"
    p.write_bytes(b"\x00" * 400)
    with pytest.raises(CorruptFileError):
        read_nifti(p)


def test_dataset_round_trip(tmp_path):
    cases = generate_phantoms(4, 0.5, grid=(16, 16, 8), rng_seed=1)
    save_dataset(tmp_path, cases, {"kind": "test"})
    back = load_dataset(tmp_path)
    for a, b in zip(cases, back):
        assert a.id == b.id and a.label == b.label
        np.testing.assert_array_equal(a.volume, b.volume)
        for ma, mb in zip(a.masks, b.masks):
            assert (ma.view_index, ma.name) == (mb.view_index, mb.name)
            np.testing.assert_array_equal(ma.voxels, mb.voxels)
    assert load_manifest(tmp_path)["kind"] == "test"


def test_phantom_set_manifest_deterministic(tmp_path):
    a = write_phantom_set(tmp_path / "a", 10, 0.3, (16, 16, 8), 7, PhantomParams())
    b = write_phantom_set(tmp_path / "b", 10, 0.3, (16, 16, 8), 7, PhantomParams())
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    m = json.loads((a / "manifest.json").read_text())
    assert m["n_positive"] == 3 == sum(c["label"] for c in m["cases"])


def test_missing_manifest(tmp_path):
    with pytest.raises(CorruptFileError):
        load_manifest(tmp_path)
