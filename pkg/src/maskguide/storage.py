"""On-disk formats: chunked volume files, NIfTI-1 import, phantom-set directories.

Volume file layout (all little-endian)::

    magic      8 bytes   b"MGVOL\\x00\\x01\\x00"
    dims       3 x u32
    spacing    3 x f64
    dtype      8 bytes   numpy dtype string, NUL padded (e.g. b"<f4")
    n_chunks   u32
    chunks     n_chunks x (u32 byte length, payload)

Each chunk holds one slice along the last axis in C order.
"""
from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .volumes import LabeledVolume, PhantomParams, RawVolume, ViewMask, generate_phantoms

MAGIC = b"MGVOL\x00\x01\x00"
_HEADER = struct.Struct("<8s3I3d8sI")
MANIFEST = "manifest.json"


class CorruptFileError(InvalidInputError):
    pass


def write_volume(path, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    path = Path(path)
    arr = np.asarray(voxels)
    if arr.ndim != 3:
        raise InvalidInputError(f"expected a 3D array, got shape {arr.shape}")
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    dtype = arr.dtype.str.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *arr.shape, *map(float, spacing), dtype, arr.shape[2]))
        for k in range(arr.shape[2]):
            payload = np.ascontiguousarray(arr[:, :, k]).tobytes()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
    return path


def read_volume(path) -> RawVolume:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, h, w, d, sx, sy, sz, dtype, n_chunks = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    dt = np.dtype(dtype.rstrip(b"\x00").decode("ascii"))
    slice_bytes = h * w * dt.itemsize
    slices, offset = [], _HEADER.size
    for _ in range(n_chunks):
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if n != slice_bytes or offset + n > len(data):
            raise CorruptFileError(f"{path}: chunk size mismatch")
        slices.append(np.frombuffer(data, dtype=dt, count=h * w, offset=offset).reshape(h, w))
        offset += n
    if n_chunks != d:
        raise CorruptFileError(f"{path}: expected {d} chunks, found {n_chunks}")
    voxels = np.stack(slices, axis=2) if slices else np.zeros((h, w, 0), dt)
    return RawVolume(voxels.astype(dt.newbyteorder("="), copy=True), (sx, sy, sz), path.stem)


# --------------------------------------------------------------------------- NIfTI-1

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64,
    256: np.int8, 512: np.uint16, 768: np.uint32,
}


def read_nifti(path) -> RawVolume:
    """Read a single-file NIfTI-1 volume (``.nii`` or ``.nii.gz``).

    Only the voxel grid, spacing and intensity scaling are honoured; the
    orientation matrices are ignored.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise CorruptFileError(f"{path}: too short for a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == 348:
            break
    else:
        raise CorruptFileError(f"{path}: sizeof_hdr != 348")
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise CorruptFileError(f"{path}: missing NIfTI-1 magic")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)
    if datatype not in _NIFTI_DTYPES:
        raise CorruptFileError(f"{path}: unsupported NIfTI datatype {datatype}")
    if dim[0] < 3:
        raise CorruptFileError(f"{path}: expected at least 3 dimensions, got {dim[0]}")
    shape = tuple(int(n) for n in dim[1:4])
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(shape))
    voxels = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset).reshape(shape, order="F")
    voxels = voxels.astype(np.float64 if dt.kind == "f" and dt.itemsize == 8 else np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        voxels = voxels * (slope or 1.0) + inter
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    return RawVolume(voxels, spacing, path.name.split(".")[0])


# --------------------------------------------------------------------------- datasets


def save_dataset(root, cases, meta: Optional[dict] = None) -> Path:
    """Write one volume file, one file per mask and a JSON manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in cases:
        write_volume(root / f"{v.id}.vol", v.volume)
        masks = []
        for m in v.masks:
            fname = f"{v.id}.{m.name or 'view%d' % m.view_index}.vol"
            write_volume(root / fname, m.voxels)
            masks.append({"name": m.name, "view_index": m.view_index, "file": fname})
        entries.append({"id": v.id, "label": int(v.label), "volume": f"{v.id}.vol", "masks": masks})
    manifest = dict(meta or {})
    manifest["cases"] = entries
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"cannot read dataset manifest {path}: {exc}") from exc


def load_dataset(root) -> list:
    root = Path(root)
    manifest = load_manifest(root)
    cases = []
    for e in manifest["cases"]:
        vol = read_volume(root / e["volume"]).voxels
        masks = [
            ViewMask(read_volume(root / m["file"]).voxels, m["view_index"], m["name"]) for m in e["masks"]
        ]
        cases.append(LabeledVolume(vol, e["label"], masks, e["id"]))
    return cases


def write_phantom_set(root, n, class_balance, grid, seed, params: Optional[PhantomParams] = None) -> Path:
    params = params or PhantomParams()
    cases = generate_phantoms(n, class_balance, grid, seed, params)
    meta = {
        "kind": "phantom",
        "n": n,
        "class_balance": class_balance,
        "grid": list(grid),
        "seed": seed,
        "params": vars(params),
        "n_positive": sum(v.label for v in cases),
    }
    return save_dataset(root, cases, meta)
