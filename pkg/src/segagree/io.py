"""Volume file ingestion and output.

Two formats are supported:

* NIfTI-1 single file (``.nii`` / ``.nii.gz``), read through nibabel.
* A raw little-endian payload with a JSON sidecar
  ``{"dims", "spacing_mm", "origin_mm", "dtype"}``; the sidecar is
  ``<stem>.json`` and the payload ``<stem>.raw`` unless ``"payload"`` names it.

NIfTI axes ``(i, j, k)`` map to array axes ``(width, height, depth)``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .volgrid import BinaryMask, VoxelGrid, binarize

PathLike = Union[str, Path]

NIFTI_READ_DTYPES = {np.dtype(t) for t in ("uint8", "int16", "int32", "float32", "float64")}
NIFTI_WRITE_DTYPES = {np.dtype("uint8"), np.dtype("float32")}
RAW_DTYPES = {"uint8", "int16", "int32", "float32", "float64"}


class VolumeIOError(Exception):
    """Base class for volume ingestion failures."""


class UnreadableFileError(VolumeIOError):
    pass


class UnsupportedFormatError(VolumeIOError):
    pass


class UnsupportedDatatypeError(VolumeIOError):
    pass


class PayloadSizeError(VolumeIOError):
    """Header dimensions disagree with the stored payload length."""


def _format_of(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".json") or name.endswith(".raw"):
        return "raw"
    raise UnsupportedFormatError(f"{path}: unsupported volume format (expected .nii, .nii.gz, .json or .raw)")


def load_volume(path: PathLike, kind: str = "image", threshold: float = 0.5) -> VoxelGrid:
    """Read a volume; ``kind="mask"`` binarizes it at ``threshold``."""
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    path = Path(path)
    fmt = _format_of(path)
    if not path.exists():
        raise UnreadableFileError(f"{path}: no such file")
    grid = _load_nifti(path) if fmt == "nifti" else _load_raw(path)
    if kind == "mask":
        return binarize(grid, threshold)
    return grid


def load_mask(path: PathLike, threshold: float = 0.5) -> BinaryMask:
    return load_volume(path, kind="mask", threshold=threshold)  # type: ignore[return-value]


def save_volume(grid: VoxelGrid, path: PathLike) -> Path:
    """Write ``grid``; masks are stored as uint8, images as float32 (NIfTI)."""
    path = Path(path)
    fmt = _format_of(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "nifti":
        _save_nifti(grid, path)
    else:
        _save_raw(grid, path)
    return path


def _load_nifti(path: Path) -> VoxelGrid:
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for junk input
        raise UnreadableFileError(f"{path}: not a readable NIfTI file ({exc})") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise UnsupportedFormatError(f"{path}: {type(img).__name__} is not NIfTI")
    header = img.header
    dtype = header.get_data_dtype()
    if np.dtype(dtype) not in NIFTI_READ_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype {dtype}")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise UnsupportedFormatError(f"{path}: expected a 3D volume, got shape {img.shape}")
    try:
        # get_fdata applies scl_slope / scl_inter
        data = np.asarray(img.get_fdata(dtype=np.float64)).reshape(shape)
    except (OSError, ValueError, EOFError) as exc:
        raise PayloadSizeError(f"{path}: payload does not match header dims {shape} ({exc})") from exc
    zooms = header.get_zooms()[:3]
    affine = img.affine
    lr_sign = -1 if affine[0, 0] < 0 else 1
    origin = tuple(_f32_decimal(affine[i, 3]) for i in (2, 1, 0))
    spacing = tuple(_f32_decimal(zooms[i]) for i in (2, 1, 0))
    arr = np.ascontiguousarray(data.transpose(2, 1, 0))
    if np.issubdtype(dtype, np.integer) and _identity_scaling(header):
        arr = arr.astype(dtype)
    return VoxelGrid(arr, spacing, origin, lr_sign)


def _f32_decimal(value) -> float:
    """Header floats are float32; read 0.45 back as 0.45, not 0.44999998807907104."""
    return float(str(np.float32(value)))


def _identity_scaling(header) -> bool:
    slope, inter = header.get_slope_inter()
    return (slope is None or slope == 1) and (inter is None or inter == 0)


def _save_nifti(grid: VoxelGrid, path: Path) -> None:
    import nibabel as nib

    dtype = np.uint8 if isinstance(grid, BinaryMask) else np.float32
    arr = np.asarray(grid.data, dtype=dtype).transpose(2, 1, 0)
    sz, sy, sx = grid.spacing_mm
    oz, oy, ox = grid.origin_mm
    affine = np.diag([sx * grid.lr_sign, sy, sz, 1.0])
    affine[:3, 3] = (ox, oy, oz)
    img = nib.Nifti1Image(arr, affine)
    img.header.set_data_dtype(dtype)
    img.header.set_xyzt_units("mm")
    img.header.set_zooms((sx, sy, sz))
    nib.save(img, str(path))


def _sidecar_paths(path: Path):
    if path.name.lower().endswith(".json"):
        return path, path.with_suffix(".raw")
    return path.with_suffix(".json"), path


def _load_raw(path: Path) -> VoxelGrid:
    sidecar, payload = _sidecar_paths(path)
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(f"{sidecar}: cannot read sidecar ({exc})") from exc
    try:
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        origin = tuple(float(o) for o in meta.get("origin_mm", (0.0, 0.0, 0.0)))
        dtype_name = str(meta["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UnreadableFileError(f"{sidecar}: malformed sidecar ({exc})") from exc
    if dtype_name not in RAW_DTYPES:
        raise UnsupportedDatatypeError(f"{sidecar}: unsupported dtype {dtype_name!r}")
    if "payload" in meta:
        payload = sidecar.parent / meta["payload"]
    try:
        raw = payload.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"{payload}: cannot read payload ({exc})") from exc
    dtype = np.dtype(dtype_name).newbyteorder("<")
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise PayloadSizeError(f"{payload}: {len(raw)} bytes, header dims {dims} need {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return VoxelGrid(data, spacing, origin, int(meta.get("lr_sign", 1)))


def _save_raw(grid: VoxelGrid, path: Path) -> None:
    sidecar, payload = _sidecar_paths(path)
    dtype_name = "uint8" if isinstance(grid, BinaryMask) else str(grid.data.dtype)
    if dtype_name not in RAW_DTYPES:
        dtype_name = "float64"
    meta = {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing_mm),
        "origin_mm": list(grid.origin_mm),
        "dtype": dtype_name,
        "lr_sign": grid.lr_sign,
        "payload": payload.name,
    }
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    payload.write_bytes(np.ascontiguousarray(grid.data, dtype=np.dtype(dtype_name).newbyteorder("<")).tobytes())
