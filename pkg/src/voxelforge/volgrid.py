"""Volume and mask containers, file I/O, thresholding, connected components,
anti-aliased resampling and inference tiling.

Arrays are indexed ``data[x, y, z]``. On disk the voxels are stored
x-fastest, which is Fortran order for an ``(nx, ny, nz)`` array.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "Mask",
    "LabelMap",
    "TileCover",
    "Components",
    "VolumeFormatError",
    "DegenerateGeometryWarning",
    "LABEL_CODES",
    "read_volume",
    "write_volume",
    "threshold",
    "connected_components",
    "largest_components",
    "smoothing_sigmas",
    "gaussian_kernel",
    "gaussian_smooth",
    "resampled_dims",
    "resample",
    "make_tile_cover",
    "average_tiles",
]

SUPPORTED_DTYPES = {
    "float32": np.dtype("<f4"),
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
}

LABEL_CODES = {
    "other": 0,
    "lung": 1,
    "liver": 2,
    "bone": 3,
    "kidney": 4,
    "bladder": 5,
}
N_CLASSES = len(LABEL_CODES)


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


class DegenerateGeometryWarning(UserWarning):
    """Emitted when a requested geometry had to be clamped."""


def _coerce_dtype(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.bool_:
        return data.astype(np.uint8)
    name = data.dtype.name
    if name in SUPPORTED_DTYPES:
        return data
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    if np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < 0 or data.max() > 255):
            if data.min() < -32768 or data.max() > 32767:
                raise VolumeFormatError("integer values exceed the int16 range")
            return data.astype(np.int16)
        return data.astype(np.uint8)
    raise VolumeFormatError(f"unsupported dtype {data.dtype}")


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with per-axis spacing in millimetres.

    ``data`` is made read-only on construction, so a Volume can be shared
    freely between threads.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {data.shape}")
        data = _coerce_dtype(data)
        if data.flags.writeable or data.base is not None:
            data = data.copy()
        data.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive finite values, got {self.spacing_mm}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        self._validate()

    def _validate(self):
        pass

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    def with_data(self, data, cls=None):
        """Return a new object of type ``cls`` sharing this geometry."""
        cls = cls or type(self)
        return cls(np.asarray(data), self.spacing_mm)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


class Mask(Volume):
    """Binary volume with values in {0, 1}, stored as uint8."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.dtype != np.bool_ and data.size and not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            object.__setattr__(self, "data", data.astype(np.uint8))
        super().__post_init__()

    def _validate(self):
        if self.data.size and self.data.max() > 1:
            raise ValueError("mask values must be 0 or 1")

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(bool)


class LabelMap(Volume):
    """Per-voxel class codes 0..5 (see ``LABEL_CODES``)."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size and (data.min() < 0 or data.max() >= N_CLASSES):
            raise ValueError(f"label codes must lie in 0..{N_CLASSES - 1}")
        object.__setattr__(self, "data", data.astype(np.uint8))
        super().__post_init__()


# --------------------------------------------------------------------------
# File I/O


def _vgrid_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".vgrid.json", ".vgrid.raw", ".vgrid"):
        if name.endswith(suffix):
            stem = name[: -len(suffix)]
            break
    else:
        stem = name
    return path.with_name(stem + ".vgrid.json"), path.with_name(stem + ".vgrid.raw")


def _is_nifti(path) -> bool:
    return str(path).endswith(".nii")


def _read_vgrid(path) -> Volume:
    header_path, raw_path = _vgrid_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: malformed header: {exc}") from None
    try:
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        dtype_name = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: malformed header: {exc!r}") from None
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise VolumeFormatError(f"{header_path}: dims/spacing must have 3 positive entries")
    if dtype_name not in SUPPORTED_DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {dtype_name!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"{header_path}: unsupported order {header['order']!r}")
    if header.get("endianness", "little") != "little":
        raise VolumeFormatError(f"{header_path}: unsupported endianness {header['endianness']!r}")
    dtype = SUPPORTED_DTYPES[dtype_name]
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    try:
        return Volume(data, tuple(spacing))
    except ValueError as exc:
        raise VolumeFormatError(f"{header_path}: {exc}") from None


def _write_vgrid(volume: Volume, path) -> None:
    header_path, raw_path = _vgrid_paths(path)
    dtype = SUPPORTED_DTYPES[volume.dtype]
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "dtype": volume.dtype,
        "order": "x-fastest",
        "endianness": "little",
    }
    raw_path.write_bytes(volume.data.astype(dtype).tobytes(order="F"))
    header_path.write_text(json.dumps(header, indent=2) + "\n")


_NIFTI_CODES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_NIFTI_CODE_OF = {"uint8": 2, "int16": 4, "float32": 16}


def _read_nifti(path) -> Volume:
    blob = Path(path).read_bytes()
    if len(blob) < 348:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", blob, 0)[0] == 348:
            raise VolumeFormatError(f"{path}: big-endian NIfTI is not supported")
        raise VolumeFormatError(f"{path}: bad sizeof_hdr {sizeof_hdr}")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from("<8h", blob, 40)
    datatype, _bitpix = struct.unpack_from("<2h", blob, 70)
    pixdim = struct.unpack_from("<8f", blob, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", blob, 108)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: bad dim[0]={ndim}")
    shape = [dim[i] if i <= ndim else 1 for i in range(1, 4)]
    if any(dim[i] != 1 for i in range(4, ndim + 1)):
        raise VolumeFormatError(f"{path}: only 3D volumes are supported, dim={dim}")
    if min(shape) < 1:
        raise VolumeFormatError(f"{path}: non-positive dims {shape}")
    if datatype not in _NIFTI_CODES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
    dtype = _NIFTI_CODES[datatype]
    offset = int(vox_offset) if vox_offset >= 348 else 352
    nbytes = shape[0] * shape[1] * shape[2] * dtype.itemsize
    if len(blob) - offset != nbytes:
        raise VolumeFormatError(
            f"{path}: payload has {len(blob) - offset} bytes, header implies {nbytes}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    if scl_slope != 0 and (scl_slope, scl_inter) != (1.0, 0.0):
        data = data.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)
    spacing = tuple(abs(float(pixdim[i])) if pixdim[i] != 0 else 1.0 for i in range(1, 4))
    try:
        return Volume(data, spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None


def _write_nifti(volume: Volume, path) -> None:
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *volume.dims, 1, 1, 1, 1)
    code = _NIFTI_CODE_OF[volume.dtype]
    struct.pack_into("<2h", header, 70, code, volume.data.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing_mm, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", header, 108, 352.0, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    payload = volume.data.astype(SUPPORTED_DTYPES[volume.dtype]).tobytes(order="F")
    Path(path).write_bytes(bytes(header) + payload)


def read_volume(path, dtype: str | None = None) -> Volume:
    """Read a VGRID volume (``*.vgrid.json``) or a single-file NIfTI-1 ``.nii``.

    If ``dtype`` is given the data is cast to it without rescaling.
    """
    volume = _read_nifti(path) if _is_nifti(path) else _read_vgrid(path)
    if dtype is not None:
        if dtype not in SUPPORTED_DTYPES:
            raise VolumeFormatError(f"unsupported dtype {dtype!r}")
        volume = Volume(volume.data.astype(SUPPORTED_DTYPES[dtype]), volume.spacing_mm)
    return volume


def write_volume(volume: Volume, path, format: str | None = None) -> None:
    """Write ``volume`` as VGRID (default) or NIfTI-1 (``format="nifti"`` or a
    ``.nii`` path)."""
    if format is None:
        format = "nifti" if _is_nifti(path) else "vgrid"
    if format == "vgrid":
        _write_vgrid(volume, path)
    elif format == "nifti":
        _write_nifti(volume, path)
    else:
        raise ValueError(f"unknown format {format!r}")


# --------------------------------------------------------------------------
# Thresholding and connected components


def _as_array(obj) -> np.ndarray:
    return obj.data if isinstance(obj, Volume) else np.asarray(obj)


def threshold(
    volume,
    lo: float = -math.inf,
    hi: float = math.inf,
    *,
    lo_inclusive: bool = True,
    hi_inclusive: bool = True,
):
    """Binary mask of voxels inside ``[lo, hi]``.

    Bounds are inclusive by default; either end may be infinite. A Volume
    input yields a Mask with the same geometry, an array input a bool array.
    """
    if lo > hi:
        raise ValueError(f"lo={lo} exceeds hi={hi}")
    data = _as_array(volume)
    above = data >= lo if lo_inclusive else data > lo
    below = data <= hi if hi_inclusive else data < hi
    out = above & below
    if isinstance(volume, Volume):
        return Mask(out, volume.spacing_mm)
    return out


class Components(NamedTuple):
    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return len(self.sizes)


def _structure(ndim: int, connectivity: int) -> np.ndarray:
    allowed = {2: {4: 1, 8: 2}, 3: {6: 1, 26: 3}}
    try:
        rank = allowed[ndim][connectivity]
    except KeyError:
        raise ValueError(f"connectivity {connectivity} is invalid for {ndim}D data") from None
    return ndimage.generate_binary_structure(ndim, rank)


def connected_components(mask, connectivity: int = 6) -> Components:
    """Label the foreground of ``mask``.

    Ids run 1..K by decreasing size; equal sizes are ordered by the smallest
    x-fastest linear index in the component. 0 is background.
    """
    data = _as_array(mask).astype(bool)
    raw, k = ndimage.label(data, structure=_structure(data.ndim, connectivity))
    if k == 0:
        return Components(np.zeros(data.shape, np.int32), np.zeros(0, np.int64))
    sizes = np.bincount(raw.ravel(), minlength=k + 1)[1:]
    linear = np.arange(data.size, dtype=np.int64).reshape(data.shape, order="F")
    first = np.asarray(ndimage.minimum(linear, raw, index=np.arange(1, k + 1)), np.int64)
    order = np.lexsort((first, -sizes))
    relabel = np.zeros(k + 1, np.int32)
    relabel[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    return Components(relabel[raw], sizes[order].astype(np.int64))


def largest_components(mask, count: int = 1, connectivity: int = 6):
    """Union of the ``count`` largest components (all of them if fewer)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    comps = connected_components(mask, connectivity)
    out = (comps.labels > 0) & (comps.labels <= count)
    if isinstance(mask, Volume):
        return Mask(out, mask.spacing_mm)
    return out


# --------------------------------------------------------------------------
# Resampling


def smoothing_sigmas(spacing_mm: Sequence[float], target_res_mm: float) -> tuple[float, ...]:
    """Per-axis anti-aliasing widths ``max(r/u - 1, 0) / 3`` in voxels."""
    return tuple(max(target_res_mm / u - 1.0, 0.0) / 3.0 for u in spacing_mm)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D kernel proportional to ``exp(-x**2 / sigma**2)``,
    truncated at ``4 * sigma`` (odd length)."""
    if sigma <= 0:
        return np.ones(1)
    radius = max(int(math.ceil(4.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / sigma**2)
    return kernel / kernel.sum()


def gaussian_smooth(data: np.ndarray, sigmas: Sequence[float]) -> np.ndarray:
    """Separable smoothing with edge replication; axes with sigma 0 are skipped."""
    out = np.asarray(data, dtype=np.float64)
    for axis, sigma in enumerate(sigmas):
        if sigma > 0:
            out = ndimage.correlate1d(out, gaussian_kernel(sigma), axis=axis, mode="nearest")
    return out


def resampled_dims(dims: Sequence[int], spacing_mm: Sequence[float], target_res_mm: float):
    """``round(dim * u / r)`` per axis (half rounds up), clamped to at least 1."""
    out = []
    for n, u in zip(dims, spacing_mm):
        m = int(math.floor(n * u / target_res_mm + 0.5))
        if m < 1:
            warnings.warn(
                f"resampled dimension {n}*{u}/{target_res_mm} rounds to 0; clamped to 1",
                DegenerateGeometryWarning,
                stacklevel=3,
            )
            m = 1
        out.append(m)
    return tuple(out)


def _interp_axis(data: np.ndarray, coords: np.ndarray, axis: int, order: int) -> np.ndarray:
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1.0)
    if order == 0:
        idx = np.floor(coords + 0.5).astype(np.intp)
        return np.take(data, np.minimum(idx, n - 1), axis=axis)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    t = coords - lo
    shape = [1] * data.ndim
    shape[axis] = len(coords)
    t = t.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a + (b - a) * t


def resample(volume: Volume, target_res_mm: float = 3.0, interpolation: str = "trilinear"):
    """Resample to isotropic spacing ``target_res_mm``.

    Images (``trilinear``) are Gaussian-smoothed first wherever the grid
    coarsens; labels (``nearest``) are never smoothed. Output voxel ``i`` is
    centred at input coordinate ``(i + 0.5) * r / u - 0.5`` so physical
    extent is preserved.
    """
    if not target_res_mm > 0:
        raise ValueError("target resolution must be positive")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    new_dims = resampled_dims(volume.dims, volume.spacing_mm, target_res_mm)
    if interpolation == "trilinear":
        data = gaussian_smooth(volume.data, smoothing_sigmas(volume.spacing_mm, target_res_mm))
        order = 1
    else:
        data = volume.data
        order = 0
    for axis, (m, u) in enumerate(zip(new_dims, volume.spacing_mm)):
        coords = (np.arange(m, dtype=np.float64) + 0.5) * (target_res_mm / u) - 0.5
        data = _interp_axis(data, coords, axis, order)
    spacing = (float(target_res_mm),) * 3
    if interpolation == "trilinear":
        return Volume(data.astype(np.float32), spacing)
    return type(volume)(data.astype(volume.data.dtype), spacing)


# --------------------------------------------------------------------------
# Tiling


@dataclass(frozen=True)
class TileCover:
    """Tile placement over a volume; overlapping predictions are averaged."""

    dims: tuple[int, ...]
    tile_dims: tuple[int, ...]
    axis_offsets: tuple[tuple[int, ...], ...]
    offsets: list[tuple[int, ...]] = field(repr=False)

    def slices(self):
        for off in self.offsets:
            yield tuple(slice(o, o + t) for o, t in zip(off, self.tile_dims))


def _axis_offsets(n: int, tile: int) -> tuple[int, ...]:
    offs = list(range(0, n - tile + 1, tile))
    if offs[-1] + tile < n:
        offs.append(n - tile)
    return tuple(offs)


def make_tile_cover(dims: Sequence[int], tile_dims: Sequence[int]) -> TileCover:
    """Cover ``dims`` with tiles at stride ``tile``; the last tile on each axis
    is pulled back to end at the boundary."""
    dims = tuple(int(n) for n in dims)
    tile_dims = tuple(int(t) for t in tile_dims)
    if len(dims) != len(tile_dims):
        raise ValueError("dims and tile_dims differ in length")
    if min(dims + tile_dims) < 1:
        raise ValueError("dims and tile_dims must be positive")
    clamped = tuple(min(t, n) for n, t in zip(dims, tile_dims))
    if clamped != tile_dims:
        warnings.warn(
            f"tile {tile_dims} exceeds volume {dims}; clamped to {clamped}",
            DegenerateGeometryWarning,
            stacklevel=2,
        )
    axis_offsets = tuple(_axis_offsets(n, t) for n, t in zip(dims, clamped))
    offsets = list(itertools.product(*axis_offsets))
    return TileCover(dims, clamped, axis_offsets, offsets)


def average_tiles(cover: TileCover, tile_outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Assemble per-tile outputs into a full volume, averaging overlaps.

    Tile outputs may carry trailing channel axes (e.g. class probabilities).
    """
    if len(tile_outputs) != len(cover.offsets):
        raise ValueError(f"expected {len(cover.offsets)} tile outputs, got {len(tile_outputs)}")
    extra = np.asarray(tile_outputs[0]).shape[len(cover.dims):]
    total = np.zeros(cover.dims + extra, np.float64)
    counts = np.zeros(cover.dims, np.float64)
    for sl, out in zip(cover.slices(), tile_outputs):
        total[sl] += out
        counts[sl] += 1
    return total / counts.reshape(counts.shape + (1,) * len(extra))
