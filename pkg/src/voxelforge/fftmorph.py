"""Binary morphology in any dimension, computed with FFT convolution.

Dilation is ``(f * k)(x) > 0``; erosion is the complement of the dilation
of the complement. Both are linear (zero-padded) convolutions, never
circular. ``dilate_spatial``/``erode_spatial`` are brute-force shift-and-OR
versions used as ground truth.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import fft as sp_fft

from .volgrid import DegenerateGeometryWarning, Mask, Volume

__all__ = [
    "StructuringElement",
    "ball_element",
    "voxel_ball",
    "dilate",
    "erode",
    "open",
    "close",
    "dilate_spatial",
    "erode_spatial",
    "open_spatial",
    "close_spatial",
]

# True counts are integers, so 0.5 is the widest margin against round-off.
_BINARIZE_AT = 0.5


@dataclass(frozen=True, eq=False)
class StructuringElement:
    """Binary kernel with odd size along every axis; the anchor is the centre."""

    data: np.ndarray
    diameter_mm: float | None = None
    spacing_mm: tuple[float, ...] | None = None
    degenerate: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=bool)
        if any(n % 2 == 0 for n in data.shape):
            raise ValueError(f"element dims must be odd, got {data.shape}")
        if not data.any():
            raise ValueError("element must have at least one nonzero voxel")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def anchor(self) -> tuple[int, ...]:
        return tuple(n // 2 for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.sum())

    def reflect(self) -> "StructuringElement":
        return StructuringElement(self.data[(slice(None, None, -1),) * self.data.ndim])

    def offsets(self) -> np.ndarray:
        """Nonzero positions relative to the anchor, shape ``(size, ndim)``."""
        return np.argwhere(self.data) - np.array(self.anchor)


def ball_element(diameter_mm: float, spacing_mm: Sequence[float]) -> StructuringElement:
    """Ball of the given diameter realized on an anisotropic voxel grid.

    Offset ``(i, j, k)`` is set iff ``sum((i*u_i)**2) <= (diameter/2)**2``.
    A ball smaller than one voxel yields the single-voxel element and a
    :class:`DegenerateGeometryWarning`.
    """
    if not diameter_mm > 0:
        raise ValueError("diameter must be positive")
    spacing = tuple(float(u) for u in spacing_mm)
    if not all(u > 0 for u in spacing):
        raise ValueError("spacing must be positive")
    radius = diameter_mm / 2.0
    half = [int(math.floor(radius / u)) for u in spacing]
    grids = np.meshgrid(
        *[np.arange(-h, h + 1) * u for h, u in zip(half, spacing)], indexing="ij"
    )
    dist2 = sum(g**2 for g in grids)
    data = dist2 <= radius**2 * (1 + 1e-12)
    degenerate = data.sum() == 1
    if any(radius < u for u in spacing):
        warnings.warn(
            f"ball of diameter {diameter_mm} mm is thinner than a voxel at spacing {spacing}",
            DegenerateGeometryWarning,
            stacklevel=2,
        )
    # trim axes that carry no voxels beyond the centre plane
    data = _trim(data)
    return StructuringElement(data, float(diameter_mm), spacing, bool(degenerate))


def voxel_ball(diameter: int, ndim: int = 3) -> StructuringElement:
    """Ball of ``diameter`` voxels on a unit grid (diameter 1 is one voxel)."""
    return ball_element(float(diameter), (1.0,) * ndim)


def _trim(data: np.ndarray) -> np.ndarray:
    for axis in range(data.ndim):
        while data.shape[axis] > 1:
            first = np.take(data, 0, axis=axis)
            last = np.take(data, data.shape[axis] - 1, axis=axis)
            if first.any() or last.any():
                break
            data = np.take(data, np.arange(1, data.shape[axis] - 1), axis=axis)
    return data


def _unwrap(mask):
    if isinstance(mask, Volume):
        return mask.data.astype(bool), mask.spacing_mm
    return np.asarray(mask).astype(bool), None


def _wrap(out: np.ndarray, spacing):
    return Mask(out, spacing) if spacing is not None else out


def _as_element(element) -> StructuringElement:
    if isinstance(element, StructuringElement):
        return element
    return StructuringElement(np.asarray(element))


def _check(f: np.ndarray, k: StructuringElement):
    if f.ndim != k.data.ndim:
        raise ValueError(f"mask is {f.ndim}D but element is {k.data.ndim}D")
    if any(kn > fn for kn, fn in zip(k.dims, f.shape)):
        raise ValueError(f"element {k.dims} does not fit in mask {f.shape}")


def _fft_dilate(f: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Linear convolution of bool arrays ``f`` and ``k``, cropped to ``f``'s
    grid with the element centred, then binarized."""
    full = [fn + kn - 1 for fn, kn in zip(f.shape, k.shape)]
    fshape = [sp_fft.next_fast_len(n, real=True) for n in full]
    axes = tuple(range(f.ndim))
    spec = sp_fft.rfftn(f.astype(np.float64), fshape, axes=axes)
    spec *= sp_fft.rfftn(k.astype(np.float64), fshape, axes=axes)
    conv = sp_fft.irfftn(spec, fshape, axes=axes)
    crop = tuple(slice(kn // 2, kn // 2 + fn) for fn, kn in zip(f.shape, k.shape))
    return conv[crop] > _BINARIZE_AT


def dilate(mask, element):
    """Binary dilation via FFT; zero outside the mask."""
    f, spacing = _unwrap(mask)
    k = _as_element(element)
    _check(f, k)
    if not f.any():
        return _wrap(np.zeros_like(f), spacing)
    return _wrap(_fft_dilate(f, k.data), spacing)


def erode(mask, element):
    """Binary erosion as the complement of the dilated complement.

    Outside the mask the complement is 1, so structures touching the border
    erode inward.
    """
    f, spacing = _unwrap(mask)
    k = _as_element(element)
    _check(f, k)
    pad = [(n // 2, n // 2) for n in k.dims]
    comp = np.pad(~f, pad, constant_values=True)
    grown = _fft_dilate(comp, k.data)
    inner = tuple(slice(p, p + n) for (p, _), n in zip(pad, f.shape))
    return _wrap(~grown[inner], spacing)


def open(mask, element):  # noqa: A001 - morphology vocabulary
    """Erosion followed by dilation."""
    return dilate(erode(mask, element), element)


def _padded(op, mask, element):
    f, spacing = _unwrap(mask)
    k = _as_element(element)
    _check(f, k)
    pad = [(n // 2, n // 2) for n in k.dims]
    out = op(np.pad(f, pad), k)
    inner = tuple(slice(p, p + n) for (p, _), n in zip(pad, f.shape))
    return _wrap(out[inner], spacing)


def close(mask, element):
    """Dilation followed by erosion.

    Both run on a grid enlarged by the element radius, so the dilation is
    not truncated at the border before the erosion; the result is
    extensive even for structures touching the edge.
    """
    return _padded(lambda f, k: erode(dilate(f, k), k), mask, element)


# --------------------------------------------------------------------------
# Brute-force reference


def _shift_or(f: np.ndarray, offsets: np.ndarray, fill: bool) -> np.ndarray:
    """OR over ``f`` translated by each offset (out[x] |= f[x - o])."""
    out = np.zeros_like(f)
    n = f.shape
    for o in offsets:
        src = []
        dst = []
        empty = False
        for ax, d in enumerate(o):
            d = int(d)
            if abs(d) >= n[ax]:
                empty = True
                break
            if d >= 0:
                dst.append(slice(d, n[ax]))
                src.append(slice(0, n[ax] - d))
            else:
                dst.append(slice(0, n[ax] + d))
                src.append(slice(-d, n[ax]))
        if fill and (empty or any(int(d) != 0 for d in o)):
            # positions whose source lies outside the grid see ``fill``
            edge = np.ones_like(f)
            if not empty:
                edge[tuple(dst)] = False
            out |= edge
        if not empty:
            out[tuple(dst)] |= f[tuple(src)]
    return out


def dilate_spatial(mask, element):
    """Reference dilation: union of the mask translated by each element offset."""
    f, spacing = _unwrap(mask)
    k = _as_element(element)
    return _wrap(_shift_or(f, k.offsets(), fill=False), spacing)


def erode_spatial(mask, element):
    """Reference erosion: ``x`` survives iff ``x - o`` is inside the mask for
    every element offset ``o``; outside the grid counts as background."""
    f, spacing = _unwrap(mask)
    k = _as_element(element)
    return _wrap(~_shift_or(~f, k.offsets(), fill=True), spacing)


def open_spatial(mask, element):
    return dilate_spatial(erode_spatial(mask, element), element)


def close_spatial(mask, element):
    return _padded(lambda f, k: erode_spatial(dilate_spatial(f, k), k), mask, element)
